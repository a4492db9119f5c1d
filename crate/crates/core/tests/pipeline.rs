use flipscope::pipeline::{self, Comparison, PipelineError, RunManifest, TableKind};
use flipscope::report::percent;
use flipscope::taxonomy::{self, StratumStats, TaxonomyConfig, Weighting};
use flipscope::transition::TransitionCounts;
use flipscope::uncertainty::{UncertaintyMode, UncertaintySpec};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

/// (pre, post) correctness per item.
type Flips<'a> = &'a [(u8, u8)];

fn write_log(path: &Path, model: &str, benchmark: &str, subtask: &str, k: u32, runs: &[Flips], side: usize) {
    let mut text = String::new();
    for (run, flips) in runs.iter().enumerate() {
        for (i, pair) in flips.iter().enumerate() {
            let correct = if side == 0 { pair.0 } else { pair.1 };
            let line = json!({
                "model_id": model,
                "benchmark": benchmark,
                "subtask": subtask,
                "sample_key": format!("q{i}"),
                "k": k,
                "run_id": run,
                "correct": correct,
            });
            text.push_str(&line.to_string());
            text.push('\n');
        }
    }
    fs::write(path, text).unwrap();
}

fn write_pair(dir: &Path, stem: &str, benchmark: &str, subtask: &str, k: u32, runs: &[Flips]) -> (PathBuf, PathBuf) {
    let pre = dir.join(format!("{stem}.pre.jsonl"));
    let post = dir.join(format!("{stem}.post.jsonl"));
    write_log(&pre, "base", benchmark, subtask, k, runs, 0);
    write_log(&post, "tuned", benchmark, subtask, k, runs, 1);
    (pre, post)
}

fn manifest(pre: Vec<PathBuf>, post: Vec<PathBuf>) -> RunManifest {
    RunManifest {
        taxonomy: None,
        default_category: None,
        weighting: None,
        run_pairing: Default::default(),
        on_k_conflict: Default::default(),
        extraction: Default::default(),
        uncertainty: UncertaintySpec::default(),
        comparisons: vec![Comparison {
            name: "tuned".into(),
            pre,
            post,
            pre_is_base: false,
            post_is_base: false,
        }],
    }
}

// Run 0: 3 retained, 2 forgotten, 1 gained, 2 never known.
const RUN0: &[(u8, u8)] = &[(1, 1), (1, 1), (1, 1), (1, 0), (1, 0), (0, 1), (0, 0), (0, 0)];
// Run 1: 4 retained, 1 forgotten, 1 gained, 2 never known.
const RUN1: &[(u8, u8)] = &[(1, 1), (1, 1), (1, 1), (1, 1), (1, 0), (0, 1), (0, 0), (0, 0)];

#[test]
fn eight_sample_log_renders_hand_computed_cells() {
    // k = 4, per run (fractions):
    //   run 0: acc 5/8 -> 4/8, F 1/4, BT 1/8, F_chance 1/8 * 1/2 = 1/16,
    //          BT_chance 3/8 * 1/6 = 1/16, F_true 3/16, BT_true 1/16,
    //          F_max 1/2, BT_max 1/3
    //   run 1: acc 5/8 -> 5/8, F 1/8, BT 1/8, F_chance = BT_chance = 3/64,
    //          F_true = BT_true = 5/64, F_max = BT_max = 1/2
    // Pooled (equal sizes, plain means): F 3/16, F_chance 7/128, F_true 17/128
    //   = 13.28%; BT 1/8, BT_chance 7/128, BT_true 9/128 = 7.03%;
    //   F_max 50%, BT_max 5/12 = 41.67%.
    // Two run pairs, so the std is run-to-run: |3/16 - 5/64| / sqrt 2 = 7.73%,
    //   |1/16 - 5/64| / sqrt 2 = 1.10%.
    let dir = tempfile::tempdir().unwrap();
    let (pre, post) = write_pair(dir.path(), "math", "MMLU", "college mathematics", 4, &[RUN0, RUN1]);
    let results = pipeline::compute(&manifest(vec![pre], vec![post])).unwrap();
    let c = &results.comparisons[0];
    assert_eq!(c.uncertainty_mode, UncertaintyMode::MultiRun);
    assert_eq!(c.categories.len(), 1);
    assert_eq!(c.categories[0].metrics.category, "Math");
    assert_eq!(c.categories[0].forgetting_cell().render(), "13.3 ±7.7 (50.0)");
    assert_eq!(c.categories[0].backward_transfer_cell().render(), "7.0 ±1.1 (41.7)");
    assert_eq!(c.total.forgetting_cell().render(), "13.3 ±7.7 (50.0)");
    assert!((c.total.metrics.bundle.f_true - 17.0 / 128.0).abs() < 1e-12);
    assert!((c.total.metrics.bundle.bt_true - 9.0 / 128.0).abs() < 1e-12);
    assert_eq!(c.join.matched, 16);

    let md = results.table(TableKind::Forgetting).to_markdown();
    assert!(md.contains("| Math | 13.3 ±7.7 (50.0) |"), "{md}");
    assert!(md.contains("| Total | 13.3 ±7.7 (50.0) |"), "{md}");
    let bt = results.table(TableKind::BackwardTransfer).to_plain_text();
    assert!(
        bt.lines()
            .any(|l| l.starts_with("Math") && l.ends_with("7.0 ±1.1 (41.7)")),
        "{bt}"
    );
}

#[test]
fn single_run_uses_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, post) = write_pair(dir.path(), "math", "MMLU", "college mathematics", 4, &[RUN0]);
    let mut m = manifest(vec![pre], vec![post]);
    m.uncertainty = UncertaintySpec::new(UncertaintyMode::Auto, 200, 5).unwrap();
    let results = pipeline::compute(&m).unwrap();
    let c = &results.comparisons[0];
    assert_eq!(c.uncertainty_mode, UncertaintyMode::Bootstrap);
    assert!(c.total.std.f_raw > 0.0);
    assert_eq!(c.total.forgetting_cell().render().split(' ').next(), Some("18.8"));
}

fn counts(r: u64, f: u64, bt: u64, na: u64) -> TransitionCounts {
    TransitionCounts {
        retention: r,
        forgetting: f,
        backward_transfer: bt,
        non_acquisition: na,
        total: r + f + bt + na,
    }
}

/// Direct evaluation of the per-stratum formulas, independent of the crate.
fn reference_row(members: &[(TransitionCounts, u32)], equal: bool) -> [f64; 4] {
    let mut sums = [0.0; 4]; // f_raw, f_chance, bt_raw, bt_chance
    let total_weight: f64 = members
        .iter()
        .map(|(c, _)| if equal { 1.0 } else { c.total as f64 })
        .sum();
    for (c, k) in members {
        let n = c.total as f64;
        let k = *k as f64;
        let pre = (c.retention + c.forgetting) as f64 / n;
        let post = (c.retention + c.backward_transfer) as f64 / n;
        let w = if equal { 1.0 } else { n } / total_weight;
        let x_pre = (1.0 - pre) / (k - 1.0);
        let x_post = (1.0 - post) / (k - 1.0);
        sums[0] += w * c.forgetting as f64 / n;
        sums[1] += w * x_pre * (1.0 - post);
        sums[2] += w * c.backward_transfer as f64 / n;
        sums[3] += w * (1.0 - pre) * x_post;
    }
    [
        (sums[0] - sums[1]).max(0.0),
        sums[0],
        (sums[2] - sums[3]).max(0.0),
        sums[2],
    ]
}

#[test]
fn two_category_aggregation_matches_brute_force() {
    let strata = [
        ("BBH", "navigate", counts(40, 12, 5, 43), 2u32),
        ("ARC", "easy", counts(300, 20, 30, 50), 4),
        ("MMLU", "abstract algebra", counts(10, 15, 2, 73), 4),
        ("BBH", "boolean expressions", counts(60, 30, 10, 0), 2),
    ];
    let map = strata
        .iter()
        .enumerate()
        .map(|(i, (b, s, c, k))| {
            let key = flipscope::ingest::StratumKey {
                benchmark: b.to_string(),
                subtask: s.to_string(),
                pre_run: i.to_string(),
                post_run: "0".into(),
            };
            (key, StratumStats { counts: *c, k: *k })
        })
        .collect();
    for equal in [false, true] {
        let weighting = if equal { Weighting::Equal } else { Weighting::Samples };
        let config = TaxonomyConfig::default().with_weighting(weighting);
        let agg = taxonomy::aggregate(&map, &config).unwrap();
        let names: Vec<&str> = agg.categories.iter().map(|c| c.category.as_str()).collect();
        assert_eq!(names, ["Logic", "Math"]);

        let logic = reference_row(&[(strata[0].2, 2), (strata[1].2, 4)], equal);
        let math = reference_row(&[(strata[2].2, 4), (strata[3].2, 2)], equal);
        let total = reference_row(&strata.iter().map(|s| (s.2, s.3)).collect::<Vec<_>>(), equal);
        for (row, expected) in [
            (&agg.categories[0], logic),
            (&agg.categories[1], math),
            (&agg.total, total),
        ] {
            let b = &row.bundle;
            let got = [b.f_true, b.f_raw, b.bt_true, b.bt_raw];
            for (g, e) in got.iter().zip(expected) {
                assert!((g - e).abs() < 1e-12, "{}: {got:?} vs {expected:?}", row.category);
            }
        }
    }
}

#[test]
fn safety_is_dropped_only_against_base_models() {
    let dir = tempfile::tempdir().unwrap();
    let (mp, mq) = write_pair(dir.path(), "math", "MMLU", "college mathematics", 4, &[RUN0]);
    let (sp, sq) = write_pair(dir.path(), "safety", "TruthfulQA", "mc1", 4, &[RUN0]);
    let mut m = manifest(vec![mp, sp], vec![mq, sq]);
    m.uncertainty = UncertaintySpec::new(UncertaintyMode::Bootstrap, 100, 0).unwrap();

    let with_safety = pipeline::compute(&m).unwrap();
    let rows: Vec<&str> = with_safety.comparisons[0]
        .categories
        .iter()
        .map(|r| r.metrics.category.as_str())
        .collect();
    assert_eq!(rows, ["Math", "Safety"]);
    assert_eq!(with_safety.comparisons[0].excluded_strata, 0);

    m.comparisons[0].pre_is_base = true;
    let without = pipeline::compute(&m).unwrap();
    let rows: Vec<&str> = without.comparisons[0]
        .categories
        .iter()
        .map(|r| r.metrics.category.as_str())
        .collect();
    assert_eq!(rows, ["Math"]);
    assert_eq!(without.comparisons[0].excluded_strata, 1);
    assert_eq!(without.comparisons[0].total.metrics.n_samples, 8);
}

#[test]
fn results_are_deterministic_and_consistent_with_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (mp, mq) = write_pair(dir.path(), "math", "MMLU", "college mathematics", 4, &[RUN0]);
    let (lp, lq) = write_pair(dir.path(), "logic", "BBH", "navigate", 2, &[RUN1]);
    let mut m = manifest(vec![mp, lp], vec![mq, lq]);
    m.uncertainty = UncertaintySpec::new(UncertaintyMode::Bootstrap, 300, 17).unwrap();

    let a = pipeline::compute(&m).unwrap();
    let b = pipeline::compute(&m).unwrap();
    assert_eq!(a.to_json(), b.to_json());

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    pipeline::write_outputs(&a, &out_a).unwrap();
    pipeline::write_outputs(&b, &out_b).unwrap();
    for name in ["results.json", "forgetting.md", "forgetting.txt", "radar.csv"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name}"
        );
    }

    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out_a.join("results.json")).unwrap()).unwrap();
    let md = fs::read_to_string(out_a.join("forgetting.md")).unwrap();
    let rows = doc["comparisons"][0]["categories"]
        .as_array()
        .unwrap()
        .iter()
        .chain([&doc["comparisons"][0]["total"]]);
    for row in rows {
        let cell = format!(
            "{} ±{} ({})",
            percent(row["bundle"]["f_true"].as_f64().unwrap()),
            percent(row["std"]["f_true"].as_f64().unwrap()),
            percent(row["bundle"]["f_max"].as_f64().unwrap()),
        );
        let line = format!("| {} | {cell} |", row["category"].as_str().unwrap());
        assert!(md.contains(&line), "{line} not in\n{md}");
    }

    let radar = fs::read_to_string(out_a.join("radar.csv")).unwrap();
    assert_eq!(radar.lines().next(), Some("comparison,category,f_true,bt_true"));
    assert_eq!(radar.lines().count(), 1 + 3);

    let parsed: pipeline::RunResults = serde_json::from_value(doc).unwrap();
    assert_eq!(parsed.to_json(), a.to_json());
}

#[test]
fn manifest_parsing_and_errors() {
    let text = r#"
        default_category = "Misc"
        [uncertainty]
        mode = "bootstrap"
        seed = 9
        [extraction]
        tier = "lenient"
        [[comparisons]]
        name = "a"
        pre = ["p.jsonl"]
        post = ["q.jsonl"]
    "#;
    let m = RunManifest::from_toml(text).unwrap();
    assert_eq!(m.uncertainty.resamples, 1000);
    assert_eq!(m.uncertainty.seed, 9);
    let m = m.resolve_paths(Path::new("/data"));
    assert_eq!(m.comparisons[0].pre[0], Path::new("/data/p.jsonl"));
    assert_eq!(m.taxonomy_config().unwrap().default_category(), Some("Misc"));

    assert!(matches!(
        RunManifest::from_toml("comparisons = []"),
        Err(PipelineError::Manifest(_))
    ));
    assert!(matches!(
        RunManifest::from_toml("bogus = 1\ncomparisons = []"),
        Err(PipelineError::Manifest(_))
    ));
    let low = "[uncertainty]\nresamples = 5\n[[comparisons]]\nname = \"a\"\npre = [\"p\"]\npost = [\"q\"]";
    assert!(matches!(RunManifest::from_toml(low), Err(PipelineError::Manifest(_))));
}

#[test]
fn errors_name_the_offending_file() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, post) = write_pair(dir.path(), "math", "MMLU", "college mathematics", 4, &[RUN0]);
    fs::write(&post, "{not json}\n").unwrap();
    let err = pipeline::compute(&manifest(vec![pre.clone()], vec![post.clone()])).unwrap_err();
    assert!(err.to_string().contains("math.post.jsonl"), "{err}");

    let missing = dir.path().join("missing.jsonl");
    let err = pipeline::compute(&manifest(vec![pre.clone()], vec![missing])).unwrap_err();
    assert!(matches!(err, PipelineError::Io { .. }));

    let (up, uq) = write_pair(dir.path(), "odd", "Unknown", "x", 4, &[RUN0]);
    let err = pipeline::compute(&manifest(vec![up.clone()], vec![uq.clone()])).unwrap_err();
    assert!(matches!(err, PipelineError::Taxonomy { .. }), "{err}");
    let mut m = manifest(vec![up], vec![uq]);
    m.default_category = Some("Other".into());
    let ok = pipeline::compute(&m).unwrap();
    assert_eq!(ok.comparisons[0].categories[0].metrics.category, "Other");
    assert!(ok.table(TableKind::Forgetting).to_markdown().contains("| Other |"));
}
