use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flipscope::extraction::{ExtractionPolicy, Tier};
use flipscope::ingest::{self, KConflictPolicy, RunPairing};
use flipscope::knowsim::{self, GuessModel, PopulationSpec, SyntheticLabels};
use flipscope::merge::{self, MergeMethod, MergeSpec};
use flipscope::pipeline::{self, Comparison, RunManifest};
use flipscope::taxonomy::{TaxonomyConfig, Weighting};
use flipscope::uncertainty::{UncertaintyMode, UncertaintySpec};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "flipscope",
    version,
    about = "Sample-wise forgetting and backward transfer between evaluation snapshots"
)]
struct Cli {
    /// Seed for bootstrap resampling and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run manifest (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute metrics and write tables, results.json and plot series.
    Compute(ComputeArgs),
    /// Write synthetic pre/post logs from the know/guess model.
    Simulate(SimulateArgs),
    /// Interpolate two parameter files.
    Merge(MergeArgs),
    /// Taxonomy utilities.
    Taxonomy {
        #[command(subcommand)]
        command: TaxonomyCommand,
    },
    /// Audit answer extraction on a snapshot with raw generations.
    Extract(ExtractArgs),
}

#[derive(Args)]
struct ComputeArgs {
    /// Pre snapshot file(s); used instead of --config for a single comparison.
    #[arg(long, num_args = 1.., conflicts_with = "config")]
    pre: Vec<PathBuf>,
    /// Post snapshot file(s).
    #[arg(long, num_args = 1.., requires = "pre")]
    post: Vec<PathBuf>,
    /// Column name for the single comparison.
    #[arg(long, default_value = "post")]
    name: String,
    #[arg(long)]
    pre_is_base: bool,
    #[arg(long)]
    post_is_base: bool,
    /// Taxonomy config (TOML); overrides the manifest's.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Category for benchmarks no rule matches.
    #[arg(long)]
    default_category: Option<String>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    #[arg(long, value_enum)]
    uncertainty: Option<ModeArg>,
    #[arg(long)]
    resamples: Option<usize>,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Output directory.
    #[arg(long, default_value = "flipscope-out")]
    out: PathBuf,
}

#[derive(Args)]
struct PolicyArgs {
    /// Extraction tier for raw generations.
    #[arg(long, value_enum)]
    tier: Option<TierArg>,
    #[arg(long)]
    case_sensitive: Option<bool>,
    #[arg(long)]
    numeric_aliases: Option<bool>,
    #[arg(long)]
    choice_text: Option<bool>,
    #[arg(long)]
    window_chars: Option<usize>,
}

impl PolicyArgs {
    fn apply(&self, base: &ExtractionPolicy) -> Result<ExtractionPolicy> {
        let tier = self.tier.map(Tier::from).unwrap_or(base.tier());
        let preset = if self.tier.is_some() {
            ExtractionPolicy::for_tier(tier)
        } else {
            base.clone()
        };
        Ok(ExtractionPolicy::new(
            tier,
            self.case_sensitive.unwrap_or(preset.case_sensitive()),
            self.numeric_aliases.unwrap_or(preset.allow_numeric_aliases()),
            self.choice_text.unwrap_or(preset.allow_choice_text_match()),
            self.window_chars.unwrap_or(preset.window_chars()),
        )?)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    k: u32,
    #[arg(long, default_value_t = 0.6)]
    p_know_pre: f64,
    #[arg(long, default_value_t = 0.9)]
    p_retain: f64,
    #[arg(long, default_value_t = 0.0)]
    p_learn: f64,
    /// Independent runs (distinct guesses, shared knowledge).
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// Unknown-both-times items repeat their earlier guess.
    #[arg(long)]
    correlated: bool,
    #[arg(long, default_value = "synthetic")]
    benchmark: String,
    #[arg(long, default_value = "default")]
    subtask: String,
    /// Output directory for pre.jsonl, post.jsonl and expected.json.
    #[arg(long, default_value = "flipscope-sim")]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, value_enum, default_value = "lerp")]
    method: MethodArg,
    /// Weight of the first input.
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    a: PathBuf,
    b: PathBuf,
    out: PathBuf,
}

#[derive(Subcommand)]
enum TaxonomyCommand {
    /// Print or write the default taxonomy config.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the category a (benchmark, subtask) pair falls into.
    Assign {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        benchmark: String,
        subtask: String,
    },
}

#[derive(Args)]
struct ExtractArgs {
    /// Snapshot with raw generation records.
    input: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Also write the scored snapshot here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TierArg {
    Strict,
    Lenient,
    Fallback,
}

impl From<TierArg> for Tier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::Strict => Tier::Strict,
            TierArg::Lenient => Tier::Lenient,
            TierArg::Fallback => Tier::Fallback,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Samples,
    Equal,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    MultiRun,
    Bootstrap,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lerp,
    Slerp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Text,
}

fn manifest_for(cli: &Cli, args: &ComputeArgs) -> Result<RunManifest> {
    let mut manifest = match &cli.config {
        Some(path) => RunManifest::load(path)?,
        None => {
            if args.pre.is_empty() || args.post.is_empty() {
                bail!("compute needs --config or both --pre and --post");
            }
            RunManifest {
                taxonomy: None,
                default_category: None,
                weighting: None,
                run_pairing: RunPairing::default(),
                on_k_conflict: KConflictPolicy::default(),
                extraction: ExtractionPolicy::default(),
                uncertainty: UncertaintySpec::default(),
                comparisons: vec![Comparison {
                    name: args.name.clone(),
                    pre: args.pre.clone(),
                    post: args.post.clone(),
                    pre_is_base: args.pre_is_base,
                    post_is_base: args.post_is_base,
                }],
            }
        }
    };
    if let Some(t) = &args.taxonomy {
        manifest.taxonomy = Some(t.clone());
    }
    if let Some(d) = &args.default_category {
        manifest.default_category = Some(d.clone());
    }
    if let Some(w) = args.weighting {
        manifest.weighting = Some(match w {
            WeightingArg::Samples => Weighting::Samples,
            WeightingArg::Equal => Weighting::Equal,
        });
    }
    let mode = match args.uncertainty {
        None => manifest.uncertainty.mode,
        Some(ModeArg::Auto) => UncertaintyMode::Auto,
        Some(ModeArg::MultiRun) => UncertaintyMode::MultiRun,
        Some(ModeArg::Bootstrap) => UncertaintyMode::Bootstrap,
    };
    manifest.uncertainty = UncertaintySpec::new(
        mode,
        args.resamples.unwrap_or(manifest.uncertainty.resamples),
        cli.seed.unwrap_or(manifest.uncertainty.seed),
    )?;
    manifest.extraction = args.policy.apply(&manifest.extraction)?;
    manifest.validate()?;
    Ok(manifest)
}

fn compute(cli: &Cli, args: &ComputeArgs) -> Result<()> {
    let manifest = manifest_for(cli, args)?;
    let results = pipeline::compute(&manifest)?;
    for c in &results.comparisons {
        let failures = c.extraction.pre.failures + c.extraction.post.failures;
        if failures > 0 {
            eprintln!(
                "{}: {failures} generation(s) had no extractable answer, scored incorrect",
                c.name
            );
        }
        if c.ceiling_violations > 0 {
            eprintln!(
                "{}: {} stratum/strata exceed the adjusted-metric ceiling",
                c.name, c.ceiling_violations
            );
        }
    }
    let written = pipeline::write_outputs(&results, &args.out)?;
    print!("{}", results.table(pipeline::TableKind::Forgetting).to_plain_text());
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn write_jsonl(path: &Path, records: &[ingest::SampleRecord]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    ingest::write_snapshot(&mut out, records).with_context(|| format!("writing {}", path.display()))?;
    out.flush()?;
    Ok(())
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let spec = PopulationSpec::new(
        args.n,
        args.k,
        args.p_know_pre,
        args.p_retain,
        args.p_learn,
        cli.seed.unwrap_or(0),
    )?;
    let model = if args.correlated {
        GuessModel::Correlated
    } else {
        GuessModel::Independent
    };
    let labels = SyntheticLabels {
        benchmark: args.benchmark.clone(),
        subtask: args.subtask.clone(),
        ..SyntheticLabels::default()
    };
    let (pre, post) = knowsim::synthetic_logs(&spec, args.runs, model, &labels);
    let expected = knowsim::expected_metrics(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&args.out.join("pre.jsonl"), &pre)?;
    write_jsonl(&args.out.join("post.jsonl"), &post)?;
    let doc = serde_json::json!({
        "spec": spec,
        "guess_model": model,
        "runs": args.runs,
        "planted_loss": spec.planted_loss(),
        "planted_gain": spec.planted_gain(),
        "expected": expected,
    });
    let path = args.out.join("expected.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} records per snapshot to {}", pre.len(), args.out.display());
    Ok(())
}

fn merge_cmd(args: &MergeArgs) -> Result<()> {
    let read = |p: &Path| -> Result<merge::ParamMap> {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        merge::read_any(&bytes).with_context(|| format!("parsing {}", p.display()))
    };
    let (a, b) = (read(&args.a)?, read(&args.b)?);
    let method = match args.method {
        MethodArg::Lerp => MergeMethod::Lerp,
        MethodArg::Slerp => MergeMethod::Slerp,
    };
    let merged = merge::merge(&a, &b, &MergeSpec::new(method, args.alpha)?)?;
    let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    match args.format {
        FormatArg::Binary => merge::write_binary(&mut out, &merged)?,
        FormatArg::Text => merge::write_text(&mut out, &merged)?,
    }
    out.flush()?;
    Ok(())
}

fn load_taxonomy(path: Option<&Path>) -> Result<TaxonomyConfig> {
    match path {
        None => Ok(TaxonomyConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TaxonomyConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn taxonomy(command: &TaxonomyCommand) -> Result<()> {
    match command {
        TaxonomyCommand::Export { out } => {
            let text = TaxonomyConfig::default().to_toml();
            match out {
                Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        TaxonomyCommand::Assign {
            taxonomy,
            benchmark,
            subtask,
        } => {
            let config = load_taxonomy(taxonomy.as_deref())?;
            println!("{}", config.assign_category(benchmark, subtask)?);
        }
    }
    Ok(())
}

fn extract(cli: &Cli, args: &ExtractArgs) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunManifest::load(p)?.extraction,
        None => ExtractionPolicy::default(),
    };
    let policy = args.policy.apply(&base)?;
    let file = fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let records = ingest::parse_snapshot(io::BufReader::new(file))
        .into_result()
        .with_context(|| format!("parsing {}", args.input.display()))?;
    let (scored, report) = ingest::apply_extraction(records, &policy);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ "policy": policy, "report": report }))?
    );
    if let Some(out) = &args.out {
        write_jsonl(out, &scored)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Compute(args) => compute(cli, args),
        Command::Simulate(args) => simulate(cli, args),
        Command::Merge(args) => merge_cmd(args),
        Command::Taxonomy { command } => taxonomy(command),
        Command::Extract(args) => extract(cli, args),
    }
}

/// The error chain, dropping links whose text the previous link already shows.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
