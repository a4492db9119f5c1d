//! Category taxonomy and category-level aggregation.

use crate::ingest::StratumKey;
use crate::transition::{MetricBundle, TransitionCounts, TransitionError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Shipped default taxonomy, nine categories.
pub const DEFAULT_TAXONOMY_TOML: &str = include_str!("default_taxonomy.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("no category for benchmark {benchmark:?}, subtask {subtask:?}")]
    Unassigned { benchmark: String, subtask: String },
    #[error("rule {index} names undeclared category {category:?}")]
    UndeclaredCategory { index: usize, category: String },
    #[error("category {0:?} is declared twice")]
    DuplicateCategory(String),
    #[error("rule {0} needs `subtask` or `subtasks`, not both or neither")]
    BadRule(usize),
    #[error("invalid taxonomy config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Strata weighted by their sample counts.
    #[default]
    Samples,
    /// Every stratum weighs the same.
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionWhen {
    /// Either snapshot comes from a base (non-instruction-tuned) model.
    BaseModel,
    Always,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub category: String,
    pub when: ExclusionWhen,
}

/// Which kinds of models a comparison involves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonContext {
    pub pre_is_base: bool,
    pub post_is_base: bool,
}

impl ComparisonContext {
    pub fn involves_base_model(&self) -> bool {
        self.pre_is_base || self.post_is_base
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub category: String,
    pub benchmark: String,
    pub subtasks: Vec<String>,
}

impl Rule {
    fn matches(&self, benchmark: &str, subtask: &str) -> bool {
        pattern_matches(&self.benchmark, benchmark) && self.subtasks.iter().any(|p| pattern_matches(p, subtask))
    }
}

/// Lowercase, letters and digits only.
pub fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn pattern_matches(pattern: &str, name: &str) -> bool {
    pattern.trim() == "*" || normalize_name(pattern) == normalize_name(name)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFields {
    category: String,
    benchmark: String,
    subtask: Option<String>,
    subtasks: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFields {
    categories: Vec<String>,
    #[serde(default)]
    default_category: Option<String>,
    #[serde(default)]
    weighting: Weighting,
    #[serde(default)]
    exclusions: Vec<Exclusion>,
    #[serde(default)]
    rules: Vec<RuleFields>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ConfigFields")]
pub struct TaxonomyConfig {
    categories: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    default_category: Option<String>,
    weighting: Weighting,
    exclusions: Vec<Exclusion>,
    rules: Vec<Rule>,
}

impl TaxonomyConfig {
    pub fn new(
        categories: Vec<String>,
        rules: Vec<Rule>,
        exclusions: Vec<Exclusion>,
        default_category: Option<String>,
        weighting: Weighting,
    ) -> Result<Self, TaxonomyError> {
        let mut declared = BTreeSet::new();
        for c in &categories {
            if !declared.insert(c.as_str()) {
                return Err(TaxonomyError::DuplicateCategory(c.clone()));
            }
        }
        let undeclared = |index: usize, category: &str| TaxonomyError::UndeclaredCategory {
            index,
            category: category.to_string(),
        };
        for (i, rule) in rules.iter().enumerate() {
            if !declared.contains(rule.category.as_str()) {
                return Err(undeclared(i, &rule.category));
            }
            if rule.subtasks.is_empty() {
                return Err(TaxonomyError::BadRule(i));
            }
        }
        if let Some(d) = &default_category {
            if !declared.contains(d.as_str()) {
                return Err(undeclared(rules.len(), d));
            }
        }
        Ok(TaxonomyConfig {
            categories,
            default_category,
            weighting,
            exclusions,
            rules,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        let fields: ConfigFields = toml::from_str(text)?;
        Self::try_from(fields)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("taxonomy config serializes")
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn exclusions(&self) -> &[Exclusion] {
        &self.exclusions
    }

    pub fn default_category(&self) -> Option<&str> {
        self.default_category.as_deref()
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    /// Route unmatched pairs to `category`, declaring it if needed.
    pub fn with_default_category(mut self, category: impl Into<String>) -> Self {
        let category = category.into();
        if !self.categories.contains(&category) {
            self.categories.push(category.clone());
        }
        self.default_category = Some(category);
        self
    }

    pub fn assign_category(&self, benchmark: &str, subtask: &str) -> Result<&str, TaxonomyError> {
        self.rules
            .iter()
            .find(|r| r.matches(benchmark, subtask))
            .map(|r| r.category.as_str())
            .or(self.default_category.as_deref())
            .ok_or_else(|| TaxonomyError::Unassigned {
                benchmark: benchmark.to_string(),
                subtask: subtask.to_string(),
            })
    }

    fn is_excluded(&self, category: &str, context: &ComparisonContext) -> bool {
        self.exclusions.iter().any(|e| {
            e.category == category
                && match e.when {
                    ExclusionWhen::Always => true,
                    ExclusionWhen::BaseModel => context.involves_base_model(),
                }
        })
    }

    /// Drop strata whose category is excluded in `context`. Unassigned strata
    /// pass through and fail later, at aggregation.
    pub fn apply_exclusions<T>(
        &self,
        strata: BTreeMap<StratumKey, T>,
        context: &ComparisonContext,
    ) -> BTreeMap<StratumKey, T> {
        strata
            .into_iter()
            .filter(|(key, _)| match self.assign_category(&key.benchmark, &key.subtask) {
                Ok(category) => !self.is_excluded(category, context),
                Err(_) => true,
            })
            .collect()
    }
}

impl TryFrom<ConfigFields> for TaxonomyConfig {
    type Error = TaxonomyError;

    fn try_from(fields: ConfigFields) -> Result<Self, Self::Error> {
        let rules = fields
            .rules
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let subtasks = match (r.subtask, r.subtasks) {
                    (Some(one), None) => vec![one],
                    (None, Some(many)) => many,
                    _ => return Err(TaxonomyError::BadRule(i)),
                };
                Ok(Rule {
                    category: r.category,
                    benchmark: r.benchmark,
                    subtasks,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            fields.categories,
            rules,
            fields.exclusions,
            fields.default_category,
            fields.weighting,
        )
    }
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TAXONOMY_TOML).expect("embedded taxonomy is valid")
    }
}

/// Everything aggregation needs to know about one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub counts: TransitionCounts,
    pub k: u32,
}

impl StratumStats {
    pub fn bundle(&self) -> Result<MetricBundle, TransitionError> {
        MetricBundle::from_counts(&self.counts, self.k)
    }
}

/// Combined metrics of a group of strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub bundle: MetricBundle,
    pub acc_pre: f64,
    pub acc_post: f64,
    pub n_samples: u64,
    pub n_strata: usize,
    /// Weighted mean of per-stratum clipped F_true. Differs from
    /// `bundle.f_true` only when some stratum clips.
    pub f_true_stratum_clipped: f64,
    pub bt_true_stratum_clipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub categories: Vec<CategoryMetrics>,
    pub total: CategoryMetrics,
}

impl Aggregate {
    pub fn category(&self, name: &str) -> Option<&CategoryMetrics> {
        self.categories.iter().find(|c| c.category == name)
    }
}

pub const TOTAL_ROW: &str = "Total";

/// Combine strata into one row.
///
/// Raw rates, chance baselines, ceilings and accuracies are weighted means
/// of the per-stratum values; the adjusted metrics are clipped after
/// combining, as is conventional forgetting.
pub fn combine(name: &str, members: &[StratumStats], weighting: Weighting) -> Result<CategoryMetrics, TransitionError> {
    let weight = |s: &StratumStats| match weighting {
        Weighting::Samples => s.counts.total as f64,
        Weighting::Equal => 1.0,
    };
    let total_weight: f64 = members.iter().map(weight).sum();
    if members.is_empty() || total_weight == 0.0 {
        return Err(TransitionError::EmptyStratum);
    }

    let mut sums = [0.0f64; 9];
    let (mut acc_pre, mut acc_post) = (0.0, 0.0);
    let (mut f_clip, mut bt_clip) = (0.0, 0.0);
    for s in members {
        let b = s.bundle()?;
        let w = weight(s) / total_weight;
        for (sum, v) in sums.iter_mut().zip(b.to_array()) {
            *sum += w * v;
        }
        let n = s.counts.total as f64;
        acc_pre += w * s.counts.correct_pre() as f64 / n;
        acc_post += w * s.counts.correct_post() as f64 / n;
        f_clip += w * b.f_true;
        bt_clip += w * b.bt_true;
    }
    let mut bundle = MetricBundle::from_array(sums);
    bundle.f_true = (bundle.f_raw - bundle.f_chance).max(0.0);
    bundle.bt_true = (bundle.bt_raw - bundle.bt_chance).max(0.0);
    bundle.f_conventional = (acc_pre - acc_post).max(0.0);

    Ok(CategoryMetrics {
        category: name.to_string(),
        bundle,
        acc_pre,
        acc_post,
        n_samples: members.iter().map(|s| s.counts.total).sum(),
        n_strata: members.len(),
        f_true_stratum_clipped: f_clip,
        bt_true_stratum_clipped: bt_clip,
    })
}

/// Per-category rows in declaration order (empty categories omitted) and a
/// total row over every stratum.
pub fn aggregate(
    strata: &BTreeMap<StratumKey, StratumStats>,
    config: &TaxonomyConfig,
) -> Result<Aggregate, TaxonomyError> {
    let mut by_category: BTreeMap<&str, Vec<StratumStats>> = BTreeMap::new();
    for (key, stats) in strata {
        let category = config.assign_category(&key.benchmark, &key.subtask)?;
        by_category.entry(category).or_default().push(*stats);
    }
    let categories = config
        .categories()
        .iter()
        .filter_map(|name| by_category.get(name.as_str()).map(|members| (name, members)))
        .map(|(name, members)| combine(name, members, config.weighting()))
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<StratumStats> = strata.values().copied().collect();
    let total = combine(TOTAL_ROW, &all, config.weighting())?;
    Ok(Aggregate { categories, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: &str, s: &str) -> StratumKey {
        StratumKey {
            benchmark: b.into(),
            subtask: s.into(),
            pre_run: "0".into(),
            post_run: "0".into(),
        }
    }

    fn stats(ret: u64, forg: u64, bt: u64, non: u64, k: u32) -> StratumStats {
        StratumStats {
            counts: TransitionCounts::from_quadrants(ret, forg, bt, non),
            k,
        }
    }

    #[test]
    fn default_assignments() {
        let cfg = TaxonomyConfig::default();
        assert_eq!(cfg.assign_category("BBH", "sports understanding").unwrap(), "Culture");
        assert_eq!(cfg.assign_category("MMLU", "abstract algebra").unwrap(), "Math");
        assert_eq!(cfg.assign_category("mmlu", "abstract_algebra").unwrap(), "Math");
        assert_eq!(cfg.assign_category("PIQA", "default").unwrap(), "Commonsense");
        assert!(matches!(
            cfg.assign_category("unknown", "unknown"),
            Err(TaxonomyError::Unassigned { .. })
        ));
        let with_default = cfg.with_default_category("Other");
        assert_eq!(with_default.assign_category("unknown", "unknown").unwrap(), "Other");
    }

    #[test]
    fn first_match_wins() {
        let rules = vec![
            Rule {
                category: "X".into(),
                benchmark: "B".into(),
                subtasks: vec!["s".into()],
            },
            Rule {
                category: "Y".into(),
                benchmark: "*".into(),
                subtasks: vec!["*".into()],
            },
        ];
        let cfg = TaxonomyConfig::new(vec!["X".into(), "Y".into()], rules, vec![], None, Weighting::Samples).unwrap();
        assert_eq!(cfg.assign_category("B", "s").unwrap(), "X");
        assert_eq!(cfg.assign_category("B", "t").unwrap(), "Y");
    }

    #[test]
    fn validation() {
        let bad = "categories = [\"A\"]\n[[rules]]\ncategory = \"B\"\nbenchmark = \"x\"\nsubtask = \"*\"\n";
        assert!(matches!(
            TaxonomyConfig::from_toml(bad),
            Err(TaxonomyError::UndeclaredCategory { .. })
        ));
        let both = "categories = [\"A\"]\n[[rules]]\ncategory = \"A\"\nbenchmark = \"x\"\nsubtask = \"*\"\nsubtasks = [\"y\"]\n";
        assert!(matches!(
            TaxonomyConfig::from_toml(both),
            Err(TaxonomyError::BadRule(0))
        ));
        assert!(matches!(
            TaxonomyConfig::from_toml("categories = [\"A\", \"A\"]"),
            Err(TaxonomyError::DuplicateCategory(_))
        ));
    }

    #[test]
    fn serialized_config_loads_back() {
        let cfg = TaxonomyConfig::default();
        assert_eq!(TaxonomyConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn exclusions_follow_context() {
        let cfg = TaxonomyConfig::default();
        let strata: BTreeMap<_, _> = [
            (key("TruthfulQA", "mc1"), 1),
            (key("MMLU", "anatomy"), 2),
            (key("?", "?"), 3),
        ]
        .into_iter()
        .collect();
        let base = ComparisonContext {
            pre_is_base: true,
            post_is_base: false,
        };
        let kept = cfg.apply_exclusions(strata.clone(), &base);
        assert_eq!(kept.len(), 2);
        assert!(!kept.contains_key(&key("TruthfulQA", "mc1")));
        assert_eq!(
            cfg.apply_exclusions(strata.clone(), &ComparisonContext::default()),
            strata
        );
        assert!(cfg
            .apply_exclusions(BTreeMap::<StratumKey, u8>::new(), &base)
            .is_empty());
    }

    #[test]
    fn single_stratum_is_identity() {
        let s = stats(50, 10, 5, 35, 4);
        let row = combine("c", &[s], Weighting::Samples).unwrap();
        let b = s.bundle().unwrap();
        for (x, y) in row.bundle.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_strata_average() {
        // F = 0.1 and 0.3 with identical accuracies, hence identical chance terms.
        let a = stats(50, 10, 10, 30, 4);
        let b = stats(30, 30, 30, 10, 4);
        let row = combine("c", &[a, b], Weighting::Samples).unwrap();
        assert!((row.bundle.f_raw - 0.2).abs() < 1e-15);
        assert_eq!(a.bundle().unwrap().f_chance, b.bundle().unwrap().f_chance);
    }

    #[test]
    fn clip_after_combining() {
        // One stratum far above chance, one with fewer flips than chance predicts.
        let a = stats(20, 30, 0, 50, 4);
        let b = stats(40, 0, 0, 60, 4);
        let row = combine("c", &[a, b], Weighting::Samples).unwrap();
        let (ba, bb) = (a.bundle().unwrap(), b.bundle().unwrap());
        let expected = ((ba.f_raw + bb.f_raw) / 2.0 - (ba.f_chance + bb.f_chance) / 2.0).max(0.0);
        assert!((row.bundle.f_true - expected).abs() < 1e-15);
        assert!((row.f_true_stratum_clipped - (ba.f_true + bb.f_true) / 2.0).abs() < 1e-15);
        assert!(row.f_true_stratum_clipped > row.bundle.f_true);
    }

    #[test]
    fn weighting_modes_differ() {
        let a = stats(10, 10, 0, 0, 2);
        let b = stats(90, 0, 0, 10, 2);
        let by_samples = combine("c", &[a, b], Weighting::Samples).unwrap();
        let equal = combine("c", &[a, b], Weighting::Equal).unwrap();
        assert!((by_samples.bundle.f_raw - 10.0 / 120.0).abs() < 1e-15);
        assert!((equal.bundle.f_raw - 0.25).abs() < 1e-15);
    }

    #[test]
    fn aggregate_orders_categories_and_totals() {
        let cfg = TaxonomyConfig::default();
        let strata: BTreeMap<_, _> = [
            (key("MMLU", "anatomy"), stats(5, 1, 1, 3, 4)),
            (key("PIQA", "default"), stats(6, 2, 1, 1, 2)),
        ]
        .into_iter()
        .collect();
        let agg = aggregate(&strata, &cfg).unwrap();
        let names: Vec<_> = agg.categories.iter().map(|c| c.category.as_str()).collect();
        assert_eq!(names, vec!["Commonsense", "Science & Tech"]);
        assert_eq!(agg.total.n_samples, 20);
        assert_eq!(agg.total.n_strata, 2);
    }

    #[test]
    fn aggregate_propagates_errors() {
        let cfg = TaxonomyConfig::default();
        let unknown: BTreeMap<_, _> = [(key("?", "?"), stats(1, 0, 0, 0, 4))].into_iter().collect();
        assert!(matches!(
            aggregate(&unknown, &cfg),
            Err(TaxonomyError::Unassigned { .. })
        ));
        let empty: BTreeMap<_, _> = [(key("PIQA", "x"), stats(0, 0, 0, 0, 2))].into_iter().collect();
        assert!(matches!(
            aggregate(&empty, &cfg),
            Err(TaxonomyError::Transition(TransitionError::EmptyStratum))
        ));
    }
}
