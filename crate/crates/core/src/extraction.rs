//! Multiple-choice answer extraction from free-form generations.
//!
//! Models are prompted to finish with a last line of exactly `Answer: X`.
//! Three tiers decide how forgiving the parser is:
//!
//! * `Strict` accepts only that last line, verbatim.
//! * `Lenient` also accepts the last `answer: X` anywhere in the text,
//!   ignoring case and common decoration (`**`, `(X)`, `\boxed{X}`).
//! * `Fallback` also looks in the trailing window for a 1-based option index
//!   introduced by a keyword (`answer = 3`, `option 2`) or a unique verbatim
//!   occurrence of one option's body. Conflicting candidates fail.
//!
//! Each tier first tries the tiers below it, so success sets are nested.

use crate::transition::Correctness;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::LazyLock;
use thiserror::Error;

pub const DEFAULT_WINDOW_CHARS: usize = 200;

static STRICT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Answer: ([A-Za-z0-9]+)$").unwrap());

const DECORATION: &str = r"(?:[\s*_(\[{$]|\\boxed\{|\\text\{)*";

static LENIENT_CI: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?i)\banswer\s*:{DECORATION}([A-Za-z0-9]+)")).unwrap());
static LENIENT_CS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"\bAnswer\s*:{DECORATION}([A-Za-z0-9]+)")).unwrap());

const INDEX_ALIAS: &str = r#"\b(?:answer|ans|option|choice)\b\s*(?:is|==|=|:)?[\s"'(\[]*(\d+)\b"#;

static INDEX_CI: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!("(?i){INDEX_ALIAS}")).unwrap());
static INDEX_CS: LazyLock<Regex> = LazyLock::new(|| Regex::new(INDEX_ALIAS).unwrap());

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractionError {
    #[error("strict extraction must be case sensitive without aliases or text matching")]
    StrictTooLoose,
    #[error("choice list is empty")]
    NoOptions,
    #[error("gold label {0:?} is not one of the option labels")]
    GoldNotAnOption(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Strict,
    Lenient,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFields")]
pub struct ExtractionPolicy {
    tier: Tier,
    case_sensitive: bool,
    allow_numeric_aliases: bool,
    allow_choice_text_match: bool,
    window_chars: usize,
}

impl ExtractionPolicy {
    pub fn new(
        tier: Tier,
        case_sensitive: bool,
        allow_numeric_aliases: bool,
        allow_choice_text_match: bool,
        window_chars: usize,
    ) -> Result<Self, ExtractionError> {
        if tier == Tier::Strict && (!case_sensitive || allow_numeric_aliases || allow_choice_text_match) {
            return Err(ExtractionError::StrictTooLoose);
        }
        Ok(ExtractionPolicy {
            tier,
            case_sensitive,
            allow_numeric_aliases,
            allow_choice_text_match,
            window_chars,
        })
    }

    pub fn strict() -> Self {
        ExtractionPolicy {
            tier: Tier::Strict,
            case_sensitive: true,
            allow_numeric_aliases: false,
            allow_choice_text_match: false,
            window_chars: DEFAULT_WINDOW_CHARS,
        }
    }

    pub fn lenient() -> Self {
        ExtractionPolicy {
            tier: Tier::Lenient,
            case_sensitive: false,
            ..Self::strict()
        }
    }

    pub fn fallback() -> Self {
        ExtractionPolicy {
            tier: Tier::Fallback,
            case_sensitive: false,
            allow_numeric_aliases: true,
            allow_choice_text_match: true,
            window_chars: DEFAULT_WINDOW_CHARS,
        }
    }

    /// Default policy for a tier.
    pub fn for_tier(tier: Tier) -> Self {
        match tier {
            Tier::Strict => Self::strict(),
            Tier::Lenient => Self::lenient(),
            Tier::Fallback => Self::fallback(),
        }
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn case_sensitive(&self) -> bool {
        self.case_sensitive
    }

    pub fn allow_numeric_aliases(&self) -> bool {
        self.allow_numeric_aliases
    }

    pub fn allow_choice_text_match(&self) -> bool {
        self.allow_choice_text_match
    }

    pub fn window_chars(&self) -> usize {
        self.window_chars
    }
}

/// Config-file form of a policy; unset fields take the tier's defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFields {
    tier: Tier,
    case_sensitive: Option<bool>,
    allow_numeric_aliases: Option<bool>,
    allow_choice_text_match: Option<bool>,
    window_chars: Option<usize>,
}

impl TryFrom<PolicyFields> for ExtractionPolicy {
    type Error = ExtractionError;

    fn try_from(f: PolicyFields) -> Result<Self, Self::Error> {
        let base = ExtractionPolicy::for_tier(f.tier);
        ExtractionPolicy::new(
            f.tier,
            f.case_sensitive.unwrap_or(base.case_sensitive),
            f.allow_numeric_aliases.unwrap_or(base.allow_numeric_aliases),
            f.allow_choice_text_match.unwrap_or(base.allow_choice_text_match),
            f.window_chars.unwrap_or(base.window_chars),
        )
    }
}

impl Default for ExtractionPolicy {
    fn default() -> Self {
        Self::strict()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub label: String,
    pub text: String,
}

impl ChoiceOption {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        ChoiceOption {
            label: label.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_key: String,
    pub text: String,
    pub options: Vec<ChoiceOption>,
    pub gold: String,
}

impl GenerationRecord {
    pub fn new(
        sample_key: impl Into<String>,
        text: impl Into<String>,
        options: Vec<ChoiceOption>,
        gold: impl Into<String>,
    ) -> Result<Self, ExtractionError> {
        let record = GenerationRecord {
            sample_key: sample_key.into(),
            text: text.into(),
            options,
            gold: gold.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.options.is_empty() {
            return Err(ExtractionError::NoOptions);
        }
        if !self.options.iter().any(|o| o.label == self.gold) {
            return Err(ExtractionError::GoldNotAnOption(self.gold.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub predicted: Option<String>,
    pub method_used: Option<Tier>,
}

impl ExtractionOutcome {
    fn hit(label: &str, tier: Tier) -> Self {
        ExtractionOutcome {
            predicted: Some(label.to_string()),
            method_used: Some(tier),
        }
    }

    fn miss() -> Self {
        ExtractionOutcome {
            predicted: None,
            method_used: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.predicted.is_none()
    }
}

fn find_label<'a>(options: &'a [ChoiceOption], token: &str, case_sensitive: bool) -> Option<&'a str> {
    options
        .iter()
        .find(|o| {
            if case_sensitive {
                o.label == token
            } else {
                o.label.eq_ignore_ascii_case(token)
            }
        })
        .map(|o| o.label.as_str())
}

fn strict_match<'a>(text: &str, options: &'a [ChoiceOption]) -> Option<&'a str> {
    let last_line = text.trim_end().rsplit('\n').next()?.trim_end();
    let caps = STRICT_LINE.captures(last_line)?;
    find_label(options, &caps[1], true)
}

fn lenient_match<'a>(text: &str, options: &'a [ChoiceOption], case_sensitive: bool) -> Option<&'a str> {
    let pattern = if case_sensitive { &*LENIENT_CS } else { &*LENIENT_CI };
    pattern
        .captures_iter(text)
        .filter_map(|caps| find_label(options, caps.get(1)?.as_str(), case_sensitive))
        .last()
}

fn trailing_window(text: &str, chars: usize) -> &str {
    let text = text.trim_end();
    match text.char_indices().rev().nth(chars.saturating_sub(1)) {
        Some((start, _)) if chars > 0 => &text[start..],
        _ if chars == 0 => "",
        _ => text,
    }
}

fn index_alias<'a>(window: &str, options: &'a [ChoiceOption], case_sensitive: bool) -> Option<&'a str> {
    let pattern = if case_sensitive { &*INDEX_CS } else { &*INDEX_CI };
    let caps = pattern.captures_iter(window).last()?;
    let index: usize = caps[1].parse().ok()?;
    options.get(index.checked_sub(1)?).map(|o| o.label.as_str())
}

fn occurs_as_token(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(start, m)| {
        let before = haystack[..start].chars().next_back();
        let after = haystack[start + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

fn choice_text_matches<'a>(window: &str, options: &'a [ChoiceOption], case_sensitive: bool) -> Vec<&'a str> {
    let lowered;
    let haystack = if case_sensitive {
        window
    } else {
        lowered = window.to_lowercase();
        &lowered
    };
    options
        .iter()
        .filter(|o| {
            let body = o.text.trim();
            if case_sensitive {
                occurs_as_token(haystack, body)
            } else {
                occurs_as_token(haystack, &body.to_lowercase())
            }
        })
        .map(|o| o.label.as_str())
        .collect()
}

fn fallback_match<'a>(text: &str, options: &'a [ChoiceOption], policy: &ExtractionPolicy) -> Option<&'a str> {
    let window = trailing_window(text, policy.window_chars);
    let mut candidates = BTreeSet::new();
    if policy.allow_numeric_aliases {
        candidates.extend(index_alias(window, options, policy.case_sensitive));
    }
    if policy.allow_choice_text_match {
        candidates.extend(choice_text_matches(window, options, policy.case_sensitive));
    }
    if candidates.len() == 1 {
        candidates.pop_first()
    } else {
        None
    }
}

/// Predicted label for `text`, trying tiers from strict up to `policy.tier`.
pub fn extract_from_text(text: &str, options: &[ChoiceOption], policy: &ExtractionPolicy) -> ExtractionOutcome {
    if let Some(label) = strict_match(text, options) {
        return ExtractionOutcome::hit(label, Tier::Strict);
    }
    if policy.tier >= Tier::Lenient {
        if let Some(label) = lenient_match(text, options, policy.case_sensitive) {
            return ExtractionOutcome::hit(label, Tier::Lenient);
        }
    }
    if policy.tier >= Tier::Fallback {
        if let Some(label) = fallback_match(text, options, policy) {
            return ExtractionOutcome::hit(label, Tier::Fallback);
        }
    }
    ExtractionOutcome::miss()
}

pub fn extract_choice(record: &GenerationRecord, policy: &ExtractionPolicy) -> ExtractionOutcome {
    extract_from_text(&record.text, &record.options, policy)
}

/// Extraction failures score as incorrect.
pub fn score(outcome: &ExtractionOutcome, gold: &str) -> Correctness {
    Correctness::from(outcome.predicted.as_deref() == Some(gold))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierCounts {
    pub strict: u64,
    pub lenient: u64,
    pub fallback: u64,
}

impl TierCounts {
    pub fn add(&mut self, tier: Tier) {
        match tier {
            Tier::Strict => self.strict += 1,
            Tier::Lenient => self.lenient += 1,
            Tier::Fallback => self.fallback += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.strict + self.lenient + self.fallback
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub total: u64,
    pub failures: u64,
    pub failure_rate: f64,
    pub per_tier_counts: TierCounts,
}

impl ExtractionReport {
    pub fn record(&mut self, outcome: &ExtractionOutcome) {
        self.total += 1;
        match outcome.method_used {
            Some(tier) => self.per_tier_counts.add(tier),
            None => self.failures += 1,
        }
        self.failure_rate = self.failures as f64 / self.total as f64;
    }

    pub fn merge(&mut self, other: &ExtractionReport) {
        self.total += other.total;
        self.failures += other.failures;
        self.per_tier_counts.strict += other.per_tier_counts.strict;
        self.per_tier_counts.lenient += other.per_tier_counts.lenient;
        self.per_tier_counts.fallback += other.per_tier_counts.fallback;
        self.failure_rate = if self.total == 0 {
            0.0
        } else {
            self.failures as f64 / self.total as f64
        };
    }
}

pub fn extraction_report<'a, I>(records: I, policy: &ExtractionPolicy) -> ExtractionReport
where
    I: IntoIterator<Item = &'a GenerationRecord>,
{
    let mut report = ExtractionReport::default();
    for record in records {
        report.record(&extract_choice(record, policy));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abcd() -> Vec<ChoiceOption> {
        ["Paris", "London", "Berlin", "Madrid"]
            .iter()
            .zip(["A", "B", "C", "D"])
            .map(|(t, l)| ChoiceOption::new(l, *t))
            .collect()
    }

    fn predicted(text: &str, policy: &ExtractionPolicy) -> Option<String> {
        extract_from_text(text, &abcd(), policy).predicted
    }

    #[test]
    fn strict_reads_final_line() {
        let out = extract_from_text("Some reasoning.\nAnswer: B", &abcd(), &ExtractionPolicy::strict());
        assert_eq!(out.predicted.as_deref(), Some("B"));
        assert_eq!(out.method_used, Some(Tier::Strict));
    }

    #[test]
    fn case_rule_depends_on_tier() {
        let text = "Some reasoning.\nanswer: b";
        assert_eq!(predicted(text, &ExtractionPolicy::strict()), None);
        assert_eq!(predicted(text, &ExtractionPolicy::lenient()).as_deref(), Some("B"));
    }

    #[test]
    fn case_sensitive_lenient_keeps_label_case() {
        let policy = ExtractionPolicy::new(Tier::Lenient, true, false, false, 200).unwrap();
        assert_eq!(predicted("x\nAnswer: b is my pick", &policy), None);
        assert_eq!(predicted("x\nAnswer: B is my pick", &policy).as_deref(), Some("B"));
    }

    #[test]
    fn numeric_alias_in_code_block() {
        let text = "```python\nanswer = 3\nprint(answer)\n```";
        assert_eq!(predicted(text, &ExtractionPolicy::lenient()), None);
        assert_eq!(predicted(text, &ExtractionPolicy::fallback()).as_deref(), Some("C"));
        let no_alias = ExtractionPolicy::new(Tier::Fallback, false, false, true, 200).unwrap();
        assert_eq!(predicted(text, &no_alias), None);
    }

    #[test]
    fn conflicting_fallback_candidates_fail() {
        assert_eq!(
            predicted("Option 1 seems right, London.", &ExtractionPolicy::fallback()),
            None
        );
        assert_eq!(predicted("Paris or Berlin?", &ExtractionPolicy::fallback()), None);
    }

    #[test]
    fn choice_text_needs_token_boundaries() {
        let opts = vec![ChoiceOption::new("A", "4"), ChoiceOption::new("B", "14")];
        let out = extract_from_text("the total is 14", &opts, &ExtractionPolicy::fallback());
        assert_eq!(out.predicted.as_deref(), Some("B"));
    }

    #[test]
    fn window_limits_fallback() {
        let text = format!("Berlin.{}", " filler".repeat(40));
        assert_eq!(predicted(&text, &ExtractionPolicy::fallback()), None);
        let wide = ExtractionPolicy::new(Tier::Fallback, false, true, true, 1000).unwrap();
        assert_eq!(predicted(&text, &wide).as_deref(), Some("C"));
    }

    #[test]
    fn trailing_window_counts_chars() {
        assert_eq!(trailing_window("héllo", 3), "llo");
        assert_eq!(trailing_window("héllo", 4), "éllo");
        assert_eq!(trailing_window("hi", 10), "hi");
        assert_eq!(trailing_window("hi", 0), "");
    }

    #[test]
    fn strict_policy_must_be_strict() {
        assert_eq!(
            ExtractionPolicy::new(Tier::Strict, false, false, false, 200),
            Err(ExtractionError::StrictTooLoose)
        );
        assert!(ExtractionPolicy::new(Tier::Strict, true, false, false, 200).is_ok());
    }

    #[test]
    fn policy_from_config() {
        let p: ExtractionPolicy = toml::from_str("tier = \"fallback\"\nwindow_chars = 50").unwrap();
        assert_eq!(p.window_chars(), 50);
        assert!(p.allow_numeric_aliases());
        assert!(toml::from_str::<ExtractionPolicy>("tier = \"strict\"\ncase_sensitive = false").is_err());
    }

    #[test]
    fn record_validation() {
        assert_eq!(
            GenerationRecord::new("k", "t", vec![], "A"),
            Err(ExtractionError::NoOptions)
        );
        assert_eq!(
            GenerationRecord::new("k", "t", abcd(), "Z"),
            Err(ExtractionError::GoldNotAnOption("Z".into()))
        );
    }

    #[test]
    fn scoring() {
        let hit = |l: &str| ExtractionOutcome::hit(l, Tier::Strict);
        assert_eq!(score(&hit("B"), "B"), Correctness::Correct);
        assert_eq!(score(&ExtractionOutcome::miss(), "B"), Correctness::Incorrect);
        assert_eq!(score(&hit("A"), "B"), Correctness::Incorrect);
    }

    #[test]
    fn report_counts() {
        let recs: Vec<GenerationRecord> = ["x\nAnswer: A", "x\nAnswer: B", "nothing", "x\nanswer: c"]
            .iter()
            .enumerate()
            .map(|(i, t)| GenerationRecord::new(format!("r{i}"), *t, abcd(), "A").unwrap())
            .collect();
        let strict = extraction_report(&recs, &ExtractionPolicy::strict());
        assert_eq!(strict.failure_rate, 0.5);
        assert_eq!(strict.per_tier_counts.total(), 2);
        let lenient = extraction_report(&recs, &ExtractionPolicy::lenient());
        assert_eq!(lenient.failures, 1);
        assert_eq!(
            lenient.per_tier_counts,
            TierCounts {
                strict: 2,
                lenient: 1,
                fallback: 0
            }
        );

        let all_strict = extraction_report(&recs[..2], &ExtractionPolicy::strict());
        assert_eq!(all_strict.failure_rate, 0.0);
    }
}
