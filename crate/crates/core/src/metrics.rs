//! Answer scoring, No-Answer threshold calibration and language-group
//! aggregation.
//!
//! Token normalization follows the MLQA evaluation script (lowercase,
//! punctuation deleted, English articles dropped) with NFKC applied first
//! and per-character segmentation for scripts written without spaces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// The prediction emitted when the system abstains.
pub const NO_ANSWER: &str = "";

pub const MATCH_ACCURACY: &str = "match_accuracy";
pub const END_TO_END_F1: &str = "end_to_end_f1";
pub const END_TO_END_EM: &str = "end_to_end_em";
pub const ANSWERED_FRACTION: &str = "answered_fraction";

/// Row label for the ceiling that assumes perfect query matching.
pub const PERFECT_LABEL: &str = "perfect";

/// Language prefixes segmented into single characters.
const CHAR_SEGMENTED: [&str; 4] = ["zh", "ja", "th", "km"];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{left} scores but {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("no scores to calibrate on")]
    Empty,
    #[error("score at position {0} is NaN")]
    NanScore(usize),
    #[error("target precision {0} is outside (0, 1]")]
    InvalidTarget(f64),
    #[error("answerable count must be positive")]
    ZeroAnswerable,
    #[error("language `{0}` has no resource group")]
    UngroupedLanguage(String),
    #[error("unknown language grouping `{0}` (expected mkqa or xquad)")]
    UnknownGrouping(String),
    #[error("duplicate report row `{0}`")]
    DuplicateRow(String),
}

pub fn is_no_answer(prediction: &str) -> bool {
    prediction.trim().is_empty()
}

/// True for `zh`, `ja`, `th`, `km` and their `_`/`-` subtags.
pub fn segments_characters(lang: &str) -> bool {
    CHAR_SEGMENTED.iter().any(|p| {
        lang.strip_prefix(p)
            .is_some_and(|rest| rest.is_empty() || rest.starts_with(['_', '-']))
    })
}

fn punctuation() -> &'static Regex {
    // Unicode punctuation plus the ASCII symbols Python counts as punctuation.
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{P}$+<=>^`|~]").expect("valid regex"))
}

fn english_articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"))
}

pub fn normalize_tokens(text: &str, lang: &str) -> Vec<String> {
    let lowered = text.nfkc().collect::<String>().to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    let text = if lang == "en" {
        english_articles().replace_all(&stripped, " ")
    } else {
        stripped
    };
    if segments_characters(lang) {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect()
    } else {
        text.split_whitespace().map(str::to_owned).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub em: u8,
    pub f1: f64,
}

fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pred.len() as f64;
    let recall = same as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// EM and token F1 against the best-matching gold. With no golds the
/// example is unanswerable and only [`NO_ANSWER`] scores.
pub fn answer_score(prediction: &str, golds: &[String], lang: &str) -> AnswerScore {
    if golds.is_empty() {
        let hit = is_no_answer(prediction);
        return AnswerScore {
            em: hit as u8,
            f1: if hit { 1.0 } else { 0.0 },
        };
    }
    let pred = normalize_tokens(prediction, lang);
    let mut best = AnswerScore { em: 0, f1: 0.0 };
    for gold in golds {
        let gold = normalize_tokens(gold, lang);
        if pred == gold {
            best.em = 1;
        }
        best.f1 = best.f1.max(token_f1(&pred, &gold));
    }
    best
}

/// An operating point for the No-Answer threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub answered: usize,
    pub precision: f64,
}

/// Lowest observed score `t` such that answering every item with
/// `score >= t` reaches `target_precision`. `None` when no non-empty
/// answered set is precise enough.
pub fn calibrate_threshold(
    scores: &[f64],
    correct: &[bool],
    target_precision: f64,
) -> Result<Option<Calibration>, MetricsError> {
    if scores.len() != correct.len() {
        return Err(MetricsError::LengthMismatch {
            left: scores.len(),
            right: correct.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(target_precision > 0.0 && target_precision <= 1.0) {
        return Err(MetricsError::InvalidTarget(target_precision));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(i));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut best = None;
    let (mut answered, mut hits) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        // Items tied at t are answered together.
        while i < order.len() && scores[order[i]] == t {
            answered += 1;
            hits += correct[order[i]] as usize;
            i += 1;
        }
        let precision = hits as f64 / answered as f64;
        if precision >= target_precision {
            best = Some(Calibration {
                threshold: t,
                answered,
                precision,
            });
        }
    }
    Ok(best)
}

/// Summed F1 of answered items over the number of answerable items.
pub fn recall_at_threshold(
    scores: &[f64],
    f1s: &[f64],
    threshold: f64,
    answerable_count: usize,
) -> Result<f64, MetricsError> {
    if scores.len() != f1s.len() {
        return Err(MetricsError::LengthMismatch {
            left: scores.len(),
            right: f1s.len(),
        });
    }
    if answerable_count == 0 {
        return Err(MetricsError::ZeroAnswerable);
    }
    let credit: f64 = scores
        .iter()
        .zip(f1s)
        .filter(|(s, _)| **s >= threshold)
        .map(|(_, f)| f)
        .sum();
    Ok(credit / answerable_count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceGroup {
    High,
    Medium,
    Low,
}

impl ResourceGroup {
    pub const ALL: [ResourceGroup; 3] = [Self::High, Self::Medium, Self::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::High => "high",
            Self::Medium => "medium",
            Self::Low => "low",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::High => "High",
            Self::Medium => "Medium",
            Self::Low => "Low",
        }
    }
}

impl fmt::Display for ResourceGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingDataset {
    Mkqa,
    Xquad,
    Custom,
}

/// Assignment of languages to high/medium/low resource groups by
/// Wikipedia coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageGroups {
    pub dataset: GroupingDataset,
    pub grouping: BTreeMap<String, ResourceGroup>,
}

impl LanguageGroups {
    fn preset(dataset: GroupingDataset, rows: [&[&str]; 3]) -> Self {
        let grouping = ResourceGroup::ALL
            .into_iter()
            .zip(rows)
            .flat_map(|(g, langs)| langs.iter().map(move |l| (l.to_string(), g)))
            .collect();
        Self { dataset, grouping }
    }

    pub fn mkqa() -> Self {
        Self::preset(
            GroupingDataset::Mkqa,
            [
                &["de", "es", "fr", "it", "ja", "pl", "pt", "ru", "zh_cn"],
                &[
                    "ar", "da", "fi", "he", "hu", "ko", "nl", "no", "sv", "tr", "vi",
                ],
                &["km", "ms", "th", "zh_hk", "zh_tw"],
            ],
        )
    }

    pub fn xquad() -> Self {
        Self::preset(
            GroupingDataset::Xquad,
            [
                &["es", "de", "ru", "zh"],
                &["ar", "tr", "vi"],
                &["el", "hi", "th"],
            ],
        )
    }

    pub fn custom(grouping: BTreeMap<String, ResourceGroup>) -> Self {
        Self {
            dataset: GroupingDataset::Custom,
            grouping,
        }
    }

    pub fn group_of(&self, lang: &str) -> Option<ResourceGroup> {
        self.grouping.get(lang).copied()
    }
}

impl FromStr for LanguageGroups {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mkqa" => Ok(Self::mkqa()),
            "xquad" => Ok(Self::xquad()),
            other => Err(MetricsError::UnknownGrouping(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub mean: f64,
    /// Population standard deviation across member languages.
    pub std: f64,
    pub languages: usize,
}

impl GroupStat {
    fn of(values: &mut [f64]) -> Self {
        // Sorting first makes the sums independent of language order.
        values.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let std = (dev.iter().sum::<f64>() / n).sqrt();
        Self {
            mean,
            std,
            languages: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub all: Option<GroupStat>,
    pub groups: BTreeMap<ResourceGroup, GroupStat>,
}

/// Mean and population std per resource group plus an "All" row. Groups
/// without any evaluated language are omitted.
pub fn aggregate_groups(
    per_language: &BTreeMap<String, f64>,
    groups: &LanguageGroups,
) -> Result<GroupSummary, MetricsError> {
    let mut members: BTreeMap<ResourceGroup, Vec<f64>> = BTreeMap::new();
    for (lang, value) in per_language {
        let g = groups
            .group_of(lang)
            .ok_or_else(|| MetricsError::UngroupedLanguage(lang.clone()))?;
        members.entry(g).or_default().push(*value);
    }
    let mut all: Vec<f64> = per_language.values().copied().collect();
    Ok(GroupSummary {
        all: (!all.is_empty()).then(|| GroupStat::of(&mut all)),
        groups: members
            .into_iter()
            .map(|(g, mut v)| (g, GroupStat::of(&mut v)))
            .collect(),
    })
}

/// One table row: a strategy (or the perfect-matching ceiling) with its
/// per-language metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub per_language: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ReportRow {
    pub fn metric(&self, metric: &str) -> BTreeMap<String, f64> {
        self.per_language
            .iter()
            .filter_map(|(lang, m)| m.get(metric).map(|v| (lang.clone(), *v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: LanguageGroups,
    pub rows: Vec<ReportRow>,
    pub fingerprint: Option<String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl EvalReport {
    pub fn new(groups: LanguageGroups) -> Self {
        Self {
            groups,
            rows: Vec::new(),
            fingerprint: None,
        }
    }

    pub fn push_row(&mut self, row: ReportRow) -> Result<(), MetricsError> {
        if self.rows.iter().any(|r| r.label == row.label) {
            return Err(MetricsError::DuplicateRow(row.label));
        }
        if let Some(lang) = row
            .per_language
            .keys()
            .find(|l| self.groups.group_of(l).is_none())
        {
            return Err(MetricsError::UngroupedLanguage(lang.clone()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn summary(&self, label: &str, metric: &str) -> Option<GroupSummary> {
        let row = self.row(label)?;
        aggregate_groups(&row.metric(metric), &self.groups).ok()
    }

    /// `language,group,metric,value`. Metric names are prefixed with the
    /// row label; group aggregates use language `*` and a `.mean` or
    /// `.std` suffix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,group,metric,value\n");
        for row in &self.rows {
            for (lang, metrics) in &row.per_language {
                let group = self.groups.group_of(lang).map_or("", ResourceGroup::as_str);
                for (metric, value) in metrics {
                    let name = format!("{}.{metric}", row.label);
                    let _ = writeln!(
                        out,
                        "{},{group},{},{value}",
                        csv_field(lang),
                        csv_field(&name)
                    );
                }
            }
            let metrics: BTreeSet<&String> =
                row.per_language.values().flat_map(|m| m.keys()).collect();
            for metric in metrics {
                let Ok(summary) = aggregate_groups(&row.metric(metric), &self.groups) else {
                    continue;
                };
                let named = summary
                    .all
                    .iter()
                    .map(|s| ("all", s))
                    .chain(summary.groups.iter().map(|(g, s)| (g.as_str(), s)));
                for (group, stat) in named {
                    let name = csv_field(&format!("{}.{metric}", row.label));
                    let _ = writeln!(out, "*,{group},{name}.mean,{}", stat.mean);
                    let _ = writeln!(out, "*,{group},{name}.std,{}", stat.std);
                }
            }
        }
        out
    }

    /// Two blocks of All/High/Medium/Low columns: matching accuracy and
    /// end-to-end F1, as percentages with the macro std. The perfect
    /// ceiling row goes last under a rule and has no accuracy.
    pub fn render_table(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| self.display_label(r).chars().count())
            .max()
            .unwrap_or(0)
            .max(20);
        let cell = 13;
        let columns = ["All", "High", "Medium", "Low"];
        let mut out = String::new();
        if let Some(fp) = &self.fingerprint {
            let _ = writeln!(out, "config {fp}");
        }
        let _ = writeln!(
            out,
            "{:label_width$} | {:<w$} | LRL -> HRL -> LRL (F1)",
            "",
            "LRL -> HRL (Acc.)",
            w = cell * 4
        );
        let mut header = format!("{:label_width$} |", "");
        for block in 0..2 {
            for c in columns {
                let _ = write!(header, " {c:<cell$}");
            }
            if block == 0 {
                header.push_str(" |");
            }
        }
        let rule = "-".repeat(header.chars().count());
        let _ = writeln!(out, "{}", header.trim_end());
        let _ = writeln!(out, "{rule}");

        let (ceilings, strategies): (Vec<&ReportRow>, Vec<&ReportRow>) =
            self.rows.iter().partition(|r| r.label == PERFECT_LABEL);
        for (i, rows) in [strategies, ceilings].into_iter().enumerate() {
            if i == 1 && !rows.is_empty() {
                let _ = writeln!(out, "{rule}");
            }
            for row in rows {
                let mut line = format!("{:label_width$} |", self.display_label(row));
                for (block, metric) in [MATCH_ACCURACY, END_TO_END_F1].into_iter().enumerate() {
                    let summary = aggregate_groups(&row.metric(metric), &self.groups)
                        .ok()
                        .filter(|s| s.all.is_some());
                    let stats = [
                        summary.as_ref().and_then(|s| s.all),
                        summary
                            .as_ref()
                            .and_then(|s| s.groups.get(&ResourceGroup::High).copied()),
                        summary
                            .as_ref()
                            .and_then(|s| s.groups.get(&ResourceGroup::Medium).copied()),
                        summary
                            .as_ref()
                            .and_then(|s| s.groups.get(&ResourceGroup::Low).copied()),
                    ];
                    for stat in stats {
                        let text = match stat {
                            Some(s) => format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std),
                            None => "-".to_owned(),
                        };
                        let _ = write!(line, " {text:<cell$}");
                    }
                    if block == 0 {
                        line.push_str(" |");
                    }
                }
                let _ = writeln!(out, "{}", line.trim_end());
            }
        }

        let _ = writeln!(out);
        let _ = writeln!(out, "per language");
        for row in &self.rows {
            for (lang, metrics) in &row.per_language {
                let group = self.groups.group_of(lang).map_or("?", ResourceGroup::title);
                let values = metrics
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(
                    out,
                    "  {:label_width$} {lang:<6} {group:<6} {values}",
                    self.display_label(row)
                );
            }
        }
        out
    }

    fn display_label(&self, row: &ReportRow) -> String {
        if row.label == PERFECT_LABEL {
            "Perfect LRL -> HRL".to_owned()
        } else {
            row.label.clone()
        }
    }
}
