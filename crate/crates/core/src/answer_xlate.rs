//! Translating an HRL answer into the query's language.
//!
//! Entity answers are looked up in a knowledge graph and replaced by the
//! entity's label in the target language; anything that does not resolve
//! to exactly one labelled entity is returned in English unchanged. A
//! machine-translation path goes through the [`Translator`] contract.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::adapter::AdapterError;
use crate::corpus::HRL_LANG;
use crate::pivot::Translator;

#[derive(Debug, Error)]
pub enum XlateError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("kg line {line}: {reason}")]
    BadKgLine { line: usize, reason: String },
    #[error("answer strategy {0} needs a translator")]
    MissingTranslator(AnswerStrategy),
    #[error("machine translation failed: {0}")]
    Translate(#[source] AdapterError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KgEntity {
    pub entity_id: String,
    /// Language tag to localized label.
    pub labels: BTreeMap<String, String>,
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, KgEntity>,
    /// Surface key to candidate entity ids, best candidate first.
    surface: HashMap<String, Vec<String>>,
    max_surface_tokens: usize,
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid regex"))
}

/// NFKC, lowercase, punctuation to spaces, whitespace collapsed.
pub fn surface_key(text: &str) -> String {
    let folded = text.nfkc().collect::<String>().to_lowercase();
    let spaced = punctuation().replace_all(&folded, " ");
    crate::text::collapse_whitespace(&spaced)
}

impl KnowledgeGraph {
    pub fn new<I: IntoIterator<Item = KgEntity>>(entities: I) -> Self {
        let entities: BTreeMap<String, KgEntity> = entities
            .into_iter()
            .map(|e| (e.entity_id.clone(), e))
            .collect();
        let mut surface: HashMap<String, Vec<String>> = HashMap::new();
        for entity in entities.values() {
            for form in entity.labels.values().chain(&entity.aliases) {
                let key = surface_key(form);
                if key.is_empty() {
                    continue;
                }
                let ids = surface.entry(key).or_default();
                if !ids.contains(&entity.entity_id) {
                    ids.push(entity.entity_id.clone());
                }
            }
        }
        // Most labels first, then smallest id.
        for ids in surface.values_mut() {
            ids.sort_by(|a, b| {
                let (la, lb) = (entities[a].labels.len(), entities[b].labels.len());
                lb.cmp(&la).then_with(|| a.cmp(b))
            });
        }
        let max_surface_tokens = surface
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(0);
        Self {
            entities,
            surface,
            max_surface_tokens,
        }
    }

    /// Reads `entity_id \t lang \t label` and `entity_id \t alias \t surface`
    /// rows. Blank lines and lines starting with `#` are skipped.
    pub fn load_tsv(path: &Path) -> Result<Self, XlateError> {
        let raw = fs::read_to_string(path).map_err(|source| XlateError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse_tsv(&raw)
    }

    pub fn parse_tsv(raw: &str) -> Result<Self, XlateError> {
        let mut entities: BTreeMap<String, KgEntity> = BTreeMap::new();
        for (i, line) in raw.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, kind, value] = cols[..] else {
                return Err(XlateError::BadKgLine {
                    line: line_no,
                    reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            };
            if id.is_empty() || kind.is_empty() || value.is_empty() {
                return Err(XlateError::BadKgLine {
                    line: line_no,
                    reason: "empty column".into(),
                });
            }
            let entity = entities.entry(id.to_owned()).or_insert_with(|| KgEntity {
                entity_id: id.to_owned(),
                ..Default::default()
            });
            if kind == "alias" {
                entity.aliases.push(value.to_owned());
            } else {
                entity.labels.insert(kind.to_owned(), value.to_owned());
            }
        }
        Ok(Self::new(entities.into_values()))
    }

    pub fn entity(&self, id: &str) -> Option<&KgEntity> {
        self.entities.get(id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Candidate ids for a surface form, best first.
    pub fn candidates(&self, surface: &str) -> &[String] {
        self.surface
            .get(&surface_key(surface))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// A linked entity mention; offsets are byte positions in
/// [`surface_key`] of the input text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_id: String,
}

/// Greedy longest-match-first linking over whitespace tokens.
pub fn link_entities(text: &str, kg: &KnowledgeGraph) -> Vec<LinkedSpan> {
    let key = surface_key(text);
    let mut tokens = Vec::new();
    let mut offset = 0;
    for tok in key.split(' ').filter(|t| !t.is_empty()) {
        tokens.push((offset, offset + tok.len()));
        offset += tok.len() + 1;
    }

    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = kg.max_surface_tokens.min(tokens.len() - i);
        let hit = (1..=longest).rev().find_map(|len| {
            let (start, end) = (tokens[i].0, tokens[i + len - 1].1);
            kg.surface
                .get(&key[start..end])
                .and_then(|ids| ids.first())
                .map(|id| (len, start, end, id.clone()))
        });
        match hit {
            Some((len, start, end, entity_id)) => {
                spans.push(LinkedSpan {
                    start,
                    end,
                    surface: key[start..end].to_owned(),
                    entity_id,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XlateMethod {
    Kg,
    Mt,
    EnglishFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatedAnswer {
    pub text: String,
    pub method: XlateMethod,
    pub linked_entity: Option<String>,
    pub warning: Option<String>,
}

impl TranslatedAnswer {
    fn fallback(answer: &str, warning: Option<String>) -> Self {
        Self {
            text: answer.to_owned(),
            method: XlateMethod::EnglishFallback,
            linked_entity: None,
            warning,
        }
    }
}

/// Replaces the answer by its entity's `target_lang` label when a single
/// linked entity covers the whole answer; otherwise returns the answer
/// verbatim.
pub fn kg_translate_answer(
    answer: &str,
    target_lang: &str,
    kg: &KnowledgeGraph,
) -> TranslatedAnswer {
    let key_len = surface_key(answer).len();
    let spans = link_entities(answer, kg);
    if let [span] = spans.as_slice() {
        if span.start == 0 && span.end == key_len {
            if let Some(label) = kg
                .entity(&span.entity_id)
                .and_then(|e| e.labels.get(target_lang))
            {
                return TranslatedAnswer {
                    text: label.clone(),
                    method: XlateMethod::Kg,
                    linked_entity: Some(span.entity_id.clone()),
                    warning: None,
                };
            }
        }
    }
    TranslatedAnswer::fallback(answer, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStrategy {
    #[default]
    KgFirst,
    MtOnly,
    KgOnly,
}

impl AnswerStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::KgFirst => "kg_first",
            Self::MtOnly => "mt_only",
            Self::KgOnly => "kg_only",
        }
    }

    pub fn needs_translator(self) -> bool {
        !matches!(self, Self::KgOnly)
    }
}

impl fmt::Display for AnswerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kg_first" => Ok(Self::KgFirst),
            "mt_only" => Ok(Self::MtOnly),
            "kg_only" => Ok(Self::KgOnly),
            other => Err(format!(
                "unknown answer strategy `{other}` (expected kg_first, mt_only or kg_only)"
            )),
        }
    }
}

fn machine_translate(
    translator: &dyn Translator,
    answer: &str,
    target_lang: &str,
) -> Result<String, AdapterError> {
    let text = translator.translate(answer, HRL_LANG, target_lang)?;
    if text.is_empty() && !answer.is_empty() {
        return Err(AdapterError::Protocol {
            name: translator.name().to_owned(),
            reason: "empty translation".into(),
        });
    }
    Ok(text)
}

pub fn translate_answer(
    answer: &str,
    target_lang: &str,
    strategy: AnswerStrategy,
    kg: &KnowledgeGraph,
    translator: Option<&dyn Translator>,
) -> Result<TranslatedAnswer, XlateError> {
    if strategy.needs_translator() && translator.is_none() {
        return Err(XlateError::MissingTranslator(strategy));
    }
    match strategy {
        AnswerStrategy::KgOnly => Ok(kg_translate_answer(answer, target_lang, kg)),
        AnswerStrategy::MtOnly => {
            let text = machine_translate(translator.expect("checked"), answer, target_lang)
                .map_err(XlateError::Translate)?;
            Ok(TranslatedAnswer {
                text,
                method: XlateMethod::Mt,
                linked_entity: None,
                warning: None,
            })
        }
        AnswerStrategy::KgFirst => {
            let kg_result = kg_translate_answer(answer, target_lang, kg);
            if kg_result.method == XlateMethod::Kg {
                return Ok(kg_result);
            }
            match machine_translate(translator.expect("checked"), answer, target_lang) {
                Ok(text) => Ok(TranslatedAnswer {
                    text,
                    method: XlateMethod::Mt,
                    linked_entity: None,
                    warning: None,
                }),
                Err(e) => {
                    log::warn!("falling back to the English answer: {e}");
                    Ok(TranslatedAnswer::fallback(answer, Some(e.to_string())))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pivot::IdentityTranslator;
    use proptest::prelude::*;

    const FIXTURE: &str = "\
# id\tlang|alias\tvalue
Q76\ten\tBarack Obama
Q76\tru\tБарак Обама
Q76\talias\tObama
Q60\ten\tNew York City
Q60\tde\tNew York City
Q60\tth\tนครนิวยอร์ก
Q1384\ten\tNew York
Q1384\tde\tNew York (Bundesstaat)
Q90\ten\tParis
Q90\tth\tปารีส
Q167646\ten\tParis
";

    fn kg() -> KnowledgeGraph {
        KnowledgeGraph::parse_tsv(FIXTURE).unwrap()
    }

    struct Failing;
    impl Translator for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn translate(&self, _: &str, _: &str, _: &str) -> Result<String, AdapterError> {
            Err(AdapterError::Failed {
                name: "failing".into(),
                reason: "injected".into(),
            })
        }
    }

    #[test]
    fn loads_labels_and_aliases() {
        let kg = kg();
        assert_eq!(kg.len(), 5);
        let obama = kg.entity("Q76").unwrap();
        assert_eq!(obama.labels.len(), 2);
        assert_eq!(obama.aliases, vec!["Obama"]);
        // every label and alias is indexed
        for e in [obama, kg.entity("Q60").unwrap()] {
            for form in e.labels.values().chain(&e.aliases) {
                assert!(kg.candidates(form).contains(&e.entity_id), "{form}");
            }
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            KnowledgeGraph::parse_tsv("Q1\ten\n"),
            Err(XlateError::BadKgLine { line: 1, .. })
        ));
        assert!(matches!(
            KnowledgeGraph::parse_tsv("Q1\ten\tx\nQ2\t\tlabel\n"),
            Err(XlateError::BadKgLine { line: 2, .. })
        ));
    }

    #[test]
    fn exact_alias_covers_string() {
        let spans = link_entities("barack obama", &kg());
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (0, "barack obama".len()));
        assert_eq!(spans[0].entity_id, "Q76");
    }

    #[test]
    fn no_match_is_empty() {
        assert!(link_entities("xyzzy", &kg()).is_empty());
        assert!(link_entities("", &kg()).is_empty());
    }

    /// Enumerate every token n-gram of the input that is a known surface,
    /// then check the linker kept only the longest one where they overlap.
    #[test]
    fn longest_match_wins() {
        let kg = kg();
        let text = "new york city";
        let tokens: Vec<&str> = text.split(' ').collect();
        let mut all = Vec::new();
        for i in 0..tokens.len() {
            for j in i + 1..=tokens.len() {
                let s = tokens[i..j].join(" ");
                if !kg.candidates(&s).is_empty() {
                    all.push(s);
                }
            }
        }
        assert_eq!(all, vec!["new york", "new york city"]);
        let spans = link_entities(text, &kg);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "new york city");
        assert_eq!(spans[0].entity_id, "Q60");
    }

    #[test]
    fn ambiguity_prefers_more_labels_then_smaller_id() {
        let kg = kg();
        // Q90 has two labels, Q167646 one
        assert_eq!(link_entities("Paris", &kg)[0].entity_id, "Q90");
        let tie = KnowledgeGraph::parse_tsv("Qb\ten\tMercury\nQa\ten\tMercury\n").unwrap();
        assert_eq!(link_entities("mercury", &tie)[0].entity_id, "Qa");
    }

    #[test]
    fn spans_are_sorted_and_disjoint() {
        let spans = link_entities(
            "Obama visited New York City and Paris, then New York.",
            &kg(),
        );
        let ids: Vec<&str> = spans.iter().map(|s| s.entity_id.as_str()).collect();
        assert_eq!(ids, vec!["Q76", "Q60", "Q90", "Q1384"]);
        for pair in spans.windows(2) {
            assert!(pair[0].end <= pair[1].start);
        }
    }

    #[test]
    fn kg_translation_uses_target_label() {
        let t = kg_translate_answer("Barack Obama", "ru", &kg());
        assert_eq!(t.text, "Барак Обама");
        assert_eq!(t.method, XlateMethod::Kg);
        assert_eq!(t.linked_entity.as_deref(), Some("Q76"));
    }

    #[test]
    fn missing_label_falls_back_to_english() {
        let t = kg_translate_answer("Barack Obama", "km", &kg());
        assert_eq!(t.text, "Barack Obama");
        assert_eq!(t.method, XlateMethod::EnglishFallback);
        assert!(t.linked_entity.is_none());
    }

    #[test]
    fn partial_match_falls_back() {
        let kg = KnowledgeGraph::parse_tsv(
            "Q495307\ten\tmoon landing\nQ495307\tth\tการลงจอดบนดวงจันทร์\n",
        )
        .unwrap();
        let spans = link_entities("the 1969 moon landing", &kg);
        assert_eq!(spans.len(), 1);
        assert_ne!(
            (spans[0].start, spans[0].end),
            (0, "the 1969 moon landing".len())
        );
        let t = kg_translate_answer("the 1969 moon landing", "th", &kg);
        assert_eq!(t.method, XlateMethod::EnglishFallback);
        assert_eq!(t.text, "the 1969 moon landing");
        // full cover translates
        assert_eq!(
            kg_translate_answer("Moon landing", "th", &kg).method,
            XlateMethod::Kg
        );
    }

    #[test]
    fn strategies() {
        let kg = kg();
        let ident = IdentityTranslator;
        let r = translate_answer("Barack Obama", "ru", AnswerStrategy::KgOnly, &kg, None).unwrap();
        assert_eq!(r.method, XlateMethod::Kg);

        let r = translate_answer(
            "Barack Obama",
            "ru",
            AnswerStrategy::MtOnly,
            &kg,
            Some(&ident),
        )
        .unwrap();
        assert_eq!(
            (r.text.as_str(), r.method),
            ("Barack Obama", XlateMethod::Mt)
        );

        let r = translate_answer(
            "Barack Obama",
            "ru",
            AnswerStrategy::KgFirst,
            &kg,
            Some(&ident),
        )
        .unwrap();
        assert_eq!(r.method, XlateMethod::Kg);
        let r = translate_answer(
            "forty two",
            "ru",
            AnswerStrategy::KgFirst,
            &kg,
            Some(&ident),
        )
        .unwrap();
        assert_eq!(r.method, XlateMethod::Mt);

        assert!(matches!(
            translate_answer("x", "ru", AnswerStrategy::MtOnly, &kg, None),
            Err(XlateError::MissingTranslator(AnswerStrategy::MtOnly))
        ));
    }

    #[test]
    fn failing_translator_under_kg_first_falls_back_with_warning() {
        let kg = kg();
        let r = translate_answer(
            "unlinked answer",
            "th",
            AnswerStrategy::KgFirst,
            &kg,
            Some(&Failing),
        )
        .unwrap();
        assert_eq!(r.method, XlateMethod::EnglishFallback);
        assert_eq!(r.text, "unlinked answer");
        assert!(r.warning.unwrap().contains("injected"));
        assert!(matches!(
            translate_answer(
                "unlinked answer",
                "th",
                AnswerStrategy::MtOnly,
                &kg,
                Some(&Failing)
            ),
            Err(XlateError::Translate(_))
        ));
    }

    #[test]
    fn fallback_is_idempotent() {
        let kg = kg();
        let once = kg_translate_answer("Some long answer text", "th", &kg);
        let twice = kg_translate_answer(&once.text, "th", &kg);
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn kg_only_is_total(answer in "\\PC{1,30}", lang in "[a-z]{2}") {
            let kg = kg();
            let r = translate_answer(&answer, &lang, AnswerStrategy::KgOnly, &kg, None).unwrap();
            prop_assert!(!r.text.is_empty());
            if r.method == XlateMethod::EnglishFallback {
                prop_assert_eq!(&r.text, &answer);
            }
            let spans = link_entities(&answer, &kg);
            for pair in spans.windows(2) {
                prop_assert!(pair[0].end <= pair[1].start);
            }
        }
    }
}
