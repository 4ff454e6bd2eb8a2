//! Query matching: map an LRL query to an equivalent HRL database query.
//!
//! Three strategies share one engine:
//!
//! * `mips`: embed the query, take the top-1 neighbour by inner product.
//! * `nmt_mips`: machine-translate the query to the HRL first, then `mips`.
//! * `rm_mips`: take the top-k neighbours and keep the one a pairwise
//!   scorer (a cross-encoder in practice) rates highest.
//!
//! The confidence of a match is the last stage's score: cosine for the
//! first two, the scorer's output for `rm_mips`. Matches below the
//! threshold abstain.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterError;
use crate::corpus::{Database, EvalSet, QueryRecord, HRL_LANG};
use crate::embedding::{dot, EncodeError, Encoder};
use crate::index::{CandidateMatch, Index, IndexError};
use crate::text::{normalize_query, query_tokens};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mips,
    NmtMips,
    RmMips,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Mips, Strategy::NmtMips, Strategy::RmMips];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mips => "mips",
            Self::NmtMips => "nmt_mips",
            Self::RmMips => "rm_mips",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected mips, nmt_mips or rm_mips)"))
    }
}

#[derive(Debug, Error)]
pub enum PivotError {
    #[error("{strategy}: encoding failed: {source}")]
    Encode {
        strategy: Strategy,
        #[source]
        source: EncodeError,
    },
    #[error("{strategy}: translation failed: {source}")]
    Translate {
        strategy: Strategy,
        #[source]
        source: AdapterError,
    },
    #[error("{strategy}: scoring failed: {source}")]
    Score {
        strategy: Strategy,
        #[source]
        source: AdapterError,
    },
    #[error("{strategy}: {source}")]
    Index {
        strategy: Strategy,
        #[source]
        source: IndexError,
    },
    #[error("strategy {0} needs a scorer")]
    MissingScorer(Strategy),
    #[error("strategy {0} needs a translator")]
    MissingTranslator(Strategy),
    #[error("candidate `{0}` is indexed but missing from the database")]
    UnknownCandidate(String),
    #[error("cannot score an empty text")]
    EmptyText,
    #[error("scorer `{name}` returned a non-finite score")]
    NonFiniteScore { name: String },
    #[error("{results} results for {examples} examples")]
    LengthMismatch { results: usize, examples: usize },
}

/// Pairwise paraphrase scorer; higher means more likely equivalent.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, lrl_text: &str, hrl_text: &str) -> Result<f64, AdapterError>;
}

pub trait Translator: Send + Sync {
    fn name(&self) -> &str;
    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, AdapterError>;
}

pub fn score_pair(scorer: &dyn Scorer, lrl_text: &str, hrl_text: &str) -> Result<f64, PivotError> {
    if lrl_text.trim().is_empty() || hrl_text.trim().is_empty() {
        return Err(PivotError::EmptyText);
    }
    let score = scorer
        .score(lrl_text, hrl_text)
        .map_err(|source| PivotError::Score {
            strategy: Strategy::RmMips,
            source,
        })?;
    if !score.is_finite() {
        return Err(PivotError::NonFiniteScore {
            name: scorer.name().to_owned(),
        });
    }
    Ok(score)
}

/// Dice coefficient over the normalized token sets.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = query_tokens(a).into_iter().collect();
    let b: HashSet<String> = query_tokens(b).into_iter().collect();
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let shared = a.intersection(&b).count();
    2.0 * shared as f64 / (a.len() + b.len()) as f64
}

/// Test oracle: 1.0 exactly on known gold (lrl, hrl) pairs, token overlap
/// strictly below 1.0 everywhere else.
///
/// Only meaningful when the truth table comes from the evaluation data
/// itself; it stands in for a perfect cross-encoder in tests and
/// controlled experiments.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    gold: HashSet<(String, String)>,
}

impl OracleScorer {
    pub fn new<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        Self {
            gold: pairs
                .into_iter()
                .map(|(a, b)| (normalize_query(a.as_ref()), normalize_query(b.as_ref())))
                .collect(),
        }
    }

    /// Gold pairs from each example's LRL text and its parallel HRL query.
    pub fn from_eval_sets<'a, I>(db: &Database, sets: I) -> Self
    where
        I: IntoIterator<Item = &'a EvalSet>,
    {
        let pairs = sets
            .into_iter()
            .flat_map(|set| set.examples.iter())
            .filter_map(|e| {
                let gold = e.gold_hrl_id.as_deref()?;
                Some((e.lrl_query.text.clone(), db.query(gold)?.text.clone()))
            })
            .collect::<Vec<_>>();
        Self::new(pairs)
    }

    pub fn add_pair(&mut self, lrl_text: &str, hrl_text: &str) {
        self.gold
            .insert((normalize_query(lrl_text), normalize_query(hrl_text)));
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

impl Scorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, lrl_text: &str, hrl_text: &str) -> Result<f64, AdapterError> {
        let key = (normalize_query(lrl_text), normalize_query(hrl_text));
        if self.gold.contains(&key) {
            return Ok(1.0);
        }
        let overlap = token_overlap(lrl_text, hrl_text);
        Ok(if overlap >= 1.0 {
            1.0 - f64::EPSILON
        } else {
            overlap
        })
    }
}

/// Lexical baseline scorer: plain token overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapScorer;

impl Scorer for OverlapScorer {
    fn name(&self) -> &str {
        "overlap"
    }

    fn score(&self, lrl_text: &str, hrl_text: &str) -> Result<f64, AdapterError> {
        Ok(token_overlap(lrl_text, hrl_text))
    }
}

/// Scores a pair by the cosine of their embeddings; reranking with it
/// reproduces plain retrieval order.
#[derive(Clone)]
pub struct CosineScorer {
    encoder: Arc<dyn Encoder>,
    lrl_lang: String,
}

impl CosineScorer {
    pub fn new(encoder: Arc<dyn Encoder>, lrl_lang: &str) -> Self {
        Self {
            encoder,
            lrl_lang: lrl_lang.to_owned(),
        }
    }
}

impl Scorer for CosineScorer {
    fn name(&self) -> &str {
        "cosine"
    }

    fn score(&self, lrl_text: &str, hrl_text: &str) -> Result<f64, AdapterError> {
        let fail = |e: EncodeError| AdapterError::Failed {
            name: "cosine".into(),
            reason: e.to_string(),
        };
        let a = self
            .encoder
            .encode(lrl_text, &self.lrl_lang)
            .map_err(fail)?;
        let b = self.encoder.encode(hrl_text, HRL_LANG).map_err(fail)?;
        Ok(dot(a.values(), b.values()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn name(&self) -> &str {
        "identity"
    }

    fn translate(&self, text: &str, _src: &str, _tgt: &str) -> Result<String, AdapterError> {
        Ok(text.to_owned())
    }
}

/// Lookup-table translator keyed by `(src, tgt, text)`; unknown inputs are
/// errors.
#[derive(Debug, Clone, Default)]
pub struct DictionaryTranslator {
    table: std::collections::HashMap<(String, String, String), String>,
}

impl DictionaryTranslator {
    pub fn insert(&mut self, src: &str, tgt: &str, text: &str, translation: &str) {
        self.table.insert(
            (src.to_owned(), tgt.to_owned(), text.to_owned()),
            translation.to_owned(),
        );
    }
}

impl Translator for DictionaryTranslator {
    fn name(&self) -> &str {
        "dictionary"
    }

    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, AdapterError> {
        self.table
            .get(&(src.to_owned(), tgt.to_owned(), text.to_owned()))
            .cloned()
            .ok_or_else(|| AdapterError::Failed {
                name: "dictionary".into(),
                reason: format!("no {src}->{tgt} entry for {text:?}"),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub hrl_id: String,
    pub similarity: f64,
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub hrl_id: Option<String>,
    pub confidence: f64,
    pub strategy: Strategy,
    pub candidates: Vec<RankedCandidate>,
}

impl MatchResult {
    /// An abstention carrying no candidates, used when matching failed.
    pub fn abstain(strategy: Strategy) -> Self {
        Self {
            hrl_id: None,
            confidence: f64::NEG_INFINITY,
            strategy,
            candidates: Vec::new(),
        }
    }

    pub fn answered(&self) -> bool {
        self.hrl_id.is_some()
    }

    /// The best candidate regardless of the threshold.
    pub fn top_candidate(&self) -> Option<&str> {
        let best = match self.strategy {
            Strategy::RmMips => self
                .candidates
                .iter()
                .filter(|c| c.rerank_score.is_some())
                .max_by(|a, b| {
                    a.rerank_score
                        .unwrap()
                        .total_cmp(&b.rerank_score.unwrap())
                        .then_with(|| b.hrl_id.cmp(&a.hrl_id))
                }),
            _ => self.candidates.first(),
        };
        best.map(|c| c.hrl_id.as_str())
    }
}

/// Collaborators for matching LRL queries against one HRL database.
#[derive(Clone, Copy)]
pub struct PivotEngine<'a> {
    pub index: &'a Index,
    pub db: &'a Database,
    pub encoder: &'a dyn Encoder,
    pub scorer: Option<&'a dyn Scorer>,
    pub translator: Option<&'a dyn Translator>,
    /// Separate index for `nmt_mips` whose encoder already maps an LRL query
    /// to the vector of its offline translation.
    pub nmt: Option<NmtSearch<'a>>,
}

#[derive(Clone, Copy)]
pub struct NmtSearch<'a> {
    pub index: &'a Index,
    pub encoder: &'a dyn Encoder,
}

impl<'a> PivotEngine<'a> {
    pub fn new(index: &'a Index, db: &'a Database, encoder: &'a dyn Encoder) -> Self {
        Self {
            index,
            db,
            encoder,
            scorer: None,
            translator: None,
            nmt: None,
        }
    }

    pub fn with_scorer(mut self, scorer: &'a dyn Scorer) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn with_translator(mut self, translator: &'a dyn Translator) -> Self {
        self.translator = Some(translator);
        self
    }

    pub fn with_nmt(mut self, nmt: NmtSearch<'a>) -> Self {
        self.nmt = Some(nmt);
        self
    }

    pub fn match_query(
        &self,
        query: &QueryRecord,
        strategy: Strategy,
        k: usize,
        threshold: f64,
    ) -> Result<MatchResult, PivotError> {
        let encode = |text: &str, lang: &str| {
            self.encoder
                .encode(text, lang)
                .map_err(|source| PivotError::Encode { strategy, source })
        };
        let search = |v, k| {
            self.index
                .search_topk(&v, k)
                .map_err(|source| PivotError::Index { strategy, source })
        };
        let (winner, confidence, candidates) = match strategy {
            Strategy::Mips => {
                let hits = search(encode(&query.text, &query.lang)?, 1)?;
                single_hit(hits)
            }
            Strategy::NmtMips => match self.nmt {
                Some(nmt) => {
                    let v = nmt
                        .encoder
                        .encode(&query.text, &query.lang)
                        .map_err(|source| PivotError::Encode { strategy, source })?;
                    let hits = nmt
                        .index
                        .search_topk(&v, 1)
                        .map_err(|source| PivotError::Index { strategy, source })?;
                    single_hit(hits)
                }
                None => {
                    let translator = self
                        .translator
                        .ok_or(PivotError::MissingTranslator(strategy))?;
                    let english = translator
                        .translate(&query.text, &query.lang, HRL_LANG)
                        .map_err(|source| PivotError::Translate { strategy, source })?;
                    let hits = search(encode(&english, HRL_LANG)?, 1)?;
                    single_hit(hits)
                }
            },
            Strategy::RmMips => {
                let scorer = self.scorer.ok_or(PivotError::MissingScorer(strategy))?;
                let hits = search(encode(&query.text, &query.lang)?, k)?;
                self.rerank(scorer, &query.text, hits)?
            }
        };
        let hrl_id = winner.filter(|_| confidence >= threshold);
        Ok(MatchResult {
            hrl_id,
            confidence,
            strategy,
            candidates,
        })
    }

    fn rerank(
        &self,
        scorer: &dyn Scorer,
        text: &str,
        hits: Vec<CandidateMatch>,
    ) -> Result<(Option<String>, f64, Vec<RankedCandidate>), PivotError> {
        let mut ranked: Vec<RankedCandidate> = Vec::with_capacity(hits.len());
        let mut best: Option<(f64, usize)> = None;
        for (i, hit) in hits.into_iter().enumerate() {
            let hrl = self
                .db
                .query(&hit.hrl_id)
                .ok_or_else(|| PivotError::UnknownCandidate(hit.hrl_id.clone()))?;
            let score = score_pair(scorer, text, &hrl.text)?;
            let better = match best {
                None => true,
                Some((s, j)) => score > s || (score == s && hit.hrl_id < ranked[j].hrl_id),
            };
            if better {
                best = Some((score, i));
            }
            ranked.push(RankedCandidate {
                hrl_id: hit.hrl_id,
                similarity: hit.similarity,
                rerank_score: Some(score),
            });
        }
        Ok(match best {
            Some((score, i)) => (Some(ranked[i].hrl_id.clone()), score, ranked),
            None => (None, f64::NEG_INFINITY, ranked),
        })
    }

    /// Matches a batch in parallel on the current rayon pool, preserving
    /// input order.
    pub fn match_batch(
        &self,
        queries: &[&QueryRecord],
        strategy: Strategy,
        k: usize,
        threshold: f64,
    ) -> Vec<Result<MatchResult, PivotError>> {
        queries
            .par_iter()
            .map(|q| self.match_query(q, strategy, k, threshold))
            .collect()
    }
}

fn single_hit(hits: Vec<CandidateMatch>) -> (Option<String>, f64, Vec<RankedCandidate>) {
    let candidates: Vec<RankedCandidate> = hits
        .into_iter()
        .map(|h| RankedCandidate {
            hrl_id: h.hrl_id,
            similarity: h.similarity,
            rerank_score: None,
        })
        .collect();
    match candidates.first() {
        Some(top) => (Some(top.hrl_id.clone()), top.similarity, candidates),
        None => (None, f64::NEG_INFINITY, candidates),
    }
}

/// Free-function form of [`PivotEngine::match_query`].
#[allow(clippy::too_many_arguments)]
pub fn match_query(
    query: &QueryRecord,
    index: &Index,
    db: &Database,
    encoder: &dyn Encoder,
    scorer: Option<&dyn Scorer>,
    translator: Option<&dyn Translator>,
    strategy: Strategy,
    k: usize,
    threshold: f64,
) -> Result<MatchResult, PivotError> {
    PivotEngine {
        index,
        db,
        encoder,
        scorer,
        translator,
        nmt: None,
    }
    .match_query(query, strategy, k, threshold)
}

/// Fraction of examples with a gold HRL id whose match equals it.
/// Abstentions count as wrong; examples without a gold id are skipped.
/// Returns 0 when no example has a gold id.
pub fn matching_accuracy(results: &[MatchResult], eval: &EvalSet) -> Result<f64, PivotError> {
    if results.len() != eval.examples.len() {
        return Err(PivotError::LengthMismatch {
            results: results.len(),
            examples: eval.examples.len(),
        });
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (result, example) in results.iter().zip(&eval.examples) {
        let Some(gold) = &example.gold_hrl_id else {
            continue;
        };
        total += 1;
        if result.hrl_id.as_ref() == Some(gold) {
            correct += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}
