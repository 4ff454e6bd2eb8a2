//! End-to-end evaluation and the two ablation sweeps.
//!
//! A run resolves an [`ExperimentConfig`] into loaded data and started
//! adapters ([`Prepared`]), then evaluates every (strategy, language) pair.
//! Sweeps rebuild the index at every grid point and fan the (seed, grid
//! value) jobs out over a bounded worker pool; results are merged in grid
//! order so outputs do not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adapter::{AdapterError, ProcessAdapter, ProcessSpec};
use crate::answer_xlate::{translate_answer, AnswerStrategy, KnowledgeGraph, XlateError};
use crate::corpus::{
    dropout_parallel, ingest_database, ingest_eval_set, inject_distractors, lookup_answer,
    CorpusError, Database, DatabaseFormat, DropoutMode, EvalFormat, EvalSet,
};
use crate::embedding::{
    embed_database, load_vector_store, Encoder, HashNgramEncoder, PrecomputedEncoder, StoreError,
    VectorStore,
};
use crate::index::{build_index, Index, IndexError, IndexMode};
use crate::metrics::{
    answer_score, calibrate_threshold, recall_at_threshold, EvalReport, LanguageGroups,
    MetricsError, ReportRow, ResourceGroup, ANSWERED_FRACTION, END_TO_END_EM, END_TO_END_F1,
    MATCH_ACCURACY, NO_ANSWER, PERFECT_LABEL,
};
use crate::pivot::{
    matching_accuracy, CosineScorer, IdentityTranslator, MatchResult, NmtSearch, OracleScorer,
    OverlapScorer, PivotEngine, PivotError, Scorer, Strategy, Translator, DEFAULT_K,
};
use crate::synthetic::{generate, SyntheticSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pivot(#[from] PivotError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Xlate(#[from] XlateError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Short machine-readable code for the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Corpus(_) => "corpus",
            Self::Store(_) => "store",
            Self::Index(_) => "index",
            Self::Pivot(_) => "pivot",
            Self::Metrics(_) => "metrics",
            Self::Xlate(_) => "answer",
            Self::Adapter(_) => "adapter",
            Self::Io { .. } => "io",
        }
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Hash {
        dim: usize,
    },
    /// Vectors exported offline; every query must be present.
    Precomputed {
        database: PathBuf,
        #[serde(default)]
        distractors: Option<PathBuf>,
        /// Language to store path.
        eval: BTreeMap<String, PathBuf>,
        /// Separate vectors for `nmt_mips`.
        #[serde(default)]
        nmt: Option<NmtStores>,
    },
}

/// Vectors for `nmt_mips` from the encoder applied after translation. Eval
/// stores hold the vectors of translated queries keyed by example id, so
/// translation happens offline and no translator runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmtStores {
    pub database: PathBuf,
    #[serde(default)]
    pub distractors: Option<PathBuf>,
    pub eval: BTreeMap<String, PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::Hash { dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    /// Test-only: 1.0 on gold parallel pairs, token overlap otherwise.
    Oracle,
    #[default]
    Overlap,
    Cosine,
    Process(ProcessSpec),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranslatorSpec {
    #[default]
    None,
    Identity,
    Process(ProcessSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupingSpec {
    Preset(String),
    Custom(BTreeMap<String, ResourceGroup>),
}

impl Default for GroupingSpec {
    fn default() -> Self {
        Self::Preset("mkqa".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Calibrate on the evaluated run itself.
    #[default]
    Oracle,
    /// Calibrate on a seeded half of the examples, measure on the other.
    HeldOut,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_target() -> f64 {
    0.8
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_keep_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::RmMips]
}

fn default_answer_strategy() -> AnswerStrategy {
    AnswerStrategy::KgOnly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub database: Option<PathBuf>,
    #[serde(default = "DatabaseFormat::default_generic")]
    pub database_format: DatabaseFormat,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default = "EvalFormat::default_generic")]
    pub eval_format: EvalFormat,
    /// Languages to evaluate; empty means every synthetic language.
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub distractors: Option<PathBuf>,
    #[serde(default = "DatabaseFormat::default_generic")]
    pub distractors_format: DatabaseFormat,
    /// Generated corpus used when no database path is given.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub kg: Option<PathBuf>,
    #[serde(default)]
    pub groups: GroupingSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub translator: TranslatorSpec,
    #[serde(default = "default_answer_strategy")]
    pub answer_strategy: AnswerStrategy,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// No-Answer threshold for end-to-end runs; absent means never abstain.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_target")]
    pub target_precision: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub distractor_grid: Vec<usize>,
    #[serde(default = "default_keep_grid")]
    pub keep_grid: Vec<f64>,
    #[serde(default)]
    pub dropout_mode: DropoutMode,
    #[serde(default)]
    pub calibration: CalibrationMode,
    #[serde(default = "default_index")]
    pub index: IndexMode,
    /// Worker threads; absent means machine parallelism.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_index() -> IndexMode {
    IndexMode::Exact
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl DatabaseFormat {
    fn default_generic() -> Self {
        Self::GenericJsonl
    }
}

impl EvalFormat {
    fn default_generic() -> Self {
        Self::GenericParallelJsonl
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if let Some(f) = self.keep_grid.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad(format!("keep fraction {f} outside [0, 1]"));
        }
        if !(self.target_precision > 0.0 && self.target_precision <= 1.0) {
            return bad(format!(
                "target precision {} outside (0, 1]",
                self.target_precision
            ));
        }
        if self.database.is_none() && self.synthetic.is_none() {
            return bad("either `database` or `synthetic` is required".into());
        }
        if self.database.is_some() && self.eval.is_none() {
            return bad("`eval` is required with `database`".into());
        }
        if self.database.is_some() && self.languages.is_empty() {
            return bad("`languages` is required with `database`".into());
        }
        let has_translator = self.translator != TranslatorSpec::None;
        let offline_nmt = matches!(&self.encoder, EncoderSpec::Precomputed { nmt: Some(_), .. });
        if self.strategies.contains(&Strategy::NmtMips) && !has_translator && !offline_nmt {
            return bad("strategy nmt_mips needs a translator".into());
        }
        if self.answer_strategy.needs_translator() && !has_translator {
            return bad(format!(
                "answer strategy {} needs a translator",
                self.answer_strategy
            ));
        }
        if let Some(jobs) = self.jobs {
            if jobs == 0 {
                return bad("jobs must be positive".into());
            }
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON of every setting that affects
    /// results (output directory and worker count excluded).
    pub fn fingerprint(&self) -> String {
        let mut hasher = fnv::FnvHasher::default();
        hasher.write(self.canonical_json().as_bytes());
        format!("{:016x}", hasher.finish())
    }

    fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("serializable config");
        if let Value::Object(map) = &mut value {
            map.remove("out");
            map.remove("jobs");
        }
        value.to_string()
    }
}

/// Loaded data and started collaborators for one configuration.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub db: Database,
    pub evals: Vec<EvalSet>,
    pub pool: Option<Database>,
    pub kg: KnowledgeGraph,
    pub groups: LanguageGroups,
    encoder: Arc<dyn Encoder>,
    /// Vectors for every database and distractor query.
    vectors: VectorStore,
    scorers: BTreeMap<String, Arc<dyn Scorer>>,
    translator: Option<Arc<dyn Translator>>,
    /// Encoder and vectors used by `nmt_mips` instead of the ones above.
    nmt: Option<(Arc<dyn Encoder>, VectorStore)>,
}

/// Search indexes over one database.
pub struct Indexes {
    pub main: Index,
    pub nmt: Option<Index>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    }
}

fn start_adapter(role: &str, spec: &ProcessSpec) -> Result<Arc<ProcessAdapter>> {
    let name = spec
        .command
        .first()
        .map(|p| format!("{role}:{p}"))
        .unwrap_or_else(|| role.to_owned());
    Ok(Arc::new(ProcessAdapter::start(&name, spec)?))
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (db, mut evals, pool, mut kg) = match &config.database {
        Some(path) => {
            let db = ingest_database(path, config.database_format)?;
            let eval_path = config.eval.as_ref().expect("validated");
            let evals = config
                .languages
                .iter()
                .map(|lang| ingest_eval_set(eval_path, config.eval_format, lang, &db))
                .collect::<Result<Vec<_>, _>>()?;
            let pool = match &config.distractors {
                Some(p) => Some(ingest_database(p, config.distractors_format)?),
                None => None,
            };
            (db, evals, pool, KnowledgeGraph::default())
        }
        None => {
            let corpus = generate(config.synthetic.as_ref().expect("validated"));
            (
                corpus.db,
                corpus.eval_sets,
                corpus.distractor_pool,
                corpus.kg,
            )
        }
    };
    if config.database.is_none() && !config.languages.is_empty() {
        for lang in &config.languages {
            if !evals.iter().any(|e| &e.lang == lang) {
                return Err(ExperimentError::Config(format!(
                    "synthetic corpus has no language `{lang}`"
                )));
            }
        }
        evals.retain(|e| config.languages.contains(&e.lang));
    }
    if let Some(path) = &config.kg {
        kg = KnowledgeGraph::load_tsv(path)?;
    }

    let groups = match &config.groups {
        GroupingSpec::Preset(name) => name.parse::<LanguageGroups>()?,
        GroupingSpec::Custom(map) => LanguageGroups::custom(map.clone()),
    };
    if let Some(e) = evals.iter().find(|e| groups.group_of(&e.lang).is_none()) {
        return Err(MetricsError::UngroupedLanguage(e.lang.clone()).into());
    }

    let (encoder, vectors): (Arc<dyn Encoder>, VectorStore) = match &config.encoder {
        EncoderSpec::Hash { dim } => {
            let encoder =
                HashNgramEncoder::new(*dim).map_err(|e| ExperimentError::Config(e.to_string()))?;
            let mut vectors = embed_database(&db, &encoder)?;
            if let Some(pool) = &pool {
                for (id, v) in embed_database(pool, &encoder)?.iter() {
                    vectors.push(id, v)?;
                }
            }
            (Arc::new(encoder), vectors)
        }
        EncoderSpec::Precomputed {
            database,
            distractors,
            eval,
            ..
        } => {
            let (encoder, vectors) = load_precomputed(
                database,
                distractors.as_deref(),
                eval,
                &db,
                pool.as_ref(),
                &evals,
            )?;
            (Arc::new(encoder), vectors)
        }
    };
    let nmt: Option<(Arc<dyn Encoder>, VectorStore)> = match &config.encoder {
        EncoderSpec::Precomputed { nmt: Some(n), .. }
            if config.strategies.contains(&Strategy::NmtMips) =>
        {
            let (encoder, vectors) = load_precomputed(
                &n.database,
                n.distractors.as_deref(),
                &n.eval,
                &db,
                pool.as_ref(),
                &evals,
            )?;
            Some((Arc::new(encoder), vectors))
        }
        _ => None,
    };

    let mut scorers: BTreeMap<String, Arc<dyn Scorer>> = BTreeMap::new();
    let shared: Option<Arc<dyn Scorer>> = match &config.scorer {
        ScorerSpec::Oracle => Some(Arc::new(OracleScorer::from_eval_sets(&db, &evals))),
        ScorerSpec::Overlap => Some(Arc::new(OverlapScorer)),
        ScorerSpec::Process(spec) => Some(start_adapter("scorer", spec)?),
        ScorerSpec::Cosine => None,
    };
    for set in &evals {
        let scorer = match &shared {
            Some(s) => Arc::clone(s),
            None => Arc::new(CosineScorer::new(Arc::clone(&encoder), &set.lang)),
        };
        scorers.insert(set.lang.clone(), scorer);
    }
    let translator: Option<Arc<dyn Translator>> = match &config.translator {
        TranslatorSpec::None => None,
        TranslatorSpec::Identity => Some(Arc::new(IdentityTranslator)),
        TranslatorSpec::Process(spec) => Some(start_adapter("translator", spec)?),
    };

    Ok(Prepared {
        config: config.clone(),
        db,
        evals,
        pool,
        kg,
        groups,
        encoder,
        vectors,
        scorers,
        translator,
        nmt,
    })
}

fn load_precomputed(
    database: &Path,
    distractors: Option<&Path>,
    eval: &BTreeMap<String, PathBuf>,
    db: &Database,
    pool: Option<&Database>,
    evals: &[EvalSet],
) -> Result<(PrecomputedEncoder, VectorStore)> {
    let mut vectors = load_vector_store(database)?;
    let name = vectors.meta.encoder.clone();
    let mut encoder = PrecomputedEncoder::new(&name, vectors.dim());
    encoder.add_database(db, &vectors)?;
    if let (Some(pool), Some(path)) = (pool, distractors) {
        let extra = load_vector_store(path)?;
        extra.check_encoder(&name)?;
        encoder.add_database(pool, &extra)?;
        for (id, v) in extra.iter() {
            vectors.push(id, v)?;
        }
    }
    for set in evals {
        let path = eval.get(&set.lang).ok_or_else(|| {
            ExperimentError::Config(format!(
                "no precomputed eval store for `{}` in {}",
                set.lang,
                database.display()
            ))
        })?;
        let store = load_vector_store(path)?;
        store.check_encoder(&name)?;
        encoder.add_eval_set(set, &store)?;
    }
    Ok((encoder, vectors))
}

/// What happened to one evaluation example. Scores are those the
/// example would get if the match were answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub id: String,
    pub result: MatchResult,
    /// Translated answer of the top candidate.
    pub answer: Option<String>,
    pub em_if_answered: u8,
    pub f1_if_answered: f64,
    pub error: Option<String>,
}

impl ExampleOutcome {
    pub fn answered(&self, threshold: f64) -> bool {
        self.answer.is_some() && self.result.confidence >= threshold
    }

    pub fn prediction(&self, threshold: f64) -> &str {
        match &self.answer {
            Some(a) if self.answered(threshold) => a,
            _ => NO_ANSWER,
        }
    }
}

impl Prepared {
    pub fn index_for(&self, db: &Database) -> Result<Indexes> {
        let build = |vectors: &VectorStore| -> Result<Index> {
            Ok(build_index(&vectors.subset(db.ids())?, self.config.index)?)
        };
        Ok(Indexes {
            main: build(&self.vectors)?,
            nmt: self.nmt.as_ref().map(|(_, v)| build(v)).transpose()?,
        })
    }

    fn engine<'a>(&'a self, indexes: &'a Indexes, db: &'a Database, lang: &str) -> PivotEngine<'a> {
        let nmt = match (&self.nmt, &indexes.nmt) {
            (Some((encoder, _)), Some(index)) => Some(NmtSearch {
                index,
                encoder: encoder.as_ref(),
            }),
            _ => None,
        };
        PivotEngine {
            index: &indexes.main,
            db,
            encoder: self.encoder.as_ref(),
            scorer: self.scorers.get(lang).map(|s| s.as_ref() as &dyn Scorer),
            translator: self.translator.as_deref(),
            nmt,
        }
    }

    fn translated_answer(&self, db: &Database, hrl_id: &str, lang: &str) -> Result<String> {
        let stored = lookup_answer(db, hrl_id)?;
        let english = stored
            .answers
            .first()
            .map(String::as_str)
            .unwrap_or_default();
        let t = translate_answer(
            english,
            lang,
            self.config.answer_strategy,
            &self.kg,
            self.translator.as_deref(),
        )?;
        Ok(t.text)
    }

    /// Matches every example without abstaining; thresholds are applied
    /// afterwards. Per-example failures are logged and score 0.
    pub fn evaluate(
        &self,
        indexes: &Indexes,
        db: &Database,
        eval: &EvalSet,
        strategy: Strategy,
    ) -> Vec<ExampleOutcome> {
        let engine = self.engine(indexes, db, &eval.lang);
        let queries: Vec<_> = eval.examples.iter().map(|e| &e.lrl_query).collect();
        let results = engine.match_batch(&queries, strategy, self.config.k, f64::NEG_INFINITY);
        results
            .into_iter()
            .zip(&eval.examples)
            .map(|(result, example)| {
                let failed = |error: String, result: MatchResult| {
                    log::warn!("{} `{}`: {error}", eval.lang, example.lrl_query.id);
                    ExampleOutcome {
                        id: example.lrl_query.id.clone(),
                        result,
                        answer: None,
                        em_if_answered: 0,
                        f1_if_answered: 0.0,
                        error: Some(error),
                    }
                };
                let result = match result {
                    Ok(r) => r,
                    Err(e) => return failed(e.to_string(), MatchResult::abstain(strategy)),
                };
                let Some(hrl_id) = result.hrl_id.clone() else {
                    return ExampleOutcome {
                        id: example.lrl_query.id.clone(),
                        result,
                        answer: None,
                        em_if_answered: 0,
                        f1_if_answered: 0.0,
                        error: None,
                    };
                };
                match self.translated_answer(db, &hrl_id, &eval.lang) {
                    Ok(answer) => {
                        let score = answer_score(&answer, &example.gold_answers, &eval.lang);
                        ExampleOutcome {
                            id: example.lrl_query.id.clone(),
                            result,
                            answer: Some(answer),
                            em_if_answered: score.em,
                            f1_if_answered: score.f1,
                            error: None,
                        }
                    }
                    Err(e) => failed(e.to_string(), result),
                }
            })
            .collect()
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(jobs) = self.config.jobs {
            builder = builder.num_threads(jobs);
        }
        builder
            .build()
            .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))
    }
}

fn language_metrics(
    outcomes: &[ExampleOutcome],
    eval: &EvalSet,
    threshold: f64,
) -> Result<BTreeMap<String, f64>> {
    let results: Vec<MatchResult> = outcomes
        .iter()
        .map(|o| {
            let mut r = o.result.clone();
            if !o.answered(threshold) {
                r.hrl_id = None;
            }
            r
        })
        .collect();
    let n = outcomes.len().max(1) as f64;
    let mut f1 = 0.0;
    let mut em = 0.0;
    let mut answered = 0usize;
    for (o, example) in outcomes.iter().zip(&eval.examples) {
        let score = if o.error.is_some() {
            None
        } else if o.answered(threshold) {
            answered += 1;
            Some((o.em_if_answered as f64, o.f1_if_answered))
        } else {
            let s = answer_score(NO_ANSWER, &example.gold_answers, &eval.lang);
            Some((s.em as f64, s.f1))
        };
        if let Some((e, f)) = score {
            em += e;
            f1 += f;
        }
    }
    Ok([
        (
            MATCH_ACCURACY.to_owned(),
            matching_accuracy(&results, eval)?,
        ),
        (END_TO_END_F1.to_owned(), f1 / n),
        (END_TO_END_EM.to_owned(), em / n),
        (ANSWERED_FRACTION.to_owned(), answered as f64 / n),
    ]
    .into_iter()
    .collect())
}

/// End-to-end scores when every parallel example is matched to its gold
/// HRL query; examples without one predict No-Answer.
fn perfect_metrics(prepared: &Prepared, eval: &EvalSet) -> BTreeMap<String, f64> {
    let n = eval.len().max(1) as f64;
    let (mut em, mut f1) = (0.0, 0.0);
    for example in &eval.examples {
        let prediction = match &example.gold_hrl_id {
            Some(id) if example.is_answerable() => {
                match prepared.translated_answer(&prepared.db, id, &eval.lang) {
                    Ok(a) => a,
                    Err(e) => {
                        log::warn!("{} `{}`: {e}", eval.lang, example.lrl_query.id);
                        continue;
                    }
                }
            }
            _ => NO_ANSWER.to_owned(),
        };
        let s = answer_score(&prediction, &example.gold_answers, &eval.lang);
        em += s.em as f64;
        f1 += s.f1;
    }
    [
        (END_TO_END_F1.to_owned(), f1 / n),
        (END_TO_END_EM.to_owned(), em / n),
    ]
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct EndToEndRun {
    pub report: EvalReport,
    /// Outcomes per (strategy, language).
    pub outcomes: BTreeMap<(Strategy, String), Vec<ExampleOutcome>>,
}

pub fn run_end_to_end(config: &ExperimentConfig) -> Result<EndToEndRun> {
    let prepared = prepare(config)?;
    run_end_to_end_prepared(&prepared)
}

pub fn run_end_to_end_prepared(prepared: &Prepared) -> Result<EndToEndRun> {
    let config = &prepared.config;
    let threshold = config.threshold.unwrap_or(f64::NEG_INFINITY);
    let index = prepared.index_for(&prepared.db)?;
    let pool = prepared.thread_pool()?;
    let mut report = EvalReport::new(prepared.groups.clone());
    report.fingerprint = Some(config.fingerprint());
    let mut outcomes = BTreeMap::new();
    for &strategy in &config.strategies {
        let mut per_language = BTreeMap::new();
        for eval in &prepared.evals {
            let run = pool.install(|| prepared.evaluate(&index, &prepared.db, eval, strategy));
            per_language.insert(eval.lang.clone(), language_metrics(&run, eval, threshold)?);
            outcomes.insert((strategy, eval.lang.clone()), run);
        }
        report.push_row(ReportRow {
            label: strategy.to_string(),
            per_language,
        })?;
    }
    let per_language = prepared
        .evals
        .iter()
        .map(|eval| (eval.lang.clone(), perfect_metrics(prepared, eval)))
        .collect();
    report.push_row(ReportRow {
        label: PERFECT_LABEL.to_owned(),
        per_language,
    })?;
    Ok(EndToEndRun { report, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub metric: String,
    /// A language tag, or `group:<name>` for a resource-group mean.
    pub language: String,
    pub strategy: Strategy,
    pub x: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `y[s][i]` is the value for seed `seeds[s]` at `x[i]`.
    pub y: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    pub mean: Vec<f64>,
    /// Set where threshold calibration was infeasible (value recorded as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub infeasible: Vec<Vec<bool>>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl SweepCurve {
    fn new(
        metric: &str,
        language: String,
        strategy: Strategy,
        x: Vec<f64>,
        seeds: Vec<u64>,
        y: Vec<Vec<f64>>,
    ) -> Self {
        let columns = |i: usize| y.iter().map(|row| row[i]).collect::<Vec<f64>>();
        let median = (0..x.len()).map(|i| median(&mut columns(i))).collect();
        let mean = (0..x.len())
            .map(|i| {
                let mut c = columns(i);
                c.sort_by(f64::total_cmp);
                c.iter().sum::<f64>() / c.len() as f64
            })
            .collect();
        Self {
            metric: metric.to_owned(),
            language,
            strategy,
            x,
            seeds,
            y,
            median,
            mean,
            infeasible: Vec::new(),
        }
    }
}

fn group_curves(
    per_language: &BTreeMap<(Strategy, String), Vec<Vec<f64>>>,
    groups: &LanguageGroups,
    metric: &str,
    x: &[f64],
    seeds: &[u64],
) -> Vec<SweepCurve> {
    let mut out = Vec::new();
    let strategies: BTreeSet<Strategy> = per_language.keys().map(|(s, _)| *s).collect();
    for strategy in strategies {
        let mut members: BTreeMap<String, Vec<&Vec<Vec<f64>>>> = BTreeMap::new();
        for ((s, lang), y) in per_language {
            if *s != strategy {
                continue;
            }
            let group = groups.group_of(lang).expect("languages validated");
            members.entry(format!("group:{group}")).or_default().push(y);
            members.entry("group:all".to_owned()).or_default().push(y);
        }
        for (name, ys) in members {
            let y = (0..seeds.len())
                .map(|s| {
                    (0..x.len())
                        .map(|i| ys.iter().map(|l| l[s][i]).sum::<f64>() / ys.len() as f64)
                        .collect()
                })
                .collect();
            out.push(SweepCurve::new(
                metric,
                name,
                strategy,
                x.to_vec(),
                seeds.to_vec(),
                y,
            ));
        }
    }
    out
}

/// Matching accuracy as distractors are added to the database.
pub fn run_distractor_sweep(config: &ExperimentConfig) -> Result<Vec<SweepCurve>> {
    run_distractor_sweep_prepared(&prepare(config)?)
}

pub fn run_distractor_sweep_prepared(prepared: &Prepared) -> Result<Vec<SweepCurve>> {
    let config = &prepared.config;
    if config.distractor_grid.is_empty() {
        return Err(ExperimentError::Config(
            "distractor grid must not be empty".into(),
        ));
    }
    let max = *config.distractor_grid.iter().max().expect("non-empty");
    let pool = match &prepared.pool {
        Some(p) => p.clone(),
        None if max == 0 => prepared.db.clone(),
        None => {
            return Err(ExperimentError::Config(
                "distractor sweep needs a distractor pool".into(),
            ))
        }
    };
    let jobs: Vec<(usize, usize)> = (0..config.seeds.len())
        .flat_map(|s| (0..config.distractor_grid.len()).map(move |i| (s, i)))
        .collect();
    let workers = prepared.thread_pool()?;
    type Point = BTreeMap<(Strategy, String), f64>;
    let points: Vec<Result<Point>> = workers.install(|| {
        jobs.par_iter()
            .map(|&(s, i)| {
                let seed = config.seeds[s];
                let db = inject_distractors(&prepared.db, &pool, config.distractor_grid[i], seed)?;
                let index = prepared.index_for(&db)?;
                let mut out = BTreeMap::new();
                for &strategy in &config.strategies {
                    for eval in &prepared.evals {
                        let run = prepared.evaluate(&index, &db, eval, strategy);
                        let results: Vec<MatchResult> = run.into_iter().map(|o| o.result).collect();
                        out.insert(
                            (strategy, eval.lang.clone()),
                            matching_accuracy(&results, eval)?,
                        );
                    }
                }
                Ok(out)
            })
            .collect()
    });

    let x: Vec<f64> = config.distractor_grid.iter().map(|&n| n as f64).collect();
    let mut per_language: BTreeMap<(Strategy, String), Vec<Vec<f64>>> = BTreeMap::new();
    for (&(s, i), point) in jobs.iter().zip(points) {
        for (key, value) in point? {
            let series = per_language
                .entry(key)
                .or_insert_with(|| vec![vec![0.0; x.len()]; config.seeds.len()]);
            series[s][i] = value;
        }
    }
    let mut curves = group_curves(
        &per_language,
        &prepared.groups,
        MATCH_ACCURACY,
        &x,
        &config.seeds,
    );
    for ((strategy, lang), y) in per_language {
        curves.push(SweepCurve::new(
            MATCH_ACCURACY,
            lang,
            strategy,
            x.clone(),
            config.seeds.clone(),
            y,
        ));
    }
    Ok(curves)
}

/// Recall at the target precision as parallel HRL queries are removed.
pub fn run_alignment_sweep(config: &ExperimentConfig) -> Result<Vec<SweepCurve>> {
    run_alignment_sweep_prepared(&prepare(config)?)
}

pub const RECALL_AT_PRECISION: &str = "recall_at_precision";

fn calibrated_recall(
    outcomes: &[ExampleOutcome],
    eval: &EvalSet,
    target: f64,
    mode: CalibrationMode,
    seed: u64,
) -> Result<(f64, bool)> {
    let (calib, measure): (Vec<usize>, Vec<usize>) = match mode {
        CalibrationMode::Oracle => ((0..outcomes.len()).collect(), (0..outcomes.len()).collect()),
        CalibrationMode::HeldOut => {
            let mut order: Vec<usize> = (0..outcomes.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xca1b));
            let half = order.len() / 2;
            let (a, b) = order.split_at(half);
            (a.to_vec(), b.to_vec())
        }
    };
    let answerable = measure
        .iter()
        .filter(|&&i| eval.examples[i].is_answerable())
        .count();
    if calib.is_empty() || answerable == 0 {
        return Ok((0.0, true));
    }
    let score = |i: usize| outcomes[i].result.confidence;
    let scores: Vec<f64> = calib.iter().map(|&i| score(i)).collect();
    let correct: Vec<bool> = calib
        .iter()
        .map(|&i| outcomes[i].answer.is_some() && outcomes[i].em_if_answered == 1)
        .collect();
    let Some(cal) = calibrate_threshold(&scores, &correct, target)? else {
        return Ok((0.0, true));
    };
    let scores: Vec<f64> = measure.iter().map(|&i| score(i)).collect();
    let f1s: Vec<f64> = measure
        .iter()
        .map(|&i| {
            if outcomes[i].answer.is_some() {
                outcomes[i].f1_if_answered
            } else {
                0.0
            }
        })
        .collect();
    Ok((
        recall_at_threshold(&scores, &f1s, cal.threshold, answerable)?,
        false,
    ))
}

pub fn run_alignment_sweep_prepared(prepared: &Prepared) -> Result<Vec<SweepCurve>> {
    let config = &prepared.config;
    if config.keep_grid.is_empty() {
        return Err(ExperimentError::Config(
            "keep grid must not be empty".into(),
        ));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..config.seeds.len())
        .flat_map(|s| {
            (0..config.keep_grid.len())
                .flat_map(move |i| (0..prepared.evals.len()).map(move |l| (s, i, l)))
        })
        .collect();
    let workers = prepared.thread_pool()?;
    type Point = Vec<(Strategy, f64, bool)>;
    let points: Vec<Result<Point>> = workers.install(|| {
        jobs.par_iter()
            .map(|&(s, i, l)| {
                let seed = config.seeds[s];
                let eval = &prepared.evals[l];
                let (db, eval) = dropout_parallel(
                    &prepared.db,
                    eval,
                    config.keep_grid[i],
                    seed,
                    config.dropout_mode,
                )?;
                if db.is_empty() {
                    return Ok(config
                        .strategies
                        .iter()
                        .map(|&st| (st, 0.0, true))
                        .collect());
                }
                let index = prepared.index_for(&db)?;
                config
                    .strategies
                    .iter()
                    .map(|&strategy| {
                        let run = prepared.evaluate(&index, &db, &eval, strategy);
                        let (recall, infeasible) = calibrated_recall(
                            &run,
                            &eval,
                            config.target_precision,
                            config.calibration,
                            seed,
                        )?;
                        Ok((strategy, recall, infeasible))
                    })
                    .collect()
            })
            .collect()
    });

    let x = config.keep_grid.clone();
    let blank = || {
        (
            vec![vec![0.0; x.len()]; config.seeds.len()],
            vec![vec![false; x.len()]; config.seeds.len()],
        )
    };
    // per (strategy, language): recall and infeasibility indexed [seed][point]
    type Series = (Vec<Vec<f64>>, Vec<Vec<bool>>);
    let mut series: BTreeMap<(Strategy, String), Series> = BTreeMap::new();
    for (&(s, i, l), point) in jobs.iter().zip(points) {
        for (strategy, recall, infeasible) in point? {
            let entry = series
                .entry((strategy, prepared.evals[l].lang.clone()))
                .or_insert_with(blank);
            entry.0[s][i] = recall;
            entry.1[s][i] = infeasible;
        }
    }
    Ok(series
        .into_iter()
        .map(|((strategy, lang), (y, infeasible))| {
            let mut curve = SweepCurve::new(
                RECALL_AT_PRECISION,
                lang,
                strategy,
                x.clone(),
                config.seeds.clone(),
                y,
            );
            curve.infeasible = infeasible;
            curve
        })
        .collect())
}

pub fn curves_csv(curves: &[SweepCurve]) -> String {
    let mut out = String::from("x,seed,y,metric,language,strategy\n");
    for c in curves {
        for (s, seed) in c.seeds.iter().enumerate() {
            for (i, x) in c.x.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{x},{seed},{},{},{},{}",
                    c.y[s][i], c.metric, c.language, c.strategy
                );
            }
        }
    }
    out
}

fn curves_report(curves: &[SweepCurve], groups: &LanguageGroups) -> (String, String) {
    let mut text = String::new();
    let mut csv = String::from("language,group,metric,value\n");
    for c in curves {
        let _ = writeln!(
            text,
            "{} {} {} (median over {} seeds)",
            c.strategy,
            c.language,
            c.metric,
            c.seeds.len()
        );
        for (i, x) in c.x.iter().enumerate() {
            let flagged = c.infeasible.iter().filter(|row| row[i]).count();
            let note = if flagged > 0 {
                format!("  infeasible for {flagged} seed(s)")
            } else {
                String::new()
            };
            let _ = writeln!(
                text,
                "  x={x:<8} median={:.4} mean={:.4}{note}",
                c.median[i], c.mean[i]
            );
            let group = match c.language.strip_prefix("group:") {
                Some(g) => g.to_owned(),
                None => groups
                    .group_of(&c.language)
                    .map_or(String::new(), |g| g.to_string()),
            };
            let _ = writeln!(
                csv,
                "{},{group},{}.{}@{x}.median,{}",
                c.language, c.strategy, c.metric, c.median[i]
            );
        }
    }
    (text, csv)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_common(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut resolved = serde_json::to_value(config).expect("serializable config");
    if let Value::Object(map) = &mut resolved {
        map.insert("fingerprint".into(), json!(config.fingerprint()));
    }
    let pretty = serde_json::to_string_pretty(&resolved).expect("serializable json");
    write(&dir.join("config.resolved.json"), &(pretty + "\n"))
}

/// `report.txt`, `report.csv`, `plotdata.json` and `config.resolved.json`.
/// `curves.csv` is written empty (header only) for end-to-end runs.
pub fn write_end_to_end(dir: &Path, config: &ExperimentConfig, run: &EndToEndRun) -> Result<()> {
    write_common(dir, config)?;
    write(&dir.join("report.txt"), &run.report.render_table())?;
    write(&dir.join("report.csv"), &run.report.to_csv())?;
    write(&dir.join("curves.csv"), &curves_csv(&[]))?;
    let plot = serde_json::to_string_pretty(
        &json!({"fingerprint": config.fingerprint(), "report": run.report}),
    )
    .expect("serializable report");
    write(&dir.join("plotdata.json"), &(plot + "\n"))
}

pub fn write_sweep(
    dir: &Path,
    config: &ExperimentConfig,
    groups: &LanguageGroups,
    curves: &[SweepCurve],
) -> Result<()> {
    write_common(dir, config)?;
    let (text, csv) = curves_report(curves, groups);
    let header = format!("config {}\n", config.fingerprint());
    write(&dir.join("report.txt"), &(header + &text))?;
    write(&dir.join("report.csv"), &csv)?;
    write(&dir.join("curves.csv"), &curves_csv(curves))?;
    let plot = serde_json::to_string_pretty(
        &json!({"fingerprint": config.fingerprint(), "curves": curves}),
    )
    .expect("serializable curves");
    write(&dir.join("plotdata.json"), &(plot + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerRecord, EvalExample, IngestOptions, QueryRecord};
    use crate::synthetic::SyntheticLanguage;

    fn toy_files(dir: &Path, gold_in_db: bool, km_label: bool) -> ExperimentConfig {
        let rows = [
            ("q1", "who wrote hamlet", "William Shakespeare"),
            ("q2", "capital of france", "Paris"),
            ("q3", "largest planet", "Jupiter"),
            ("q4", "first man on the moon", "Neil Armstrong"),
            ("q5", "boiling point of water", "100 degrees"),
        ];
        let mut db = String::new();
        let mut eval = String::new();
        let mut kg = String::new();
        for (i, (id, q, a)) in rows.iter().enumerate() {
            let stored_id = if gold_in_db {
                id.to_string()
            } else {
                format!("other-{id}")
            };
            let stored_q = if gold_in_db {
                q.to_string()
            } else {
                format!("unrelated question {i}")
            };
            let stored_a = if gold_in_db {
                a.to_string()
            } else {
                "Ωμέγα".to_string()
            };
            db +=
                &json!({"id": stored_id, "question": stored_q, "answers": [stored_a]}).to_string();
            db.push('\n');
            let label = format!("{a} (km)");
            let km_answer = if km_label || i > 0 {
                label.clone()
            } else {
                a.to_string()
            };
            eval += &json!({"pid": id, "queries": {"en": q, "km": q}, "answers": {"en": [a], "km": [km_answer]}}).to_string();
            eval.push('\n');
            kg += &format!("E{i}\ten\t{a}\n");
            if km_label || i > 0 {
                kg += &format!("E{i}\tkm\t{label}\n");
            }
        }
        fs::write(dir.join("db.jsonl"), db).unwrap();
        fs::write(dir.join("eval.jsonl"), eval).unwrap();
        fs::write(dir.join("kg.tsv"), kg).unwrap();
        ExperimentConfig {
            database: Some(dir.join("db.jsonl")),
            eval: Some(dir.join("eval.jsonl")),
            languages: vec!["km".into()],
            kg: Some(dir.join("kg.tsv")),
            scorer: ScorerSpec::Oracle,
            strategies: Strategy::ALL.to_vec(),
            translator: TranslatorSpec::Identity,
            jobs: Some(2),
            ..ExperimentConfig::default()
        }
    }

    fn value(report: &EvalReport, label: &str, lang: &str, metric: &str) -> f64 {
        report.row(label).unwrap().per_language[lang][metric]
    }

    #[test]
    fn lossless_toy_pipeline_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_files(dir.path(), true, true);
        let run = run_end_to_end(&config).unwrap();
        for label in ["mips", "nmt_mips", "rm_mips", PERFECT_LABEL] {
            assert_eq!(
                value(&run.report, label, "km", END_TO_END_F1),
                1.0,
                "{label}"
            );
        }
        assert_eq!(value(&run.report, "rm_mips", "km", MATCH_ACCURACY), 1.0);
    }

    #[test]
    fn withheld_gold_scores_zero_including_ceiling() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_files(dir.path(), false, true);
        let run = run_end_to_end(&config).unwrap();
        for label in ["mips", "rm_mips", PERFECT_LABEL] {
            assert_eq!(
                value(&run.report, label, "km", END_TO_END_F1),
                0.0,
                "{label}"
            );
        }
    }

    #[test]
    fn ceiling_with_one_missing_label() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_files(dir.path(), true, false);
        let run = run_end_to_end(&config).unwrap();
        // Four answers translate through their km label. The fifth falls
        // back to "William Shakespeare", and its km gold is the English text.
        assert_eq!(value(&run.report, PERFECT_LABEL, "km", END_TO_END_F1), 1.0);

        // Now make the gold the (missing) km label. Khmer is scored per
        // character: 18 shared of 20 gold characters gives F1 = 18/19.
        let eval = fs::read_to_string(dir.path().join("eval.jsonl")).unwrap();
        let eval = eval.replacen(
            r#""km":["William Shakespeare"]"#,
            r#""km":["William Shakespeare (km)"]"#,
            1,
        );
        fs::write(dir.path().join("eval.jsonl"), eval).unwrap();
        let run = run_end_to_end(&config).unwrap();
        let expected = (4.0 + 18.0 / 19.0) / 5.0;
        let got = value(&run.report, PERFECT_LABEL, "km", END_TO_END_F1);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    fn synthetic_config(queries: usize, distractors: usize) -> ExperimentConfig {
        ExperimentConfig {
            synthetic: Some(SyntheticSpec {
                queries,
                distractors,
                vocab_size: 400,
                languages: vec![
                    SyntheticLanguage::new("es", 0.3, 1.0),
                    SyntheticLanguage::new("ms", 0.5, 1.0),
                ],
                ..SyntheticSpec::default()
            }),
            scorer: ScorerSpec::Oracle,
            strategies: vec![Strategy::Mips, Strategy::RmMips],
            seeds: vec![1, 2, 3],
            jobs: Some(2),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn ceiling_bounds_every_strategy() {
        let run = run_end_to_end(&synthetic_config(150, 0)).unwrap();
        for lang in ["es", "ms"] {
            let ceiling = value(&run.report, PERFECT_LABEL, lang, END_TO_END_F1);
            for s in ["mips", "rm_mips"] {
                assert!(value(&run.report, s, lang, END_TO_END_F1) <= ceiling);
            }
        }
    }

    #[test]
    fn distractor_grid_zero_equals_baseline() {
        let mut config = synthetic_config(120, 200);
        config.distractor_grid = vec![0, 200];
        let curves = run_distractor_sweep(&config).unwrap();
        let baseline = run_end_to_end(&config).unwrap();
        for c in curves.iter().filter(|c| !c.language.starts_with("group:")) {
            let base = value(
                &baseline.report,
                c.strategy.as_str(),
                &c.language,
                MATCH_ACCURACY,
            );
            for row in &c.y {
                assert_eq!(row[0], base);
            }
        }
        assert!(curves.iter().any(|c| c.language == "group:low"));
        assert!(curves.iter().any(|c| c.language == "group:all"));
    }

    #[test]
    fn sweeps_are_deterministic_across_worker_counts() {
        let mut config = synthetic_config(100, 150);
        config.distractor_grid = vec![0, 150];
        config.keep_grid = vec![0.0, 0.5, 1.0];
        let a = curves_csv(&run_distractor_sweep(&config).unwrap());
        let b = curves_csv(&run_alignment_sweep(&config).unwrap());
        config.jobs = Some(1);
        assert_eq!(a, curves_csv(&run_distractor_sweep(&config).unwrap()));
        assert_eq!(b, curves_csv(&run_alignment_sweep(&config).unwrap()));
    }

    #[test]
    fn alignment_extremes() {
        let mut config = synthetic_config(150, 0);
        config.languages = vec!["es".into()];
        config.strategies = vec![Strategy::RmMips];
        config.keep_grid = vec![0.0, 1.0];
        let curves = run_alignment_sweep(&config).unwrap();
        assert_eq!(curves.len(), 1);
        let c = &curves[0];
        for (row, flags) in c.y.iter().zip(&c.infeasible) {
            assert_eq!(row[0], 0.0);
            assert!(flags[0]);
            assert!(row[1] > 0.95, "{row:?}");
        }
    }

    #[test]
    fn held_out_calibration_runs() {
        let mut config = synthetic_config(150, 0);
        config.strategies = vec![Strategy::RmMips];
        config.keep_grid = vec![0.5];
        config.calibration = CalibrationMode::HeldOut;
        let curves = run_alignment_sweep(&config).unwrap();
        for c in curves {
            assert!((c.median[0] - 0.5).abs() < 0.15, "{:?}", c.median);
        }
    }

    #[test]
    fn adapter_failure_scores_example_zero() {
        let db = Database::from_records(
            "t",
            [("h1", "alpha beta"), ("h2", "gamma delta")].map(|(id, text)| {
                (
                    QueryRecord {
                        id: id.into(),
                        text: text.into(),
                        lang: "en".into(),
                    },
                    AnswerRecord {
                        query_id: id.into(),
                        answers: vec![format!("ans {id}")],
                    },
                )
            }),
            &IngestOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("db.jsonl"), db.canonical_jsonl()).unwrap();
        let eval = [
            json!({"pid": "h1", "queries": {"th": "alpha beta"}, "answers": {"th": ["ans h1"]}}),
            json!({"pid": "h2", "queries": {"th": "gamma delta"}, "answers": {"th": ["ans h2"]}}),
        ]
        .map(|v| v.to_string())
        .join("\n");
        fs::write(dir.path().join("eval.jsonl"), eval).unwrap();
        // scorer that fails on the second request
        let script = r#"read -r l; echo '{"score": 1.0}'; read -r l; echo '{"error": "injected"}'; while read -r l; do echo '{"score": 0.5}'; done"#;
        let config = ExperimentConfig {
            database: Some(dir.path().join("db.jsonl")),
            eval: Some(dir.path().join("eval.jsonl")),
            languages: vec!["th".into()],
            scorer: ScorerSpec::Process(ProcessSpec {
                command: vec!["sh".into(), "-c".into(), script.into()],
                max_in_flight: 1,
                timeout_ms: Some(5_000),
            }),
            k: 1,
            jobs: Some(1),
            ..ExperimentConfig::default()
        };
        let run = run_end_to_end(&config).unwrap();
        let outcomes = &run.outcomes[&(Strategy::RmMips, "th".to_owned())];
        assert!(outcomes[0].error.is_none());
        assert!(outcomes[1].error.as_deref().unwrap().contains("injected"));
        assert_eq!(value(&run.report, "rm_mips", "th", END_TO_END_F1), 0.5);
    }

    #[test]
    fn adapter_startup_failure_names_the_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = toy_files(dir.path(), true, true);
        config.scorer = ScorerSpec::Process(ProcessSpec {
            command: vec!["/nonexistent/scorer-bin".into()],
            max_in_flight: 1,
            timeout_ms: None,
        });
        let err = run_end_to_end(&config).err().unwrap();
        assert!(
            err.to_string().contains("scorer:/nonexistent/scorer-bin"),
            "{err}"
        );
        assert_eq!(err.code(), "adapter");
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = synthetic_config(10, 0);
        let cases = [
            ExperimentConfig {
                seeds: vec![],
                ..base.clone()
            },
            ExperimentConfig {
                keep_grid: vec![1.5],
                ..base.clone()
            },
            ExperimentConfig {
                strategies: vec![Strategy::NmtMips],
                ..base.clone()
            },
            ExperimentConfig {
                answer_strategy: AnswerStrategy::MtOnly,
                ..base.clone()
            },
            ExperimentConfig {
                synthetic: None,
                ..base.clone()
            },
            ExperimentConfig {
                target_precision: 0.0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(
                matches!(c.validate(), Err(ExperimentError::Config(_))),
                "{c:?}"
            );
        }
        base.validate().unwrap();
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let a = synthetic_config(10, 0);
        let b = ExperimentConfig {
            out: Some("/tmp/x".into()),
            jobs: Some(7),
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ExperimentConfig { k: 3, ..a.clone() };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn config_json_defaults_and_unknown_fields() {
        let config: ExperimentConfig = serde_json::from_str(r#"{"synthetic": {"queries": 5, "languages": [], "distractors": 0, "vocab_size": 50, "min_words": 3, "max_words": 4, "seed": 1}}"#).unwrap();
        assert_eq!(config.k, DEFAULT_K);
        assert_eq!(config.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(config.keep_grid.len(), 10);
        assert_eq!(config.answer_strategy, AnswerStrategy::KgOnly);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn curves_csv_has_one_row_per_seed_and_grid_point() {
        let curve = SweepCurve::new(
            RECALL_AT_PRECISION,
            "ms".into(),
            Strategy::RmMips,
            vec![0.1, 0.2],
            vec![1, 2, 3],
            vec![vec![0.1, 0.2], vec![0.3, 0.1], vec![0.2, 0.4]],
        );
        assert_eq!(curve.median, vec![0.2, 0.2]);
        let csv = curves_csv(&[curve]);
        assert_eq!(csv.lines().count(), 1 + 6);
        assert_eq!(
            csv.lines().nth(1),
            Some("0.1,1,0.1,recall_at_precision,ms,rm_mips")
        );
    }

    #[test]
    fn unanswerable_examples_reward_abstention() {
        let eval = EvalSet::new(
            "th",
            vec![EvalExample {
                lrl_query: QueryRecord {
                    id: "x".into(),
                    text: "t".into(),
                    lang: "th".into(),
                },
                parallel_id: None,
                gold_hrl_id: None,
                gold_answers: vec![],
            }],
        );
        let outcome = ExampleOutcome {
            id: "x".into(),
            result: MatchResult {
                hrl_id: Some("h".into()),
                confidence: 0.4,
                strategy: Strategy::Mips,
                candidates: vec![],
            },
            answer: Some("something".into()),
            em_if_answered: 0,
            f1_if_answered: 0.0,
            error: None,
        };
        let answered = language_metrics(std::slice::from_ref(&outcome), &eval, 0.0).unwrap();
        assert_eq!(answered[END_TO_END_F1], 0.0);
        let abstained = language_metrics(&[outcome], &eval, 0.5).unwrap();
        assert_eq!(abstained[END_TO_END_F1], 1.0);
        assert_eq!(abstained[ANSWERED_FRACTION], 0.0);
    }
}
