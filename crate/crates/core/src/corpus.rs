//! The HRL query→answer database and LRL evaluation sets.
//!
//! A [`Database`] maps stable ids to a query and its answers. Rows whose
//! normalized query text collide are merged at ingest (answers unioned) and
//! the dropped ids are kept as aliases of the surviving record, so parallel
//! ids in evaluation files still resolve.
//!
//! The two experiment operators, [`inject_distractors`] and
//! [`dropout_parallel`], return new values and never mutate their inputs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::normalize_query;

/// Language tag of the high-resource side of every database.
pub const HRL_LANG: &str = "en";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// `line` is the physical line for JSONL inputs and the 1-based record
    /// ordinal for nested JSON inputs.
    #[error("malformed row at line {line}: field `{field}`: {reason}")]
    MalformedRow {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("empty database")]
    Empty,
    #[error("duplicate id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("unknown language `{requested}`; available: {}", .available.join(", "))]
    UnknownLanguage {
        requested: String,
        available: Vec<String>,
    },
    #[error("insufficient distractors: requested {requested}, {available} available after dedup")]
    InsufficientDistractors { requested: usize, available: usize },
    #[error("keep fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("query id `{0}` not found")]
    NotFound(String),
    #[error("unknown format `{0}`")]
    UnknownFormat(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    pub lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseMeta {
    pub source: String,
    /// Seconds since the unix epoch; 0 for in-memory constructions.
    pub ingested_at: u64,
    pub record_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatabaseFormat {
    NqOpenJsonl,
    SquadJson,
    GenericJsonl,
}

impl FromStr for DatabaseFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nq_open_jsonl" => Ok(Self::NqOpenJsonl),
            "squad_json" => Ok(Self::SquadJson),
            "generic_jsonl" => Ok(Self::GenericJsonl),
            other => Err(CorpusError::UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFormat {
    MkqaJsonl,
    XquadJson,
    GenericParallelJsonl,
}

impl FromStr for EvalFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mkqa_jsonl" => Ok(Self::MkqaJsonl),
            "xquad_json" => Ok(Self::XquadJson),
            "generic_parallel_jsonl" => Ok(Self::GenericParallelJsonl),
            other => Err(CorpusError::UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Merge rows whose normalized query text collide.
    pub dedup: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { dedup: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Database {
    records: BTreeMap<String, (QueryRecord, AnswerRecord)>,
    /// Ids merged away at ingest, pointing at the surviving record.
    aliases: BTreeMap<String, String>,
    pub meta: DatabaseMeta,
}

#[derive(Serialize)]
struct CanonicalRow<'a> {
    id: &'a str,
    question: &'a str,
    answers: &'a [String],
}

impl Database {
    /// Builds a database from already-parsed records, applying the same
    /// validation and duplicate merging as file ingest.
    pub fn from_records<I>(source: &str, records: I, options: &IngestOptions) -> Result<Self>
    where
        I: IntoIterator<Item = (QueryRecord, AnswerRecord)>,
    {
        let rows = records
            .into_iter()
            .enumerate()
            .map(|(i, (q, a))| RawRow {
                line: i + 1,
                id: Some(q.id),
                question: q.text,
                answers: a.answers,
            })
            .collect::<Vec<_>>();
        Self::from_rows(source, rows, options, 0)
    }

    fn from_rows(
        source: &str,
        rows: Vec<RawRow>,
        options: &IngestOptions,
        ingested_at: u64,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut records: BTreeMap<String, (QueryRecord, AnswerRecord)> = BTreeMap::new();
        let mut aliases = BTreeMap::new();
        let mut by_text: HashMap<String, String> = HashMap::new();

        for row in rows {
            validate_row(&row)?;
            let id = row
                .id
                .clone()
                .unwrap_or_else(|| format!("{source}:{}", row.line));
            let key = normalize_query(&row.question);

            let existing = if options.dedup {
                by_text.get(&key).cloned()
            } else {
                None
            };
            if let Some(target) = existing {
                let (_, answers) = records.get_mut(&target).expect("indexed record");
                union_into(&mut answers.answers, row.answers);
                if id != target {
                    if records.contains_key(&id) || aliases.contains_key(&id) {
                        return Err(CorpusError::DuplicateId { id, line: row.line });
                    }
                    aliases.insert(id, target);
                }
                continue;
            }
            if records.contains_key(&id) || aliases.contains_key(&id) {
                return Err(CorpusError::DuplicateId { id, line: row.line });
            }
            let mut answers = Vec::new();
            union_into(&mut answers, row.answers);
            by_text.entry(key).or_insert_with(|| id.clone());
            records.insert(
                id.clone(),
                (
                    QueryRecord {
                        id: id.clone(),
                        text: row.question,
                        lang: HRL_LANG.to_owned(),
                    },
                    AnswerRecord {
                        query_id: id,
                        answers,
                    },
                ),
            );
        }

        let record_count = records.len();
        Ok(Self {
            records,
            aliases,
            meta: DatabaseMeta {
                source: source.to_owned(),
                ingested_at,
                record_count,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Maps an id (possibly merged away at ingest) to the id of the record
    /// holding its answers.
    pub fn resolve<'a>(&'a self, id: &'a str) -> Option<&'a str> {
        if let Some((key, _)) = self.records.get_key_value(id) {
            return Some(key.as_str());
        }
        self.aliases.get(id).map(String::as_str)
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.resolve(id)
            .and_then(|id| self.records.get(id))
            .map(|(q, _)| q)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Records in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&QueryRecord, &AnswerRecord)> {
        self.records.values().map(|(q, a)| (q, a))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    /// Sorted-by-id JSONL, one `{"id","question","answers"}` object per
    /// line. Re-ingesting the output as `generic_jsonl` reproduces the
    /// records.
    pub fn canonical_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, (q, a)) in &self.records {
            let row = CanonicalRow {
                id,
                question: &q.text,
                answers: &a.answers,
            };
            out.push_str(&serde_json::to_string(&row).expect("serializable row"));
            out.push('\n');
        }
        out
    }

    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        file.write_all(self.canonical_jsonl().as_bytes())
            .map_err(|e| io_err(path, e))
    }

    fn normalized_texts(&self) -> HashSet<String> {
        self.records
            .values()
            .map(|(q, _)| normalize_query(&q.text))
            .collect()
    }

    fn with_records(
        &self,
        records: BTreeMap<String, (QueryRecord, AnswerRecord)>,
        source: String,
    ) -> Self {
        let aliases = self
            .aliases
            .iter()
            .filter(|(_, target)| records.contains_key(*target))
            .map(|(a, t)| (a.clone(), t.clone()))
            .collect();
        let record_count = records.len();
        Self {
            records,
            aliases,
            meta: DatabaseMeta {
                source,
                ingested_at: self.meta.ingested_at,
                record_count,
            },
        }
    }
}

fn union_into(target: &mut Vec<String>, answers: Vec<String>) {
    for answer in answers {
        if !target.contains(&answer) {
            target.push(answer);
        }
    }
}

fn validate_row(row: &RawRow) -> Result<()> {
    if row.question.trim().is_empty() {
        return Err(malformed(row.line, "question", "empty after trim"));
    }
    if row.answers.is_empty() {
        return Err(malformed(row.line, "answers", "no answers"));
    }
    if row.answers.iter().any(|a| a.is_empty()) {
        return Err(malformed(row.line, "answers", "empty answer string"));
    }
    Ok(())
}

#[derive(Debug)]
struct RawRow {
    line: usize,
    id: Option<String>,
    question: String,
    answers: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_owned(),
        source,
    }
}

fn malformed(line: usize, field: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRow {
        line,
        field: field.to_owned(),
        reason: reason.into(),
    }
}

fn source_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "db".to_owned())
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Non-blank lines of a JSONL file, parsed, with their 1-based line numbers.
fn read_jsonl(path: &Path) -> Result<Vec<(usize, Value)>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| malformed(i + 1, "<row>", format!("invalid json: {e}")))?;
        if !value.is_object() {
            return Err(malformed(i + 1, "<row>", "expected a json object"));
        }
        rows.push((i + 1, value));
    }
    Ok(rows)
}

fn read_json(path: &Path) -> Result<Value> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&raw).map_err(|e| malformed(1, "<file>", format!("invalid json: {e}")))
}

fn required_str(row: &Value, line: usize, field: &str) -> Result<String> {
    match row.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(malformed(line, field, "expected a string")),
        None => Err(malformed(line, field, "missing")),
    }
}

fn optional_id(row: &Value, line: usize, field: &str) -> Result<Option<String>> {
    match row.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(_) => Err(malformed(line, field, "expected a string or number")),
    }
}

fn string_list(value: Option<&Value>, line: usize, field: &str) -> Result<Vec<String>> {
    match value {
        Some(Value::Array(items)) => items
            .iter()
            .map(|item| match item {
                Value::String(s) => Ok(s.clone()),
                _ => Err(malformed(line, field, "expected an array of strings")),
            })
            .collect(),
        Some(_) => Err(malformed(line, field, "expected an array of strings")),
        None => Err(malformed(line, field, "missing")),
    }
}

/// Reads a database file in one of the supported layouts.
///
/// * `generic_jsonl`: `{"id": str?, "question": str, "answers": [str]}`
/// * `nq_open_jsonl`: `{"question": str, "answer": [str]}` (NQ-open release)
/// * `squad_json`: the SQuAD `data/paragraphs/qas` tree; unanswerable
///   SQuAD 2.0 questions are skipped.
pub fn ingest_database(path: &Path, format: DatabaseFormat) -> Result<Database> {
    ingest_database_with(path, format, &IngestOptions::default())
}

pub fn ingest_database_with(
    path: &Path,
    format: DatabaseFormat,
    options: &IngestOptions,
) -> Result<Database> {
    let rows = match format {
        DatabaseFormat::GenericJsonl => read_jsonl(path)?
            .into_iter()
            .map(|(line, row)| {
                Ok(RawRow {
                    line,
                    id: optional_id(&row, line, "id")?,
                    question: required_str(&row, line, "question")?,
                    answers: string_list(row.get("answers"), line, "answers")?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        DatabaseFormat::NqOpenJsonl => read_jsonl(path)?
            .into_iter()
            .map(|(line, row)| {
                Ok(RawRow {
                    line,
                    id: optional_id(&row, line, "id")?,
                    question: required_str(&row, line, "question")?,
                    answers: string_list(row.get("answer"), line, "answer")?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        DatabaseFormat::SquadJson => squad_rows(&read_json(path)?)?
            .into_iter()
            .filter(|r| !r.answers.is_empty())
            .map(|r| RawRow {
                line: r.ordinal,
                id: Some(r.id),
                question: r.question,
                answers: r.answers,
            })
            .collect(),
    };
    Database::from_rows(&source_name(path), rows, options, now_secs())
}

struct SquadQa {
    ordinal: usize,
    id: String,
    question: String,
    answers: Vec<String>,
}

fn squad_rows(root: &Value) -> Result<Vec<SquadQa>> {
    let data = root
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(1, "data", "missing or not an array"))?;
    let mut out = Vec::new();
    for article in data {
        let paragraphs = article
            .get("paragraphs")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(out.len() + 1, "paragraphs", "missing or not an array"))?;
        for paragraph in paragraphs {
            let qas = paragraph
                .get("qas")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed(out.len() + 1, "qas", "missing or not an array"))?;
            for qa in qas {
                let ordinal = out.len() + 1;
                let id = optional_id(qa, ordinal, "id")?
                    .ok_or_else(|| malformed(ordinal, "id", "missing"))?;
                let question = required_str(qa, ordinal, "question")?;
                let answers = match qa.get("answers") {
                    Some(Value::Array(items)) => {
                        let mut texts = Vec::new();
                        for item in items {
                            let text = required_str(item, ordinal, "text")?;
                            if !texts.contains(&text) {
                                texts.push(text);
                            }
                        }
                        texts
                    }
                    _ => return Err(malformed(ordinal, "answers", "missing or not an array")),
                };
                out.push(SquadQa {
                    ordinal,
                    id,
                    question,
                    answers,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub lrl_query: QueryRecord,
    /// Parallel id declared by the source file, if any.
    pub parallel_id: Option<String>,
    /// Database id of the parallel HRL query; cleared when unresolvable or
    /// dropped out.
    pub gold_hrl_id: Option<String>,
    /// Empty means the question is unanswerable.
    pub gold_answers: Vec<String>,
}

impl EvalExample {
    pub fn is_answerable(&self) -> bool {
        !self.gold_answers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub examples: Vec<EvalExample>,
    pub lang: String,
    pub parallel_fraction: f64,
    pub warnings: Vec<String>,
}

impl EvalSet {
    pub fn new(lang: &str, examples: Vec<EvalExample>) -> Self {
        let mut set = Self {
            examples,
            lang: lang.to_owned(),
            parallel_fraction: 0.0,
            warnings: Vec::new(),
        };
        set.parallel_fraction = set.compute_parallel_fraction();
        set
    }

    /// Present gold ids over examples that declared a parallel id.
    fn compute_parallel_fraction(&self) -> f64 {
        let declared = self
            .examples
            .iter()
            .filter(|e| e.parallel_id.is_some())
            .count();
        if declared == 0 {
            return 0.0;
        }
        let present = self
            .examples
            .iter()
            .filter(|e| e.gold_hrl_id.is_some())
            .count();
        present as f64 / declared as f64
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn answerable_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_answerable()).count()
    }

    /// Sorted, distinct gold ids currently present.
    pub fn parallel_ids(&self) -> Vec<String> {
        self.examples
            .iter()
            .filter_map(|e| e.gold_hrl_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

struct RawEvalRow {
    line: usize,
    id: Option<String>,
    pid: Option<String>,
    query: String,
    answers: Vec<String>,
}

/// Reads the `lang` column of a multilingual evaluation file and resolves
/// each row's parallel id against `db`.
///
/// * `generic_parallel_jsonl`: `{"pid": str, "queries": {lang: str},
///   "answers": {lang: [str]}}`
/// * `mkqa_jsonl`: the MKQA release (`example_id`, `queries`, and
///   `answers[lang][*].text` plus `aliases`; `null` text means unanswerable)
/// * `xquad_json`: a directory holding `xquad.<lang>.json` files, or one
///   such file; question ids are the parallel ids.
pub fn ingest_eval_set(
    path: &Path,
    format: EvalFormat,
    lang: &str,
    db: &Database,
) -> Result<EvalSet> {
    let source = source_name(path);
    let rows = match format {
        EvalFormat::GenericParallelJsonl => parallel_jsonl_rows(path, lang, false)?,
        EvalFormat::MkqaJsonl => parallel_jsonl_rows(path, lang, true)?,
        EvalFormat::XquadJson => xquad_rows(path, lang)?,
    };

    let mut warnings = Vec::new();
    let examples = rows
        .into_iter()
        .map(|row| {
            let gold_hrl_id = match &row.pid {
                Some(pid) => match db.resolve(pid) {
                    Some(id) => Some(id.to_owned()),
                    None => {
                        warnings.push(format!(
                            "line {}: parallel id `{pid}` not found in database",
                            row.line
                        ));
                        None
                    }
                },
                None => None,
            };
            let id = row
                .id
                .or_else(|| row.pid.clone())
                .unwrap_or_else(|| format!("{source}:{}", row.line));
            EvalExample {
                lrl_query: QueryRecord {
                    id,
                    text: row.query,
                    lang: lang.to_owned(),
                },
                parallel_id: row.pid,
                gold_hrl_id,
                gold_answers: row.answers,
            }
        })
        .collect();

    let mut set = EvalSet::new(lang, examples);
    set.warnings = warnings;
    for warning in &set.warnings {
        log::warn!("{warning}");
    }
    Ok(set)
}

fn parallel_jsonl_rows(path: &Path, lang: &str, mkqa: bool) -> Result<Vec<RawEvalRow>> {
    let rows = read_jsonl(path)?;
    let mut available = BTreeSet::new();
    for (_, row) in &rows {
        if let Some(Value::Object(queries)) = row.get("queries") {
            available.extend(queries.keys().cloned());
        }
    }
    if !available.contains(lang) {
        return Err(CorpusError::UnknownLanguage {
            requested: lang.to_owned(),
            available: available.into_iter().collect(),
        });
    }

    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let queries_field = format!("queries.{lang}");
        let query = match row.get("queries").and_then(|q| q.get(lang)) {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(_) => {
                return Err(malformed(
                    line,
                    &queries_field,
                    "expected a non-empty string",
                ))
            }
            None => return Err(malformed(line, &queries_field, "missing")),
        };
        let answers_field = format!("answers.{lang}");
        let answers_value = row
            .get("answers")
            .and_then(|a| a.get(lang))
            .ok_or_else(|| malformed(line, &answers_field, "missing"))?;
        let (pid, answers) = if mkqa {
            (
                optional_id(&row, line, "example_id")?,
                mkqa_answers(answers_value, line, &answers_field)?,
            )
        } else {
            (
                optional_id(&row, line, "pid")?,
                string_list(Some(answers_value), line, &answers_field)?,
            )
        };
        out.push(RawEvalRow {
            line,
            id: None,
            pid,
            query,
            answers,
        });
    }
    Ok(out)
}

fn mkqa_answers(value: &Value, line: usize, field: &str) -> Result<Vec<String>> {
    let items = value
        .as_array()
        .ok_or_else(|| malformed(line, field, "expected an array"))?;
    let mut out = Vec::new();
    for item in items {
        if let Some(Value::String(text)) = item.get("text") {
            union_into(&mut out, vec![text.clone()]);
        }
        if let Some(Value::Array(aliases)) = item.get("aliases") {
            for alias in aliases.iter().filter_map(Value::as_str) {
                union_into(&mut out, vec![alias.to_owned()]);
            }
        }
    }
    out.retain(|a| !a.is_empty());
    Ok(out)
}

fn xquad_rows(path: &Path, lang: &str) -> Result<Vec<RawEvalRow>> {
    let mut files = BTreeMap::new();
    if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|e| io_err(path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(path, e))?;
            if let Some(l) = xquad_lang(&entry.path()) {
                files.insert(l, entry.path());
            }
        }
    } else if let Some(l) = xquad_lang(path) {
        files.insert(l, path.to_owned());
    }
    let Some(file) = files.get(lang) else {
        return Err(CorpusError::UnknownLanguage {
            requested: lang.to_owned(),
            available: files.into_keys().collect(),
        });
    };
    Ok(squad_rows(&read_json(file)?)?
        .into_iter()
        .map(|qa| RawEvalRow {
            line: qa.ordinal,
            id: Some(qa.id.clone()),
            pid: Some(qa.id),
            query: qa.question,
            answers: qa.answers,
        })
        .collect())
}

fn xquad_lang(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let lang = name.strip_prefix("xquad.")?.strip_suffix(".json")?;
    (!lang.is_empty()).then(|| lang.to_owned())
}

/// Adds `count` records drawn from `pool` to a copy of `db`.
///
/// Pool records whose id or normalized text already occur in `db` are
/// excluded first. The sample is the first `count` entries of a seeded
/// permutation of the remaining pool, so a larger count always extends a
/// smaller one under the same seed.
pub fn inject_distractors(
    db: &Database,
    pool: &Database,
    count: usize,
    seed: u64,
) -> Result<Database> {
    if count == 0 {
        return Ok(db.clone());
    }
    let texts = db.normalized_texts();
    let mut candidates: Vec<&(QueryRecord, AnswerRecord)> = pool
        .records
        .values()
        .filter(|(q, _)| db.resolve(&q.id).is_none())
        .filter(|(q, _)| !texts.contains(&normalize_query(&q.text)))
        .collect();
    // Distinct pool entries may still share normalized text with each other.
    let mut seen = HashSet::new();
    candidates.retain(|(q, _)| seen.insert(normalize_query(&q.text)));

    if candidates.len() < count {
        return Err(CorpusError::InsufficientDistractors {
            requested: count,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut records = db.records.clone();
    for (q, a) in candidates.into_iter().take(count) {
        records.insert(q.id.clone(), (q.clone(), a.clone()));
    }
    Ok(db.with_records(records, format!("{}+{}", db.meta.source, pool.meta.source)))
}

pub fn inject_distractors_from_file(
    db: &Database,
    distractor_path: &Path,
    format: DatabaseFormat,
    count: usize,
    seed: u64,
) -> Result<Database> {
    let pool = ingest_database(distractor_path, format)?;
    inject_distractors(db, &pool, count, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// One permutation per seed; retained sets nest across keep fractions.
    #[default]
    Nested,
    /// A fresh permutation per (seed, keep fraction).
    Independent,
}

/// Removes a seeded random `1 - keep_fraction` share of the parallel HRL
/// records from `db` and clears the matching gold ids in `eval`.
///
/// The parallel records are the distinct gold ids present in `eval`;
/// everything else in `db` is left alone.
pub fn dropout_parallel(
    db: &Database,
    eval: &EvalSet,
    keep_fraction: f64,
    seed: u64,
    mode: DropoutMode,
) -> Result<(Database, EvalSet)> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(CorpusError::InvalidFraction(keep_fraction));
    }
    let mut parallel = eval.parallel_ids();
    let total = parallel.len();
    let removed_count = ((1.0 - keep_fraction) * total as f64).round() as usize;
    let keep_count = total - removed_count.min(total);

    let rng_seed = match mode {
        DropoutMode::Nested => seed,
        DropoutMode::Independent => seed ^ keep_fraction.to_bits().rotate_left(17),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    parallel.shuffle(&mut rng);
    let removed: HashSet<&String> = parallel[keep_count..].iter().collect();

    let records = db
        .records
        .iter()
        .filter(|(id, _)| !removed.contains(id))
        .map(|(id, r)| (id.clone(), r.clone()))
        .collect();
    let new_db = db.with_records(records, db.meta.source.clone());

    let mut new_eval = eval.clone();
    for example in &mut new_eval.examples {
        if example
            .gold_hrl_id
            .as_ref()
            .is_some_and(|id| removed.contains(id))
        {
            example.gold_hrl_id = None;
        }
    }
    new_eval.parallel_fraction = new_eval.compute_parallel_fraction();
    Ok((new_db, new_eval))
}

/// Stored answers for `query_id`, following ingest-time merges.
pub fn lookup_answer<'a>(db: &'a Database, query_id: &str) -> Result<&'a AnswerRecord> {
    db.resolve(query_id)
        .and_then(|id| db.records.get(id))
        .map(|(_, a)| a)
        .ok_or_else(|| CorpusError::NotFound(query_id.to_owned()))
}

impl fmt::Display for DatabaseFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NqOpenJsonl => "nq_open_jsonl",
            Self::SquadJson => "squad_json",
            Self::GenericJsonl => "generic_jsonl",
        })
    }
}

impl fmt::Display for EvalFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MkqaJsonl => "mkqa_jsonl",
            Self::XquadJson => "xquad_json",
            Self::GenericParallelJsonl => "generic_parallel_jsonl",
        })
    }
}
