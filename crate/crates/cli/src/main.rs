//! `xlpivot`: ingest, embed, index, match, pivot, eval and sweep.
//!
//! Every run-style subcommand builds an experiment config: the JSON file
//! given with `--config` (if any) is loaded first and flags override it.
//! Exit status is 0 on success, 1 on operational errors (one
//! `error[CODE]: message` line on stderr) and 2 on usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use xlpivot::adapter::ProcessSpec;
use xlpivot::answer_xlate::AnswerStrategy;
use xlpivot::corpus::{
    ingest_database_with, ingest_eval_set, DatabaseFormat, DropoutMode, EvalFormat, IngestOptions,
};
use xlpivot::embedding::{
    embed_database, embed_eval_set, load_vector_store, save_vector_store, HashNgramEncoder,
};
use xlpivot::experiments::{
    prepare, run_alignment_sweep_prepared, run_distractor_sweep_prepared, run_end_to_end_prepared,
    write_end_to_end, write_sweep, CalibrationMode, EncoderSpec, ExperimentConfig, ExperimentError,
    GroupingSpec, NmtStores, ScorerSpec, TranslatorSpec,
};
use xlpivot::index::{build_index, IndexMode, IvfParams};
use xlpivot::metrics::{
    answer_score, calibrate_threshold, is_no_answer, recall_at_threshold, EvalReport,
    LanguageGroups, ReportRow, ANSWERED_FRACTION, END_TO_END_EM, END_TO_END_F1,
};
use xlpivot::pivot::Strategy;

#[derive(Parser)]
#[command(name = "xlpivot", version, about = "Cross-lingual query pivoting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and canonicalize a query-answer database (and eval sets).
    Ingest(IngestArgs),
    /// Embed database and eval queries with the hash n-gram encoder.
    Embed(EmbedArgs),
    /// Build and save a search index over a vector store.
    Index(IndexArgs),
    /// Match LRL queries to database queries and dump every match.
    Match(RunArgs),
    /// Full pipeline: match, look up, translate answers and score.
    Pivot(RunArgs),
    /// Score a predictions file against an eval set.
    Eval(EvalArgs),
    /// Matching accuracy as distractors are added to the database.
    SweepDistractor(RunArgs),
    /// Recall at a target precision as parallel queries are withheld.
    SweepAlignment(RunArgs),
}

#[derive(Args)]
struct DataArgs {
    /// HRL query-answer database.
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long, value_parser = parse_db_format)]
    db_format: Option<DatabaseFormat>,
    /// Parallel evaluation file.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, value_parser = parse_eval_format)]
    eval_format: Option<EvalFormat>,
    /// Evaluation language(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    lang: Vec<String>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Keep rows whose normalized questions collide.
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// XLPV1 vector store.
    #[arg(long)]
    store: PathBuf,
    /// Expected encoder name recorded in the store.
    #[arg(long)]
    encoder: Option<String>,
    /// Build an approximate (IVF) index probing this many partitions.
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    nlist: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSONL rows with `id`, `prediction` and optional `confidence`.
    #[arg(long)]
    predictions: PathBuf,
    /// Abstain below this confidence.
    #[arg(long)]
    threshold: Option<f64>,
    /// Calibrate a threshold to this precision and report recall.
    #[arg(long)]
    target_precision: Option<f64>,
    /// Row label in the report.
    #[arg(long, default_value = "predictions")]
    label: String,
    /// Language grouping: mkqa, xquad or a JSON file mapping language to group.
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Distractor pool (same format as the database).
    #[arg(long)]
    distractors: Option<PathBuf>,
    /// Entity TSV: entity_id, lang (or `alias`), surface.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Language grouping: mkqa, xquad or a JSON file mapping language to group.
    #[arg(long)]
    groups: Option<String>,
    /// Hash encoder dimensionality.
    #[arg(long)]
    dim: Option<usize>,
    /// Precomputed database store; switches to precomputed vectors.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Precomputed eval store as LANG=PATH (repeatable).
    #[arg(long, value_parser = parse_lang_path)]
    eval_store: Vec<(String, PathBuf)>,
    #[arg(long)]
    distractor_store: Option<PathBuf>,
    /// Database store for nmt_mips from the post-translation encoder.
    #[arg(long, requires = "store")]
    nmt_store: Option<PathBuf>,
    /// Translated eval queries for nmt_mips as LANG=PATH, keyed by example id.
    #[arg(long, value_parser = parse_lang_path, requires = "nmt_store")]
    nmt_eval_store: Vec<(String, PathBuf)>,
    #[arg(long, requires = "nmt_store")]
    nmt_distractor_store: Option<PathBuf>,
    /// oracle, overlap or cosine.
    #[arg(long, value_parser = ["oracle", "overlap", "cosine"])]
    scorer: Option<String>,
    /// External scorer process (whitespace-separated command line).
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// none or identity.
    #[arg(long, value_parser = ["none", "identity"])]
    translator: Option<String>,
    /// External translator process (whitespace-separated command line).
    #[arg(long)]
    translator_cmd: Option<String>,
    /// Concurrent requests (processes) per external adapter.
    #[arg(long, default_value_t = 1)]
    max_in_flight: usize,
    #[arg(long, value_parser = parse_answer_strategy)]
    answer_strategy: Option<AnswerStrategy>,
    /// Matching strategies, comma separated: mips, nmt_mips, rm_mips.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategy: Vec<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    target_precision: Option<f64>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Distractor counts: START:STOP:STEP or a comma list.
    #[arg(long, value_parser = parse_count_grid)]
    grid: Option<CountGrid>,
    /// Keep fractions: START:STOP:STEP or a comma list.
    #[arg(long, value_parser = parse_fraction_grid)]
    keep: Option<FractionGrid>,
    #[arg(long, value_parser = ["nested", "independent"])]
    dropout_mode: Option<String>,
    #[arg(long, value_parser = ["oracle", "held_out"])]
    calibration: Option<String>,
    /// Approximate index probing this many partitions.
    #[arg(long)]
    nprobe: Option<usize>,
    /// Worker threads (default: machine parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_db_format(s: &str) -> Result<DatabaseFormat, String> {
    s.parse::<DatabaseFormat>().map_err(|e| e.to_string())
}

fn parse_eval_format(s: &str) -> Result<EvalFormat, String> {
    s.parse::<EvalFormat>().map_err(|e| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_answer_strategy(s: &str) -> Result<AnswerStrategy, String> {
    s.parse::<AnswerStrategy>().map_err(|e| e.to_string())
}

fn parse_lang_path(s: &str) -> Result<(String, PathBuf), String> {
    let (lang, path) = s.split_once('=').ok_or("expected LANG=PATH")?;
    Ok((lang.to_owned(), PathBuf::from(path)))
}

/// `START:STOP:STEP` (inclusive) or a comma-separated list.
fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number `{t}`"))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err(format!("bad range `{s}`"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            // Round away the float drift of repeated steps.
            Ok((0..=n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(format!("bad grid `{s}`")),
    }
}

#[derive(Clone)]
struct FractionGrid(Vec<f64>);

#[derive(Clone)]
struct CountGrid(Vec<usize>);

fn parse_fraction_grid(s: &str) -> Result<FractionGrid, String> {
    let grid = parse_grid(s)?;
    match grid.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        Some(f) => Err(format!("keep fraction {f} outside [0, 1]")),
        None => Ok(FractionGrid(grid)),
    }
}

fn parse_count_grid(s: &str) -> Result<CountGrid, String> {
    parse_grid(s)?
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!(
                    "distractor count {v} is not a non-negative integer"
                ))
            }
        })
        .collect::<Result<_, _>>()
        .map(CountGrid)
}

fn command_line(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn grouping(spec: &str) -> Result<GroupingSpec, ExperimentError> {
    if spec.ends_with(".json") {
        let raw = fs::read_to_string(spec).map_err(|source| ExperimentError::Io {
            path: spec.into(),
            source,
        })?;
        let map = serde_json::from_str(&raw)
            .map_err(|e| ExperimentError::Config(format!("{spec}: {e}")))?;
        Ok(GroupingSpec::Custom(map))
    } else {
        Ok(GroupingSpec::Preset(spec.to_owned()))
    }
}

fn resolve_groups(spec: Option<&str>) -> Result<LanguageGroups, ExperimentError> {
    Ok(match grouping(spec.unwrap_or("mkqa"))? {
        GroupingSpec::Preset(name) => name.parse()?,
        GroupingSpec::Custom(map) => LanguageGroups::custom(map),
    })
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        let d = &self.data;
        if d.db.is_some() {
            c.database = d.db.clone();
        }
        if let Some(f) = d.db_format {
            c.database_format = f;
            c.distractors_format = f;
        }
        if d.eval.is_some() {
            c.eval = d.eval.clone();
        }
        if let Some(f) = d.eval_format {
            c.eval_format = f;
        }
        if !d.lang.is_empty() {
            c.languages = d.lang.clone();
        }
        if self.distractors.is_some() {
            c.distractors = self.distractors.clone();
        }
        if self.kg.is_some() {
            c.kg = self.kg.clone();
        }
        if let Some(g) = &self.groups {
            c.groups = grouping(g)?;
        }
        if let Some(dim) = self.dim {
            c.encoder = EncoderSpec::Hash { dim };
        }
        if let Some(database) = &self.store {
            c.encoder = EncoderSpec::Precomputed {
                database: database.clone(),
                distractors: self.distractor_store.clone(),
                eval: self.eval_store.iter().cloned().collect(),
                nmt: self.nmt_store.as_ref().map(|database| NmtStores {
                    database: database.clone(),
                    distractors: self.nmt_distractor_store.clone(),
                    eval: self.nmt_eval_store.iter().cloned().collect(),
                }),
            };
        }
        let process = |cmd: &str| ProcessSpec {
            command: command_line(cmd),
            max_in_flight: self.max_in_flight,
            timeout_ms: None,
        };
        match (&self.scorer, &self.scorer_cmd) {
            (Some(_), Some(_)) => {
                return Err(ExperimentError::Config(
                    "use --scorer or --scorer-cmd, not both".into(),
                ))
            }
            (Some(s), None) => {
                c.scorer = match s.as_str() {
                    "oracle" => ScorerSpec::Oracle,
                    "cosine" => ScorerSpec::Cosine,
                    _ => ScorerSpec::Overlap,
                }
            }
            (None, Some(cmd)) => c.scorer = ScorerSpec::Process(process(cmd)),
            (None, None) => {}
        }
        match (&self.translator, &self.translator_cmd) {
            (Some(_), Some(_)) => {
                return Err(ExperimentError::Config(
                    "use --translator or --translator-cmd, not both".into(),
                ))
            }
            (Some(t), None) => {
                c.translator = if t == "identity" {
                    TranslatorSpec::Identity
                } else {
                    TranslatorSpec::None
                }
            }
            (None, Some(cmd)) => c.translator = TranslatorSpec::Process(process(cmd)),
            (None, None) => {}
        }
        if let Some(a) = self.answer_strategy {
            c.answer_strategy = a;
        }
        if !self.strategy.is_empty() {
            c.strategies = self.strategy.clone();
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if self.threshold.is_some() {
            c.threshold = self.threshold;
        }
        if let Some(p) = self.target_precision {
            c.target_precision = p;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(g) = &self.grid {
            c.distractor_grid = g.0.clone();
        }
        if let Some(k) = &self.keep {
            c.keep_grid = k.0.clone();
        }
        if let Some(m) = &self.dropout_mode {
            c.dropout_mode = if m == "independent" {
                DropoutMode::Independent
            } else {
                DropoutMode::Nested
            };
        }
        if let Some(m) = &self.calibration {
            c.calibration = if m == "held_out" {
                CalibrationMode::HeldOut
            } else {
                CalibrationMode::Oracle
            };
        }
        if let Some(nprobe) = self.nprobe {
            c.index = IndexMode::Approximate(IvfParams {
                nprobe,
                ..IvfParams::default()
            });
        }
        if self.jobs.is_some() {
            c.jobs = self.jobs;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        Ok(c)
    }
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    config
        .out
        .clone()
        .ok_or_else(|| ExperimentError::Config("an output directory is required (--out)".into()))
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_error(path))
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(io_error(path))
}

fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("serializable json") + "\n"
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, ExperimentError> {
    value
        .as_deref()
        .ok_or_else(|| ExperimentError::Config(format!("{flag} is required")))
}

fn ingest(args: &IngestArgs) -> Result<(), ExperimentError> {
    let d = &args.data;
    let options = IngestOptions {
        dedup: !args.no_dedup,
    };
    let db = ingest_database_with(
        require(&d.db, "--db")?,
        d.db_format.unwrap_or(DatabaseFormat::GenericJsonl),
        &options,
    )?;
    create_dir(&args.out)?;
    db.write_canonical(&args.out.join("db.jsonl"))?;
    let mut evals = serde_json::Map::new();
    if let Some(path) = &d.eval {
        for lang in &d.lang {
            let set = ingest_eval_set(
                path,
                d.eval_format.unwrap_or(EvalFormat::GenericParallelJsonl),
                lang,
                &db,
            )?;
            for w in &set.warnings {
                log::warn!("{lang}: {w}");
            }
            evals.insert(
                lang.clone(),
                json!({
                    "examples": set.len(),
                    "answerable": set.answerable_count(),
                    "parallel_fraction": set.parallel_fraction,
                    "warnings": set.warnings,
                }),
            );
        }
    }
    let summary = json!({
        "records": db.len(),
        "merged_ids": db.aliases(),
        "eval": evals,
    });
    write_file(&args.out.join("ingest.json"), &pretty(&summary))?;
    println!("ingested {} records into {}", db.len(), args.out.display());
    Ok(())
}

fn embed(args: &EmbedArgs) -> Result<(), ExperimentError> {
    let d = &args.data;
    let encoder =
        HashNgramEncoder::new(args.dim).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let db = ingest_database_with(
        require(&d.db, "--db")?,
        d.db_format.unwrap_or(DatabaseFormat::GenericJsonl),
        &IngestOptions::default(),
    )?;
    create_dir(&args.out)?;
    let store = embed_database(&db, &encoder)?;
    save_vector_store(&store, &args.out.join("db.xlpv1"))?;
    println!("db.xlpv1: {} vectors, dim {}", store.len(), store.dim());
    if let Some(path) = &d.eval {
        for lang in &d.lang {
            let set = ingest_eval_set(
                path,
                d.eval_format.unwrap_or(EvalFormat::GenericParallelJsonl),
                lang,
                &db,
            )?;
            let store = embed_eval_set(&set, &encoder)?;
            let name = format!("eval_{lang}.xlpv1");
            save_vector_store(&store, &args.out.join(&name))?;
            println!("{name}: {} vectors, dim {}", store.len(), store.dim());
        }
    }
    Ok(())
}

fn index(args: &IndexArgs) -> Result<(), ExperimentError> {
    let store = load_vector_store(&args.store)?;
    if let Some(expected) = &args.encoder {
        store.check_encoder(expected)?;
    }
    let mode = match args.nprobe {
        Some(nprobe) => IndexMode::Approximate(IvfParams {
            nprobe,
            nlist: args.nlist,
            ..IvfParams::default()
        }),
        None => IndexMode::Exact,
    };
    let index = build_index(&store, mode)?;
    create_dir(&args.out)?;
    index.save(&args.out.join("index.json"))?;
    let summary = json!({
        "encoder": store.meta.encoder,
        "dim": index.dim(),
        "count": index.len(),
        "mode": mode,
    });
    write_file(&args.out.join("index.summary.json"), &pretty(&summary))?;
    println!("indexed {} vectors (dim {})", index.len(), index.dim());
    Ok(())
}

fn pivot(args: &RunArgs, dump_matches: bool) -> Result<(), ExperimentError> {
    let config = args.config()?;
    let out = out_dir(&config)?;
    let prepared = prepare(&config)?;
    let run = run_end_to_end_prepared(&prepared)?;
    write_end_to_end(&out, &config, &run)?;
    if dump_matches {
        let threshold = config.threshold.unwrap_or(f64::NEG_INFINITY);
        let mut lines = String::new();
        for ((strategy, lang), outcomes) in &run.outcomes {
            for o in outcomes {
                let row = json!({
                    "id": o.id,
                    "lang": lang,
                    "strategy": strategy,
                    "hrl_id": o.answered(threshold).then_some(&o.result.hrl_id),
                    "confidence": o.result.confidence,
                    "prediction": o.prediction(threshold),
                    "candidates": o.result.candidates,
                    "error": o.error,
                });
                lines += &row.to_string();
                lines.push('\n');
            }
        }
        write_file(&out.join("matches.jsonl"), &lines)?;
    }
    print!("{}", run.report.render_table());
    Ok(())
}

fn sweep(args: &RunArgs, alignment: bool) -> Result<(), ExperimentError> {
    let config = args.config()?;
    let out = out_dir(&config)?;
    let prepared = prepare(&config)?;
    let curves = if alignment {
        run_alignment_sweep_prepared(&prepared)?
    } else {
        run_distractor_sweep_prepared(&prepared)?
    };
    write_sweep(&out, &config, &prepared.groups, &curves)?;
    println!("{} curves written to {}", curves.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct Prediction {
    id: String,
    prediction: String,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    lang: Option<String>,
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>, ExperimentError> {
    let file = fs::File::open(path).map_err(io_error(path))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| ExperimentError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn eval(args: &EvalArgs) -> Result<(), ExperimentError> {
    let d = &args.data;
    if d.lang.is_empty() {
        return Err(ExperimentError::Config("--lang is required".into()));
    }
    let db = ingest_database_with(
        require(&d.db, "--db")?,
        d.db_format.unwrap_or(DatabaseFormat::GenericJsonl),
        &IngestOptions::default(),
    )?;
    let predictions = read_predictions(&args.predictions)?;
    let groups = resolve_groups(args.groups.as_deref())?;
    let threshold = args.threshold.unwrap_or(f64::NEG_INFINITY);
    let mut per_language = BTreeMap::new();
    for lang in &d.lang {
        let set = ingest_eval_set(
            require(&d.eval, "--eval")?,
            d.eval_format.unwrap_or(EvalFormat::GenericParallelJsonl),
            lang,
            &db,
        )?;
        let by_id: BTreeMap<&str, &Prediction> = predictions
            .iter()
            .filter(|p| p.lang.as_deref().is_none_or(|l| l == lang))
            .map(|p| (p.id.as_str(), p))
            .collect();
        let n = set.len().max(1) as f64;
        let (mut em, mut f1, mut answered) = (0.0, 0.0, 0usize);
        let mut scores = Vec::new();
        let mut correct = Vec::new();
        let mut f1s = Vec::new();
        for example in &set.examples {
            let p = by_id.get(example.lrl_query.id.as_str());
            let confidence = p.and_then(|p| p.confidence).unwrap_or(f64::INFINITY);
            let text = p.map_or("", |p| p.prediction.as_str());
            let abstain = is_no_answer(text) || confidence < threshold;
            let s = answer_score(if abstain { "" } else { text }, &example.gold_answers, lang);
            em += s.em as f64;
            f1 += s.f1;
            answered += usize::from(!abstain);
            if !is_no_answer(text) {
                let full = answer_score(text, &example.gold_answers, lang);
                scores.push(confidence);
                correct.push(full.em == 1);
                f1s.push(full.f1);
            }
        }
        let mut metrics: BTreeMap<String, f64> = [
            (END_TO_END_F1.to_owned(), f1 / n),
            (END_TO_END_EM.to_owned(), em / n),
            (ANSWERED_FRACTION.to_owned(), answered as f64 / n),
        ]
        .into_iter()
        .collect();
        if let Some(target) = args.target_precision {
            let cal = if scores.is_empty() {
                None
            } else {
                calibrate_threshold(&scores, &correct, target)?
            };
            let recall = match &cal {
                Some(c) if set.answerable_count() > 0 => {
                    recall_at_threshold(&scores, &f1s, c.threshold, set.answerable_count())?
                }
                _ => 0.0,
            };
            metrics.insert("recall_at_precision".into(), recall);
            if let Some(c) = cal {
                metrics.insert("calibrated_threshold".into(), c.threshold);
            }
        }
        per_language.insert(lang.clone(), metrics);
    }
    let mut report = EvalReport::new(groups);
    report.push_row(ReportRow {
        label: args.label.clone(),
        per_language,
    })?;
    create_dir(&args.out)?;
    write_file(&args.out.join("report.csv"), &report.to_csv())?;
    write_file(&args.out.join("report.txt"), &report.render_table())?;
    print!("{}", report.render_table());
    Ok(())
}

fn run(command: &Command) -> Result<(), ExperimentError> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Embed(a) => embed(a),
        Command::Index(a) => index(a),
        Command::Match(a) => pivot(a, true),
        Command::Pivot(a) => pivot(a, false),
        Command::Eval(a) => eval(a),
        Command::SweepDistractor(a) => sweep(a, false),
        Command::SweepAlignment(a) => sweep(a, true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.code());
            ExitCode::from(1)
        }
    }
}
