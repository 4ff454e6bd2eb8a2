//! End-to-end runs of the `xlpivot` binary on the committed fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_xlpivot");
const MOCK: &str = env!("CARGO_BIN_EXE_xlpivot-mock-adapter");

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run_with<S: AsRef<std::ffi::OsStr>>(args: &[S], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env("RUST_LOG", "error");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn data_args(langs: &str) -> Vec<String> {
    vec![
        "--db".into(),
        fixture("db.jsonl"),
        "--eval".into(),
        fixture("eval.jsonl"),
        "--kg".into(),
        fixture("kg.tsv"),
        "--lang".into(),
        langs.into(),
    ]
}

/// Data flags for subcommands that take no knowledge graph.
fn corpus_args(langs: &str) -> Vec<String> {
    let mut v = data_args(langs);
    let kg = v.iter().position(|a| a == "--kg").unwrap();
    v.drain(kg..kg + 2);
    v
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn args_with(base: &[&str], extra: &[String], out: &Path) -> Vec<String> {
    let mut v: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    v.extend(extra.iter().cloned());
    v.push("--out".into());
    v.push(out.to_string_lossy().into_owned());
    v
}

fn invoke(args: &[String]) -> Output {
    run_with(args, &[])
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    ok(&run(&["--help"]));
    for sub in [
        "ingest",
        "embed",
        "index",
        "match",
        "pivot",
        "eval",
        "sweep-distractor",
        "sweep-alignment",
    ] {
        let out = run(&[sub, "--help"]);
        ok(&out);
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage"),
            "{sub}"
        );
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(
        run(&["pivot", "--strategy", "bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["pivot", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["sweep-alignment", "--keep", "0.5:2.0:0.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["sweep-distractor", "--grid", "1.5"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn operational_errors_exit_one_with_code_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "pivot",
        "--db",
        "/nonexistent/db.jsonl",
        "--eval",
        &fixture("eval.jsonl"),
        "--lang",
        "th",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    assert!(line.starts_with("error[corpus]: "), "{stderr}");

    // nmt_mips without a translator is a config error
    let out = invoke(&args_with(
        &["pivot", "--strategy", "nmt_mips"],
        &data_args("th"),
        dir.path(),
    ));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]: "));

    // a language outside the grouping
    let out = invoke(&args_with(&["pivot"], &data_args("xx"), dir.path()));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pivot_happy_path_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run1 = dir.path().join("run1");
    let out = invoke(&args_with(
        &["pivot", "--strategy", "rm_mips", "--k", "10"],
        &data_args("th"),
        &run1,
    ));
    ok(&out);
    for file in [
        "report.csv",
        "report.txt",
        "curves.csv",
        "plotdata.json",
        "config.resolved.json",
    ] {
        assert!(run1.join(file).exists(), "{file}");
    }
    let csv = fs::read_to_string(run1.join("report.csv")).unwrap();
    assert!(csv.starts_with("language,group,metric,value\n"));
    assert!(csv.contains("th,low,rm_mips.match_accuracy,"));
    assert!(csv.contains("th,low,perfect.end_to_end_f1,"));
    let table = fs::read_to_string(run1.join("report.txt")).unwrap();
    assert!(table.contains("LRL -> HRL (Acc.)"));
    assert!(table.contains("Perfect LRL -> HRL"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        serde_json::json!({
            "database": fixture("db.jsonl"),
            "eval": fixture("eval.jsonl"),
            "kg": fixture("kg.tsv"),
            "languages": ["ms"],
            "k": 3,
            "strategies": ["mips"],
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "pivot",
        "--config",
        config.to_str().unwrap(),
        "--k",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    ok(&out);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["k"], 5);
    assert_eq!(resolved["strategies"], serde_json::json!(["mips"]));
    assert_eq!(resolved["languages"], serde_json::json!(["ms"]));
    assert!(resolved["fingerprint"].as_str().unwrap().len() == 16);

    fs::write(&config, r#"{"no_such_key": 1}"#).unwrap();
    let out = run(&[
        "pivot",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]: "));
}

fn curves_rows_per_language(dir: &Path) -> std::collections::BTreeMap<String, usize> {
    let csv = fs::read_to_string(dir.join("curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,seed,y,metric,language,strategy"));
    let mut counts = std::collections::BTreeMap::new();
    for line in lines {
        let language = line.split(',').nth(4).unwrap().to_owned();
        *counts.entry(language).or_insert(0) += 1;
    }
    counts
}

#[test]
fn sweep_alignment_grid_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = invoke(&args_with(
        &[
            "sweep-alignment",
            "--keep",
            "0.1:1.0:0.1",
            "--seeds",
            "1,2,3,4,5",
            "--target-precision",
            "0.8",
        ],
        &data_args("th,ms"),
        dir.path(),
    ));
    ok(&out);
    let counts = curves_rows_per_language(dir.path());
    assert_eq!(counts.get("th"), Some(&50));
    assert_eq!(counts.get("ms"), Some(&50));
    let plot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("plotdata.json")).unwrap())
            .unwrap();
    assert_eq!(plot["curves"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_distractor_emits_language_and_group_curves() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = data_args("th,ms");
    extra.extend(["--distractors".into(), fixture("distractors.jsonl")]);
    let out = invoke(&args_with(
        &[
            "sweep-distractor",
            "--strategy",
            "mips,rm_mips",
            "--grid",
            "0,100,300",
            "--seeds",
            "1,2",
        ],
        &extra,
        dir.path(),
    ));
    ok(&out);
    let counts = curves_rows_per_language(dir.path());
    // 3 grid points x 2 seeds x 2 strategies
    for lang in ["th", "ms", "group:low", "group:all"] {
        assert_eq!(counts.get(lang), Some(&12), "{lang}");
    }

    // a grid beyond zero needs a pool
    let out = invoke(&args_with(
        &["sweep-distractor", "--grid", "0,10"],
        &data_args("th"),
        dir.path(),
    ));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_embed_index_match_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let path = |p: &str| dir.path().join(p).to_string_lossy().into_owned();

    let out = invoke(&args_with(
        &["ingest"],
        &corpus_args("th,ms"),
        &dir.path().join("ingest"),
    ));
    ok(&out);
    let canonical = fs::read_to_string(path("ingest/db.jsonl")).unwrap();
    assert_eq!(canonical.lines().count(), 120);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(path("ingest/ingest.json")).unwrap()).unwrap();
    assert_eq!(summary["records"], 120);
    assert_eq!(summary["eval"]["th"]["parallel_fraction"], 1.0);

    let out = invoke(&args_with(
        &["embed", "--dim", "64"],
        &corpus_args("th"),
        &dir.path().join("emb"),
    ));
    ok(&out);
    assert!(dir.path().join("emb/db.xlpv1").exists());
    assert!(dir.path().join("emb/eval_th.xlpv1").exists());

    let out = run(&[
        "index",
        "--store",
        &path("emb/db.xlpv1"),
        "--encoder",
        "hash-ngram-64",
        "--out",
        &path("idx"),
    ]);
    ok(&out);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(path("idx/index.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["count"], 120);
    assert_eq!(summary["dim"], 64);
    let out = run(&[
        "index",
        "--store",
        &path("emb/db.xlpv1"),
        "--encoder",
        "other",
        "--out",
        &path("idx2"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[store]: "));
    let out = run(&[
        "index",
        "--store",
        &path("emb/db.xlpv1"),
        "--nprobe",
        "2",
        "--out",
        &path("ivf"),
    ]);
    ok(&out);

    // Precomputed vectors give the same matches as the hash encoder they came from.
    let mut extra = data_args("th");
    extra.extend([
        "--store".into(),
        path("emb/db.xlpv1"),
        "--eval-store".into(),
        format!("th={}", path("emb/eval_th.xlpv1")),
    ]);
    let out = invoke(&args_with(
        &["match", "--strategy", "mips"],
        &extra,
        &dir.path().join("pre"),
    ));
    ok(&out);
    let mut extra = data_args("th");
    extra.extend(["--dim".into(), "64".into()]);
    let out = invoke(&args_with(
        &["match", "--strategy", "mips"],
        &extra,
        &dir.path().join("hash"),
    ));
    ok(&out);
    let pre = fs::read_to_string(path("pre/matches.jsonl")).unwrap();
    assert_eq!(pre, fs::read_to_string(path("hash/matches.jsonl")).unwrap());
    assert_eq!(pre.lines().count(), 120);
    let first: serde_json::Value = serde_json::from_str(pre.lines().next().unwrap()).unwrap();
    for key in [
        "id",
        "lang",
        "strategy",
        "hrl_id",
        "confidence",
        "prediction",
        "candidates",
    ] {
        assert!(first.get(key).is_some(), "{key}");
    }

    // Matches feed straight into eval.
    let mut extra = corpus_args("th");
    extra.extend([
        "--predictions".into(),
        path("pre/matches.jsonl"),
        "--target-precision".into(),
        "0.8".into(),
    ]);
    let out = invoke(&args_with(&["eval"], &extra, &dir.path().join("ev")));
    ok(&out);
    let report = fs::read_to_string(path("ev/report.csv")).unwrap();
    assert!(report.contains("th,low,predictions.end_to_end_f1,"));
    assert!(report.contains("th,low,predictions.recall_at_precision,"));
}

#[test]
fn eval_scores_abstentions_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let eval_rows = fs::read_to_string(fixture("eval.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(eval_rows.lines().next().unwrap()).unwrap();
    let gold = first["answers"]["ms"][0].as_str().unwrap();
    let pid = first["pid"].as_str().unwrap();
    let preds = dir.path().join("preds.jsonl");
    fs::write(
        &preds,
        format!(
            "{}\n",
            serde_json::json!({"id": pid, "prediction": gold, "confidence": 0.9})
        ),
    )
    .unwrap();
    let mut extra = corpus_args("ms");
    extra.extend(["--predictions".into(), preds.to_string_lossy().into_owned()]);
    let out = invoke(&args_with(&["eval"], &extra, &dir.path().join("a")));
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("a/report.csv")).unwrap();
    // one correct prediction out of 120 answerable examples
    assert!(
        csv.contains(&format!(
            "ms,low,predictions.end_to_end_em,{}\n",
            1.0 / 120.0
        )),
        "{csv}"
    );

    extra.extend(["--threshold".into(), "0.95".into()]);
    let out = invoke(&args_with(&["eval"], &extra, &dir.path().join("b")));
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("b/report.csv")).unwrap();
    assert!(
        csv.contains("ms,low,predictions.end_to_end_em,0\n"),
        "{csv}"
    );
    assert!(
        csv.contains("ms,low,predictions.answered_fraction,0\n"),
        "{csv}"
    );
}

#[test]
fn external_adapters_through_mock_process() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = data_args("th");
    extra.extend([
        "--scorer-cmd".into(),
        MOCK.into(),
        "--translator-cmd".into(),
        format!("{MOCK} --suffix !"),
        "--max-in-flight".into(),
        "2".into(),
    ]);
    let out = invoke(&args_with(
        &[
            "pivot",
            "--strategy",
            "mips,nmt_mips,rm_mips",
            "--answer-strategy",
            "mt_only",
        ],
        &extra,
        dir.path(),
    ));
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    // mt_only appends "!" which normalization strips, so answers still score
    assert!(csv.contains("th,low,nmt_mips.match_accuracy,"));
    assert!(!csv.contains("th,low,rm_mips.end_to_end_f1,0\n"), "{csv}");
}

#[test]
fn adapter_faults_score_zero_and_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = data_args("th");
    extra.extend(["--scorer-cmd".into(), format!("{MOCK} --exit-after 25")]);
    let out = run_with(
        &args_with(&["pivot", "--strategy", "rm_mips"], &extra, dir.path()),
        &[("RUST_LOG", "warn")],
    );
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("exited"), "{stderr}");
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let f1: f64 = csv
        .lines()
        .find_map(|l| l.strip_prefix("th,low,rm_mips.end_to_end_f1,"))
        .unwrap()
        .parse()
        .unwrap();
    // only the first few examples were scored before the adapter quit
    assert!(f1 > 0.0 && f1 < 0.1, "{f1}");

    // A missing adapter program fails the run up front.
    let mut extra = data_args("th");
    extra.extend(["--scorer-cmd".into(), "/nonexistent/scorer".into()]);
    let out = invoke(&args_with(&["pivot"], &extra, dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[adapter]: "));
}

#[test]
fn adapter_timeout_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = data_args("th");
    extra.extend([
        "--scorer-cmd".into(),
        format!("{MOCK} --delay-ms 400"),
        "--k".into(),
        "2".into(),
    ]);
    let out = run_with(
        &args_with(&["pivot", "--strategy", "rm_mips"], &extra, dir.path()),
        &[("RUST_LOG", "warn"), ("XLPIVOT_ADAPTER_TIMEOUT_MS", "50")],
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("timed out after 50 ms"));
}

#[test]
fn identical_invocations_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &outputs {
        ok(&invoke(&args_with(
            &[
                "pivot",
                "--strategy",
                "mips,rm_mips",
                "--seeds",
                "3",
                "--jobs",
                "3",
            ],
            &data_args("th,ms"),
            out,
        )));
    }
    for file in ["report.csv", "report.txt", "plotdata.json", "curves.csv"] {
        assert_eq!(
            fs::read(outputs[0].join(file)).unwrap(),
            fs::read(outputs[1].join(file)).unwrap(),
            "{file}"
        );
    }
}

fn metric(csv: &str, key: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no `{key}` in\n{csv}"))
        .parse()
        .unwrap()
}

#[test]
fn nmt_mips_reads_offline_translated_vectors() {
    let dir = tempfile::tempdir().unwrap();
    // Stand-in for offline translation: Thai rows carry the English question.
    let translated: String = fs::read_to_string(fixture("eval.jsonl"))
        .unwrap()
        .lines()
        .map(|line| {
            let mut row: serde_json::Value = serde_json::from_str(line).unwrap();
            row["queries"]["th"] = row["queries"]["en"].clone();
            format!("{row}\n")
        })
        .collect();
    let translated_path = dir.path().join("translated.jsonl");
    fs::write(&translated_path, translated).unwrap();

    let vec_dir = dir.path().join("vec");
    ok(&invoke(&args_with(
        &["embed", "--dim", "128"],
        &corpus_args("th"),
        &vec_dir,
    )));
    let mut nmt_args = corpus_args("th");
    nmt_args[3] = translated_path.to_string_lossy().into_owned();
    let nmt_dir = dir.path().join("nmt");
    ok(&invoke(&args_with(
        &["embed", "--dim", "128"],
        &nmt_args,
        &nmt_dir,
    )));

    let path = |d: &Path, f: &str| d.join(f).to_string_lossy().into_owned();
    let mut extra = data_args("th");
    extra.extend([
        "--store".into(),
        path(&vec_dir, "db.xlpv1"),
        "--eval-store".into(),
        format!("th={}", path(&vec_dir, "eval_th.xlpv1")),
        "--nmt-store".into(),
        path(&nmt_dir, "db.xlpv1"),
        "--nmt-eval-store".into(),
        format!("th={}", path(&nmt_dir, "eval_th.xlpv1")),
    ]);
    let out_dir = dir.path().join("run");
    ok(&invoke(&args_with(
        &["pivot", "--strategy", "mips,nmt_mips"],
        &extra,
        &out_dir,
    )));
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(metric(&csv, "th,low,nmt_mips.match_accuracy,"), 1.0);
    assert!(metric(&csv, "th,low,mips.match_accuracy,") < 1.0);

    // without offline vectors nmt_mips still needs a translator
    let out = invoke(&args_with(
        &["pivot", "--strategy", "nmt_mips"],
        &data_args("th"),
        &dir.path().join("x"),
    ));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nmt_mips needs a translator"));

    // the nmt stores only make sense next to precomputed vectors
    let mut extra = data_args("th");
    extra.extend(["--nmt-store".into(), path(&nmt_dir, "db.xlpv1")]);
    let out = invoke(&args_with(&["pivot"], &extra, &dir.path().join("y")));
    assert_eq!(out.status.code(), Some(2));
}
