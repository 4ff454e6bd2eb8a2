//! Writes a synthetic corpus (db.jsonl, eval.jsonl, kg.tsv, distractors.jsonl).
//!
//! usage: synthetic_fixture OUT_DIR QUERIES DISTRACTORS SEED LANG:TRANSLATE_RATE:LABEL_COVERAGE[,...]

use std::path::PathBuf;
use std::process::ExitCode;

use xlpivot::synthetic::{generate, SyntheticLanguage, SyntheticSpec};

fn parse_language(s: &str) -> Option<SyntheticLanguage> {
    let mut parts = s.split(':');
    let lang = parts.next()?;
    let rate = parts.next()?.parse().ok()?;
    let coverage = parts.next()?.parse().ok()?;
    Some(SyntheticLanguage::new(lang, rate, coverage))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [out, queries, distractors, seed, langs] = args.as_slice() else {
        eprintln!(
            "usage: synthetic_fixture OUT_DIR QUERIES DISTRACTORS SEED LANG:RATE:COVERAGE[,...]"
        );
        return ExitCode::from(2);
    };
    let languages: Option<Vec<_>> = langs.split(',').map(parse_language).collect();
    let (Ok(queries), Ok(distractors), Ok(seed), Some(languages)) = (
        queries.parse(),
        distractors.parse(),
        seed.parse(),
        languages,
    ) else {
        eprintln!("synthetic_fixture: malformed arguments");
        return ExitCode::from(2);
    };
    let spec = SyntheticSpec {
        queries,
        distractors,
        seed,
        languages,
        ..SyntheticSpec::default()
    };
    if let Err(e) = generate(&spec).write_files(&PathBuf::from(out)) {
        eprintln!("synthetic_fixture: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
