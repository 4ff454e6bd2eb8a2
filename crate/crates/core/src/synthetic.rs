//! Seeded synthetic corpora for desk-scale experiments.
//!
//! HRL queries are bags of pseudo-words with a unique one-token answer.
//! Each LRL query is its HRL parallel with a share of words swapped for
//! per-language "translations" and a little reordering, so a character
//! n-gram encoder finds the parallel usually but not always. Distractors
//! are near-duplicates of database queries: a word or two dropped or
//! replaced, with their own answers.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::answer_xlate::{KgEntity, KnowledgeGraph};
use crate::corpus::{AnswerRecord, Database, EvalExample, EvalSet, IngestOptions, QueryRecord};
use crate::pivot::OracleScorer;
use crate::text::normalize_query;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub lang: String,
    /// Probability that a word is replaced by its translation.
    pub translate_rate: f64,
    /// Probability that an answer entity has a label in this language.
    pub label_coverage: f64,
}

impl SyntheticLanguage {
    pub fn new(lang: &str, translate_rate: f64, label_coverage: f64) -> Self {
        Self {
            lang: lang.to_owned(),
            translate_rate,
            label_coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub queries: usize,
    pub languages: Vec<SyntheticLanguage>,
    /// Size of the distractor pool.
    pub distractors: usize,
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            queries: 1000,
            languages: vec![
                SyntheticLanguage::new("es", 0.4, 1.0),
                SyntheticLanguage::new("ms", 0.6, 1.0),
            ],
            distractors: 0,
            vocab_size: 2000,
            min_words: 5,
            max_words: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub db: Database,
    pub eval_sets: Vec<EvalSet>,
    pub distractor_pool: Option<Database>,
    pub kg: KnowledgeGraph,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            let onset = ONSETS[rng.gen_range(0..ONSETS.len())];
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            format!("{onset}{vowel}")
        })
        .collect()
}

/// Draws a word not in `taken` and records it.
fn fresh_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>, min_syllables: usize) -> String {
    loop {
        let syllables = rng.gen_range(min_syllables..min_syllables + 3);
        let word = pseudo_word(rng, syllables);
        if taken.insert(word.clone()) {
            return word;
        }
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn lang_seed(seed: u64, lang: &str) -> u64 {
    lang.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| {
        h.rotate_left(7) ^ u64::from(b)
    })
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.queries > 0, "need at least one query");
    assert!(spec.min_words >= 2 && spec.max_words >= spec.min_words);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = HashSet::new();
    let vocab: Vec<String> = (0..spec.vocab_size.max(spec.max_words))
        .map(|_| fresh_word(&mut rng, &mut taken, 2))
        .collect();

    let mut questions = Vec::with_capacity(spec.queries);
    let mut seen_text = HashSet::new();
    while questions.len() < spec.queries {
        let n = rng.gen_range(spec.min_words..=spec.max_words);
        let words: Vec<&str> = vocab
            .choose_multiple(&mut rng, n)
            .map(String::as_str)
            .collect();
        let text = words.join(" ");
        if seen_text.insert(normalize_query(&text)) {
            questions.push(words);
        }
    }
    let answers: Vec<String> = (0..spec.queries)
        .map(|_| capitalize(&fresh_word(&mut rng, &mut taken, 3)))
        .collect();

    let records = questions
        .iter()
        .zip(&answers)
        .enumerate()
        .map(|(i, (words, answer))| {
            let id = format!("syn-{i:05}");
            (
                QueryRecord {
                    id: id.clone(),
                    text: words.join(" "),
                    lang: crate::corpus::HRL_LANG.to_owned(),
                },
                AnswerRecord {
                    query_id: id,
                    answers: vec![answer.clone()],
                },
            )
        });
    let db = Database::from_records("synthetic", records, &IngestOptions { dedup: false })
        .expect("non-empty synthetic database");

    let mut entities: Vec<KgEntity> = answers
        .iter()
        .enumerate()
        .map(|(i, answer)| KgEntity {
            entity_id: format!("E{i:05}"),
            labels: [(crate::corpus::HRL_LANG.to_owned(), answer.clone())]
                .into_iter()
                .collect(),
            aliases: Vec::new(),
        })
        .collect();

    let mut eval_sets = Vec::new();
    for language in &spec.languages {
        let mut lrng = ChaCha8Rng::seed_from_u64(lang_seed(spec.seed, &language.lang));
        let mut lang_taken = taken.clone();
        let mut lexicon: BTreeMap<&str, String> = BTreeMap::new();
        for word in &vocab {
            lexicon.insert(word, fresh_word(&mut lrng, &mut lang_taken, 2));
        }
        let mut lrl_seen = HashSet::new();
        let mut examples = Vec::with_capacity(spec.queries);
        for (i, words) in questions.iter().enumerate() {
            let text = loop {
                let mut out: Vec<&str> = words
                    .iter()
                    .map(|w| {
                        if lrng.gen_bool(language.translate_rate) {
                            lexicon[w].as_str()
                        } else {
                            *w
                        }
                    })
                    .collect();
                if lrng.gen_bool(0.3) {
                    let j = lrng.gen_range(0..out.len() - 1);
                    out.swap(j, j + 1);
                }
                let text = out.join(" ");
                if lrl_seen.insert(normalize_query(&text)) {
                    break text;
                }
            };
            let gold = if lrng.gen_bool(language.label_coverage) {
                let label = capitalize(&fresh_word(&mut lrng, &mut lang_taken, 3));
                entities[i]
                    .labels
                    .insert(language.lang.clone(), label.clone());
                label
            } else {
                answers[i].clone()
            };
            let pid = format!("syn-{i:05}");
            examples.push(EvalExample {
                lrl_query: QueryRecord {
                    id: pid.clone(),
                    text,
                    lang: language.lang.clone(),
                },
                parallel_id: Some(pid.clone()),
                gold_hrl_id: Some(pid),
                gold_answers: vec![gold],
            });
        }
        eval_sets.push(EvalSet::new(&language.lang, examples));
    }

    let distractor_pool = (spec.distractors > 0).then(|| {
        let mut drng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
        let mut records = Vec::with_capacity(spec.distractors);
        while records.len() < spec.distractors {
            let base = &questions[drng.gen_range(0..questions.len())];
            let mut words: Vec<&str> = base.clone();
            let drops = drng.gen_range(0..=2).min(words.len() - 2);
            for _ in 0..drops {
                let j = drng.gen_range(0..words.len());
                words.remove(j);
            }
            if drops == 0 || drng.gen_bool(0.5) {
                let j = drng.gen_range(0..words.len());
                words[j] = vocab[drng.gen_range(0..vocab.len())].as_str();
            }
            let text = words.join(" ");
            if !seen_text.insert(normalize_query(&text)) {
                continue;
            }
            let id = format!("dis-{:05}", records.len());
            let answer = capitalize(&fresh_word(&mut drng, &mut taken, 3));
            records.push((
                QueryRecord {
                    id: id.clone(),
                    text,
                    lang: crate::corpus::HRL_LANG.to_owned(),
                },
                AnswerRecord {
                    query_id: id,
                    answers: vec![answer],
                },
            ));
        }
        Database::from_records(
            "synthetic-distractors",
            records,
            &IngestOptions { dedup: false },
        )
        .expect("non-empty distractor pool")
    });

    SyntheticCorpus {
        db,
        eval_sets,
        distractor_pool,
        kg: KnowledgeGraph::new(entities),
    }
}

impl SyntheticCorpus {
    /// Gold (LRL, HRL) pairs across every language.
    pub fn oracle_scorer(&self) -> OracleScorer {
        OracleScorer::from_eval_sets(&self.db, &self.eval_sets)
    }

    pub fn eval_set(&self, lang: &str) -> Option<&EvalSet> {
        self.eval_sets.iter().find(|s| s.lang == lang)
    }

    /// Writes `db.jsonl`, `eval.jsonl`, `kg.tsv` and, when present,
    /// `distractors.jsonl` in the formats the ingest functions read.
    pub fn write_files(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("db.jsonl"), self.db.canonical_jsonl())?;
        if let Some(pool) = &self.distractor_pool {
            fs::write(dir.join("distractors.jsonl"), pool.canonical_jsonl())?;
        }

        let mut eval = io::BufWriter::new(fs::File::create(dir.join("eval.jsonl"))?);
        let rows = self.eval_sets.first().map_or(0, EvalSet::len);
        for i in 0..rows {
            let mut queries = serde_json::Map::new();
            let mut answers = serde_json::Map::new();
            let pid = self.eval_sets[0].examples[i].parallel_id.clone();
            if let Some(pid) = &pid {
                if let Some(q) = self.db.query(pid) {
                    queries.insert(q.lang.clone(), json!(q.text));
                    let gold = crate::corpus::lookup_answer(&self.db, pid)
                        .map(|a| a.answers.clone())
                        .unwrap_or_default();
                    answers.insert(q.lang.clone(), json!(gold));
                }
            }
            for set in &self.eval_sets {
                let e = &set.examples[i];
                queries.insert(set.lang.clone(), json!(e.lrl_query.text));
                answers.insert(set.lang.clone(), json!(e.gold_answers));
            }
            let row = json!({"pid": pid, "queries": queries, "answers": answers});
            writeln!(eval, "{row}")?;
        }
        eval.flush()?;

        let mut kg = io::BufWriter::new(fs::File::create(dir.join("kg.tsv"))?);
        writeln!(kg, "# entity_id\tlang|alias\tsurface")?;
        let mut ids: Vec<String> = (0..self.db.len()).map(|i| format!("E{i:05}")).collect();
        ids.retain(|id| self.kg.entity(id).is_some());
        for id in ids {
            let entity = self.kg.entity(&id).expect("retained");
            for (lang, label) in &entity.labels {
                writeln!(kg, "{id}\t{lang}\t{label}")?;
            }
        }
        kg.flush()
    }
}
