//! Line-JSON adapter for tests: Dice token overlap for `score`, identity
//! for `translate`, plus switches that inject failures.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::Parser;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "xlpivot-mock-adapter",
    about = "Test adapter speaking the xlpivot line protocol"
)]
struct Args {
    /// Reply with an error to every Nth request.
    #[arg(long)]
    fail_every: Option<u64>,
    /// Exit with status 3 after answering N requests.
    #[arg(long)]
    exit_after: Option<u64>,
    /// Reply with non-JSON after answering N requests.
    #[arg(long)]
    garbage_after: Option<u64>,
    /// Sleep before every reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Append this suffix to every translation.
    #[arg(long, default_value = "")]
    suffix: String,
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn dice(a: &str, b: &str) -> f64 {
    let (a, b) = (tokens(a), tokens(b));
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

fn reply(request: &Value, suffix: &str) -> Value {
    let field = |k: &str| request.get(k).and_then(Value::as_str);
    match field("op") {
        Some("score") => match (field("a"), field("b")) {
            (Some(a), Some(b)) => json!({"score": dice(a, b)}),
            _ => json!({"error": "score needs `a` and `b`"}),
        },
        Some("translate") => match field("text") {
            Some(text) => json!({"text": format!("{text}{suffix}")}),
            None => json!({"error": "translate needs `text`"}),
        },
        _ => json!({"error": "unknown op"}),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for (answered, line) in (0u64..).zip(stdin.lock().lines()) {
        let Ok(line) = line else { break };
        if args.exit_after == Some(answered) {
            return ExitCode::from(3);
        }
        if args.delay_ms > 0 {
            thread::sleep(Duration::from_millis(args.delay_ms));
        }
        let served = answered + 1;
        let out = if args.garbage_after.is_some_and(|n| served > n) {
            "not json".to_owned()
        } else if args.fail_every.is_some_and(|n| n > 0 && served % n == 0) {
            json!({"error": "injected failure"}).to_string()
        } else {
            match serde_json::from_str::<Value>(&line) {
                Ok(request) => reply(&request, &args.suffix).to_string(),
                Err(e) => json!({"error": format!("bad request: {e}")}).to_string(),
            }
        };
        if writeln!(stdout, "{out}")
            .and_then(|_| stdout.flush())
            .is_err()
        {
            break;
        }
    }
    ExitCode::SUCCESS
}
