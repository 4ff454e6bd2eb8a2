//! External scorer/translator processes speaking line-delimited JSON.
//!
//! Requests and responses are one JSON object per line:
//!
//! ```text
//! {"op":"score","a":"...","b":"..."}                    -> {"score": 0.93}
//! {"op":"translate","text":"...","src":"en","tgt":"th"} -> {"text": "..."}
//! ```
//!
//! A response carrying an `"error"` string is reported as an adapter error.
//! Each call waits at most the configured timeout; a timed-out or exited
//! child is an error and is not restarted.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::pivot::{Scorer, Translator};

pub const TIMEOUT_ENV: &str = "XLPIVOT_ADAPTER_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("adapter `{name}` failed to start: {reason}")]
    Spawn { name: String, reason: String },
    #[error("adapter `{name}` timed out after {ms} ms")]
    Timeout { name: String, ms: u64 },
    #[error("adapter `{name}` exited: {status}")]
    Exited { name: String, status: String },
    #[error("adapter `{name}` protocol error: {reason}")]
    Protocol { name: String, reason: String },
    #[error("adapter `{name}`: {reason}")]
    Failed { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    #[serde(default = "one")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

fn one() -> usize {
    1
}

/// Timeout from `XLPIVOT_ADAPTER_TIMEOUT_MS`, else the default.
pub fn timeout_from_env() -> Duration {
    let ms = std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_TIMEOUT_MS);
    Duration::from_millis(ms)
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    dead: Option<AdapterError>,
}

impl Worker {
    fn spawn(name: &str, command: &[String]) -> Result<Self, AdapterError> {
        let (program, args) = command.split_first().ok_or_else(|| AdapterError::Spawn {
            name: name.to_owned(),
            reason: "empty command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AdapterError::Spawn {
                name: name.to_owned(),
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            dead: None,
        })
    }

    fn call(
        &mut self,
        name: &str,
        request: &Value,
        timeout: Duration,
    ) -> Result<Value, AdapterError> {
        if let Some(err) = &self.dead {
            return Err(err.clone());
        }
        let result = self.exchange(name, request, timeout);
        if let Err(err @ (AdapterError::Timeout { .. } | AdapterError::Exited { .. })) = &result {
            let _ = self.child.kill();
            self.dead = Some(err.clone());
        }
        result
    }

    fn exchange(
        &mut self,
        name: &str,
        request: &Value,
        timeout: Duration,
    ) -> Result<Value, AdapterError> {
        let mut line = serde_json::to_string(request).expect("serializable request");
        line.push('\n');
        if let Err(e) = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
        {
            return Err(self.exit_error(name, e.to_string()));
        }
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(reply)) => {
                let value: Value =
                    serde_json::from_str(&reply).map_err(|e| AdapterError::Protocol {
                        name: name.to_owned(),
                        reason: format!("invalid json reply: {e}"),
                    })?;
                if let Some(msg) = value.get("error").and_then(Value::as_str) {
                    return Err(AdapterError::Failed {
                        name: name.to_owned(),
                        reason: msg.to_owned(),
                    });
                }
                Ok(value)
            }
            Ok(Err(e)) => Err(self.exit_error(name, e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(AdapterError::Timeout {
                name: name.to_owned(),
                ms: timeout.as_millis() as u64,
            }),
            Err(RecvTimeoutError::Disconnected) => {
                Err(self.exit_error(name, "stdout closed".into()))
            }
        }
    }

    fn exit_error(&mut self, name: &str, fallback: String) -> AdapterError {
        // Give the child a moment to be reaped so the status is available.
        for _ in 0..50 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return AdapterError::Exited {
                    name: name.to_owned(),
                    status: status.to_string(),
                };
            }
            thread::sleep(Duration::from_millis(2));
        }
        AdapterError::Exited {
            name: name.to_owned(),
            status: fallback,
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of `max_in_flight` identical child processes.
pub struct ProcessAdapter {
    name: String,
    workers: Vec<Mutex<Worker>>,
    next: AtomicUsize,
    timeout: Duration,
}

impl std::fmt::Debug for ProcessAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessAdapter")
            .field("name", &self.name)
            .field("workers", &self.workers.len())
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ProcessAdapter {
    pub fn start(name: &str, spec: &ProcessSpec) -> Result<Self, AdapterError> {
        let timeout = spec
            .timeout_ms
            .map(Duration::from_millis)
            .unwrap_or_else(timeout_from_env);
        let workers = (0..spec.max_in_flight.max(1))
            .map(|_| Worker::spawn(name, &spec.command).map(Mutex::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            name: name.to_owned(),
            workers,
            next: AtomicUsize::new(0),
            timeout,
        })
    }

    pub fn max_in_flight(&self) -> usize {
        self.workers.len()
    }

    pub fn call(&self, request: &Value) -> Result<Value, AdapterError> {
        let slot = self.next.fetch_add(1, Ordering::Relaxed) % self.workers.len();
        let mut worker = self.workers[slot].lock().unwrap_or_else(|p| p.into_inner());
        worker.call(&self.name, request, self.timeout)
    }

    fn protocol(&self, reason: &str) -> AdapterError {
        AdapterError::Protocol {
            name: self.name.clone(),
            reason: reason.to_owned(),
        }
    }
}

impl Scorer for ProcessAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, lrl_text: &str, hrl_text: &str) -> Result<f64, AdapterError> {
        let reply = self.call(&json!({"op": "score", "a": lrl_text, "b": hrl_text}))?;
        reply
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| self.protocol("reply lacks numeric `score`"))
    }
}

impl Translator for ProcessAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, AdapterError> {
        let reply = self.call(&json!({"op": "translate", "text": text, "src": src, "tgt": tgt}))?;
        reply
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| self.protocol("reply lacks string `text`"))
    }
}
