//! Plumbing shared by the external-model clients (generator, captioner,
//! detector, similarity scorer): retry with backoff and a JSON-over-stdio
//! subprocess transport.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: usize) -> Self {
        Self {
            retries,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds or the retry budget is spent, sleeping
    /// `base_delay * 2^k` before retry `k`.
    pub fn run<T>(&self, mut op: impl FnMut(usize) -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= self.retries => return Err(e),
                Err(e) => {
                    log::warn!("attempt {} failed: {e}; retrying", attempt + 1);
                    let delay = self.base_delay.saturating_mul(1 << attempt.min(16));
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
            }
        }
    }
}

/// Sends one JSON request on stdin to an external program and parses one JSON
/// response from its stdout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandClient {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub tag: String,
}

impl CommandClient {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, tag: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            args,
            tag: tag.into(),
        }
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(&self, request: &Req) -> Result<Resp> {
        let body = serde_json::to_vec(request)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Client(format!("{}: spawn failed: {e}", self.program.display())))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(&body)
            .map_err(|e| Error::Client(format!("{}: write failed: {e}", self.program.display())))?;
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Client(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Client(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Client(format!("{}: bad response: {e}", self.program.display())))
    }
}
