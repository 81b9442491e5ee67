//! Supervisor for a persistent Python interpreter.
//!
//! The child runs the bundled harness script and speaks one JSON object per
//! line over stdin/stdout. The supervisor owns every timeout: when a request
//! overruns, the child is killed and the session goes dead until
//! [`SandboxSession::reset`] (or [`SandboxSession::ensure_live`]) restarts it.
//!
//! Two namespaces exist inside the child. `exec` runs in the shared one, so a
//! chain's snippets see each other's variables. `run_test` and `coverage`
//! always build a fresh namespace and never touch the shared one.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{ExecOutcome, OutcomeKind};

/// Source of the in-interpreter harness.
pub const HARNESS_SOURCE: &str = include_str!("../assets/harness.py");

pub const OUTPUT_LIMIT: usize = 2000;
pub const TRUNCATION_MARKER: &str = "...[truncated]";
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const TEST_TIME_LIMIT: Duration = Duration::from_secs(1);
pub const SNIPPET_TIME_LIMIT: Duration = Duration::from_secs(10);

const STDERR_TAIL_BYTES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxConfig {
    pub interpreter: PathBuf,
    /// Harness script; `None` uses the bundled copy.
    pub harness: Option<PathBuf>,
    /// Character cap applied separately to stdout and stderr of `exec`.
    pub output_limit: usize,
    pub handshake_timeout: Duration,
    /// Extra time the supervisor allows past a test's own limit before killing.
    pub kill_grace: Duration,
}

impl SandboxConfig {
    pub fn new(interpreter: impl Into<PathBuf>) -> Self {
        SandboxConfig {
            interpreter: interpreter.into(),
            harness: None,
            output_limit: OUTPUT_LIMIT,
            handshake_timeout: HANDSHAKE_TIMEOUT,
            kill_grace: Duration::from_millis(300),
        }
    }

    pub fn with_harness(mut self, harness: impl Into<PathBuf>) -> Self {
        self.harness = Some(harness.into());
        self
    }
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig::new("python3")
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to spawn interpreter {path}: {source}")]
    Spawn {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("harness handshake failed: {0}")]
    Handshake(String),
    #[error("sandbox session is dead")]
    Dead,
    #[error("interpreter exited unexpectedly: {stderr}")]
    Crashed { stderr: String },
    #[error("protocol desync: {0}")]
    ProtocolDesync(String),
    #[error("harness reported an error: {0}")]
    Harness(String),
    #[error("coverage run exceeded {0:?}")]
    CoverageTimeout(Duration),
    #[error("writing harness script: {0}")]
    HarnessFile(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Live,
    Dead,
}

/// Result of one `exec` in the shared namespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub ok: bool,
    pub stdout: String,
    pub stderr: String,
    #[serde(default)]
    pub timed_out: bool,
    /// Not serialized: wall time would break byte-reproducible artifacts.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExecResult {
    /// stdout followed by stderr, as shown to a model.
    pub fn combined_output(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => {
                let sep = if self.stdout.ends_with('\n') { "" } else { "\n" };
                format!("{}{sep}{}", self.stdout, self.stderr)
            }
        }
    }
}

/// Line sets reported by the coverage op.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoverageLines {
    pub executed: BTreeSet<u32>,
    pub executable: BTreeSet<u32>,
}

impl CoverageLines {
    pub fn ratio(&self) -> f64 {
        if self.executable.is_empty() {
            0.0
        } else {
            self.executed.len() as f64 / self.executable.len() as f64
        }
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    id: u64,
    op: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    code: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    program: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assertion: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assertions: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_limit_ms: Option<u64>,
}

impl<'a> WireRequest<'a> {
    fn op(op: &'a str) -> Self {
        WireRequest { id: 0, op, code: None, program: None, assertion: None, assertions: None, time_limit_ms: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct WireResponse {
    id: i64,
    ok: bool,
    #[serde(default)]
    stdout: String,
    #[serde(default)]
    stderr: String,
    #[serde(default)]
    outcome: Option<String>,
    #[serde(default)]
    executed_lines: Option<Vec<u32>>,
    #[serde(default)]
    executable_lines: Option<Vec<u32>>,
}

enum Reply {
    Response(WireResponse),
    TimedOut,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    stderr_tail: Arc<Mutex<String>>,
}

impl Process {
    fn kill(mut self) {
        drop(self.stdin);
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn stderr_tail(&self) -> String {
        self.stderr_tail.lock().map(|s| s.clone()).unwrap_or_default()
    }
}

/// A supervised interpreter. Single owner; `Send` but used from one thread at a time.
pub struct SandboxSession {
    config: SandboxConfig,
    harness_path: PathBuf,
    process: Option<Process>,
    next_id: u64,
    exec_count: u64,
}

impl std::fmt::Debug for SandboxSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxSession")
            .field("interpreter", &self.config.interpreter)
            .field("state", &self.state())
            .field("exec_count", &self.exec_count)
            .finish()
    }
}

impl SandboxSession {
    /// Spawns `interpreter_path` running `harness_path` and waits for a ping.
    pub fn start(interpreter_path: impl Into<PathBuf>, harness_path: impl Into<PathBuf>) -> Result<Self, SandboxError> {
        Self::with_config(SandboxConfig::new(interpreter_path).with_harness(harness_path))
    }

    /// Starts a session using the bundled harness.
    pub fn start_default(interpreter_path: impl Into<PathBuf>) -> Result<Self, SandboxError> {
        Self::with_config(SandboxConfig::new(interpreter_path))
    }

    pub fn with_config(config: SandboxConfig) -> Result<Self, SandboxError> {
        let harness_path = match &config.harness {
            Some(path) => path.clone(),
            None => bundled_harness_path()?,
        };
        let mut session = SandboxSession { config, harness_path, process: None, next_id: 1, exec_count: 0 };
        session.spawn()?;
        Ok(session)
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn state(&self) -> SessionState {
        if self.process.is_some() {
            SessionState::Live
        } else {
            SessionState::Dead
        }
    }

    pub fn is_live(&self) -> bool {
        self.process.is_some()
    }

    /// Successful `exec` calls since the last start or reset.
    pub fn exec_count(&self) -> u64 {
        self.exec_count
    }

    fn spawn(&mut self) -> Result<(), SandboxError> {
        let mut child = Command::new(&self.config.interpreter)
            .arg("-u")
            .arg(&self.harness_path)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| SandboxError::Spawn { path: self.config.interpreter.clone(), source })?;

        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");

        let (tx, lines) = mpsc::channel();
        thread::Builder::new()
            .name("sandbox-stdout".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn stdout reader");

        let stderr_tail = Arc::new(Mutex::new(String::new()));
        let tail = Arc::clone(&stderr_tail);
        thread::Builder::new()
            .name("sandbox-stderr".into())
            .spawn(move || drain_stderr(stderr, &tail))
            .expect("spawn stderr reader");

        self.process = Some(Process { child, stdin, lines, stderr_tail });
        self.exec_count = 0;

        let deadline = self.config.handshake_timeout;
        match self.request(WireRequest::op("ping"), deadline) {
            Ok(Reply::Response(resp)) if resp.ok => Ok(()),
            Ok(Reply::Response(resp)) => {
                self.kill();
                Err(SandboxError::Handshake(format!("ping rejected: {}", resp.stderr)))
            }
            Ok(Reply::TimedOut) => Err(SandboxError::Handshake(format!("no ping response within {deadline:?}"))),
            Err(err) => {
                self.kill();
                Err(SandboxError::Handshake(err.to_string()))
            }
        }
    }

    fn kill(&mut self) {
        if let Some(process) = self.process.take() {
            process.kill();
        }
    }

    /// Sends one request and waits up to `deadline` for its response. On
    /// timeout the child is killed and the session goes dead.
    fn request(&mut self, mut req: WireRequest<'_>, deadline: Duration) -> Result<Reply, SandboxError> {
        let Some(process) = self.process.as_mut() else {
            return Err(SandboxError::Dead);
        };
        req.id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        if process.stdin.write_all(line.as_bytes()).and_then(|_| process.stdin.flush()).is_err() {
            return Err(self.crashed());
        }
        match process.lines.recv_timeout(deadline) {
            Ok(raw) => {
                let resp: WireResponse = match serde_json::from_str(&raw) {
                    Ok(resp) => resp,
                    Err(e) => {
                        self.kill();
                        return Err(SandboxError::ProtocolDesync(format!("unparsable response {raw:?}: {e}")));
                    }
                };
                if resp.id != req.id as i64 {
                    self.kill();
                    return Err(SandboxError::ProtocolDesync(format!(
                        "expected response id {}, got {}",
                        req.id, resp.id
                    )));
                }
                Ok(Reply::Response(resp))
            }
            Err(RecvTimeoutError::Timeout) => {
                tracing::debug!(op = req.op, ?deadline, "sandbox request timed out; killing interpreter");
                self.kill();
                Ok(Reply::TimedOut)
            }
            Err(RecvTimeoutError::Disconnected) => Err(self.crashed()),
        }
    }

    fn crashed(&mut self) -> SandboxError {
        let stderr = match self.process.take() {
            Some(mut process) => {
                let _ = process.child.wait();
                // Give the stderr drain a moment to catch the final words.
                thread::sleep(Duration::from_millis(20));
                let tail = process.stderr_tail();
                process.kill();
                tail
            }
            None => String::new(),
        };
        SandboxError::Crashed { stderr }
    }

    pub fn ping(&mut self) -> Result<(), SandboxError> {
        match self.request(WireRequest::op("ping"), self.config.handshake_timeout)? {
            Reply::Response(resp) if resp.ok => Ok(()),
            Reply::Response(resp) => Err(SandboxError::Harness(resp.stderr)),
            Reply::TimedOut => Err(SandboxError::Dead),
        }
    }

    /// Runs `code` in the shared namespace. Overrunning `time_limit` kills the
    /// interpreter and returns a timed-out result.
    pub fn exec(&mut self, code: &str, time_limit: Duration) -> Result<ExecResult, SandboxError> {
        let started = Instant::now();
        let req = WireRequest { code: Some(code), ..WireRequest::op("exec") };
        let limit = self.config.output_limit;
        match self.request(req, time_limit)? {
            Reply::Response(resp) => {
                self.exec_count += 1;
                Ok(ExecResult {
                    ok: resp.ok,
                    stdout: truncate_output(&resp.stdout, limit),
                    stderr: truncate_output(&resp.stderr, limit),
                    timed_out: false,
                    wall_time: started.elapsed(),
                })
            }
            Reply::TimedOut => Ok(ExecResult {
                ok: false,
                stdout: String::new(),
                stderr: format!("TimeoutError: execution exceeded the {} ms time limit", time_limit.as_millis()),
                timed_out: true,
                wall_time: started.elapsed(),
            }),
        }
    }

    /// Leaves a live session with an empty shared namespace, restarting the
    /// interpreter if it is dead or misbehaving.
    pub fn reset(&mut self) -> Result<(), SandboxError> {
        if self.is_live() {
            if let Ok(Reply::Response(resp)) = self.request(WireRequest::op("reset"), self.config.handshake_timeout) {
                if resp.ok {
                    self.exec_count = 0;
                    return Ok(());
                }
            }
            self.kill();
        }
        self.spawn()
    }

    /// Restarts a dead session; a live one is left untouched.
    pub fn ensure_live(&mut self) -> Result<(), SandboxError> {
        if self.is_live() {
            Ok(())
        } else {
            self.spawn()
        }
    }

    /// Runs `program` then `assertion` in a fresh namespace and classifies the
    /// outcome. The harness enforces `time_limit` cooperatively; the supervisor
    /// kills the interpreter if it has not answered by `time_limit + kill_grace`.
    pub fn run_isolated_test(
        &mut self,
        program: &str,
        assertion: &str,
        time_limit: Duration,
    ) -> Result<ExecOutcome, SandboxError> {
        let req = WireRequest {
            program: Some(program),
            assertion: Some(assertion),
            time_limit_ms: Some(time_limit.as_millis() as u64),
            ..WireRequest::op("run_test")
        };
        let deadline = time_limit + self.config.kill_grace;
        match self.request(req, deadline)? {
            Reply::Response(resp) => {
                let kind = match resp.outcome.as_deref() {
                    Some("pass") => OutcomeKind::Pass,
                    Some("assertion_error") => OutcomeKind::AssertionError,
                    Some("runtime_error") => OutcomeKind::RuntimeError,
                    Some("timeout") => OutcomeKind::Timeout,
                    other => {
                        return Err(SandboxError::Harness(format!(
                            "run_test response without a valid outcome ({other:?}): {}",
                            resp.stderr
                        )))
                    }
                };
                Ok(ExecOutcome { kind, diagnostic: truncate_output(&resp.stderr, self.config.output_limit) })
            }
            Reply::TimedOut => Ok(ExecOutcome {
                kind: OutcomeKind::Timeout,
                diagnostic: format!("killed after {} ms", deadline.as_millis()),
            }),
        }
    }

    /// Traces which statement lines of `program` the assertions reach, each
    /// assertion in its own fresh namespace.
    pub fn coverage(
        &mut self,
        program: &str,
        assertions: &[String],
        time_limit: Duration,
    ) -> Result<CoverageLines, SandboxError> {
        let req = WireRequest {
            program: Some(program),
            assertions: Some(assertions),
            time_limit_ms: Some(time_limit.as_millis() as u64),
            ..WireRequest::op("coverage")
        };
        let deadline = time_limit * (assertions.len() as u32 + 1) + self.config.kill_grace + Duration::from_secs(2);
        match self.request(req, deadline)? {
            Reply::Response(resp) if resp.ok => Ok(CoverageLines {
                executed: resp.executed_lines.unwrap_or_default().into_iter().collect(),
                executable: resp.executable_lines.unwrap_or_default().into_iter().collect(),
            }),
            Reply::Response(resp) => Err(SandboxError::Harness(resp.stderr)),
            Reply::TimedOut => Err(SandboxError::CoverageTimeout(deadline)),
        }
    }

    /// Whether `source` compiles as exactly one `assert` statement. Compiles
    /// in the interpreter without binding any name in the shared namespace.
    pub fn compiles_as_assertion(&mut self, source: &str) -> Result<bool, SandboxError> {
        let literal = serde_json::to_string(source).expect("string serializes");
        let probe = format!(
            "(lambda t: (compile(t, '<assertion>', 'exec'), print(len(t.body) == 1 and type(t.body[0]).__name__ == 'Assert')))(__import__('ast').parse({literal}))"
        );
        let result = self.exec(&probe, Duration::from_secs(5))?;
        if result.timed_out {
            self.ensure_live()?;
            return Ok(false);
        }
        Ok(result.ok && result.stdout.trim() == "True")
    }
}

impl Drop for SandboxSession {
    fn drop(&mut self) {
        self.kill();
    }
}

fn drain_stderr(mut stderr: impl Read, tail: &Mutex<String>) {
    let mut buf = [0u8; 4096];
    loop {
        match stderr.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let Ok(mut tail) = tail.lock() else { break };
                tail.push_str(&String::from_utf8_lossy(&buf[..n]));
                if tail.len() > STDERR_TAIL_BYTES {
                    let mut cut = tail.len() - STDERR_TAIL_BYTES;
                    while !tail.is_char_boundary(cut) {
                        cut += 1;
                    }
                    tail.drain(..cut);
                }
            }
        }
    }
}

/// Caps `text` at `limit` characters, appending [`TRUNCATION_MARKER`] when cut.
pub fn truncate_output(text: &str, limit: usize) -> String {
    match text.char_indices().nth(limit) {
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &text[..cut]),
        None => text.to_string(),
    }
}

static HARNESS_WRITES: AtomicU64 = AtomicU64::new(0);

/// Writes the bundled harness to the temp directory (once per content hash).
pub fn bundled_harness_path() -> Result<PathBuf, SandboxError> {
    let digest = hex::encode(Sha256::digest(HARNESS_SOURCE.as_bytes()));
    let path = std::env::temp_dir().join(format!("testchain-harness-{}.py", &digest[..16]));
    if file_matches(&path, HARNESS_SOURCE) {
        return Ok(path);
    }
    let unique = format!(
        "testchain-harness-{}.{}.{}.tmp",
        &digest[..16],
        std::process::id(),
        HARNESS_WRITES.fetch_add(1, Ordering::Relaxed)
    );
    let tmp = std::env::temp_dir().join(unique);
    std::fs::write(&tmp, HARNESS_SOURCE).map_err(SandboxError::HarnessFile)?;
    std::fs::rename(&tmp, &path).map_err(SandboxError::HarnessFile)?;
    Ok(path)
}

fn file_matches(path: &Path, expected: &str) -> bool {
    std::fs::read_to_string(path).is_ok_and(|text| text == expected)
}
