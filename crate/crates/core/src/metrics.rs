//! Scoring of case sets against the canonical solution.
//!
//! Accuracy is the share of cases the canonical solution passes. Line coverage
//! is measured on the canonical solution over all retained cases. CwB
//! (Code-with-Bugs) is the share of faulty programs that fail at least one
//! case. Dataset accuracy pools cases; coverage and CwB are means over
//! questions, computed exactly.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Problem;
use crate::pyscan::{tokenize, Token, TokenKind};
use crate::sandbox::{SandboxError, SandboxSession, TEST_TIME_LIMIT};
use crate::testcase::CaseSet;

pub const DEFAULT_FAULTY_COUNT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Pass,
    AssertionError,
    RuntimeError,
    Timeout,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Pass => "pass",
            OutcomeKind::AssertionError => "assertion_error",
            OutcomeKind::RuntimeError => "runtime_error",
            OutcomeKind::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub kind: OutcomeKind,
    pub diagnostic: String,
}

impl ExecOutcome {
    pub fn is_pass(&self) -> bool {
        self.kind == OutcomeKind::Pass
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("canonical solution of {question_id} does not run under the coverage tracer: {detail}")]
    Canonical { question_id: String, detail: String },
    #[error("reading faulty programs from {path}: {detail}")]
    FaultyFile { path: String, detail: String },
    #[error("unknown metric {0:?} (expected accuracy, coverage or cwb)")]
    UnknownMetric(String),
}

/// An exact ratio, kept with its parts so reports can be recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
}

impl Fraction {
    /// `0/0` is defined as 0.
    pub fn new(numerator: u64, denominator: u64) -> Self {
        let value = if denominator == 0 { 0.0 } else { numerator as f64 / denominator as f64 };
        Fraction { numerator, denominator, value }
    }

    fn exact(&self) -> BigRational {
        if self.denominator == 0 {
            BigRational::zero()
        } else {
            BigRational::new(BigInt::from(self.numerator), BigInt::from(self.denominator))
        }
    }
}

/// Which metrics an evaluation computes. Accuracy is always available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: bool,
    pub coverage: bool,
    pub cwb: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet { accuracy: true, coverage: true, cwb: true };
}

impl Default for MetricSet {
    fn default() -> Self {
        MetricSet { accuracy: true, coverage: true, cwb: false }
    }
}

impl FromStr for MetricSet {
    type Err = MetricsError;

    /// Comma-separated list, e.g. `accuracy,coverage,cwb`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = MetricSet { accuracy: false, coverage: false, cwb: false };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "accuracy" => set.accuracy = true,
                "coverage" | "line_coverage" => set.coverage = true,
                "cwb" => set.cwb = true,
                other => return Err(MetricsError::UnknownMetric(other.to_string())),
            }
        }
        Ok(set)
    }
}

/// Runs one case against the canonical solution in a fresh namespace.
pub fn classify_case(
    problem: &Problem,
    assertion: &str,
    session: &mut SandboxSession,
    time_limit: Duration,
) -> Result<ExecOutcome, SandboxError> {
    session.ensure_live()?;
    session.run_isolated_test(&problem.canonical_program(), assertion, time_limit)
}

pub fn question_accuracy(outcomes: &[ExecOutcome]) -> Fraction {
    let passes = outcomes.iter().filter(|o| o.is_pass()).count();
    Fraction::new(passes as u64, outcomes.len() as u64)
}

/// Executed over executable statement lines of the canonical program, over
/// every case including failing ones. An empty case set scores 0.
pub fn question_line_coverage(
    problem: &Problem,
    case_set: &CaseSet,
    session: &mut SandboxSession,
    time_limit: Duration,
) -> Result<Fraction, MetricsError> {
    session.ensure_live()?;
    let lines = match session.coverage(&problem.canonical_program(), &case_set.assertions(), time_limit) {
        Ok(lines) => lines,
        Err(SandboxError::Harness(detail)) => {
            return Err(MetricsError::Canonical { question_id: problem.task_id.clone(), detail })
        }
        Err(err) => return Err(err.into()),
    };
    let executed = lines.executed.intersection(&lines.executable).count();
    let numerator = if case_set.is_empty() { 0 } else { executed as u64 };
    Ok(Fraction::new(numerator, lines.executable.len() as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultyProvider {
    Mutation,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultyProgramSet {
    pub question_id: String,
    /// Complete programs (prompt stub plus faulty body).
    pub programs: Vec<String>,
    pub provider: FaultyProvider,
    /// Set when fewer programs than requested could be produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<String>,
}

/// Per-question seed, so questions do not share one mutation order.
pub fn question_seed(seed: u64, question_id: &str) -> u64 {
    let digest = Sha256::digest(question_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(bytes)
}

/// Up to `count` single-site mutants of the canonical body, deterministic in
/// `(problem, seed)`.
///
/// Operators: comparison swap, `<`/`<=` boundary swap, binary arithmetic swap,
/// integer literal off by one, `True`/`False` and `and`/`or` flips, negated
/// `if`/`elif`/`while` conditions, and an early `return None`. Candidates
/// identical to the canonical body or to each other are dropped before the
/// seeded shuffle picks the subset.
pub fn mutate_canonical(problem: &Problem, count: usize, seed: u64) -> FaultyProgramSet {
    let body = &problem.canonical_solution;
    let mut seen = HashSet::from([body.clone()]);
    let mut bodies: Vec<String> = mutant_bodies(body).into_iter().filter(|m| seen.insert(m.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(question_seed(seed, &problem.task_id));
    bodies.shuffle(&mut rng);
    bodies.truncate(count);
    let shortfall = (bodies.len() < count).then(|| {
        tracing::warn!(question = %problem.task_id, produced = bodies.len(), requested = count, "too few mutation sites");
        format!("only {} distinct mutants of {count} requested", bodies.len())
    });
    FaultyProgramSet {
        question_id: problem.task_id.clone(),
        programs: bodies.iter().map(|b| problem.program_with_body(b)).collect(),
        provider: FaultyProvider::Mutation,
        shortfall,
    }
}

const UNARY_CONTEXT_KEYWORDS: &[&str] = &[
    "return", "in", "and", "or", "not", "if", "elif", "else", "while", "for", "is", "lambda", "yield", "assert",
    "print",
];

fn splice(src: &str, token: &Token, replacement: &str) -> String {
    format!("{}{replacement}{}", &src[..token.start], &src[token.end..])
}

/// Whether the operator token at `i` has a left operand.
fn is_binary(src: &str, tokens: &[Token], i: usize) -> bool {
    let prev = tokens[..i].iter().rev().find(|t| !matches!(t.kind, TokenKind::Space | TokenKind::Comment));
    match prev {
        Some(t) => match t.kind {
            TokenKind::Number | TokenKind::Str => true,
            TokenKind::Name => !UNARY_CONTEXT_KEYWORDS.contains(&t.text(src)),
            TokenKind::Op => matches!(t.text(src), ")" | "]" | "}"),
            _ => false,
        },
        None => false,
    }
}

fn mutant_bodies(body: &str) -> Vec<String> {
    let tokens = tokenize(body);
    let mut out = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let text = t.text(body);
        let replacements: &[&str] = match t.kind {
            TokenKind::Op => match text {
                "==" => &["!="],
                "!=" => &["=="],
                "<" => &[">", "<="],
                ">" => &["<", ">="],
                "<=" => &[">=", "<"],
                ">=" => &["<=", ">"],
                "+" | "-" | "*" | "/" | "//" | "%" if !is_binary(body, &tokens, i) => &[],
                "+" => &["-"],
                "-" => &["+"],
                "*" => &["+"],
                "/" => &["*"],
                "//" => &["/"],
                "%" => &["//"],
                _ => &[],
            },
            TokenKind::Name => match text {
                "True" => &["False"],
                "False" => &["True"],
                "and" => &["or"],
                "or" => &["and"],
                _ => &[],
            },
            TokenKind::Number if text.bytes().all(|b| b.is_ascii_digit()) => {
                if let Ok(n) = text.parse::<u64>() {
                    out.push(splice(body, t, &(n + 1).to_string()));
                    if n > 0 {
                        out.push(splice(body, t, &(n - 1).to_string()));
                    }
                }
                &[]
            }
            _ => &[],
        };
        out.extend(replacements.iter().map(|r| splice(body, t, r)));
    }
    out.extend(negated_conditions(body));
    out.extend(early_return(body));
    out
}

/// `if cond:` becomes `if not (cond):`, one header at a time.
fn negated_conditions(body: &str) -> Vec<String> {
    let lines: Vec<&str> = body.split_inclusive('\n').collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let content = line.trim_end_matches(['\n', '\r']);
        let stripped = content.trim_start();
        let indent = &content[..content.len() - stripped.len()];
        let Some(keyword) = ["if ", "elif ", "while "].into_iter().find(|k| stripped.starts_with(k)) else {
            continue;
        };
        let code = match tokenize(stripped).into_iter().find(|t| t.kind == TokenKind::Comment) {
            Some(c) => stripped[..c.start].trim_end(),
            None => stripped.trim_end(),
        };
        let Some(cond) = code.strip_prefix(keyword).and_then(|c| c.strip_suffix(':')) else { continue };
        let newline = &line[content.len()..];
        let mutated = format!("{indent}{keyword}not ({}):{newline}", cond.trim());
        let mut mutant: String = lines[..i].concat();
        mutant.push_str(&mutated);
        mutant.push_str(&lines[i + 1..].concat());
        out.push(mutant);
    }
    out
}

/// `return None` before the first statement of the body.
fn early_return(body: &str) -> Option<String> {
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        let stripped = line.trim_start();
        if !stripped.trim().is_empty() && !stripped.starts_with('#') {
            let indent = &line[..line.len() - stripped.len()];
            return Some(format!("{}{indent}return None\n{}", &body[..offset], &body[offset..]));
        }
        offset += line.len();
    }
    None
}

#[derive(Deserialize)]
struct FaultyRecord {
    question_id: String,
    program: String,
}

/// Reads model-generated faulty programs, one `{"question_id", "program"}`
/// object per line. Programs are complete sources.
pub fn load_faulty_programs(path: &Path) -> Result<BTreeMap<String, FaultyProgramSet>, MetricsError> {
    let fail = |detail: String| MetricsError::FaultyFile { path: path.display().to_string(), detail };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let mut sets: BTreeMap<String, FaultyProgramSet> = BTreeMap::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FaultyRecord =
            serde_json::from_str(line).map_err(|e| fail(format!("line {}: {e}", index + 1)))?;
        sets.entry(record.question_id.clone())
            .or_insert_with(|| FaultyProgramSet {
                question_id: record.question_id,
                programs: Vec::new(),
                provider: FaultyProvider::ExternalFile,
                shortfall: None,
            })
            .programs
            .push(record.program);
    }
    Ok(sets)
}

/// Share of faulty programs that fail at least one case. A program that does
/// not even load yields a non-pass outcome and so counts as failing.
pub fn question_cwb(
    case_set: &CaseSet,
    faulty: &FaultyProgramSet,
    session: &mut SandboxSession,
    time_limit: Duration,
) -> Result<Fraction, SandboxError> {
    if case_set.is_empty() {
        return Ok(Fraction::new(0, faulty.programs.len() as u64));
    }
    let mut killed = 0u64;
    for program in &faulty.programs {
        for case in &case_set.cases {
            session.ensure_live()?;
            if !session.run_isolated_test(program, &case.assertion, time_limit)?.is_pass() {
                killed += 1;
                break;
            }
        }
    }
    Ok(Fraction::new(killed, faulty.programs.len() as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    pub question_id: String,
    pub n_cases: usize,
    pub outcomes: Vec<ExecOutcome>,
    pub accuracy: Fraction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_coverage: Option<Fraction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwb: Option<Fraction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faulty_shortfall: Option<String>,
    /// Set when the run directory had no case set for this question.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing_cases: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub metrics: MetricSet,
    pub time_limit: Duration,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { metrics: MetricSet::default(), time_limit: TEST_TIME_LIMIT }
    }
}

/// All requested metrics for one question. `faulty` is required for CwB.
pub fn evaluate_question(
    problem: &Problem,
    case_set: &CaseSet,
    faulty: Option<&FaultyProgramSet>,
    session: &mut SandboxSession,
    options: &EvalOptions,
) -> Result<QuestionReport, MetricsError> {
    let mut outcomes = Vec::with_capacity(case_set.len());
    for case in &case_set.cases {
        outcomes.push(classify_case(problem, &case.assertion, session, options.time_limit)?);
    }
    let line_coverage = if options.metrics.coverage {
        Some(question_line_coverage(problem, case_set, session, options.time_limit)?)
    } else {
        None
    };
    let cwb = match (options.metrics.cwb, faulty) {
        (true, Some(set)) => Some(question_cwb(case_set, set, session, options.time_limit)?),
        (true, None) => Some(Fraction::new(0, 0)),
        (false, _) => None,
    };
    Ok(QuestionReport {
        question_id: problem.task_id.clone(),
        n_cases: case_set.len(),
        accuracy: question_accuracy(&outcomes),
        outcomes,
        line_coverage,
        cwb,
        faulty_shortfall: faulty.filter(|_| options.metrics.cwb).and_then(|f| f.shortfall.clone()),
        missing_cases: false,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub assertion_error: u64,
    pub runtime_error: u64,
    pub timeout: u64,
}

impl ErrorHistogram {
    pub fn total(&self) -> u64 {
        self.assertion_error + self.runtime_error + self.timeout
    }

    pub fn add(&mut self, kind: OutcomeKind) {
        match kind {
            OutcomeKind::Pass => {}
            OutcomeKind::AssertionError => self.assertion_error += 1,
            OutcomeKind::RuntimeError => self.runtime_error += 1,
            OutcomeKind::Timeout => self.timeout += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub strategy: String,
    pub metrics: MetricSet,
    pub n_questions: usize,
    pub generated_cases: u64,
    pub passed_cases: u64,
    /// Passing cases over all generated cases.
    pub accuracy: f64,
    /// Unweighted mean of per-question accuracy.
    pub mean_question_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwb: Option<f64>,
    pub errors: ErrorHistogram,
    /// Questions evaluated without a case set.
    pub missing: Vec<String>,
    pub questions: Vec<QuestionReport>,
}

fn exact_mean<'a>(values: impl Iterator<Item = &'a Fraction>) -> f64 {
    let mut sum = BigRational::zero();
    let mut n = 0i64;
    for v in values {
        sum += v.exact();
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    (sum / BigRational::from_integer(BigInt::from(n))).to_f64().unwrap_or(0.0)
}

/// Reduces per-question reports; `questions` keeps the given order.
pub fn aggregate(
    dataset: &str,
    strategy: &str,
    metrics: MetricSet,
    questions: Vec<QuestionReport>,
) -> DatasetReport {
    let mut errors = ErrorHistogram::default();
    let (mut generated, mut passed) = (0u64, 0u64);
    for q in &questions {
        generated += q.outcomes.len() as u64;
        for o in &q.outcomes {
            errors.add(o.kind);
            passed += u64::from(o.is_pass());
        }
    }
    let line_coverage =
        metrics.coverage.then(|| exact_mean(questions.iter().map(|q| q.line_coverage.as_ref().unwrap_or(&ZERO))));
    let cwb = metrics.cwb.then(|| exact_mean(questions.iter().map(|q| q.cwb.as_ref().unwrap_or(&ZERO))));
    DatasetReport {
        dataset: dataset.to_string(),
        strategy: strategy.to_string(),
        metrics,
        n_questions: questions.len(),
        generated_cases: generated,
        passed_cases: passed,
        accuracy: Fraction::new(passed, generated).value,
        mean_question_accuracy: exact_mean(questions.iter().map(|q| &q.accuracy)),
        line_coverage,
        cwb,
        errors,
        missing: questions.iter().filter(|q| q.missing_cases).map(|q| q.question_id.clone()).collect(),
        questions,
    }
}

const ZERO: Fraction = Fraction { numerator: 0, denominator: 0, value: 0.0 };

fn percent(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}

/// Aligned comparison table, one row per report, plus error counts.
pub fn render_table(reports: &[&DatasetReport]) -> String {
    let show_acc = reports.iter().any(|r| r.metrics.accuracy);
    let show_cov = reports.iter().any(|r| r.line_coverage.is_some());
    let show_cwb = reports.iter().any(|r| r.cwb.is_some());

    let mut header = vec!["Strategy".to_string()];
    if show_acc {
        header.push("Accuracy (%)".into());
    }
    if show_cov {
        header.push("Line Cov (%)".into());
    }
    if show_cwb {
        header.push("CwB (%)".into());
    }
    header.extend(["Cases", "Assertion", "Runtime", "Timeout"].map(String::from));

    let dash = || "-".to_string();
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.strategy.clone()];
        if show_acc {
            row.push(percent(r.accuracy));
        }
        if show_cov {
            row.push(r.line_coverage.map_or_else(dash, percent));
        }
        if show_cwb {
            row.push(r.cwb.map_or_else(dash, percent));
        }
        row.push(r.generated_cases.to_string());
        row.push(r.errors.assertion_error.to_string());
        row.push(r.errors.runtime_error.to_string());
        row.push(r.errors.timeout.to_string());
        rows.push(row);
    }

    let widths: Vec<usize> =
        (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

impl DatasetReport {
    pub fn render_table(&self) -> String {
        let mut out = format!("dataset: {}  questions: {}\n", self.dataset, self.n_questions);
        out.push_str(&render_table(&[self]));
        if !self.missing.is_empty() {
            let _ = writeln!(out, "questions without a case set: {}", self.missing.join(", "));
        }
        out
    }
}
