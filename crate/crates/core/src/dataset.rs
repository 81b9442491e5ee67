//! Benchmark problems: JSONL loading, serialization and example stripping.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default number of test cases retained per question.
pub const DEFAULT_MAX_CASES: usize = 5;

const REQUIRED_KEYS: [&str; 4] = ["task_id", "prompt", "entry_point", "canonical_solution"];

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub task_id: String,
    /// Function signature plus docstring.
    pub prompt: String,
    pub entry_point: String,
    /// Reference body, appended to `prompt` to form the canonical program.
    pub canonical_solution: String,
    #[serde(rename = "test", default, skip_serializing_if = "Option::is_none")]
    pub canonical_tests: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

impl Problem {
    /// Prompt stub followed by the canonical solution.
    pub fn canonical_program(&self) -> String {
        join_program(&self.prompt, &self.canonical_solution)
    }

    /// Same stub, different body.
    pub fn program_with_body(&self, body: &str) -> String {
        join_program(&self.prompt, body)
    }
}

fn join_program(prompt: &str, body: &str) -> String {
    let mut program = String::with_capacity(prompt.len() + body.len() + 1);
    program.push_str(prompt);
    if !prompt.is_empty() && !prompt.ends_with('\n') {
        program.push('\n');
    }
    program.push_str(body);
    program
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub problems: Vec<Problem>,
    pub max_cases_per_question: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, problems: Vec<Problem>) -> Self {
        Dataset { name: name.into(), problems, max_cases_per_question: DEFAULT_MAX_CASES }
    }

    /// Upper bound on retained test cases across the dataset.
    pub fn max_test_cases(&self) -> usize {
        self.problems.len() * self.max_cases_per_question
    }

    pub fn get(&self, task_id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.task_id == task_id)
    }

    /// JSONL text, one problem per line, in dataset order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for problem in &self.problems {
            out.push_str(&serde_json::to_string(problem).expect("problem serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    /// Hex SHA-256 of the serialized problems; identifies a dataset across runs.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing or non-string field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("duplicate task_id {task_id:?} on lines {first_line} and {second_line}")]
    DuplicateTaskId { task_id: String, first_line: usize, second_line: usize },
    #[error("line {line}: prompt of {task_id:?} defines `{entry_point}` {count} times (expected exactly one)")]
    EntryPoint { line: usize, task_id: String, entry_point: String, count: usize },
}

/// Loads a JSONL dataset. Blank lines are ignored; line numbers are 1-based.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_dataset(&name, &text)
}

pub fn parse_dataset(name: &str, text: &str) -> Result<Dataset, DatasetError> {
    let mut problems = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| DatasetError::Json { line, message: e.to_string() })?;
        if !value.is_object() {
            return Err(DatasetError::Json { line, message: "expected a JSON object".into() });
        }
        for field in REQUIRED_KEYS {
            if !value.get(field).is_some_and(|v| v.is_string()) {
                return Err(DatasetError::MissingField { line, field });
            }
        }
        let problem: Problem =
            serde_json::from_value(value).map_err(|e| DatasetError::Json { line, message: e.to_string() })?;
        if let Some(first_line) = seen.get(&problem.task_id) {
            return Err(DatasetError::DuplicateTaskId {
                task_id: problem.task_id,
                first_line: *first_line,
                second_line: line,
            });
        }
        let count = count_definitions(&problem.prompt, &problem.entry_point);
        if count != 1 {
            return Err(DatasetError::EntryPoint {
                line,
                task_id: problem.task_id,
                entry_point: problem.entry_point,
                count,
            });
        }
        seen.insert(problem.task_id.clone(), line);
        problems.push(problem);
    }
    Ok(Dataset::new(name, problems))
}

/// Number of `def <name>(` definitions in `source`.
fn count_definitions(source: &str, name: &str) -> usize {
    source
        .lines()
        .filter_map(|line| {
            let rest = line.trim_start();
            let rest = rest.strip_prefix("async ").map(str::trim_start).unwrap_or(rest);
            rest.strip_prefix("def ")
        })
        .filter(|rest| {
            rest.trim_start()
                .strip_prefix(name)
                .is_some_and(|after| after.trim_start().starts_with('('))
        })
        .count()
}

/// Removes worked examples from a prompt's docstring.
///
/// Two shapes are recognized inside each docstring:
/// - doctest blocks: a `>>>` line, its `...` continuations, and the expected
///   output lines that follow up to the next blank line or `>>>` line;
/// - sections whose first line starts with "Example", "Examples" or
///   "For example" (any case). A section runs until the docstring closes or a
///   line at the header's indentation (or shallower) looks like another
///   section header, e.g. `Constraints:` or `Note:`.
///
/// Text before the docstring's opening delimiter is never touched, and a
/// prompt without a docstring or examples is returned unchanged.
pub fn strip_examples(problem: &Problem) -> Problem {
    Problem { prompt: strip_prompt(&problem.prompt), ..problem.clone() }
}

pub fn strip_prompt(prompt: &str) -> String {
    let mut out = prompt.to_string();
    // Back to front so earlier offsets stay valid.
    for (open, close) in find_docstrings(prompt).into_iter().rev() {
        let stripped = strip_docstring_body(&prompt[open..close]);
        out.replace_range(open..close, &stripped);
    }
    out
}

/// Byte ranges of the interiors of triple-quoted strings following the first `def`.
fn find_docstrings(prompt: &str) -> Vec<(usize, usize)> {
    let Some(def_at) = prompt
        .match_indices("def ")
        .find(|(i, _)| *i == 0 || prompt[..*i].ends_with(|c: char| c.is_whitespace()))
        .map(|(i, _)| i)
    else {
        return Vec::new();
    };
    let mut ranges = Vec::new();
    let mut pos = def_at;
    loop {
        let next = ["\"\"\"", "'''"]
            .iter()
            .filter_map(|d| prompt[pos..].find(d).map(|i| (pos + i, *d)))
            .min_by_key(|(i, _)| *i);
        let Some((at, delim)) = next else { break };
        let open = at + delim.len();
        let Some(len) = prompt[open..].find(delim) else { break };
        ranges.push((open, open + len));
        pos = open + len + delim.len();
    }
    ranges
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

fn is_example_header(trimmed: &str) -> bool {
    let lower = trimmed.to_ascii_lowercase();
    lower.starts_with("example") || lower.starts_with("for example")
}

/// A short capitalized label ending with a colon, e.g. `Constraints:`.
fn is_other_section_header(trimmed: &str) -> bool {
    let Some(label) = trimmed.strip_suffix(':') else {
        return false;
    };
    const EXAMPLE_LABELS: [&str; 3] = ["input", "output", "explanation"];
    !label.is_empty()
        && label.len() <= 30
        && label.starts_with(|c: char| c.is_ascii_uppercase())
        && label.chars().all(|c| c.is_ascii_alphanumeric() || c == ' ' || c == '_')
        && !EXAMPLE_LABELS.contains(&label.to_ascii_lowercase().as_str())
        && !is_example_header(label)
}

fn strip_docstring_body(interior: &str) -> String {
    let segments: Vec<&str> = interior.split('\n').collect();
    let mut keep = vec![true; segments.len()];
    let mut i = 0;
    while i < segments.len() {
        let trimmed = segments[i].trim();
        if trimmed.starts_with(">>>") {
            keep[i] = false;
            i += 1;
            while i < segments.len() {
                let next = segments[i].trim();
                if next.is_empty() || next.starts_with(">>>") {
                    break;
                }
                keep[i] = false;
                i += 1;
            }
            continue;
        }
        if is_example_header(trimmed) {
            let header_indent = indent_of(segments[i]);
            keep[i] = false;
            i += 1;
            while i < segments.len() {
                let line = segments[i];
                let next = line.trim();
                if !next.is_empty() && indent_of(line) <= header_indent && is_other_section_header(next) {
                    break;
                }
                keep[i] = false;
                i += 1;
            }
            continue;
        }
        i += 1;
    }

    if keep.iter().all(|k| *k) {
        return interior.to_string();
    }
    let mut out: Vec<String> = Vec::with_capacity(segments.len());
    let last = segments.len() - 1;
    for (index, segment) in segments.iter().enumerate() {
        if keep[index] {
            out.push((*segment).to_string());
        } else if index == 0 {
            // Shares a line with the opening delimiter.
            out.push(String::new());
        } else if index == last {
            // Shares a line with the closing delimiter; keep its indentation.
            let indent = &segment[..indent_of(segment)];
            out.push(indent.to_string());
        }
    }
    collapse_blank_runs(&mut out);
    out.join("\n")
}

/// Collapses runs of blank interior lines to one and removes blank lines
/// immediately preceding the closing-delimiter segment.
fn collapse_blank_runs(lines: &mut Vec<String>) {
    if lines.len() < 3 {
        return;
    }
    let closing = lines.pop().expect("len >= 3");
    let mut collapsed: Vec<String> = Vec::with_capacity(lines.len());
    for line in lines.drain(..) {
        let blank = line.trim().is_empty();
        let prev_blank = collapsed.last().is_some_and(|l: &String| l.trim().is_empty());
        if blank && prev_blank {
            continue;
        }
        collapsed.push(line);
    }
    while collapsed.len() > 1 && collapsed.last().is_some_and(|l| l.trim().is_empty()) {
        collapsed.pop();
    }
    collapsed.push(closing);
    *lines = collapsed;
}
