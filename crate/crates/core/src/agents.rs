//! Generation strategies.
//!
//! - Test Agent (0-shot / 1-shot): one completion writes complete assertions.
//! - TestChain: the Designer proposes inputs once per question, then the
//!   Calculator derives each expected output through an interpreter-backed
//!   chain and writes the assertion.
//! - TestChain without the interpreter: same Designer, but the Calculator
//!   answers in a single completion.
//!
//! No agent ever reads `Problem::canonical_solution`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{parse_reply, run_chain, ChainOptions, Trajectory};
use crate::dataset::{Problem, DEFAULT_MAX_CASES};
use crate::llm::{ChatMessage, ChatProvider, LlmError, SamplingConfig};
use crate::prompts::{PromptError, PromptSet};
use crate::pyscan::{tokenize, top_level_ops, TokenKind};
use crate::sandbox::{SandboxError, SandboxSession};
use crate::testcase::{extract_assertions, normalize, sanitize, CaseSet, TestCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "test_agent_0shot")]
    TestAgent0Shot,
    #[serde(rename = "test_agent_1shot")]
    TestAgent1Shot,
    #[serde(rename = "testchain")]
    TestChain,
    #[serde(rename = "testchain_no_py")]
    TestChainNoPy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::TestAgent0Shot, Strategy::TestAgent1Shot, Strategy::TestChain, Strategy::TestChainNoPy];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TestAgent0Shot => "test_agent_0shot",
            Strategy::TestAgent1Shot => "test_agent_1shot",
            Strategy::TestChain => "testchain",
            Strategy::TestChainNoPy => "testchain_no_py",
        }
    }

    pub fn uses_chain(self) -> bool {
        self == Strategy::TestChain
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected one of test_agent_0shot, test_agent_1shot, testchain, testchain_no_py)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub sampling: SamplingConfig,
    /// Cases kept per question.
    pub cap: usize,
    /// Upper bound the Designer is asked for.
    pub designer_max_inputs: usize,
    /// Shot setting of the Designer and Calculator prompts.
    pub chain_shot: Shot,
    pub chain: ChainOptions,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            sampling: SamplingConfig::default(),
            cap: DEFAULT_MAX_CASES,
            designer_max_inputs: 8,
            chain_shot: Shot::One,
            chain: ChainOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("provider: {0}")]
    Llm(#[from] LlmError),
    #[error("sandbox: {0}")]
    Sandbox(#[from] SandboxError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
}

/// Calculator conversation for one designer input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputTrajectory {
    pub input: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub question_id: String,
    pub strategy: Strategy,
    pub case_set: CaseSet,
    /// One per deduplicated designer input (TestChain only).
    pub trajectories: Vec<InputTrajectory>,
    pub designer_inputs: Option<Vec<String>>,
    /// Raw completions outside of chains, in request order.
    pub raw_outputs: Vec<String>,
    /// Why the question produced nothing usable, when it did not.
    pub failure: Option<String>,
}

impl GenerationResult {
    fn new(problem: &Problem, strategy: Strategy) -> Self {
        GenerationResult {
            question_id: problem.task_id.clone(),
            strategy,
            case_set: CaseSet::empty(&problem.task_id),
            trajectories: Vec::new(),
            designer_inputs: None,
            raw_outputs: Vec::new(),
            failure: None,
        }
    }

    /// A question that produced nothing, with the reason.
    pub fn failed(problem: &Problem, strategy: Strategy, reason: impl Into<String>) -> Self {
        GenerationResult { failure: Some(reason.into()), ..GenerationResult::new(problem, strategy) }
    }
}

/// Everything an agent needs besides the problem and the sandbox.
pub struct Agents<'a> {
    pub llm: &'a dyn ChatProvider,
    pub prompts: &'a PromptSet,
    pub settings: &'a GenerationSettings,
}

fn bindings(problem: &Problem) -> BTreeMap<&'static str, String> {
    BTreeMap::from([("prompt", problem.prompt.clone()), ("entry_point", problem.entry_point.clone())])
}

/// A one-shot example block goes in front of the user prompt.
fn with_example(example: &str, user: String, shot: Shot) -> String {
    match shot {
        Shot::Zero => user,
        Shot::One => format!("{}\n{user}", example.trim_end()),
    }
}

impl<'a> Agents<'a> {
    pub fn new(llm: &'a dyn ChatProvider, prompts: &'a PromptSet, settings: &'a GenerationSettings) -> Self {
        Agents { llm, prompts, settings }
    }

    pub fn generate(
        &self,
        problem: &Problem,
        strategy: Strategy,
        session: &mut SandboxSession,
    ) -> Result<GenerationResult, AgentError> {
        match strategy {
            Strategy::TestAgent0Shot => self.test_agent_generate(problem, Shot::Zero, session),
            Strategy::TestAgent1Shot => self.test_agent_generate(problem, Shot::One, session),
            Strategy::TestChain => self.testchain_generate(problem, session),
            Strategy::TestChainNoPy => self.testchain_no_py_generate(problem, session),
        }
    }

    pub fn test_agent_messages(&self, problem: &Problem, shot: Shot) -> Result<Vec<ChatMessage>, AgentError> {
        let user = PromptSet::render(&self.prompts.test_agent_user, &bindings(problem))?;
        Ok(vec![
            ChatMessage::system(self.prompts.test_agent_system.clone()),
            ChatMessage::user(with_example(&self.prompts.test_agent_example, user, shot)),
        ])
    }

    /// Baseline: one completion, then extract and sanitize.
    pub fn test_agent_generate(
        &self,
        problem: &Problem,
        shot: Shot,
        session: &mut SandboxSession,
    ) -> Result<GenerationResult, AgentError> {
        let strategy = match shot {
            Shot::Zero => Strategy::TestAgent0Shot,
            Shot::One => Strategy::TestAgent1Shot,
        };
        let messages = self.test_agent_messages(problem, shot)?;
        let reply = self.llm.complete(&messages, &self.settings.sampling)?;
        let raw = extract_assertions(&reply.content);
        let mut result = GenerationResult::new(problem, strategy);
        session.ensure_live()?;
        result.case_set = sanitize(&problem.task_id, &raw, strategy, session, self.settings.cap)?;
        if result.case_set.is_empty() {
            result.failure = Some("no valid assertion in the reply".into());
        }
        result.raw_outputs.push(reply.content);
        Ok(result)
    }

    pub fn designer_messages(&self, problem: &Problem) -> Result<Vec<ChatMessage>, AgentError> {
        let mut b = bindings(problem);
        b.insert("max_inputs", self.settings.designer_max_inputs.to_string());
        let system = PromptSet::render(&self.prompts.designer_system, &b)?;
        let user = PromptSet::render(&self.prompts.designer_user, &b)?;
        Ok(vec![
            ChatMessage::system(system),
            ChatMessage::user(with_example(&self.prompts.designer_example, user, self.settings.chain_shot)),
        ])
    }

    /// One completion; returns deduplicated inputs in order, plus the raw reply.
    pub fn designer_generate(&self, problem: &Problem) -> Result<(Vec<String>, String), AgentError> {
        let messages = self.designer_messages(problem)?;
        let reply = self.llm.complete(&messages, &self.settings.sampling)?;
        Ok((extract_inputs(&reply.content, &problem.entry_point), reply.content))
    }

    pub fn calculator_messages(&self, problem: &Problem, input: &str, interpreter: bool) -> Result<Vec<ChatMessage>, AgentError> {
        let mut b = bindings(problem);
        b.insert("test_input", call_expression(&problem.entry_point, input));
        let user = PromptSet::render(&self.prompts.calculator_user, &b)?;
        let (system, example) = if interpreter {
            (&self.prompts.calculator_system, &self.prompts.calculator_example)
        } else {
            (&self.prompts.calculator_no_py_system, &self.prompts.calculator_no_py_example)
        };
        Ok(vec![
            ChatMessage::system(system.clone()),
            ChatMessage::user(with_example(example, user, self.settings.chain_shot)),
        ])
    }

    /// Runs the interpreter-backed chain for one input. The session should be
    /// freshly reset.
    pub fn calculator_compute(
        &self,
        problem: &Problem,
        input: &str,
        session: &mut SandboxSession,
    ) -> Result<(Option<TestCase>, Trajectory), AgentError> {
        let seed = self.calculator_messages(problem, input, true)?;
        let options = ChainOptions { sampling: self.settings.sampling, ..self.settings.chain.clone() };
        let trajectory = run_chain(self.llm, session, &seed, &options);
        let case = trajectory.test_case().map(|a| TestCase::new(&problem.task_id, a, Strategy::TestChain));
        Ok((case, trajectory))
    }

    /// Ablation: one completion, no tool loop.
    pub fn calculator_no_py(&self, problem: &Problem, input: &str) -> Result<(Option<TestCase>, String), AgentError> {
        let messages = self.calculator_messages(problem, input, false)?;
        let reply = self.llm.complete(&messages, &self.settings.sampling)?;
        let assertion = parse_reply(&reply.content)
            .test_case
            .or_else(|| extract_assertions(&reply.content).into_iter().next());
        let case = assertion.map(|a| TestCase::new(&problem.task_id, a, Strategy::TestChainNoPy));
        Ok((case, reply.content))
    }

    pub fn testchain_generate(&self, problem: &Problem, session: &mut SandboxSession) -> Result<GenerationResult, AgentError> {
        let mut result = GenerationResult::new(problem, Strategy::TestChain);
        let inputs = match self.designer_generate(problem) {
            Ok((inputs, raw)) => {
                result.raw_outputs.push(raw);
                inputs
            }
            Err(AgentError::Llm(err)) => {
                result.failure = Some(format!("designer: {err}"));
                return Ok(result);
            }
            Err(err) => return Err(err),
        };
        if inputs.is_empty() {
            result.designer_inputs = Some(inputs);
            result.failure = Some("designer produced no test inputs".into());
            return Ok(result);
        }

        let mut assertions = Vec::new();
        for input in &inputs {
            session.reset()?;
            let (case, trajectory) = self.calculator_compute(problem, input, session)?;
            if let Some(case) = case {
                assertions.push(case.assertion);
            }
            result.trajectories.push(InputTrajectory { input: input.clone(), trajectory });
        }
        session.ensure_live()?;
        result.case_set = sanitize(&problem.task_id, &assertions, Strategy::TestChain, session, self.settings.cap)?;
        if result.case_set.is_empty() {
            result.failure = Some("no calculator chain produced a valid test case".into());
        }
        result.designer_inputs = Some(inputs);
        Ok(result)
    }

    pub fn testchain_no_py_generate(
        &self,
        problem: &Problem,
        session: &mut SandboxSession,
    ) -> Result<GenerationResult, AgentError> {
        let mut result = GenerationResult::new(problem, Strategy::TestChainNoPy);
        let inputs = match self.designer_generate(problem) {
            Ok((inputs, raw)) => {
                result.raw_outputs.push(raw);
                inputs
            }
            Err(AgentError::Llm(err)) => {
                result.failure = Some(format!("designer: {err}"));
                return Ok(result);
            }
            Err(err) => return Err(err),
        };
        let mut assertions = Vec::new();
        for input in &inputs {
            match self.calculator_no_py(problem, input) {
                Ok((case, raw)) => {
                    result.raw_outputs.push(raw);
                    assertions.extend(case.map(|c| c.assertion));
                }
                Err(AgentError::Llm(err)) => {
                    tracing::warn!(question = %problem.task_id, %input, error = %err, "calculator completion failed");
                }
                Err(err) => return Err(err),
            }
        }
        session.ensure_live()?;
        result.case_set = sanitize(&problem.task_id, &assertions, Strategy::TestChainNoPy, session, self.settings.cap)?;
        if inputs.is_empty() {
            result.failure = Some("designer produced no test inputs".into());
        } else if result.case_set.is_empty() {
            result.failure = Some("no calculator reply produced a valid test case".into());
        }
        result.designer_inputs = Some(inputs);
        Ok(result)
    }
}

/// Test inputs listed in a Designer reply, deduplicated, in order.
///
/// When the reply has code fences only fenced lines are read. Each candidate
/// line may carry a list bullet, a number or an `Input:` label; what remains
/// must look like an expression (bracket, quote, digit, sign, literal
/// keyword, or a call of the entry point). Header lines ending in `:` and
/// comments are skipped.
pub fn extract_inputs(reply: &str, entry_point: &str) -> Vec<String> {
    let fenced = fenced_lines(reply);
    let lines: Vec<&str> = if fenced.is_empty() { reply.lines().collect() } else { fenced };
    let mut seen = HashSet::new();
    let mut inputs = Vec::new();
    for line in lines {
        let Some(candidate) = input_candidate(line, entry_point) else { continue };
        if seen.insert(normalize(&candidate)) {
            inputs.push(candidate);
        }
    }
    inputs
}

fn fenced_lines(text: &str) -> Vec<&str> {
    let mut inside = false;
    let mut lines = Vec::new();
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            continue;
        }
        if inside {
            lines.push(line);
        }
    }
    lines
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        return rest.trim_start();
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim_start();
        }
    }
    line
}

fn strip_label(line: &str) -> &str {
    for label in ["test input:", "input:"] {
        if line.len() >= label.len() && line[..label.len()].eq_ignore_ascii_case(label) {
            return line[label.len()..].trim_start();
        }
    }
    line
}

fn input_candidate(line: &str, entry_point: &str) -> Option<String> {
    let text = strip_label(strip_list_marker(line));
    let text = match tokenize(text).into_iter().find(|t| t.kind == TokenKind::Comment) {
        Some(comment) => text[..comment.start].trim_end(),
        None => text.trim_end(),
    };
    if text.is_empty() || text.ends_with(':') {
        return None;
    }
    let first = text.chars().next()?;
    let looks_like_value = "([{'\"-+".contains(first)
        || first.is_ascii_digit()
        || ["True", "False", "None"].iter().any(|kw| text.starts_with(kw))
        || text.strip_prefix(entry_point).is_some_and(|rest| rest.starts_with('('));
    looks_like_value.then(|| text.to_string())
}

/// The call of `entry_point` a test input stands for.
///
/// `(a, b)` is an argument list, a full `entry_point(...)` call is kept, and
/// anything else is a single argument.
pub fn call_expression(entry_point: &str, input: &str) -> String {
    let input = input.trim();
    if input.strip_prefix(entry_point).is_some_and(|rest| rest.starts_with('(')) {
        return input.to_string();
    }
    if input.starts_with('(') && matching_close(input) == Some(input.len() - 1) {
        let args = input[1..input.len() - 1].trim_end();
        // A one-element tuple `(x,)` is the single argument `x`.
        let args = match (args.strip_suffix(','), top_level_ops(args, ",").len()) {
            (Some(single), 1) => single,
            _ => args,
        };
        return format!("{entry_point}({args})");
    }
    format!("{entry_point}({input})")
}

/// Offset of the bracket closing the one at offset 0.
fn matching_close(src: &str) -> Option<usize> {
    let mut depth = 0i64;
    for t in tokenize(src) {
        if t.kind != TokenKind::Op {
            continue;
        }
        match t.text(src) {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => {
                depth -= 1;
                if depth == 0 {
                    return Some(t.start);
                }
            }
            _ => {}
        }
    }
    None
}
