//! The Thought/Action/Observation conversation engine.
//!
//! Each round is one assistant completion plus the user message appended in
//! response: the snippet's output (`Observation:\n...`) when the reply carried
//! fenced code, or the go-on prompt when it carried neither code nor a test
//! case. After `max_rounds` rounds without a test case the final prompt is
//! sent once; the reply to it either yields a test case or the chain fails.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::llm::{ChatMessage, ChatProvider, SamplingConfig};
use crate::prompts::{FINAL_PROMPT, GO_ON_PROMPT};
use crate::sandbox::{ExecResult, SandboxSession, SNIPPET_TIME_LIMIT};
use crate::testcase::extract_assertions;

pub const DEFAULT_MAX_ROUNDS: usize = 5;

const TEST_CASE_MARKER: &str = "test case:";
const ACTION_MARKER: &str = "action:";
const THOUGHT_MARKER: &str = "thought:";
const OBSERVATION_MARKER: &str = "observation:";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub thought: Option<String>,
    pub action_code: Option<String>,
    pub test_case: Option<String>,
}

impl ParsedReply {
    pub fn is_thought_only(&self) -> bool {
        self.action_code.is_none() && self.test_case.is_none()
    }
}

/// ASCII case-insensitive search; markers are ASCII so offsets stay valid.
fn find_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let hay = haystack.as_bytes();
    let needle = needle.as_bytes();
    if needle.len() > hay.len() {
        return None;
    }
    (from..=hay.len() - needle.len())
        .find(|&i| hay[i..i + needle.len()].eq_ignore_ascii_case(needle))
}

fn non_empty(text: &str) -> Option<String> {
    let trimmed = text.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

/// Parses an assistant reply. Never fails: anything unrecognized is a thought.
///
/// A `Test Case:` marker followed by an assert statement (bare or fenced)
/// takes precedence over everything else. Otherwise an `Action:` marker
/// followed by a fenced code block yields the block's contents. Unfenced code
/// after `Action:` is not executed.
pub fn parse_reply(text: &str) -> ParsedReply {
    let mut test_case = None;
    let mut from = 0;
    while let Some(at) = find_ci(text, TEST_CASE_MARKER, from) {
        let rest = text[at + TEST_CASE_MARKER.len()..].trim_start();
        if let Some(first) = extract_assertions(rest).into_iter().next() {
            test_case = Some(first);
            break;
        }
        from = at + TEST_CASE_MARKER.len();
    }

    let action_at = find_ci(text, ACTION_MARKER, 0);
    let action_code = match (&test_case, action_at) {
        (None, Some(at)) => fenced_block(&text[at + ACTION_MARKER.len()..]),
        _ => None,
    };

    let thought = match find_ci(text, THOUGHT_MARKER, 0) {
        Some(at) => {
            let start = at + THOUGHT_MARKER.len();
            let end = [ACTION_MARKER, TEST_CASE_MARKER, OBSERVATION_MARKER]
                .iter()
                .filter_map(|m| find_ci(text, m, start))
                .min()
                .unwrap_or(text.len());
            non_empty(&text[start..end])
        }
        None => {
            let end = [ACTION_MARKER, TEST_CASE_MARKER]
                .iter()
                .filter_map(|m| find_ci(text, m, 0))
                .min()
                .unwrap_or(text.len());
            non_empty(&text[..end])
        }
    };

    ParsedReply { thought, action_code, test_case }
}

/// Contents of the first ``` fence in `text`; an unclosed fence runs to the end.
fn fenced_block(text: &str) -> Option<String> {
    let open = text.find("```")?;
    // Only whitespace may separate the marker from its fence.
    if !text[..open].trim().is_empty() {
        return None;
    }
    let after_open = &text[open + 3..];
    let body_start = after_open.find('\n').map(|i| i + 1).unwrap_or(after_open.len());
    let body = &after_open[body_start..];
    let body = match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    };
    non_empty(body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    TestCaseEmitted,
    ForcedFinal,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    /// Assistant reply as received.
    pub raw: String,
    pub reply: ParsedReply,
    /// Present iff the reply's action code was executed.
    pub observation: Option<ExecResult>,
    /// User message appended after this reply (observation or go-on prompt).
    pub followup: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<ChainStep>,
    pub terminal: Terminal,
    pub rounds_used: usize,
    /// Set when the final prompt was sent; its reply is the last step.
    pub final_prompt: Option<String>,
    pub error: Option<String>,
}

impl Trajectory {
    /// The emitted assertion, unless the chain failed.
    pub fn test_case(&self) -> Option<&str> {
        match self.terminal {
            Terminal::Failed => None,
            _ => self.steps.last().and_then(|s| s.reply.test_case.as_deref()),
        }
    }

    /// The message list of the last request, rebuilt from `seed` and the steps.
    pub fn last_request(&self, seed: &[ChatMessage]) -> Vec<ChatMessage> {
        let mut messages = seed.to_vec();
        // A step with a follow-up was answered, so both went out in later requests.
        for step in self.steps.iter().filter(|s| s.followup.is_some()) {
            messages.push(ChatMessage::assistant(step.raw.clone()));
            messages.push(ChatMessage::user(step.followup.clone().expect("filtered")));
        }
        if let Some(final_prompt) = &self.final_prompt {
            messages.push(ChatMessage::user(final_prompt.clone()));
        }
        messages
    }

    /// Assistant replies in order, suitable for a scripted replay fixture.
    pub fn replies(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.raw.clone()).collect()
    }

    /// One record per step.
    pub fn records(&self, chain: usize, input: Option<&str>) -> Vec<StepRecord> {
        let final_index = self
            .final_prompt
            .as_ref()
            .and_then(|_| self.steps.last())
            .filter(|last| last.followup.is_none())
            .map(|_| self.steps.len() - 1);
        self.steps
            .iter()
            .enumerate()
            .map(|(i, step)| StepRecord {
                chain,
                input: input.map(str::to_string),
                step: i,
                kind: if Some(i) == final_index { StepKind::Final } else { StepKind::Round },
                raw: step.raw.clone(),
                thought: step.reply.thought.clone(),
                action_code: step.reply.action_code.clone(),
                test_case: step.reply.test_case.clone(),
                observation: step.observation.clone(),
                followup: step.followup.clone(),
                terminal: self.terminal,
                rounds_used: self.rounds_used,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Round,
    Final,
}

/// Flat, line-oriented view of one chain step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub chain: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub step: usize,
    pub kind: StepKind,
    pub raw: String,
    pub thought: Option<String>,
    pub action_code: Option<String>,
    pub test_case: Option<String>,
    pub observation: Option<ExecResult>,
    pub followup: Option<String>,
    pub terminal: Terminal,
    pub rounds_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOptions {
    pub max_rounds: usize,
    pub snippet_time_limit: Duration,
    pub go_on_prompt: String,
    pub final_prompt: String,
    pub sampling: SamplingConfig,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            max_rounds: DEFAULT_MAX_ROUNDS,
            snippet_time_limit: SNIPPET_TIME_LIMIT,
            go_on_prompt: GO_ON_PROMPT.into(),
            final_prompt: FINAL_PROMPT.into(),
            sampling: SamplingConfig::default(),
        }
    }
}

/// `Observation:` message for an executed snippet.
pub fn observation_message(result: &ExecResult) -> String {
    let mut text = format!("Observation:\n{}", result.combined_output().trim_end());
    if result.timed_out {
        text.push_str("\n(The interpreter was restarted; variables from earlier snippets are gone.)");
    }
    text
}

/// Drives one chain to completion. Issues at most `max_rounds + 1` completions.
pub fn run_chain(
    llm: &dyn ChatProvider,
    session: &mut SandboxSession,
    seed_messages: &[ChatMessage],
    options: &ChainOptions,
) -> Trajectory {
    let mut messages = seed_messages.to_vec();
    let mut steps: Vec<ChainStep> = Vec::new();
    let failed = |steps: Vec<ChainStep>, rounds_used, final_prompt, error: String| Trajectory {
        steps,
        terminal: Terminal::Failed,
        rounds_used,
        final_prompt,
        error: Some(error),
    };

    for round in 1..=options.max_rounds {
        let reply = match llm.complete(&messages, &options.sampling) {
            Ok(reply) => reply,
            Err(err) => return failed(steps, round - 1, None, err.to_string()),
        };
        let parsed = parse_reply(&reply.content);
        if parsed.test_case.is_some() {
            steps.push(ChainStep { raw: reply.content, reply: parsed, observation: None, followup: None });
            return Trajectory {
                steps,
                terminal: Terminal::TestCaseEmitted,
                rounds_used: round,
                final_prompt: None,
                error: None,
            };
        }

        let (observation, followup) = match &parsed.action_code {
            Some(code) => {
                let result = match session.exec(code, options.snippet_time_limit) {
                    Ok(result) => result,
                    Err(err) => {
                        steps.push(ChainStep { raw: reply.content, reply: parsed, observation: None, followup: None });
                        return failed(steps, round, None, format!("sandbox: {err}"));
                    }
                };
                if result.timed_out {
                    if let Err(err) = session.reset() {
                        steps.push(ChainStep {
                            raw: reply.content,
                            reply: parsed,
                            observation: Some(result),
                            followup: None,
                        });
                        return failed(steps, round, None, format!("sandbox restart: {err}"));
                    }
                }
                let text = observation_message(&result);
                (Some(result), text)
            }
            None => (None, options.go_on_prompt.clone()),
        };
        messages.push(ChatMessage::assistant(reply.content.clone()));
        messages.push(ChatMessage::user(followup.clone()));
        steps.push(ChainStep { raw: reply.content, reply: parsed, observation, followup: Some(followup) });
    }

    let rounds_used = options.max_rounds;
    messages.push(ChatMessage::user(options.final_prompt.clone()));
    let reply = match llm.complete(&messages, &options.sampling) {
        Ok(reply) => reply,
        Err(err) => return failed(steps, rounds_used, Some(options.final_prompt.clone()), err.to_string()),
    };
    let mut parsed = parse_reply(&reply.content);
    if parsed.test_case.is_none() {
        // The final prompt already ends with the marker, so a bare assert counts.
        parsed.test_case = extract_assertions(&reply.content).into_iter().next();
        if parsed.test_case.is_some() {
            parsed.action_code = None;
        }
    }
    let terminal = if parsed.test_case.is_some() { Terminal::ForcedFinal } else { Terminal::Failed };
    steps.push(ChainStep { raw: reply.content, reply: parsed, observation: None, followup: None });
    Trajectory {
        steps,
        terminal,
        rounds_used,
        final_prompt: Some(options.final_prompt.clone()),
        error: (terminal == Terminal::Failed).then(|| "no test case after the final prompt".to_string()),
    }
}
