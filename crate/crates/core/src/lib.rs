//! Function-level unit test generation with LLM agents, and the metrics used
//! to judge the generated suites.
//!
//! The crate is organized the way a run flows:
//!
//! - [`dataset`] loads benchmark problems and strips worked examples from prompts.
//! - [`llm`] talks to chat-completion providers (HTTP or scripted replay).
//! - [`prompts`] holds the editable prompt templates and their content hash.
//! - [`sandbox`] supervises a persistent Python interpreter running the bundled harness.
//! - [`chain`] parses Thought/Action/Test Case replies and drives the observe-act loop.
//! - [`testcase`] extracts, validates, deduplicates and caps assertions.
//! - [`agents`] implements the Test Agent baseline and the Designer/Calculator pipeline.
//! - [`metrics`] scores case sets: accuracy, line coverage, Code-with-Bugs.
//! - [`run`] ties everything to a resumable run directory (prepare/generate/evaluate/report).

pub mod agents;
pub mod chain;
pub mod dataset;
pub mod llm;
pub mod metrics;
pub mod prompts;
mod pyscan;
pub mod run;
pub mod sandbox;
pub mod testcase;

pub use agents::{GenerationResult, Strategy};
pub use chain::{ParsedReply, Terminal, Trajectory};
pub use dataset::{Dataset, Problem};
pub use llm::{ChatMessage, ChatProvider, Role, SamplingConfig, ScriptedProvider};
pub use metrics::{DatasetReport, ExecOutcome, OutcomeKind, QuestionReport};
pub use sandbox::{ExecResult, SandboxConfig, SandboxSession};
pub use testcase::{CaseSet, Origin, TestCase};
