//! Prompt templates for every agent.
//!
//! Templates use `{name}` placeholders rendered by [`crate::llm::render_prompt`].
//! One-shot example blocks are inserted verbatim (never rendered), so they can
//! hold arbitrary Python. A prompt set can be overridden field by field from a
//! TOML file; [`PromptSet::hash`] identifies the exact texts a run used.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{render_prompt, MissingBinding};

/// Sent when a chain reply carries neither code nor a test case.
pub const GO_ON_PROMPT: &str = "Observation: go on.";
/// Sent after the round cap to force an answer.
pub const FINAL_PROMPT: &str = "Thought: I now know the final answer.\nTest Case:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSet {
    pub test_agent_system: String,
    pub test_agent_user: String,
    pub test_agent_example: String,
    pub designer_system: String,
    pub designer_user: String,
    pub designer_example: String,
    pub calculator_system: String,
    pub calculator_user: String,
    pub calculator_example: String,
    pub calculator_no_py_system: String,
    pub calculator_no_py_example: String,
    pub go_on: String,
    pub final_prompt: String,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("reading prompt file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing prompt file {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error(transparent)]
    Render(#[from] MissingBinding),
}

impl PromptSet {
    /// Defaults with any fields present in the TOML file replaced.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
        toml::from_str(&text).map_err(|source| PromptError::Parse { path: path.display().to_string(), source })
    }

    /// Hex SHA-256 over every template, in field order.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("prompt set serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn render(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        Ok(render_prompt(template, bindings)?)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            test_agent_system: TEST_AGENT_SYSTEM.into(),
            test_agent_user: TEST_AGENT_USER.into(),
            test_agent_example: TEST_AGENT_EXAMPLE.into(),
            designer_system: DESIGNER_SYSTEM.into(),
            designer_user: DESIGNER_USER.into(),
            designer_example: DESIGNER_EXAMPLE.into(),
            calculator_system: CALCULATOR_SYSTEM.into(),
            calculator_user: CALCULATOR_USER.into(),
            calculator_example: CALCULATOR_EXAMPLE.into(),
            calculator_no_py_system: CALCULATOR_NO_PY_SYSTEM.into(),
            calculator_no_py_example: CALCULATOR_NO_PY_EXAMPLE.into(),
            go_on: GO_ON_PROMPT.into(),
            final_prompt: FINAL_PROMPT.into(),
        }
    }
}

const TEST_AGENT_SYSTEM: &str = "\
You are an experienced Python tester. Given a Python function signature and \
its docstring, you write unit tests for it.
Cover three kinds of test cases:
1. Basic: typical inputs that check the core behaviour.
2. Edge: boundary values, empty inputs and other corner cases.
3. Large scale: large inputs that check performance and scalability.
Write every test case as a single-line Python assert statement of the form \
`assert function(arguments) == expected_output`. Put all assert statements in \
one ```python code block and do not implement the function yourself.";

const TEST_AGENT_USER: &str = "\
Context:
{prompt}
Write test cases for the function `{entry_point}`.";

const TEST_AGENT_EXAMPLE: &str = "\
Here is an example.

Context:
def add_lists(a: list, b: list) -> list:
    \"\"\"Return the element-wise sum of two lists of equal length.\"\"\"
Write test cases for the function `add_lists`.

```python
# Basic
assert add_lists([1, 2], [3, 4]) == [4, 6]
assert add_lists([0, -1, 5], [2, 1, 5]) == [2, 0, 10]
# Edge
assert add_lists([], []) == []
assert add_lists([-3], [3]) == [0]
# Large scale
assert add_lists([1] * 10000, [2] * 10000) == [3] * 10000
```

Now it is your turn.
";

const DESIGNER_SYSTEM: &str = "\
You are an experienced Python tester who designs test inputs. Given a Python \
function signature and its docstring, you propose inputs for the function \
without computing the expected outputs.
Propose two kinds of inputs:
1. Basic: typical inputs that check the core behaviour.
2. Edge: boundary values, empty inputs and other corner cases.
Write at most {max_inputs} inputs in one ```python code block, one per line. \
Each line is the argument list of a single call, wrapped in parentheses, for \
example `(1, 'abc')`. Do not write the function name, expected outputs or \
explanations inside the code block.";

const DESIGNER_USER: &str = "\
Function:
{prompt}
Propose up to {max_inputs} test inputs for `{entry_point}`.";

const DESIGNER_EXAMPLE: &str = "\
Here is an example.

Function:
def count_vowels(s: str) -> int:
    \"\"\"Count the vowels (a, e, i, o, u) in s, ignoring case.\"\"\"
Propose up to 8 test inputs for `count_vowels`.

```python
# Basic
('hello',)
('Programming Language',)
# Edge
('',)
('bcdfg',)
('AEIOU',)
```

Now it is your turn.
";

const CALCULATOR_SYSTEM: &str = "\
You are an experienced Python tester. You are given a Python function \
signature with its docstring and one test input. Work out the output the \
function should return for that input, then write the complete test case.
You can run Python code. Use the following format:

Thought: reason about what to do next
Action:
```python
code to run; print the values you want to see
```
Observation: the output of the code (provided to you, never write it yourself)
... (Thought/Action/Observation can repeat several times)
Thought: I now know the final answer.
Test Case: assert function(test_input) == expected_output

Rules:
- Every code snippet runs in the same interpreter session, so variables from \
earlier snippets stay available.
- The function under test is not implemented in the interpreter; compute the \
expected output from the docstring step by step.
- Write exactly one Test Case, as a single assert statement, and stop.";

const CALCULATOR_USER: &str = "\
Function:
{prompt}
Test input: {test_input}
Find the expected output of `{entry_point}` for this input and write the test case.";

const CALCULATOR_EXAMPLE: &str = "\
Here is an example of a complete conversation.

Function:
def second_largest(nums: list) -> int:
    \"\"\"Return the second largest distinct value in nums.\"\"\"
Test input: second_largest([4, 1, 4, 3])
Find the expected output of `second_largest` for this input and write the test case.

Thought: I need the distinct values first.
Action:
```python
nums = [4, 1, 4, 3]
distinct = sorted(set(nums))
print(distinct)
```
Observation:
[1, 3, 4]
Thought: The largest is 4, so the second largest is the element before it.
Action:
```python
print(distinct[-2])
```
Observation:
3
Thought: I now know the final answer.
Test Case: assert second_largest([4, 1, 4, 3]) == 3

Now it is your turn.
";

const CALCULATOR_NO_PY_SYSTEM: &str = "\
You are an experienced Python tester. You are given a Python function \
signature with its docstring and one test input. Reason step by step about \
the output the function should return for that input, then write the \
complete test case on a line starting with `Test Case:` as a single assert \
statement, for example:
Test Case: assert function(test_input) == expected_output";

const CALCULATOR_NO_PY_EXAMPLE: &str = "\
Here is an example.

Function:
def second_largest(nums: list) -> int:
    \"\"\"Return the second largest distinct value in nums.\"\"\"
Test input: second_largest([4, 1, 4, 3])
Find the expected output of `second_largest` for this input and write the test case.

Thought: The distinct values are 1, 3 and 4. The largest is 4, so the second largest is 3.
Test Case: assert second_largest([4, 1, 4, 3]) == 3

Now it is your turn.
";
