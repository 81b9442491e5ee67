//! Assertions as test cases: extraction from model output, syntax filtering,
//! deduplication and the per-question cap.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::pyscan::{bracket_delta, ends_in_open_string, tokenize, top_level_ops, TokenKind};
use crate::sandbox::{SandboxError, SandboxSession};

/// Which generation strategy produced a case.
pub type Origin = crate::agents::Strategy;

/// One test case: a single `assert` statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub question_id: String,
    pub origin: Origin,
    pub assertion: String,
    /// Left side of `assert CALL == EXPECTED`, when the assertion has that shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_expr: Option<String>,
}

impl TestCase {
    pub fn new(question_id: impl Into<String>, assertion: impl Into<String>, origin: Origin) -> Self {
        let assertion = assertion.into();
        let (input_expr, expected_expr) = match split_equality(&assertion) {
            Some((input, expected)) => (Some(input), Some(expected)),
            None => (None, None),
        };
        TestCase { question_id: question_id.into(), origin, assertion, input_expr, expected_expr }
    }
}

/// The retained cases of one question, in generation order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaseSet {
    pub question_id: String,
    pub cases: Vec<TestCase>,
}

impl CaseSet {
    pub fn empty(question_id: impl Into<String>) -> Self {
        CaseSet { question_id: question_id.into(), cases: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn assertions(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.assertion.clone()).collect()
    }

    /// One JSON object per case and line.
    pub fn to_jsonl(&self) -> String {
        self.cases
            .iter()
            .map(|c| serde_json::to_string(c).expect("case serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(question_id: &str, text: &str) -> Result<Self, serde_json::Error> {
        let cases = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<TestCase>, _>>()?;
        Ok(CaseSet { question_id: question_id.to_string(), cases })
    }
}

fn starts_with_assert(line: &str) -> bool {
    line.strip_prefix("assert")
        .is_some_and(|rest| rest.is_empty() || rest.starts_with(|c: char| c.is_whitespace() || c == '('))
}

/// Drops a trailing `# comment` and trailing whitespace from one source line.
fn strip_comment(line: &str) -> &str {
    let comment = tokenize(line).into_iter().find(|t| t.kind == TokenKind::Comment);
    match comment {
        Some(t) => line[..t.start].trim_end(),
        None => line.trim_end(),
    }
}

/// Every `assert` statement in `text`, in order of appearance.
///
/// Lines are considered inside and outside code fences alike. A statement
/// continues onto following lines while brackets are open, a line ends with a
/// backslash, or a triple-quoted string is unterminated; continuation lines are
/// joined with single spaces. Outside strings, a fence or a line starting a new
/// `assert` ends the statement even if its brackets are unbalanced.
pub fn extract_assertions(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    let mut found = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let trimmed = lines[i].trim_start();
        if !starts_with_assert(trimmed) {
            i += 1;
            continue;
        }
        let mut stmt = strip_comment(trimmed).to_string();
        while i + 1 < lines.len() {
            let open_string = ends_in_open_string(&stmt);
            let continued = stmt.ends_with('\\');
            if !(open_string || continued || bracket_delta(&stmt) > 0) {
                break;
            }
            let next = lines[i + 1];
            if !open_string && (next.trim_start().starts_with("```") || starts_with_assert(next.trim_start())) {
                break;
            }
            i += 1;
            if open_string {
                stmt.push('\n');
                stmt.push_str(next);
            } else {
                if continued {
                    stmt.pop();
                    stmt.truncate(stmt.trim_end().len());
                }
                let piece = strip_comment(next.trim());
                if !piece.is_empty() {
                    stmt.push(' ');
                    stmt.push_str(piece);
                }
            }
        }
        found.push(stmt);
        i += 1;
    }
    found
}

/// Canonical text used to detect duplicates: whitespace outside string
/// literals is removed except where it separates two word characters, where
/// it becomes one space; comments are dropped.
pub fn normalize(assertion: &str) -> String {
    let trimmed = assertion.trim();
    let mut out = String::with_capacity(trimmed.len());
    let mut pending_space = false;
    for token in tokenize(trimmed) {
        match token.kind {
            TokenKind::Space | TokenKind::Newline | TokenKind::Comment => pending_space = true,
            _ => {
                let text = token.text(trimmed);
                let joins_words = out.chars().last().is_some_and(is_word_char)
                    && text.chars().next().is_some_and(is_word_char);
                if pending_space && joins_words {
                    out.push(' ');
                }
                out.push_str(text);
                pending_space = false;
            }
        }
    }
    out
}

fn is_word_char(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

/// Splits `assert LEFT == RIGHT` at its single top-level `==`.
pub fn split_equality(assertion: &str) -> Option<(String, String)> {
    let body = assertion.trim().strip_prefix("assert")?.trim();
    if !top_level_ops(body, ",").is_empty() {
        return None;
    }
    let ops = top_level_ops(body, "==");
    let [at] = ops.as_slice() else { return None };
    let (left, right) = (body[..*at].trim(), body[at + 2..].trim());
    (!left.is_empty() && !right.is_empty()).then(|| (left.to_string(), right.to_string()))
}

/// Filters raw assertions into a case set.
///
/// Keeps, in original order, assertions that compile as a single `assert`
/// statement and are not duplicates (under [`normalize`]) of an earlier kept
/// one; stops after `cap` survivors.
pub fn sanitize(
    question_id: &str,
    raw_assertions: &[String],
    origin: Origin,
    session: &mut SandboxSession,
    cap: usize,
) -> Result<CaseSet, SandboxError> {
    let mut seen = HashSet::new();
    let mut cases = Vec::new();
    let (mut invalid, mut duplicate) = (0usize, 0usize);
    for raw in raw_assertions {
        if cases.len() == cap {
            break;
        }
        let assertion = raw.trim();
        let key = normalize(assertion);
        if seen.contains(&key) {
            duplicate += 1;
            continue;
        }
        if !session.compiles_as_assertion(assertion)? {
            invalid += 1;
            continue;
        }
        seen.insert(key);
        cases.push(TestCase::new(question_id, assertion, origin));
    }
    tracing::debug!(question_id, kept = cases.len(), invalid, duplicate, total = raw_assertions.len(), "sanitized");
    Ok(CaseSet { question_id: question_id.to_string(), cases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extracts_fenced_asserts_in_order() {
        let text = "Here are tests:\n```python\n# basic\nassert f(1) == 2\nassert f(2) == 3  # edge\n    assert f(0) == 1\n```\nThat covers it. The assertion holds.";
        assert_eq!(extract_assertions(text), vec!["assert f(1) == 2", "assert f(2) == 3", "assert f(0) == 1"]);
    }

    #[test]
    fn joins_multiline_assertions() {
        assert_eq!(extract_assertions("assert f([\n 1, 2\n]) == 3"), vec!["assert f([ 1, 2 ]) == 3"]);
        assert_eq!(extract_assertions("assert f(1) \\\n    == 2\nassert g()"), vec!["assert f(1) == 2", "assert g()"]);
        assert_eq!(
            extract_assertions("assert f([1,  # one\n  2]) == 3"),
            vec!["assert f([1, 2]) == 3"]
        );
    }

    #[test]
    fn unbalanced_assertion_stops_at_fence() {
        let text = "```\nassert f((1, 2) == 3\n```\nassert g(1) == 1";
        assert_eq!(extract_assertions(text), vec!["assert f((1, 2) == 3", "assert g(1) == 1"]);
    }

    #[test]
    fn unbalanced_assertion_does_not_swallow_the_next_one() {
        let text = "assert f(1, 2 == 3\nassert f(2) == 4\n";
        assert_eq!(extract_assertions(text), vec!["assert f(1, 2 == 3", "assert f(2) == 4"]);
    }

    #[test]
    fn prose_yields_nothing() {
        assert!(extract_assertions("I will write tests that assert correctness.\nassertions are good").is_empty());
    }

    #[test]
    fn normalization_ignores_operator_spacing_only() {
        assert_eq!(normalize("assert f(1)==2"), normalize("assert f(1) == 2"));
        assert_eq!(normalize("  assert  f( 1 ,2 )  ==  2 "), "assert f(1,2)==2");
        assert_ne!(normalize("assert f('a b') == 1"), normalize("assert f('a  b') == 1"));
        assert_eq!(normalize("assert x in  y"), "assert x in y");
    }

    #[test]
    fn splits_call_and_expected() {
        assert_eq!(
            split_equality("assert f(1, [2 == 2]) == [True]"),
            Some(("f(1, [2 == 2])".into(), "[True]".into()))
        );
        assert_eq!(split_equality("assert f(1)"), None);
        assert_eq!(split_equality("assert f(1) == 2, 'msg'"), None);
        assert_eq!(split_equality("assert a == b == c"), None);
        let case = TestCase::new("q", "assert f(2) == 4", Origin::TestAgent1Shot);
        assert_eq!(case.input_expr.as_deref(), Some("f(2)"));
        assert_eq!(case.expected_expr.as_deref(), Some("4"));
    }

    #[test]
    fn case_set_jsonl_shape() {
        let set = CaseSet {
            question_id: "q/1".into(),
            cases: vec![
                TestCase::new("q/1", "assert f(2) == 4", Origin::TestChain),
                TestCase::new("q/1", "assert f(2)", Origin::TestChain),
            ],
        };
        let text = set.to_jsonl();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"question_id":"q/1","origin":"testchain","assertion":"assert f(2) == 4","input_expr":"f(2)","expected_expr":"4"}"#
        );
        assert_eq!(text.lines().nth(1).unwrap(), r#"{"question_id":"q/1","origin":"testchain","assertion":"assert f(2)"}"#);
        assert_eq!(CaseSet::from_jsonl("q/1", &text).unwrap(), set);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[a-z0-9 ()=,'\\[\\]+]{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn extraction_finds_each_single_line_assert(args in proptest::collection::vec(0i32..1000, 0..8)) {
            let text: String = args.iter().map(|a| format!("assert f({a}) == {}\nsome prose\n", a + 1)).collect();
            let found = extract_assertions(&text);
            prop_assert_eq!(found.len(), args.len());
            for (a, stmt) in args.iter().zip(&found) {
                prop_assert_eq!(stmt, &format!("assert f({a}) == {}", a + 1));
            }
        }
    }
}
