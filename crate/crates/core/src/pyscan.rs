//! A small, forgiving lexer for Python source fragments.
//!
//! Good enough to find string literals, comments, brackets and operators in
//! model output and canonical solutions. It never fails: malformed input
//! degrades to `Other` tokens.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TokenKind {
    Name,
    Number,
    Str,
    Comment,
    Op,
    Space,
    Newline,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Token {
    pub kind: TokenKind,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.start..self.end]
    }
}

const THREE_CHAR_OPS: &[&str] = &["**=", "//=", ">>=", "<<=", "..."];
const TWO_CHAR_OPS: &[&str] = &[
    "==", "!=", "<=", ">=", "**", "//", "->", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=",
    "<<", ">>", ":=", "@=",
];

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

/// Length in bytes of a string-literal prefix (`r`, `b`, `f`, `u`, `rb`, ...)
/// immediately followed by a quote, if `rest` starts with one.
fn string_prefix_len(rest: &str) -> Option<usize> {
    let bytes = rest.as_bytes();
    let mut i = 0;
    while i < bytes.len() && i < 2 && matches!(bytes[i].to_ascii_lowercase(), b'r' | b'b' | b'f' | b'u') {
        i += 1;
    }
    if i < bytes.len() && (bytes[i] == b'\'' || bytes[i] == b'"') {
        Some(i)
    } else {
        None
    }
}

/// End offset of a string literal whose opening quote sits at `quote_at`.
fn scan_string(src: &str, quote_at: usize) -> usize {
    let bytes = src.as_bytes();
    let quote = bytes[quote_at];
    let triple = bytes.len() >= quote_at + 3 && bytes[quote_at + 1] == quote && bytes[quote_at + 2] == quote;
    let mut i = quote_at + if triple { 3 } else { 1 };
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'\\' {
            i += 2;
            continue;
        }
        if triple {
            if b == quote && bytes.get(i + 1) == Some(&quote) && bytes.get(i + 2) == Some(&quote) {
                return i + 3;
            }
        } else if b == quote {
            return i + 1;
        } else if b == b'\n' {
            return i;
        }
        i += 1;
    }
    bytes.len()
}

pub(crate) fn tokenize(src: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < src.len() {
        let rest = &src[pos..];
        let c = rest.chars().next().expect("non-empty");
        let (kind, len) = if c == '\n' || c == '\r' {
            (TokenKind::Newline, c.len_utf8())
        } else if c == ' ' || c == '\t' || c == '\x0c' {
            let len = rest.find(|ch: char| !matches!(ch, ' ' | '\t' | '\x0c')).unwrap_or(rest.len());
            (TokenKind::Space, len)
        } else if c == '\\' && rest[1..].starts_with('\n') {
            (TokenKind::Space, 2)
        } else if c == '#' {
            (TokenKind::Comment, rest.find('\n').unwrap_or(rest.len()))
        } else if let Some(prefix) = string_prefix_len(rest) {
            let end = scan_string(src, pos + prefix);
            (TokenKind::Str, end - pos)
        } else if is_ident_start(c) {
            let len = rest.find(|ch: char| !is_ident_continue(ch)).unwrap_or(rest.len());
            (TokenKind::Name, len)
        } else if c.is_ascii_digit() || (c == '.' && rest[1..].starts_with(|d: char| d.is_ascii_digit())) {
            (TokenKind::Number, number_len(rest))
        } else if let Some(op) = THREE_CHAR_OPS.iter().chain(TWO_CHAR_OPS).find(|op| rest.starts_with(**op)) {
            (TokenKind::Op, op.len())
        } else if "()[]{}+-*/%<>=!&|^~@:,.;".contains(c) {
            (TokenKind::Op, 1)
        } else {
            (TokenKind::Other, c.len_utf8())
        };
        tokens.push(Token { kind, start: pos, end: pos + len });
        pos += len;
    }
    tokens
}

fn number_len(rest: &str) -> usize {
    let bytes = rest.as_bytes();
    let mut i = 0;
    if bytes.len() > 1 && bytes[0] == b'0' && matches!(bytes[1], b'x' | b'X' | b'o' | b'O' | b'b' | b'B') {
        i = 2;
        while i < bytes.len() && (bytes[i].is_ascii_hexdigit() || bytes[i] == b'_') {
            i += 1;
        }
        return i;
    }
    while i < bytes.len() {
        let b = bytes[i];
        let exponent_sign = (b == b'+' || b == b'-') && i > 0 && matches!(bytes[i - 1], b'e' | b'E');
        if b.is_ascii_digit() || b == b'_' || b == b'.' || matches!(b, b'e' | b'E' | b'j' | b'J') || exponent_sign {
            i += 1;
        } else {
            break;
        }
    }
    i
}

/// Net bracket depth change across the code tokens of `src`.
pub(crate) fn bracket_delta(src: &str) -> i64 {
    tokenize(src)
        .iter()
        .filter(|t| t.kind == TokenKind::Op)
        .map(|t| match t.text(src) {
            "(" | "[" | "{" => 1,
            ")" | "]" | "}" => -1,
            _ => 0,
        })
        .sum()
}

/// True when `src` ends inside an unterminated triple-quoted string.
pub(crate) fn ends_in_open_string(src: &str) -> bool {
    tokenize(src).last().is_some_and(|t| {
        if t.kind != TokenKind::Str {
            return false;
        }
        let text = t.text(src);
        let body = text.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        let quote = &body[..body.len().min(3)];
        (quote == "\"\"\"" || quote == "'''") && (body.len() < 6 || !body.ends_with(quote))
    })
}

/// Byte offsets of top-level (depth 0) occurrences of operator `op`.
pub(crate) fn top_level_ops(src: &str, op: &str) -> Vec<usize> {
    let mut depth = 0i64;
    let mut found = Vec::new();
    for t in tokenize(src) {
        if t.kind != TokenKind::Op {
            continue;
        }
        match t.text(src) {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth -= 1,
            text if text == op && depth == 0 => found.push(t.start),
            _ => {}
        }
    }
    found
}
