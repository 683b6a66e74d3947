//! The property-tree configuration format used by every config file:
//!
//! ```text
//! global {
//!     broker 127.0.0.1:1883   # comment
//!     sendInterval 1000;
//! }
//! plugin tester { group g1 { interval 1000; sensors 100 } }
//! ```
//!
//! An entry is a key, an optional rest-of-line value, and an optional brace
//! block of child entries. `#` starts a comment, `;` optionally terminates
//! an entry, and values with spaces or an empty value can be double-quoted.

use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PtError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("key {key:?}: {msg}")]
    BadValue { key: String, msg: String },
}

/// One parsed entry. The document root is a synthetic node with an empty key
/// whose children are the top-level entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PtNode {
    pub key: String,
    pub value: Option<String>,
    pub children: Vec<PtNode>,
}

impl PtNode {
    pub fn new(key: &str, value: Option<&str>) -> PtNode {
        PtNode {
            key: key.to_owned(),
            value: value.map(str::to_owned),
            children: Vec::new(),
        }
    }

    /// Synthetic document root: empty key, no value.
    pub fn root() -> PtNode {
        PtNode::default()
    }

    pub fn leaf(key: &str, value: impl Into<String>) -> PtNode {
        PtNode {
            key: key.to_owned(),
            value: Some(value.into()),
            children: Vec::new(),
        }
    }

    pub fn child(&self, key: &str) -> Option<&PtNode> {
        self.children.iter().find(|c| c.key == key)
    }

    pub fn children_named<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a PtNode> {
        self.children.iter().filter(move |c| c.key == key)
    }

    pub fn value_str(&self) -> Option<&str> {
        self.value.as_deref()
    }

    /// Child's value as a string, erroring if the child or value is missing.
    pub fn get_str(&self, key: &str) -> Result<&str, PtError> {
        self.child(key)
            .and_then(|c| c.value.as_deref())
            .ok_or_else(|| PtError::MissingKey(key.to_owned()))
    }

    pub fn get_str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.child(key).and_then(|c| c.value.as_deref()).unwrap_or(default)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, PtError> {
        parse_with(self, key, "unsigned integer")
    }

    pub fn get_u64_or(&self, key: &str, default: u64) -> Result<u64, PtError> {
        match self.child(key) {
            None => Ok(default),
            Some(_) => self.get_u64(key),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, PtError> {
        parse_with(self, key, "number")
    }

    pub fn get_f64_or(&self, key: &str, default: f64) -> Result<f64, PtError> {
        match self.child(key) {
            None => Ok(default),
            Some(_) => self.get_f64(key),
        }
    }
}

fn parse_with<T: std::str::FromStr>(node: &PtNode, key: &str, what: &str) -> Result<T, PtError> {
    let raw = node.get_str(key)?;
    raw.parse().map_err(|_| PtError::BadValue {
        key: key.to_owned(),
        msg: format!("expected {what}, got {raw:?}"),
    })
}

#[derive(Debug, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Open,
    Close,
    Semi,
    Newline,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Lexer<'a> {
        Lexer { chars: text.chars().peekable(), line: 1 }
    }

    fn err(&self, msg: &str) -> PtError {
        PtError::Parse { line: self.line, msg: msg.to_owned() }
    }

    fn next_tok(&mut self) -> Result<Option<(usize, Tok)>, PtError> {
        loop {
            let line = self.line;
            let c = match self.chars.peek() {
                None => return Ok(None),
                Some(&c) => c,
            };
            match c {
                '\n' => {
                    self.chars.next();
                    self.line += 1;
                    return Ok(Some((line, Tok::Newline)));
                }
                c if c.is_whitespace() => {
                    self.chars.next();
                }
                '#' => {
                    while let Some(&c) = self.chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.chars.next();
                    }
                }
                '{' => {
                    self.chars.next();
                    return Ok(Some((line, Tok::Open)));
                }
                '}' => {
                    self.chars.next();
                    return Ok(Some((line, Tok::Close)));
                }
                ';' => {
                    self.chars.next();
                    return Ok(Some((line, Tok::Semi)));
                }
                '"' => {
                    self.chars.next();
                    let mut s = String::new();
                    loop {
                        match self.chars.next() {
                            None => return Err(self.err("unterminated quoted string")),
                            Some('"') => break,
                            Some('\n') => return Err(self.err("newline inside quoted string")),
                            Some('\\') => match self.chars.next() {
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                _ => return Err(self.err("bad escape in quoted string")),
                            },
                            Some(c) => s.push(c),
                        }
                    }
                    return Ok(Some((line, Tok::Quoted(s))));
                }
                _ => {
                    let mut s = String::new();
                    while let Some(&c) = self.chars.peek() {
                        if c.is_whitespace() || matches!(c, '{' | '}' | ';' | '#' | '"') {
                            break;
                        }
                        s.push(c);
                        self.chars.next();
                    }
                    return Ok(Some((line, Tok::Word(s))));
                }
            }
        }
    }
}

/// Parses a document into a root node with empty key.
pub fn parse(text: &str) -> Result<PtNode, PtError> {
    let mut lexer = Lexer::new(text);
    let mut toks: Vec<(usize, Tok)> = Vec::new();
    while let Some(t) = lexer.next_tok()? {
        toks.push(t);
    }
    let mut pos = 0usize;
    let children = parse_entries(&toks, &mut pos, 0)?;
    if pos < toks.len() {
        let (line, _) = toks[pos];
        return Err(PtError::Parse { line, msg: "unmatched '}'".into() });
    }
    Ok(PtNode { key: String::new(), value: None, children })
}

fn parse_entries(toks: &[(usize, Tok)], pos: &mut usize, depth: usize) -> Result<Vec<PtNode>, PtError> {
    let mut out = Vec::new();
    loop {
        // Skip separators between entries.
        while let Some((_, t)) = toks.get(*pos) {
            if matches!(t, Tok::Newline | Tok::Semi) {
                *pos += 1;
            } else {
                break;
            }
        }
        match toks.get(*pos) {
            None => {
                if depth > 0 {
                    let line = toks.last().map(|(l, _)| *l).unwrap_or(1);
                    return Err(PtError::Parse { line, msg: "unexpected end of input inside block".into() });
                }
                return Ok(out);
            }
            Some((_, Tok::Close)) => {
                if depth == 0 {
                    return Ok(out); // caller reports the stray brace
                }
                *pos += 1;
                return Ok(out);
            }
            Some((line, Tok::Open)) => {
                return Err(PtError::Parse { line: *line, msg: "block without a key".into() })
            }
            Some((line, Tok::Word(w))) => {
                let line = *line;
                let key = w.clone();
                *pos += 1;
                out.push(parse_entry_rest(toks, pos, key, line)?);
            }
            Some((line, Tok::Quoted(_))) => {
                return Err(PtError::Parse { line: *line, msg: "quoted string cannot be a key".into() })
            }
            Some((_, Tok::Newline | Tok::Semi)) => unreachable!(),
        }
    }
}

fn parse_entry_rest(toks: &[(usize, Tok)], pos: &mut usize, key: String, line: usize) -> Result<PtNode, PtError> {
    let mut words: Vec<String> = Vec::new();
    let mut quoted_single: Option<String> = None;
    loop {
        match toks.get(*pos) {
            None | Some((_, Tok::Newline)) | Some((_, Tok::Semi)) | Some((_, Tok::Close)) => {
                // Entry without block. Leave the terminator for the caller.
                let value = finish_value(words, quoted_single);
                return Ok(PtNode { key, value, children: Vec::new() });
            }
            Some((_, Tok::Open)) => {
                *pos += 1;
                let children = parse_entries(toks, pos, 1)?;
                let value = finish_value(words, quoted_single);
                return Ok(PtNode { key, value, children });
            }
            Some((_, Tok::Word(w))) => {
                if quoted_single.is_some() {
                    return Err(PtError::Parse { line, msg: "mixed quoted and bare value".into() });
                }
                words.push(w.clone());
                *pos += 1;
            }
            Some((qline, Tok::Quoted(q))) => {
                if !words.is_empty() || quoted_single.is_some() {
                    return Err(PtError::Parse { line: *qline, msg: "mixed quoted and bare value".into() });
                }
                quoted_single = Some(q.clone());
                *pos += 1;
            }
        }
    }
}

fn finish_value(words: Vec<String>, quoted: Option<String>) -> Option<String> {
    if let Some(q) = quoted {
        return Some(q);
    }
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

fn needs_quoting(v: &str) -> bool {
    v.is_empty() || v.chars().any(|c| c.is_whitespace() && c != ' ') || v.contains('"') || {
        // A bare value survives re-parsing iff no special chars and single spaces.
        v.contains("  ") || v.starts_with(' ') || v.ends_with(' ')
            || v.chars().any(|c| matches!(c, '{' | '}' | ';' | '#'))
    }
}

fn write_node(out: &mut String, node: &PtNode, indent: usize) {
    for _ in 0..indent {
        out.push_str("    ");
    }
    out.push_str(&node.key);
    if let Some(v) = &node.value {
        if needs_quoting(v) {
            let escaped = v.replace('\\', "\\\\").replace('"', "\\\"");
            let _ = write!(out, " \"{escaped}\"");
        } else {
            let _ = write!(out, " {v}");
        }
    }
    if node.children.is_empty() {
        out.push('\n');
    } else {
        out.push_str(" {\n");
        for c in &node.children {
            write_node(out, c, indent + 1);
        }
        for _ in 0..indent {
            out.push_str("    ");
        }
        out.push_str("}\n");
    }
}

/// Serializes a root node (children of the synthetic root become top-level
/// entries). `parse(serialize(x)) == x` for values that `parse` can produce.
pub fn serialize(root: &PtNode) -> String {
    let mut out = String::new();
    for c in &root.children {
        write_node(&mut out, c, 0);
    }
    out
}
