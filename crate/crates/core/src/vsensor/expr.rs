//! Arithmetic expressions over sensor operands:
//!
//! ```text
//! expr   := term  (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number | '<' topic '>' | '(' expr ')' | '-' factor
//! ```
//!
//! `Display` prints a canonical form that re-parses to a structurally
//! identical tree, which is what the metadata file stores.

use crate::model::Topic;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at byte {pos}: {msg}")]
pub struct SyntaxError {
    pub pos: usize,
    pub msg: String,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ArithError {
    #[error("division by zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Operand(Topic),
    Neg(Box<Expr>),
    Bin {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Const(_) | Expr::Operand(_) => 4,
            Expr::Neg(_) => 3,
            Expr::Bin { op, .. } => op.precedence(),
        }
    }

    /// Operand topics in first-appearance order, deduplicated.
    pub fn operands(&self) -> Vec<Topic> {
        let mut out = Vec::new();
        self.collect_operands(&mut out);
        out
    }

    fn collect_operands(&self, out: &mut Vec<Topic>) {
        match self {
            Expr::Const(_) => {}
            Expr::Operand(t) => {
                if !out.contains(t) {
                    out.push(t.clone());
                }
            }
            Expr::Neg(e) => e.collect_operands(out),
            Expr::Bin { lhs, rhs, .. } => {
                lhs.collect_operands(out);
                rhs.collect_operands(out);
            }
        }
    }

    /// Folds the tree with operand values supplied by `env`.
    ///
    /// Exact-zero division is reported; other non-finite outcomes are the
    /// caller's to detect on the result.
    pub fn eval(&self, env: &dyn Fn(&Topic) -> f64) -> Result<f64, ArithError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Operand(t) => Ok(env(t)),
            Expr::Neg(e) => Ok(-e.eval(env)?),
            Expr::Bin { op, lhs, rhs } => {
                let l = lhs.eval(env)?;
                let r = rhs.eval(env)?;
                match op {
                    BinOp::Add => Ok(l + r),
                    BinOp::Sub => Ok(l - r),
                    BinOp::Mul => Ok(l * r),
                    BinOp::Div => {
                        if r == 0.0 {
                            Err(ArithError::DivisionByZero)
                        } else {
                            Ok(l / r)
                        }
                    }
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Operand(t) => write!(f, "<{t}>"),
            Expr::Neg(e) => {
                if e.precedence() == 4 {
                    write!(f, "-{e}")
                } else {
                    write!(f, "-({e})")
                }
            }
            Expr::Bin { op, lhs, rhs } => {
                let p = op.precedence();
                if lhs.precedence() < p {
                    write!(f, "({lhs})")?;
                } else {
                    write!(f, "{lhs}")?;
                }
                write!(f, " {} ", op.symbol())?;
                // Right operands of equal precedence keep their parens:
                // floating-point ops are not associative and the stored
                // form must rebuild the same tree.
                if rhs.precedence() <= p {
                    write!(f, "({rhs})")
                } else {
                    write!(f, "{rhs}")
                }
            }
        }
    }
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> SyntaxError {
        SyntaxError { pos: self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.term()?;
        while let Some(c) = self.peek() {
            let op = match c {
                b'+' => BinOp::Add,
                b'-' => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.factor()?;
        while let Some(c) = self.peek() {
            let op = match c {
                b'*' => BinOp::Mul,
                b'/' => BinOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, SyntaxError> {
        match self.peek() {
            None => Err(self.err("unexpected end of expression")),
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(b'<') => {
                let start = self.pos;
                self.pos += 1;
                let close = self.text[self.pos..]
                    .find('>')
                    .ok_or_else(|| SyntaxError { pos: start, msg: "unterminated operand, expected '>'".into() })?;
                let topic_text = &self.text[self.pos..self.pos + close];
                let topic = Topic::parse(topic_text)
                    .map_err(|e| SyntaxError { pos: start, msg: e.to_string() })?;
                self.pos += close + 1;
                Ok(Expr::Operand(topic))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) => Err(self.err(format!("unexpected character {:?}", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expr, SyntaxError> {
        let start = self.pos;
        let mut end = self.pos;
        let mut seen_e = false;
        while let Some(&b) = self.bytes.get(end) {
            match b {
                b'0'..=b'9' | b'.' => end += 1,
                b'e' | b'E' if !seen_e => {
                    seen_e = true;
                    end += 1;
                    if matches!(self.bytes.get(end), Some(b'+') | Some(b'-')) {
                        end += 1;
                    }
                }
                _ => break,
            }
        }
        let token = &self.text[start..end];
        let value: f64 = token
            .parse()
            .map_err(|_| SyntaxError { pos: start, msg: format!("bad number {token:?}") })?;
        if !value.is_finite() {
            return Err(SyntaxError { pos: start, msg: format!("non-finite number {token:?}") });
        }
        self.pos = end;
        Ok(Expr::Const(value))
    }
}

/// Parses a complete expression; trailing input is an error.
pub fn parse_expr(text: &str) -> Result<Expr, SyntaxError> {
    let mut p = Parser { text, bytes: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    if p.peek().is_some() {
        return Err(p.err("trailing input after expression"));
    }
    Ok(e)
}
