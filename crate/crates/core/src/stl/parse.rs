//! Surface syntax for rule formulas.
//!
//! ```text
//! formula := term ("and" term)*
//! term    := pred | "(" formula ")" | "alw[" INT "," INT "](" formula ")"
//! pred    := "s" INDEX ("<" | "<=" | ">=" | ">") NUMBER
//! ```
//!
//! Whitespace is ignored between tokens and `and` is left-associative.

use super::{Comparison, Formula, StlError};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Signal(usize),
    Num(f64),
    Alw,
    And,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Cmp(Comparison),
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.src[self.pos..].chars().next() {
            if f(c) {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        &self.src[start..self.pos]
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, StlError> {
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            let start = self.pos;
            let Some(c) = self.src[self.pos..].chars().next() else {
                return Ok(out);
            };
            let tok = match c {
                '(' => {
                    self.pos += 1;
                    Tok::LParen
                }
                ')' => {
                    self.pos += 1;
                    Tok::RParen
                }
                '[' => {
                    self.pos += 1;
                    Tok::LBracket
                }
                ']' => {
                    self.pos += 1;
                    Tok::RBracket
                }
                ',' => {
                    self.pos += 1;
                    Tok::Comma
                }
                '<' | '>' => {
                    self.pos += 1;
                    let eq = self.src[self.pos..].starts_with('=');
                    if eq {
                        self.pos += 1;
                    }
                    Tok::Cmp(match (c, eq) {
                        ('<', false) => Comparison::Lt,
                        ('<', true) => Comparison::Le,
                        ('>', false) => Comparison::Gt,
                        _ => Comparison::Ge,
                    })
                }
                c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                    let text = self.number_text();
                    let v = text.parse::<f64>().map_err(|_| StlError::Syntax {
                        pos: start,
                        msg: format!("invalid number {text:?}"),
                    })?;
                    Tok::Num(v)
                }
                c if c.is_ascii_alphabetic() => {
                    let word = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
                    match word {
                        "and" => Tok::And,
                        "alw" => Tok::Alw,
                        w if w.len() > 1
                            && w.starts_with('s')
                            && w[1..].bytes().all(|b| b.is_ascii_digit()) =>
                        {
                            let idx = w[1..].parse::<usize>().map_err(|_| StlError::Syntax {
                                pos: start,
                                msg: format!("signal index out of range in {w:?}"),
                            })?;
                            Tok::Signal(idx)
                        }
                        w => {
                            return Err(StlError::Syntax {
                                pos: start,
                                msg: format!("unknown word {w:?}"),
                            })
                        }
                    }
                }
                other => {
                    return Err(StlError::Syntax {
                        pos: start,
                        msg: format!("unexpected character {other:?}"),
                    })
                }
            };
            out.push((start, tok));
        }
    }

    fn number_text(&mut self) -> &'a str {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        if i < bytes.len() && (bytes[i] == b'-' || bytes[i] == b'+') {
            i += 1;
        }
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'-' || bytes[j] == b'+') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                i = j;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
        }
        self.pos = i;
        &self.src[start..i]
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    i: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, StlError> {
        Err(StlError::Syntax {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), StlError> {
        if self.peek() == Some(&want) {
            self.i += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn formula(&mut self) -> Result<Formula, StlError> {
        let mut lhs = self.term()?;
        while self.peek() == Some(&Tok::And) {
            self.i += 1;
            let rhs = self.term()?;
            lhs = Formula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn bound(&mut self) -> Result<(usize, usize), StlError> {
        let pos = self.pos();
        match self.peek() {
            Some(Tok::Num(v)) if *v >= 0.0 && v.fract() == 0.0 && *v <= u32::MAX as f64 => {
                let v = *v as usize;
                self.i += 1;
                Ok((pos, v))
            }
            _ => self.err("expected a non-negative integer time bound"),
        }
    }

    fn term(&mut self) -> Result<Formula, StlError> {
        match self.peek() {
            Some(Tok::LParen) => {
                self.i += 1;
                let f = self.formula()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(f)
            }
            Some(Tok::Alw) => {
                self.i += 1;
                self.expect(Tok::LBracket, "'[' after alw")?;
                let (_, lo) = self.bound()?;
                self.expect(Tok::Comma, "','")?;
                let (_, hi) = self.bound()?;
                self.expect(Tok::RBracket, "']'")?;
                if lo >= hi {
                    return Err(StlError::Bounds { lo, hi });
                }
                self.expect(Tok::LParen, "'(' after time bounds")?;
                let child = self.formula()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(Formula::always(lo, hi, child))
            }
            Some(Tok::Signal(idx)) => {
                let signal = *idx;
                self.i += 1;
                let cmp = match self.peek() {
                    Some(Tok::Cmp(c)) => *c,
                    _ => return self.err("expected comparison operator"),
                };
                self.i += 1;
                let threshold = match self.peek() {
                    Some(Tok::Num(v)) if v.is_finite() => *v,
                    _ => return self.err("expected numeric threshold"),
                };
                self.i += 1;
                Ok(Formula::Predicate {
                    signal,
                    cmp,
                    threshold,
                })
            }
            Some(_) => self.err("expected a predicate, '(' or alw"),
            None => self.err("unexpected end of formula"),
        }
    }
}

pub(super) fn parse(text: &str) -> Result<Formula, StlError> {
    if text.trim().is_empty() {
        return Err(StlError::Syntax {
            pos: 0,
            msg: "empty formula".into(),
        });
    }
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut p = Parser {
        toks,
        i: 0,
        end: text.len(),
    };
    let f = p.formula()?;
    if p.i != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(f)
}
