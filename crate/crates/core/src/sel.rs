//! Structured extraction language (SEL).
//!
//! A record is a sequence of spot groups, each optionally carrying
//! association groups:
//!
//! ```text
//! ((LOC: California)(LOC: Ontario(Located_In: California)))
//! ```
//!
//! The same record is used for targets, retrieved knowledge and model
//! predictions. Parsing accepts both the wrapped form shown above and a
//! bare sequence of groups (`(LOC: California)(LOC: Ontario)`); the
//! canonical linearization always wraps.
//!
//! Grammar:
//!
//! ```text
//! Record    := '(' SpotGroup* ')' | SpotGroup*
//! SpotGroup := '(' Name ':' Span AssoGroup* ')'
//! AssoGroup := '(' Name ':' Span ')'
//! ```
//!
//! Names run up to the first `:` and may not contain `(`, `)` or `:`.
//! Spans run up to the next unescaped `(` or `)`; they may contain `:`.
//! A literal parenthesis or backslash inside a span is written `\(`,
//! `\)` or `\\`. Names and spans are trimmed on parse.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SelRecord {
    pub groups: Vec<SpotGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpotGroup {
    pub spot_name: String,
    pub info_span: String,
    pub assos: Vec<AssoGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssoGroup {
    pub asso_name: String,
    pub info_span: String,
}

/// The spot/association name inventory of a task.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub spots: BTreeSet<String>,
    pub assos: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelError {
    #[error("unbalanced parentheses at byte {0}")]
    UnbalancedParens(usize),
    #[error("missing ':' after name at byte {0}")]
    MissingColon(usize),
    #[error("empty name at byte {0}")]
    EmptyName(usize),
    #[error("nesting deeper than spot -> asso at byte {0}")]
    NestingTooDeep(usize),
    #[error("unexpected text outside a group at byte {0}")]
    UnexpectedText(usize),
    #[error("invalid class name {0:?}")]
    InvalidName(String),
    #[error("span {0:?} has leading or trailing whitespace")]
    InvalidSpan(String),
}

impl SelError {
    /// Byte offset of the fault, for parse errors.
    pub fn position(&self) -> Option<usize> {
        match self {
            SelError::UnbalancedParens(p)
            | SelError::MissingColon(p)
            | SelError::EmptyName(p)
            | SelError::NestingTooDeep(p)
            | SelError::UnexpectedText(p) => Some(*p),
            SelError::InvalidName(_) | SelError::InvalidSpan(_) => None,
        }
    }
}

/// A schema violation found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownSpot(String),
    UnknownAsso(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownSpot(n) => write!(f, "unknown spot name {n:?}"),
            Violation::UnknownAsso(n) => write!(f, "unknown asso name {n:?}"),
        }
    }
}

impl SpotGroup {
    pub fn new(spot_name: impl Into<String>, info_span: impl Into<String>) -> Self {
        SpotGroup {
            spot_name: spot_name.into(),
            info_span: info_span.into(),
            assos: Vec::new(),
        }
    }

    pub fn with_asso(mut self, asso_name: impl Into<String>, info_span: impl Into<String>) -> Self {
        self.assos.push(AssoGroup {
            asso_name: asso_name.into(),
            info_span: info_span.into(),
        });
        self
    }
}

impl SelRecord {
    pub fn new(groups: Vec<SpotGroup>) -> Self {
        SelRecord { groups }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

impl Schema {
    pub fn new<S, A>(spots: S, assos: A) -> Self
    where
        S: IntoIterator,
        S::Item: Into<String>,
        A: IntoIterator,
        A::Item: Into<String>,
    {
        Schema {
            spots: spots.into_iter().map(Into::into).collect(),
            assos: assos.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty() && self.assos.is_empty()
    }

    pub fn contains(&self, other: &Schema) -> bool {
        self.spots.is_superset(&other.spots) && self.assos.is_superset(&other.assos)
    }

    pub fn union(&self, other: &Schema) -> Schema {
        Schema {
            spots: self.spots.union(&other.spots).cloned().collect(),
            assos: self.assos.union(&other.assos).cloned().collect(),
        }
    }

    /// Schema covering exactly the names used by `record`.
    pub fn of_record(record: &SelRecord) -> Schema {
        let mut schema = Schema::default();
        for g in &record.groups {
            schema.spots.insert(g.spot_name.clone());
            for a in &g.assos {
                schema.assos.insert(a.asso_name.clone());
            }
        }
        schema
    }
}

/// True when `name` can be used as a spot or association name.
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.trim() == name
        && !name.chars().any(|c| matches!(c, '(' | ')' | ':'))
}

pub fn parse_sel(text: &str) -> Result<SelRecord, SelError> {
    Parser { src: text, pos: 0 }.record()
}

pub fn linearize_sel(record: &SelRecord) -> Result<String, SelError> {
    let mut out = String::from("(");
    for group in &record.groups {
        check_name(&group.spot_name)?;
        check_span(&group.info_span)?;
        out.push('(');
        out.push_str(&group.spot_name);
        out.push_str(": ");
        push_escaped(&mut out, &group.info_span);
        for asso in &group.assos {
            check_name(&asso.asso_name)?;
            check_span(&asso.info_span)?;
            out.push('(');
            out.push_str(&asso.asso_name);
            out.push_str(": ");
            push_escaped(&mut out, &asso.info_span);
            out.push(')');
        }
        out.push(')');
    }
    out.push(')');
    Ok(out)
}

/// One violation per name absent from `schema`, in document order.
pub fn validate_record(record: &SelRecord, schema: &Schema) -> Vec<Violation> {
    let mut violations = Vec::new();
    for g in &record.groups {
        if !schema.spots.contains(&g.spot_name) {
            violations.push(Violation::UnknownSpot(g.spot_name.clone()));
        }
        for a in &g.assos {
            if !schema.assos.contains(&a.asso_name) {
                violations.push(Violation::UnknownAsso(a.asso_name.clone()));
            }
        }
    }
    violations
}

/// Union of all spot and asso names in the record.
pub fn extract_class_set(record: &SelRecord) -> BTreeSet<String> {
    let schema = Schema::of_record(record);
    schema.spots.into_iter().chain(schema.assos).collect()
}

/// Structural token sequence of a record: parentheses, names and colons
/// are single tokens, spans are split on whitespace. `"()"` is two tokens.
pub fn tokenize_record(record: &SelRecord) -> Vec<String> {
    let mut tokens = vec!["(".to_string()];
    let push_group = |tokens: &mut Vec<String>, name: &str, span: &str| {
        tokens.push("(".into());
        tokens.push(name.to_string());
        tokens.push(":".into());
        tokens.extend(escape_span(span).split_whitespace().map(str::to_string));
    };
    for g in &record.groups {
        push_group(&mut tokens, &g.spot_name, &g.info_span);
        for a in &g.assos {
            push_group(&mut tokens, &a.asso_name, &a.info_span);
            tokens.push(")".into());
        }
        tokens.push(")".into());
    }
    tokens.push(")".into());
    tokens
}

/// Inverse of [`tokenize_record`] for well-formed token streams.
pub fn detokenize_record<S: AsRef<str>>(tokens: &[S]) -> Result<SelRecord, SelError> {
    let joined: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    parse_sel(&joined.join(" "))
}

fn check_name(name: &str) -> Result<(), SelError> {
    if is_valid_name(name) {
        Ok(())
    } else {
        Err(SelError::InvalidName(name.to_string()))
    }
}

fn check_span(span: &str) -> Result<(), SelError> {
    if span.trim() == span {
        Ok(())
    } else {
        Err(SelError::InvalidSpan(span.to_string()))
    }
}

fn escape_span(span: &str) -> String {
    let mut out = String::with_capacity(span.len());
    push_escaped(&mut out, span);
    out
}

fn push_escaped(out: &mut String, span: &str) {
    for c in span.chars() {
        if matches!(c, '(' | ')' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    /// Index of the first non-whitespace char after `from`.
    fn next_non_ws(&self, from: usize) -> Option<(usize, char)> {
        self.src[from..]
            .char_indices()
            .find(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| (from + i, c))
    }

    fn record(&mut self) -> Result<SelRecord, SelError> {
        self.skip_ws();
        let wrapped = match self.peek() {
            Some('(') => matches!(self.next_non_ws(self.pos + 1), Some((_, '(' | ')'))),
            _ => false,
        };
        let mut groups = Vec::new();
        if wrapped {
            let open = self.pos;
            self.bump();
            loop {
                self.skip_ws();
                match self.peek() {
                    Some('(') => groups.push(self.spot_group()?),
                    Some(')') => {
                        self.bump();
                        break;
                    }
                    Some(_) => return Err(SelError::UnexpectedText(self.pos)),
                    None => return Err(SelError::UnbalancedParens(open)),
                }
            }
            self.skip_ws();
            match self.peek() {
                None => {}
                Some(')') => return Err(SelError::UnbalancedParens(self.pos)),
                Some(_) => return Err(SelError::UnexpectedText(self.pos)),
            }
        } else {
            loop {
                self.skip_ws();
                match self.peek() {
                    Some('(') => groups.push(self.spot_group()?),
                    Some(')') => return Err(SelError::UnbalancedParens(self.pos)),
                    Some(_) => return Err(SelError::UnexpectedText(self.pos)),
                    None => break,
                }
            }
        }
        Ok(SelRecord { groups })
    }

    fn spot_group(&mut self) -> Result<SpotGroup, SelError> {
        let open = self.pos;
        self.bump();
        let spot_name = self.name(open)?;
        let (info_span, stop) = self.span(open)?;
        let mut group = SpotGroup {
            spot_name,
            info_span,
            assos: Vec::new(),
        };
        if stop == ')' {
            self.bump();
            return Ok(group);
        }
        // At '(' opening the first asso group.
        loop {
            self.skip_ws();
            match self.peek() {
                Some('(') => group.assos.push(self.asso_group()?),
                Some(')') => {
                    self.bump();
                    return Ok(group);
                }
                Some(_) => return Err(SelError::UnexpectedText(self.pos)),
                None => return Err(SelError::UnbalancedParens(open)),
            }
        }
    }

    fn asso_group(&mut self) -> Result<AssoGroup, SelError> {
        let open = self.pos;
        self.bump();
        let asso_name = self.name(open)?;
        let (info_span, stop) = self.span(open)?;
        if stop == '(' {
            return Err(SelError::NestingTooDeep(self.pos));
        }
        self.bump();
        Ok(AssoGroup {
            asso_name,
            info_span,
        })
    }

    /// Reads a name up to and including its ':'.
    fn name(&mut self, open: usize) -> Result<String, SelError> {
        let start = self.pos;
        loop {
            match self.peek() {
                Some(':') => break,
                Some('(' | ')') => return Err(SelError::MissingColon(self.pos)),
                Some(_) => {
                    self.bump();
                }
                None => return Err(SelError::UnbalancedParens(open)),
            }
        }
        let name = self.src[start..self.pos].trim();
        if name.is_empty() {
            return Err(SelError::EmptyName(start));
        }
        self.bump();
        Ok(name.to_string())
    }

    /// Reads a span up to (not including) the next unescaped paren.
    fn span(&mut self, open: usize) -> Result<(String, char), SelError> {
        let mut span = String::new();
        loop {
            match self.peek() {
                Some(c @ ('(' | ')')) => return Ok((span.trim().to_string(), c)),
                Some('\\') => {
                    self.bump();
                    match self.bump() {
                        Some(c) => span.push(c),
                        None => return Err(SelError::UnbalancedParens(open)),
                    }
                }
                Some(c) => {
                    span.push(c);
                    self.bump();
                }
                None => return Err(SelError::UnbalancedParens(open)),
            }
        }
    }
}
