//! Attribute-aware prompt rendering and parsing of structured responses.
//!
//! A response is an optional `<think>...</think>` block holding one reasoning
//! segment per attribute plus an overall synthesis, followed by a score line
//! such as `Sharpness: 4, Color: 3.5, Noise: 4, Composition: 3, Overall: 3.5`.
//! The score line may be wrapped over consecutive lines. When several score
//! lines appear, the last one wins.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::Error;
use crate::types::{AttributeSchema, DimensionId, MAX_SCORE, MIN_SCORE};

/// Structured failure of [`parse_response`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("no score line found")]
    MissingScoreLine,
    #[error("score line has no `{0}` entry")]
    MissingDimension(String),
    #[error("score {value} for `{dimension}` is outside [1, 5]")]
    OutOfRangeScore { dimension: String, value: f64 },
    #[error("`{0}` appears twice on one score line")]
    DuplicateDimension(String),
    #[error("`{dimension}` has malformed score `{token}`")]
    MalformedScore { dimension: String, token: String },
    #[error("score line names unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("<think> block is not closed")]
    UnclosedThinkBlock,
}

impl ParseError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::MissingScoreLine => "missing_score_line",
            ParseError::MissingDimension(_) => "missing_dimension",
            ParseError::OutOfRangeScore { .. } => "out_of_range_score",
            ParseError::DuplicateDimension(_) => "duplicate_dimension",
            ParseError::MalformedScore { .. } => "malformed_score",
            ParseError::UnknownDimension(_) => "unknown_dimension",
            ParseError::UnclosedThinkBlock => "unclosed_think_block",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    /// Reasoning per dimension; `None` when the response had no think block.
    pub reasoning: Option<BTreeMap<DimensionId, String>>,
    /// One score per dimension, overall first.
    pub scores: Vec<f64>,
    pub raw: String,
}

impl ParsedResponse {
    pub fn score(&self, dim: DimensionId) -> f64 {
        self.scores[dim.index()]
    }
}

/// Renders the attribute-aware assessment prompt.
pub fn render_prompt(schema: &AttributeSchema) -> String {
    let mut out = String::new();
    out.push_str("You are an expert image quality assessor. Analyze the\n");
    out.push_str("given image by evaluating the following quality attributes\n");
    out.push_str("step by step:\n");
    for (i, attr) in schema.attributes().iter().enumerate() {
        let _ = writeln!(out, "{}. {}: {}", i + 1, attr.title, attr.description);
    }
    out.push('\n');
    out.push_str("After analyzing each attribute, provide an overall quality\n");
    out.push_str("assessment that synthesizes your findings.\n");
    out.push('\n');
    out.push_str("Format your response as:\n");
    out.push_str("<think>\n");
    for attr in schema.attributes() {
        let _ = writeln!(out, "[{} analysis]", attr.title);
    }
    out.push_str("[Overall synthesis]\n");
    out.push_str("</think>\n");
    let items: Vec<String> = schema
        .dimensions()
        .skip(1)
        .chain(std::iter::once(DimensionId::OVERALL))
        .map(|d| format!("{}: [1-5]", schema.label(d)))
        .collect();
    let lines: Vec<String> = items.chunks(3).map(|c| c.join(", ")).collect();
    out.push_str(&lines.join(",\n"));
    out.push('\n');
    out
}

/// Prompt for plain attribute names.
pub fn render_prompt_for_names<S: AsRef<str>>(names: &[S]) -> Result<String, Error> {
    Ok(render_prompt(&AttributeSchema::from_names(names)?))
}

enum LineKind {
    Prose,
    Scores(Vec<(DimensionId, f64)>),
    Invalid(ParseError),
}

fn looks_numeric(token: &str) -> bool {
    token
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
}

/// Integer or decimal with at most two fractional digits; decimal point only.
fn parse_score_token(token: &str) -> Option<f64> {
    let digits = token.strip_prefix('-').unwrap_or(token);
    let (int, frac) = match digits.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (digits, None),
    };
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if let Some(f) = frac {
        if f.is_empty() || f.len() > 2 || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    token.parse().ok()
}

fn is_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphabetic() || c == ' ' || c == '_' || c == '-')
}

fn classify_line(line: &str, schema: &AttributeSchema) -> LineKind {
    let cleaned: String = line.chars().filter(|&c| c != '*' && c != '`').collect();
    // list bullets and a sentence-final period
    let cleaned = cleaned
        .trim()
        .trim_start_matches(['-', '>', '#'])
        .trim_end_matches('.');
    let mut items = Vec::new();
    for item in cleaned.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let Some((label, token)) = item.split_once(':') else {
            return LineKind::Prose;
        };
        let (label, token) = (label.trim(), token.trim());
        if !is_label(label) || !looks_numeric(token) {
            return LineKind::Prose;
        }
        items.push((label, token));
    }
    if items.is_empty() || items.iter().all(|(l, _)| schema.lookup(l).is_none()) {
        return LineKind::Prose;
    }

    let mut scores: Vec<(DimensionId, f64)> = Vec::with_capacity(items.len());
    for (label, token) in items {
        let Some(dim) = schema.lookup(label) else {
            return LineKind::Invalid(ParseError::UnknownDimension(label.to_string()));
        };
        let name = schema.key(dim).to_string();
        if scores.iter().any(|(d, _)| *d == dim) {
            return LineKind::Invalid(ParseError::DuplicateDimension(name));
        }
        let Some(value) = parse_score_token(token) else {
            return LineKind::Invalid(ParseError::MalformedScore {
                dimension: name,
                token: token.to_string(),
            });
        };
        if !(MIN_SCORE..=MAX_SCORE).contains(&value) {
            return LineKind::Invalid(ParseError::OutOfRangeScore { dimension: name, value });
        }
        scores.push((dim, value));
    }
    LineKind::Scores(scores)
}

enum Block {
    Scores(Vec<(DimensionId, f64)>),
    Invalid(ParseError),
}

fn last_score_block(tail: &str, schema: &AttributeSchema) -> Option<Block> {
    let mut last: Option<Block> = None;
    // whether `last` may still absorb the next line
    let mut open = false;
    for line in tail.lines() {
        match classify_line(line, schema) {
            LineKind::Prose => open = false,
            LineKind::Invalid(e) => {
                last = Some(Block::Invalid(e));
                open = false;
            }
            LineKind::Scores(items) => {
                let extend = open
                    && matches!(&last, Some(Block::Scores(cur))
                        if !items.iter().any(|(d, _)| cur.iter().any(|(c, _)| c == d)));
                match (&mut last, extend) {
                    (Some(Block::Scores(cur)), true) => cur.extend(items),
                    _ => last = Some(Block::Scores(items)),
                }
                open = true;
            }
        }
    }
    last
}

fn strip_header_prefix(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s.len();
        s = s.trim_start_matches(['#', '*', '-', '[', '>']).trim_start();
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && matches!(s.as_bytes().get(digits), Some(b'.') | Some(b')')) {
            s = s[digits + 1..].trim_start();
        }
        if s.len() == before {
            return s;
        }
    }
}

fn strip_prefix_ignore_case<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let n = prefix.len();
    (s.len() >= n && s.is_char_boundary(n) && s[..n].eq_ignore_ascii_case(prefix)).then(|| &s[n..])
}

/// If `line` opens a reasoning segment, returns its dimension and the text
/// following the header on the same line.
fn header(line: &str, names: &[(String, DimensionId)]) -> Option<(DimensionId, String)> {
    let s = strip_header_prefix(line);
    for (name, dim) in names {
        let Some(mut rest) = strip_prefix_ignore_case(s, name) else {
            continue;
        };
        for suffix in [" analysis", " synthesis", " assessment", " quality"] {
            if let Some(r) = strip_prefix_ignore_case(rest, suffix) {
                rest = r;
                break;
            }
        }
        let bracketed = rest.starts_with(']');
        let rest = rest.trim_start_matches([']', '*']);
        if let Some(body) = rest.strip_prefix(':') {
            return Some((*dim, body.trim().to_string()));
        }
        if bracketed || rest.trim().is_empty() {
            return Some((*dim, rest.trim().to_string()));
        }
    }
    None
}

fn header_names(schema: &AttributeSchema) -> Vec<(String, DimensionId)> {
    let mut names = vec![("overall".to_string(), DimensionId::OVERALL)];
    for dim in schema.dimensions().skip(1) {
        let attr = schema.attribute(dim).expect("attribute dimension");
        for n in [&attr.title, &attr.label, &attr.key] {
            names.push((n.to_ascii_lowercase(), dim));
        }
    }
    names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    names.dedup();
    names
}

fn segment_reasoning(think: &str, schema: &AttributeSchema) -> BTreeMap<DimensionId, String> {
    let names = header_names(schema);
    let mut segments: BTreeMap<DimensionId, Vec<String>> = BTreeMap::new();
    let mut current: Option<DimensionId> = None;
    for line in think.lines() {
        if let Some((dim, body)) = header(line, &names) {
            current = Some(dim);
            segments.entry(dim).or_default().push(body);
        } else if let Some(dim) = current {
            segments.entry(dim).or_default().push(line.to_string());
        }
    }
    if segments.is_empty() {
        return [(DimensionId::OVERALL, think.trim().to_string())].into();
    }
    segments
        .into_iter()
        .map(|(dim, lines)| (dim, lines.join("\n").trim().to_string()))
        .collect()
}

/// Parses a response against the attribute schema.
pub fn parse_response(text: &str, schema: &AttributeSchema) -> Result<ParsedResponse, ParseError> {
    let lower = text.to_ascii_lowercase();
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    let (reasoning, tail) = match lower.find(OPEN) {
        Some(open) => {
            let body_start = open + OPEN.len();
            let close = lower[body_start..]
                .find(CLOSE)
                .map(|c| c + body_start)
                .ok_or(ParseError::UnclosedThinkBlock)?;
            (
                Some(segment_reasoning(&text[body_start..close], schema)),
                &text[close + CLOSE.len()..],
            )
        }
        None if lower.contains(CLOSE) => return Err(ParseError::UnclosedThinkBlock),
        None => (None, text),
    };

    let items = match last_score_block(tail, schema) {
        None => return Err(ParseError::MissingScoreLine),
        Some(Block::Invalid(e)) => return Err(e),
        Some(Block::Scores(items)) => items,
    };
    let mut scores = vec![f64::NAN; schema.num_dimensions()];
    for (dim, value) in items {
        scores[dim.index()] = value;
    }
    // attributes in order, overall last, as on the score line
    let order = schema.dimensions().skip(1).chain(std::iter::once(DimensionId::OVERALL));
    for dim in order {
        if scores[dim.index()].is_nan() {
            return Err(ParseError::MissingDimension(schema.key(dim).to_string()));
        }
    }
    Ok(ParsedResponse {
        reasoning,
        scores,
        raw: text.to_string(),
    })
}

fn format_score(value: f64) -> String {
    let s = format!("{value:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Canonical text form: think block (if reasoning is present) with one
/// labelled segment per dimension, then a single-line score list.
pub fn serialize_response(parsed: &ParsedResponse, schema: &AttributeSchema) -> String {
    let mut out = String::new();
    let order: Vec<DimensionId> = schema
        .dimensions()
        .skip(1)
        .chain(std::iter::once(DimensionId::OVERALL))
        .collect();
    if let Some(reasoning) = &parsed.reasoning {
        out.push_str("<think>\n");
        for dim in &order {
            if let Some(text) = reasoning.get(dim) {
                out.push_str(schema.label(*dim));
                out.push(':');
                if !text.is_empty() {
                    out.push(' ');
                    out.push_str(text);
                }
                out.push('\n');
            }
        }
        out.push_str("</think>\n");
    }
    let items: Vec<String> = order
        .iter()
        .map(|d| format!("{}: {}", schema.label(*d), format_score(parsed.score(*d))))
        .collect();
    out.push_str(&items.join(", "));
    out.push('\n');
    out
}
