//! Response grammar for `<think>…</think><answer>[{'x': …, 'y': …}, …]</answer>`.
//!
//! ```text
//! response  = stray* "<think>" reasoning "</think>" stray* "<answer>" body "</answer>" stray*
//! body      = ws "[" ws ( point ( ws "," ws point )* )? ws "]" ws
//! point     = "{" ws key ws ":" ws number ws "," ws key ws ":" ws number ws "}"
//! key       = "'x'" | "\"x\"" | "'y'" | "\"y\""        (x and y each exactly once)
//! number    = [+-]? ( digits ( "." digits? )? | "." digits ) ( [eE] [+-]? digits )?
//! ```
//!
//! Each of the four tags must occur exactly once, in that order. Text outside
//! the two blocks is tolerated and reported through `stray_text`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SerializeError;
use crate::geometry::{Point2, Trajectory};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Why a response failed the format check. Reported in document order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatFailure {
    /// Think block absent, unterminated, duplicated or after the answer.
    MissingThink,
    /// Think block present but only whitespace, when reasoning is required.
    EmptyThink,
    /// Answer block absent, unterminated, duplicated or not after the think block.
    MissingAnswer,
    BadCoordinateSyntax,
    NonFiniteValue,
    WrongPointCount,
}

impl fmt::Display for FormatFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FormatFailure::MissingThink => "missing_think",
            FormatFailure::EmptyThink => "empty_think",
            FormatFailure::MissingAnswer => "missing_answer",
            FormatFailure::BadCoordinateSyntax => "bad_coordinate_syntax",
            FormatFailure::NonFiniteValue => "non_finite_value",
            FormatFailure::WrongPointCount => "wrong_point_count",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub reasoning: String,
    pub trajectory: Trajectory,
    pub raw: String,
    /// Non-whitespace text outside the two blocks was present.
    pub stray_text: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub failure: Option<FormatFailure>,
    pub stray_text: bool,
}

impl FormatVerdict {
    pub fn valid(stray_text: bool) -> Self {
        Self {
            failure: None,
            stray_text,
        }
    }

    pub fn invalid(reason: FormatFailure) -> Self {
        Self {
            failure: Some(reason),
            stray_text: false,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.failure.is_none()
    }

    pub fn of(result: &Result<ParsedResponse, FormatFailure>) -> Self {
        match result {
            Ok(p) => Self::valid(p.stray_text),
            Err(f) => Self::invalid(*f),
        }
    }
}

/// `R_format`: 1 for a valid response, 0 otherwise.
pub fn format_reward(verdict: &FormatVerdict) -> f64 {
    if verdict.is_valid() {
        1.0
    } else {
        0.0
    }
}

fn single_occurrence(text: &str, tag: &str) -> Option<usize> {
    let mut hits = text.match_indices(tag).map(|(i, _)| i);
    let first = hits.next()?;
    hits.next().is_none().then_some(first)
}

pub fn parse_response(text: &str, expected_n: usize) -> Result<ParsedResponse, FormatFailure> {
    let parsed = parse_blocks(text)?;
    if parsed.trajectory.len() != expected_n {
        return Err(FormatFailure::WrongPointCount);
    }
    Ok(parsed)
}

/// Structural parse without the waypoint-count check.
pub fn parse_blocks(text: &str) -> Result<ParsedResponse, FormatFailure> {
    let think_open = single_occurrence(text, THINK_OPEN);
    let think_close = single_occurrence(text, THINK_CLOSE);
    let (t0, t1) = match (think_open, think_close) {
        (Some(a), Some(b)) if a + THINK_OPEN.len() <= b => (a, b),
        _ => return Err(FormatFailure::MissingThink),
    };
    let answer_open = single_occurrence(text, ANSWER_OPEN);
    let answer_close = single_occurrence(text, ANSWER_CLOSE);
    let (a0, a1) = match (answer_open, answer_close) {
        (Some(a), Some(b)) if a >= t1 + THINK_CLOSE.len() && a + ANSWER_OPEN.len() <= b => (a, b),
        _ => return Err(FormatFailure::MissingAnswer),
    };

    let reasoning = &text[t0 + THINK_OPEN.len()..t1];
    let body = &text[a0 + ANSWER_OPEN.len()..a1];
    let points = BodyParser::new(body).parse()?;

    let outside = [
        &text[..t0],
        &text[t1 + THINK_CLOSE.len()..a0],
        &text[a1 + ANSWER_CLOSE.len()..],
    ];
    let stray_text = outside.iter().any(|s| !s.trim().is_empty());
    Ok(ParsedResponse {
        reasoning: reasoning.to_string(),
        trajectory: Trajectory::new(points),
        raw: text.to_string(),
        stray_text,
    })
}

/// Like [`parse_response`], additionally failing with `EmptyThink` when the
/// reasoning block holds only whitespace.
pub fn parse_response_requiring_reasoning(
    text: &str,
    expected_n: usize,
) -> Result<ParsedResponse, FormatFailure> {
    let parsed = parse_response(text, expected_n);
    match parsed {
        Ok(p) if p.reasoning.trim().is_empty() => Err(FormatFailure::EmptyThink),
        other => other,
    }
}

struct BodyParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> BodyParser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        let trimmed = rest.trim_start();
        self.pos += rest.len() - trimmed.len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), FormatFailure> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(FormatFailure::BadCoordinateSyntax)
        }
    }

    fn parse(mut self) -> Result<Vec<Point2>, FormatFailure> {
        self.expect('[')?;
        let mut points = Vec::new();
        if !self.eat(']') {
            loop {
                points.push(self.point()?);
                if self.eat(',') {
                    continue;
                }
                self.expect(']')?;
                break;
            }
        }
        self.skip_ws();
        if !self.rest().is_empty() {
            return Err(FormatFailure::BadCoordinateSyntax);
        }
        Ok(points)
    }

    fn point(&mut self) -> Result<Point2, FormatFailure> {
        self.expect('{')?;
        let (k1, v1) = self.entry()?;
        self.expect(',')?;
        let (k2, v2) = self.entry()?;
        self.expect('}')?;
        match (k1, k2) {
            ('x', 'y') => Ok(Point2::new(v1, v2)),
            ('y', 'x') => Ok(Point2::new(v2, v1)),
            _ => Err(FormatFailure::BadCoordinateSyntax),
        }
    }

    fn entry(&mut self) -> Result<(char, f64), FormatFailure> {
        let key = self.key()?;
        self.expect(':')?;
        let value = self.number()?;
        Ok((key, value))
    }

    fn key(&mut self) -> Result<char, FormatFailure> {
        self.skip_ws();
        let bytes = self.rest().as_bytes();
        if bytes.len() < 3 {
            return Err(FormatFailure::BadCoordinateSyntax);
        }
        let (q, k, q2) = (bytes[0], bytes[1], bytes[2]);
        if (q == b'\'' || q == b'"') && q == q2 && (k == b'x' || k == b'y') {
            self.pos += 3;
            Ok(k as char)
        } else {
            Err(FormatFailure::BadCoordinateSyntax)
        }
    }

    fn number(&mut self) -> Result<f64, FormatFailure> {
        self.skip_ws();
        let rest = self.rest();
        let b = rest.as_bytes();
        let mut i = 0;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        // non-finite spellings are recognised so they can be reported as such
        let word_end = rest[i..]
            .find(|c: char| !c.is_ascii_alphabetic())
            .map_or(rest.len(), |e| e + i);
        let word = rest[i..word_end].to_ascii_lowercase();
        if matches!(word.as_str(), "nan" | "inf" | "infinity") {
            return Err(FormatFailure::NonFiniteValue);
        }

        let digits = |i: &mut usize| {
            let start = *i;
            while *i < b.len() && b[*i].is_ascii_digit() {
                *i += 1;
            }
            *i - start
        };
        let int_digits = digits(&mut i);
        let mut frac_digits = 0;
        if i < b.len() && b[i] == b'.' {
            i += 1;
            frac_digits = digits(&mut i);
        }
        if int_digits == 0 && frac_digits == 0 {
            return Err(FormatFailure::BadCoordinateSyntax);
        }
        if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
            let mut j = i + 1;
            if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                j += 1;
            }
            if digits(&mut j) == 0 {
                return Err(FormatFailure::BadCoordinateSyntax);
            }
            i = j;
        }
        let value: f64 = rest[..i]
            .parse()
            .map_err(|_| FormatFailure::BadCoordinateSyntax)?;
        self.pos += i;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(FormatFailure::NonFiniteValue)
        }
    }
}

/// Canonical response text with single-quoted keys and two decimals.
pub fn serialize_response(reasoning: &str, traj: &Trajectory) -> Result<String, SerializeError> {
    if let Some(tag) = TAGS.iter().find(|t| reasoning.contains(*t)) {
        return Err(SerializeError::ReservedTag(tag));
    }
    if let Some(i) = traj.points().iter().position(|p| !p.is_finite()) {
        return Err(SerializeError::NonFinite(i));
    }
    let mut out = String::with_capacity(reasoning.len() + 32 * traj.len() + 40);
    out.push_str(THINK_OPEN);
    out.push_str(reasoning);
    out.push_str(THINK_CLOSE);
    out.push_str(ANSWER_OPEN);
    out.push_str(&format_points(traj.points()));
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

pub(crate) fn format_point(p: &Point2) -> String {
    format!("{{'x': {:.2}, 'y': {:.2}}}", p.x, p.y)
}

fn format_points(points: &[Point2]) -> String {
    let items: Vec<String> = points.iter().map(format_point).collect();
    format!("[{}]", items.join(", "))
}

/// Round to the two decimals the serializer emits.
pub fn round2(v: f64) -> f64 {
    format!("{v:.2}").parse().unwrap_or(v)
}
