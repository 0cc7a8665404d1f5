//! Coordinate extraction from generated text and token-to-axis alignment.
//!
//! A backend returns its answer as a sequence of scored tokens. The parser
//! locates the single coordinate in the concatenated text under the active
//! [`CoordinateGrammar`], then works out which tokens carry the characters of
//! the x number and which carry the y number. Delimiters never count towards
//! either axis; a token that straddles both numbers is assigned to both.

use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageSize, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no coordinate found in {0:?}")]
    NoCoordinate(String),
    #[error("{count} coordinates found in {text:?}, expected exactly one")]
    MultipleCoordinates { count: usize, text: String },
    #[error("token/character alignment failed: {0}")]
    Alignment(String),
    #[error("invalid token: {0}")]
    InvalidToken(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerplexityError {
    #[error("perplexity over an empty span")]
    EmptySpan,
    #[error("span {start}..{end} is out of range for {len} tokens")]
    OutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("logprob {0} is not a finite non-positive number")]
    InvalidLogprob(f64),
}

/// One generated token and its natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub logprob: f64,
}

impl TokenScore {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self {
            text: text.into(),
            logprob,
        }
    }
}

/// Token index ranges holding the x and y digit runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxialSpans {
    pub x: Range<usize>,
    pub y: Range<usize>,
    /// The answer emitted y before x. The y-axis perplexity is then not
    /// conditioned on the x tokens; callers may want to know.
    #[serde(default)]
    pub y_first: bool,
}

impl AxialSpans {
    pub fn len_x(&self) -> usize {
        self.x.len()
    }

    pub fn len_y(&self) -> usize {
        self.y.len()
    }

    /// Indices of the union `x ∪ y`, each token once, ascending.
    pub fn union_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.x.clone().chain(self.y.clone()).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GrammarStyle {
    /// `(412, 98)`
    #[default]
    ParenPair,
    /// `{"x": 412, "y": 98}`
    JsonObject,
    /// `<|box_start|>(412,98)<|box_end|>`
    TaggedBox,
}

impl std::str::FromStr for GrammarStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paren_pair" => Ok(Self::ParenPair),
            "json_object" => Ok(Self::JsonObject),
            "tagged_box" => Ok(Self::TaggedBox),
            other => Err(format!(
                "unknown coordinate grammar {other:?} (expected paren_pair, json_object or tagged_box)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateGrammar {
    pub style: GrammarStyle,
    /// Numbers are 0..1 fractions of the image size instead of pixels.
    #[serde(default)]
    pub normalized: bool,
    #[serde(default = "default_open_tag")]
    pub open_tag: String,
    #[serde(default = "default_close_tag")]
    pub close_tag: String,
}

fn default_open_tag() -> String {
    "<|box_start|>".to_string()
}

fn default_close_tag() -> String {
    "<|box_end|>".to_string()
}

impl Default for CoordinateGrammar {
    fn default() -> Self {
        Self::new(GrammarStyle::ParenPair)
    }
}

impl CoordinateGrammar {
    pub fn new(style: GrammarStyle) -> Self {
        Self {
            style,
            normalized: false,
            open_tag: default_open_tag(),
            close_tag: default_close_tag(),
        }
    }

    fn number_pattern(&self) -> &'static str {
        if self.normalized {
            r"(\d+(?:\.\d+)?)"
        } else {
            r"(\d+)"
        }
    }

    /// Patterns paired with whether they capture y first.
    fn patterns(&self) -> Vec<(Regex, bool)> {
        let n = self.number_pattern();
        let build = |p: String| Regex::new(&p).expect("static coordinate pattern");
        match self.style {
            GrammarStyle::ParenPair => {
                vec![(build(format!(r"\(\s*{n}\s*,\s*{n}\s*\)")), false)]
            }
            GrammarStyle::JsonObject => vec![
                (
                    build(format!(r#"\{{\s*"x"\s*:\s*{n}\s*,\s*"y"\s*:\s*{n}\s*\}}"#)),
                    false,
                ),
                (
                    build(format!(r#"\{{\s*"y"\s*:\s*{n}\s*,\s*"x"\s*:\s*{n}\s*\}}"#)),
                    true,
                ),
            ],
            GrammarStyle::TaggedBox => {
                let open = regex::escape(&self.open_tag);
                let close = regex::escape(&self.close_tag);
                vec![(
                    build(format!(r"{open}\s*\(\s*{n}\s*,\s*{n}\s*\)\s*{close}")),
                    false,
                )]
            }
        }
    }

    /// Serialize a point the way a backend following this grammar would.
    pub fn format(&self, x: f64, y: f64) -> String {
        let (xs, ys) = if self.normalized {
            (format!("{x:.3}"), format!("{y:.3}"))
        } else {
            (
                format!("{}", x.round().max(0.0) as u64),
                format!("{}", y.round().max(0.0) as u64),
            )
        };
        match self.style {
            GrammarStyle::ParenPair => format!("({xs}, {ys})"),
            GrammarStyle::JsonObject => format!("{{\"x\": {xs}, \"y\": {ys}}}"),
            GrammarStyle::TaggedBox => format!("{}({xs},{ys}){}", self.open_tag, self.close_tag),
        }
    }

    /// Human-readable answer format used in grounding prompts.
    pub fn format_hint(&self) -> String {
        let unit = if self.normalized {
            "as fractions of the image width and height between 0 and 1"
        } else {
            "in integer pixels"
        };
        let shape = match self.style {
            GrammarStyle::ParenPair => "(x, y)".to_string(),
            GrammarStyle::JsonObject => "{\"x\": x, \"y\": y}".to_string(),
            GrammarStyle::TaggedBox => format!("{}(x,y){}", self.open_tag, self.close_tag),
        };
        format!("{shape} {unit}")
    }

    /// Convert a parsed value to pixels of an image of the given size.
    pub fn to_pixels(&self, p: Point, image: ImageSize) -> Point {
        if self.normalized {
            Point::new(p.x * image.width as f64, p.y * image.height as f64)
        } else {
            p
        }
    }
}

/// Locate the single coordinate in the concatenated token text.
pub fn parse_coordinate(
    tokens: &[TokenScore],
    grammar: &CoordinateGrammar,
) -> Result<(Point, AxialSpans), ParseError> {
    for (i, t) in tokens.iter().enumerate() {
        if t.text.is_empty() {
            return Err(ParseError::InvalidToken(format!("token {i} is empty")));
        }
        if !(t.logprob.is_finite() && t.logprob <= 0.0) {
            return Err(ParseError::InvalidToken(format!(
                "token {i} has logprob {}",
                t.logprob
            )));
        }
    }
    let text: String = tokens.iter().map(|t| t.text.as_str()).collect();

    let mut found: Vec<(Range<usize>, Range<usize>, bool)> = Vec::new();
    for (re, y_first) in grammar.patterns() {
        for caps in re.captures_iter(&text) {
            let a = caps.get(1).expect("group 1").range();
            let b = caps.get(2).expect("group 2").range();
            if y_first {
                found.push((b, a, true));
            } else {
                found.push((a, b, false));
            }
        }
    }
    let (x_run, y_run, y_first) = match found.len() {
        0 => return Err(ParseError::NoCoordinate(text)),
        1 => found.pop().expect("one match"),
        count => return Err(ParseError::MultipleCoordinates { count, text }),
    };

    let parse_num = |r: &Range<usize>| -> Result<f64, ParseError> {
        text[r.clone()]
            .parse::<f64>()
            .map_err(|e| ParseError::NoCoordinate(format!("{}: {e}", &text[r.clone()])))
    };
    let point = Point::new(parse_num(&x_run)?, parse_num(&y_run)?);

    let x = token_span(tokens, &x_run)?;
    let y = token_span(tokens, &y_run)?;
    Ok((point, AxialSpans { x, y, y_first }))
}

/// Like [`parse_coordinate`] but first checks that the tokens reproduce the
/// reported response text.
pub fn parse_response(
    raw_text: &str,
    tokens: &[TokenScore],
    grammar: &CoordinateGrammar,
) -> Result<(Point, AxialSpans), ParseError> {
    let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
    if joined != raw_text {
        return Err(ParseError::Alignment(format!(
            "tokens concatenate to {joined:?} but the response text is {raw_text:?}"
        )));
    }
    parse_coordinate(tokens, grammar)
}

fn token_span(tokens: &[TokenScore], run: &Range<usize>) -> Result<Range<usize>, ParseError> {
    let mut offset = 0usize;
    let mut first = None;
    let mut last = None;
    for (i, t) in tokens.iter().enumerate() {
        let start = offset;
        let end = offset + t.text.len();
        offset = end;
        if start < run.end && end > run.start {
            first.get_or_insert(i);
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Ok(a..b + 1),
        _ => Err(ParseError::Alignment(format!(
            "no token covers characters {}..{}",
            run.start, run.end
        ))),
    }
}

fn mean_neg_logprob<'a>(logprobs: impl Iterator<Item = &'a f64>) -> Result<f64, PerplexityError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &lp in logprobs {
        if !(lp.is_finite() && lp <= 0.0) {
            return Err(PerplexityError::InvalidLogprob(lp));
        }
        sum += lp;
        n += 1;
    }
    if n == 0 {
        return Err(PerplexityError::EmptySpan);
    }
    Ok(-sum / n as f64)
}

/// `exp(-(1/L) * sum(logprob))` over one axis span.
pub fn axial_perplexity(tokens: &[TokenScore], span: Range<usize>) -> Result<f64, PerplexityError> {
    if span.is_empty() {
        return Err(PerplexityError::EmptySpan);
    }
    if span.end > tokens.len() {
        return Err(PerplexityError::OutOfRange {
            start: span.start,
            end: span.end,
            len: tokens.len(),
        });
    }
    Ok(mean_neg_logprob(tokens[span].iter().map(|t| &t.logprob))?.exp())
}

/// Which tokens the sample-level perplexity is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityScope {
    /// Only the digit tokens of both axes.
    #[default]
    Coordinate,
    /// Every generated token.
    FullResponse,
}

/// Perplexity of a whole answer. With [`PerplexityScope::Coordinate`] this is
/// the mean over `x ∪ y` with shared tokens counted once.
pub fn total_perplexity(
    tokens: &[TokenScore],
    spans: &AxialSpans,
    scope: PerplexityScope,
) -> Result<f64, PerplexityError> {
    if tokens.is_empty() {
        return Err(PerplexityError::EmptySpan);
    }
    match scope {
        PerplexityScope::FullResponse => {
            Ok(mean_neg_logprob(tokens.iter().map(|t| &t.logprob))?.exp())
        }
        PerplexityScope::Coordinate => {
            let idx = spans.union_indices();
            if let Some(&bad) = idx.iter().find(|&&i| i >= tokens.len()) {
                return Err(PerplexityError::OutOfRange {
                    start: bad,
                    end: bad + 1,
                    len: tokens.len(),
                });
            }
            Ok(mean_neg_logprob(idx.iter().map(|&i| &tokens[i].logprob))?.exp())
        }
    }
}
