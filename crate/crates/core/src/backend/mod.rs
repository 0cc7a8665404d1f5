//! Backend contract and the three queries built on top of it: grounding with
//! token log-probabilities, marker-based verification and multi-image
//! aggregation.
//!
//! A [`VisionModel`] is anything that turns images plus a text prompt into a
//! completion. The networked [`http::HttpVisionModel`] and the synthetic
//! [`crate::mock_world::MockVisionModel`] both implement it, so the pipeline
//! never knows which one it is talking to.

pub mod http;
mod marker;
pub mod prompts;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coord_parser::{parse_response, AxialSpans, CoordinateGrammar, ParseError, TokenScore};
use crate::geometry::{ImageSize, Point};

pub use marker::{draw_marker, paint_marker, MarkerShape, MarkerStyle, PINK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("backend returned no per-token log-probabilities: {0}")]
    MissingLogprobs(String),
    #[error("could not parse a coordinate from the backend reply: {0}")]
    Parse(#[from] ParseError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport {
                retryable: true,
                ..
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: Option<u64>,
}

impl Decoding {
    pub fn greedy(seed: Option<u64>) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            seed,
        }
    }
}

/// One multimodal request: images first, then the text.
#[derive(Debug, Clone)]
pub struct VisionPrompt {
    pub images: Vec<Arc<RgbImage>>,
    pub text: String,
    pub decoding: Decoding,
    pub logprobs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Generated tokens with log-probabilities. Empty unless requested.
    pub tokens: Vec<TokenScore>,
}

pub trait VisionModel: Send + Sync {
    fn complete(&self, prompt: &VisionPrompt) -> Result<Completion, BackendError>;

    /// Short description for diagnostics.
    fn describe(&self) -> String {
        "vision model".to_string()
    }
}

impl<T: VisionModel + ?Sized> VisionModel for Arc<T> {
    fn complete(&self, prompt: &VisionPrompt) -> Result<Completion, BackendError> {
        (**self).complete(prompt)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: VisionModel + ?Sized> VisionModel for &T {
    fn complete(&self, prompt: &VisionPrompt) -> Result<Completion, BackendError> {
        (**self).complete(prompt)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Counts calls forwarded to the wrapped model.
pub struct Counting<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M: VisionModel> Counting<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<M: VisionModel> VisionModel for Counting<M> {
    fn complete(&self, prompt: &VisionPrompt) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after a retryable transport failure.
    pub transport_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    #[serde(with = "millis")]
    pub backoff: Duration,
    /// Seed offset used when a reply does not parse and is resampled.
    pub resample_seed_offset: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            transport_retries: 1,
            backoff: Duration::from_millis(250),
            resample_seed_offset: 7919,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

fn complete_with_retry(
    model: &dyn VisionModel,
    prompt: &VisionPrompt,
    retry: &RetryPolicy,
) -> Result<Completion, BackendError> {
    let mut delay = retry.backoff;
    let mut attempt = 0;
    loop {
        match model.complete(prompt) {
            Err(e) if e.is_retryable() && attempt < retry.transport_retries => {
                attempt += 1;
                std::thread::sleep(delay);
                delay *= 2;
            }
            other => return other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundingRequest {
    pub image: Arc<RgbImage>,
    pub instruction: String,
    pub decoding: Decoding,
    pub grammar: CoordinateGrammar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResponse {
    pub raw_text: String,
    pub tokens: Vec<TokenScore>,
    /// In pixels of the submitted image.
    pub point: Point,
    pub spans: AxialSpans,
    /// Backend calls spent, including resamples.
    pub attempts: usize,
}

/// Ask for a click coordinate. An unparseable reply is resampled once with a
/// shifted seed; a second failure is returned as [`BackendError::Parse`].
pub fn ground(
    model: &dyn VisionModel,
    req: &GroundingRequest,
    retry: &RetryPolicy,
) -> Result<GroundingResponse, BackendError> {
    if req.instruction.trim().is_empty() {
        return Err(BackendError::InvalidRequest("empty instruction".into()));
    }
    if req.image.width() == 0 || req.image.height() == 0 {
        return Err(BackendError::InvalidRequest("empty image".into()));
    }
    let size = ImageSize::of(&req.image);
    let mut prompt = VisionPrompt {
        images: vec![req.image.clone()],
        text: prompts::grounding(&req.instruction, &req.grammar),
        decoding: req.decoding,
        logprobs: true,
    };
    let mut last_err = None;
    for round in 0..2u64 {
        if round > 0 {
            prompt.decoding.seed = req
                .decoding
                .seed
                .map(|s| s.wrapping_add(retry.resample_seed_offset));
        }
        let attempts = round as usize + 1;
        let completion = complete_with_retry(model, &prompt, retry)?;
        if completion.tokens.is_empty() {
            return Err(BackendError::MissingLogprobs(format!(
                "{} answered {:?} without token log-probabilities",
                model.describe(),
                completion.text
            )));
        }
        match parse_response(&completion.text, &completion.tokens, &req.grammar) {
            Ok((p, spans)) => {
                return Ok(GroundingResponse {
                    raw_text: completion.text,
                    tokens: completion.tokens,
                    point: req.grammar.to_pixels(p, size),
                    spans,
                    attempts,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(BackendError::Parse(last_err.expect("two failed rounds")))
}

/// Map a free-text verification reply to yes/no. Anything that is not a
/// clear affirmative counts as "no".
pub fn parse_verification(reply: &str) -> bool {
    static NEG: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?i)\b(no|not|incorrect|wrong|doesn't|does not|isn't|fails?)\b")
            .expect("static regex")
    });
    static POS: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?i)\b(yes|correct|correctly|matches|right)\b").expect("static regex")
    });
    let head = reply.trim_start().to_ascii_lowercase();
    if head.starts_with("yes") {
        return true;
    }
    if head.starts_with("no") || NEG.is_match(reply) {
        return false;
    }
    POS.is_match(reply)
}

/// Draw the marker at `point` and ask whether it hits the described element.
pub fn verify(
    model: &dyn VisionModel,
    image: &RgbImage,
    point: Point,
    instruction: &str,
    style: &MarkerStyle,
    retry: &RetryPolicy,
) -> Result<bool, BackendError> {
    let marked = draw_marker(image, point, style);
    let prompt = VisionPrompt {
        images: vec![Arc::new(marked)],
        text: prompts::verification(instruction),
        decoding: Decoding::greedy(None),
        logprobs: false,
    };
    let reply = complete_with_retry(model, &prompt, retry)?;
    Ok(parse_verification(&reply.text))
}

/// Parse an "Image k" style answer (1-based) into a 0-based index.
pub fn parse_choice(reply: &str, count: usize) -> Option<usize> {
    static IMAGE: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?i)\b(?:image|candidate|option)\s*#?\s*(\d+)").expect("static regex")
    });
    static BARE: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*\.?\s*$").expect("static regex"));
    let k: usize = IMAGE
        .captures(reply)
        .or_else(|| BARE.captures(reply))
        .and_then(|c| c[1].parse().ok())?;
    (1..=count).contains(&k).then(|| k - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationOutcome {
    /// A single candidate; no backend call.
    Forced(usize),
    /// The backend named a valid candidate.
    Chosen(usize),
    /// The reply did not name a valid candidate.
    Unparseable,
}

/// Show all annotated candidates at once and ask which one fits.
pub fn aggregate(
    model: &dyn VisionModel,
    images: Vec<Arc<RgbImage>>,
    instruction: &str,
    retry: &RetryPolicy,
) -> Result<AggregationOutcome, BackendError> {
    match images.len() {
        0 => Err(BackendError::InvalidRequest(
            "no candidates to aggregate".into(),
        )),
        1 => Ok(AggregationOutcome::Forced(0)),
        n => {
            let prompt = VisionPrompt {
                images,
                text: prompts::aggregation(instruction, n),
                decoding: Decoding::greedy(None),
                logprobs: false,
            };
            let reply = complete_with_retry(model, &prompt, retry)?;
            Ok(match parse_choice(&reply.text, n) {
                Some(j) => AggregationOutcome::Chosen(j),
                None => AggregationOutcome::Unparseable,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<Completion, BackendError>>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<Completion, BackendError>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
            }
        }
    }

    impl VisionModel for Scripted {
        fn complete(&self, _: &VisionPrompt) -> Result<Completion, BackendError> {
            self.replies
                .lock()
                .unwrap()
                .pop()
                .expect("script exhausted")
        }
    }

    fn reply(parts: &[&str]) -> Result<Completion, BackendError> {
        Ok(Completion {
            text: parts.concat(),
            tokens: parts.iter().map(|p| TokenScore::new(*p, -0.1)).collect(),
        })
    }

    fn request() -> GroundingRequest {
        GroundingRequest {
            image: Arc::new(RgbImage::new(100, 80)),
            instruction: "Click the button".into(),
            decoding: Decoding::greedy(Some(3)),
            grammar: CoordinateGrammar::default(),
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            backoff: Duration::from_millis(1),
            ..Default::default()
        }
    }

    #[test]
    fn verification_keywords() {
        assert!(parse_verification("Yes, it does."));
        assert!(parse_verification("The marked point is correct."));
        assert!(!parse_verification("The marked point is incorrect"));
        assert!(!parse_verification("No."));
        assert!(!parse_verification("It is not on the target"));
        assert!(!parse_verification("¯\\_(ツ)_/¯"));
    }

    #[test]
    fn choice_parsing() {
        assert_eq!(parse_choice("Image 3", 5), Some(2));
        assert_eq!(parse_choice("I pick image #1 because...", 2), Some(0));
        assert_eq!(parse_choice("2", 3), Some(1));
        assert_eq!(parse_choice("Image 6", 5), None);
        assert_eq!(parse_choice("Image 0", 5), None);
        assert_eq!(parse_choice("the second one", 5), None);
    }

    #[test]
    fn ground_parses_and_counts_attempts() {
        let m = Scripted::new(vec![reply(&["(", "4", "0", ", ", "2", "1", ")"])]);
        let r = ground(&m, &request(), &fast()).unwrap();
        assert_eq!(r.point, Point::new(40.0, 21.0));
        assert_eq!(r.attempts, 1);
        assert_eq!(r.spans.x, 1..3);
    }

    #[test]
    fn ground_resamples_once_then_fails() {
        let m = Scripted::new(vec![reply(&["dunno"]), reply(&["(1, 2)"])]);
        let r = ground(&m, &request(), &fast()).unwrap();
        assert_eq!((r.point, r.attempts), (Point::new(1.0, 2.0), 2));

        let m = Scripted::new(vec![reply(&["dunno"]), reply(&["still no"])]);
        assert!(matches!(
            ground(&m, &request(), &fast()),
            Err(BackendError::Parse(_))
        ));
    }

    #[test]
    fn ground_retries_transport_once() {
        let flaky = || {
            Err(BackendError::Transport {
                message: "reset".into(),
                retryable: true,
            })
        };
        let m = Scripted::new(vec![flaky(), reply(&["(5, 6)"])]);
        assert!(ground(&m, &request(), &fast()).is_ok());
        let m = Scripted::new(vec![flaky(), flaky()]);
        assert!(matches!(
            ground(&m, &request(), &fast()),
            Err(BackendError::Transport { .. })
        ));
    }

    #[test]
    fn ground_requires_logprobs() {
        let m = Scripted::new(vec![Ok(Completion {
            text: "(1, 2)".into(),
            tokens: vec![],
        })]);
        assert!(matches!(
            ground(&m, &request(), &fast()),
            Err(BackendError::MissingLogprobs(_))
        ));
    }

    #[test]
    fn aggregate_single_candidate_skips_backend() {
        let m = Scripted::new(vec![]);
        let out = aggregate(&m, vec![Arc::new(RgbImage::new(4, 4))], "x", &fast()).unwrap();
        assert_eq!(out, AggregationOutcome::Forced(0));
        let m = Scripted::new(vec![reply(&["Image 3"])]);
        let imgs = (0..3)
            .map(|_| Arc::new(RgbImage::new(4, 4)))
            .collect::<Vec<_>>();
        assert_eq!(
            aggregate(&m, imgs, "x", &fast()).unwrap(),
            AggregationOutcome::Chosen(2)
        );
    }

    #[test]
    fn counting_wrapper() {
        let c = Counting::new(Scripted::new(vec![reply(&["(1, 1)"]), reply(&["yes"])]));
        ground(&c, &request(), &fast()).unwrap();
        verify(
            &c,
            &RgbImage::new(8, 8),
            Point::new(1.0, 1.0),
            "x",
            &MarkerStyle::default(),
            &fast(),
        )
        .unwrap();
        assert_eq!(c.calls(), 2);
    }
}
