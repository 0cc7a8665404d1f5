//! A grounding model that reads the rendered pixels instead of running a
//! network. It recognises elements by their palette color, so it behaves the
//! same on full screenshots, resized crops and images that went through the
//! HTTP wire format.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, LazyLock};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::render_scene;
use super::scene::{palette, Scene};
use super::MockError;
use crate::backend::prompts::{classify, extract_instruction, PromptTask};
use crate::backend::{
    ground, BackendError, Completion, Decoding, GroundingRequest, GroundingResponse, RetryPolicy,
    VisionModel, VisionPrompt, PINK,
};
use crate::coord_parser::{parse_coordinate, CoordinateGrammar, TokenScore};
use crate::geometry::Point;

/// Calibration constant of the fabricated log-probabilities: every digit of
/// an axis gets `-σ / CALIBRATION_BETA`, so that axis perplexity is
/// `exp(σ / CALIBRATION_BETA)`.
pub const CALIBRATION_BETA: f64 = 50.0;
/// Log-probability of punctuation and other non-coordinate tokens.
pub const FILLER_LOGPROB: f64 = -0.0005;
/// Perplexity inflation of answers that lock onto the wrong element.
pub const CONFUSION_PPL_FACTOR: f64 = 1.5;
/// Element-to-image extent ratio at which σ equals `base_sigma · downsample_factor`.
const SIZE_NORMALIZER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub downsample_factor: f64,
    pub base_sigma: f64,
    pub confusion_rate: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            downsample_factor: 4.0,
            base_sigma: 1.0,
            confusion_rate: 0.1,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), MockError> {
        if !(self.downsample_factor >= 1.0 && self.downsample_factor.is_finite()) {
            return Err(MockError::InvalidArgument(format!(
                "downsample_factor must be >= 1, got {}",
                self.downsample_factor
            )));
        }
        if !(self.base_sigma > 0.0 && self.base_sigma.is_finite()) {
            return Err(MockError::InvalidArgument(format!(
                "base_sigma must be positive, got {}",
                self.base_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.confusion_rate) {
            return Err(MockError::InvalidArgument(format!(
                "confusion_rate must lie in [0, 1), got {}",
                self.confusion_rate
            )));
        }
        Ok(())
    }

    /// Per-axis localisation noise in pixels of the submitted image, for an
    /// element of `element` extent seen in an image of `image` extent.
    pub fn sigma(&self, image: (f64, f64), element: (f64, f64)) -> (f64, f64) {
        let k = self.base_sigma * self.downsample_factor * SIZE_NORMALIZER;
        (
            k * image.0 / element.0.max(1.0),
            k * image.1 / element.1.max(1.0),
        )
    }
}

/// Inverse of the fabricated log-probability map.
pub fn sigma_from_mock_ppl(ppl: f64) -> f64 {
    CALIBRATION_BETA * ppl.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockVisionModel {
    pub noise: NoiseModel,
    pub grammar: CoordinateGrammar,
    pub verify_error_rate: f64,
    pub aggregate_error_rate: f64,
}

impl Default for MockVisionModel {
    fn default() -> Self {
        Self {
            noise: NoiseModel::default(),
            grammar: CoordinateGrammar::default(),
            verify_error_rate: 0.05,
            aggregate_error_rate: 0.05,
        }
    }
}

/// Axis-aligned pixel extent, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub count: u64,
}

impl Region {
    fn new(x0: u32, x1: u32, y: u32) -> Self {
        Self {
            x0,
            y0: y,
            x1,
            y1: y,
            count: (x1 - x0 + 1) as u64,
        }
    }

    fn add_run(&mut self, x0: u32, x1: u32, y: u32) {
        self.x0 = self.x0.min(x0);
        self.x1 = self.x1.max(x1);
        self.y0 = self.y0.min(y);
        self.y1 = self.y1.max(y);
        self.count += (x1 - x0 + 1) as u64;
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0 + 1) as f64
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0 + 1) as f64
    }

    pub fn center(&self) -> Point {
        Point::new(
            self.x0 as f64 + self.width() / 2.0,
            self.y0 as f64 + self.height() / 2.0,
        )
    }

    fn density(&self) -> f64 {
        self.count as f64 / (self.width() * self.height())
    }

    /// Whether `p` lies in the region grown by `margin` pixels.
    pub fn contains(&self, p: Point, margin: f64) -> bool {
        p.x >= self.x0 as f64 - margin
            && p.x <= (self.x1 + 1) as f64 + margin
            && p.y >= self.y0 as f64 - margin
            && p.y <= (self.y1 + 1) as f64 + margin
    }

    fn key(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// What the mock "sees": flat-colored regions keyed by color and the
/// centroid of any marker pixels.
#[derive(Debug, Clone)]
pub struct Perception {
    pub width: u32,
    pub height: u32,
    pub regions: BTreeMap<[u8; 3], Region>,
    pub marker: Option<Point>,
}

fn is_palette(c: [u8; 3]) -> bool {
    c.iter().all(|v| (48..=208).contains(v))
}

pub fn perceive(img: &RgbImage) -> Perception {
    let (w, h) = img.dimensions();
    let mut regions: HashMap<[u8; 3], Region> = HashMap::new();
    let (mut mx, mut my, mut mn) = (0.0f64, 0.0f64, 0u64);
    if w > 0 {
        for (y, row) in img.as_raw().chunks_exact(3 * w as usize).enumerate() {
            let y = y as u32;
            let px = |x: u32| {
                let i = 3 * x as usize;
                [row[i], row[i + 1], row[i + 2]]
            };
            let mut x = 0;
            while x < w {
                let c = px(x);
                let start = x;
                while x + 1 < w && px(x + 1) == c {
                    x += 1;
                }
                if c == PINK {
                    let n = (x - start + 1) as f64;
                    mx += n * (start + x + 1) as f64 / 2.0;
                    my += n * (y as f64 + 0.5);
                    mn += x as u64 - start as u64 + 1;
                } else if is_palette(c) {
                    regions
                        .entry(c)
                        .and_modify(|r| r.add_run(start, x, y))
                        .or_insert_with(|| Region::new(start, x, y));
                }
                x += 1;
            }
        }
    }
    Perception {
        width: w,
        height: h,
        regions: regions.into_iter().collect(),
        marker: (mn > 0).then(|| Point::new(mx / mn as f64, my / mn as f64)),
    }
}

impl Perception {
    /// The element with a known fill color, if any of it is visible.
    pub fn find(&self, color: [u8; 3]) -> Option<Region> {
        self.regions
            .get(&color)
            .filter(|r| r.count >= 4 && r.width() >= 2.0 && r.height() >= 2.0)
            .copied()
    }

    /// Other solid elements. Resampling fringes are thin and sparse, so they
    /// fail the density test.
    pub fn distractors(&self, target: [u8; 3]) -> Vec<Region> {
        self.regions
            .iter()
            .filter(|(c, r)| {
                **c != target
                    && r.width() >= 3.0
                    && r.height() >= 3.0
                    && r.count >= 9
                    && r.density() >= 0.3
            })
            .map(|(_, r)| *r)
            .collect()
    }
}

pub fn label_from_instruction(instruction: &str) -> Option<String> {
    static QUOTED: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r#""([^"]+)""#).expect("static regex"));
    QUOTED.captures(instruction).map(|c| c[1].to_string())
}

fn rng_for(tag: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&d);
    ChaCha8Rng::from_seed(seed)
}

fn region_bytes(r: &Region) -> Vec<u8> {
    r.key().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Split the answer into tokens the way a byte-level tokenizer might: one
/// token per digit (a single leading space merges into it) and one token per
/// run of other characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let numeric = |c: char| c.is_ascii_digit() || c == '.';
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if numeric(chars[i]) {
            out.push(chars[i].to_string());
            i += 1;
        } else if chars[i] == ' ' && chars.get(i + 1).is_some_and(|c| numeric(*c)) {
            out.push(format!(" {}", chars[i + 1]));
            i += 2;
        } else {
            let start = i;
            while i < chars.len()
                && !numeric(chars[i])
                && !(chars[i] == ' ' && chars.get(i + 1).is_some_and(|c| numeric(*c)))
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        }
    }
    out
}

impl MockVisionModel {
    pub fn with_noise(noise: NoiseModel) -> Self {
        Self {
            noise,
            ..Default::default()
        }
    }

    fn refusal(what: &str) -> Completion {
        let text = format!("I cannot locate {what} in this screenshot.");
        Completion {
            tokens: vec![TokenScore::new(text.clone(), -0.05)],
            text,
        }
    }

    fn answer(&self, p: Point, sigma_ppl: (f64, f64), w: u32, h: u32) -> Completion {
        let text = if self.grammar.normalized {
            self.grammar.format(p.x / w as f64, p.y / h as f64)
        } else {
            self.grammar.format(p.x, p.y)
        };
        let mut tokens: Vec<TokenScore> = tokenize(&text)
            .into_iter()
            .map(|t| TokenScore::new(t, FILLER_LOGPROB))
            .collect();
        let (_, spans) = parse_coordinate(&tokens, &self.grammar)
            .expect("the mock formats answers with its own grammar");
        for i in spans.x.clone() {
            tokens[i].logprob = -sigma_ppl.0 / CALIBRATION_BETA;
        }
        for i in spans.y.clone() {
            tokens[i].logprob = -sigma_ppl.1 / CALIBRATION_BETA;
        }
        Completion { text, tokens }
    }

    fn ground_view(&self, img: &RgbImage, instruction: &str, decoding: &Decoding) -> Completion {
        let Some(label) = label_from_instruction(instruction) else {
            return Self::refusal("the requested element");
        };
        let seen = perceive(img);
        let color = palette(&label);
        let Some(target) = seen.find(color) else {
            return Self::refusal(&format!("\"{label}\""));
        };
        let (w, h) = (seen.width, seen.height);
        let dims = [w.to_le_bytes(), h.to_le_bytes()].concat();
        let tkey = region_bytes(&target);
        let greedy = decoding.temperature <= 0.0;
        let mut decode_rng = if greedy {
            rng_for("greedy", &[label.as_bytes(), &dims, &tkey])
        } else {
            let seed = decoding.seed.unwrap_or(0).to_le_bytes();
            let temp = decoding.temperature.to_bits().to_le_bytes();
            rng_for("sample", &[label.as_bytes(), &dims, &tkey, &seed, &temp])
        };

        let distractors = seen.distractors(color);
        let confused =
            !distractors.is_empty() && decode_rng.random::<f64>() < self.noise.confusion_rate;
        let (aim, aim_color) = if confused {
            let r = distractors[decode_rng.random_range(0..distractors.len())];
            let c = *seen
                .regions
                .iter()
                .find(|(_, v)| **v == r)
                .map(|(c, _)| c)
                .expect("distractor comes from the map");
            (r, c)
        } else {
            (target, color)
        };

        let sigma = self
            .noise
            .sigma((w as f64, h as f64), (aim.width(), aim.height()));
        // The greedy answer is off by a fixed amount for a given view; samples
        // scatter around it.
        let mut bias_rng = rng_for("bias", &[&aim_color, &dims, &region_bytes(&aim)]);
        let c = aim.center();
        let mut p = Point::new(
            c.x + sigma.0 * normal(&mut bias_rng),
            c.y + sigma.1 * normal(&mut bias_rng),
        );
        if !greedy {
            p.x += decoding.temperature * sigma.0 * normal(&mut decode_rng);
            p.y += decoding.temperature * sigma.1 * normal(&mut decode_rng);
        }
        p.x = p.x.clamp(0.0, (w - 1) as f64);
        p.y = p.y.clamp(0.0, (h - 1) as f64);
        let inflate = if confused { CONFUSION_PPL_FACTOR } else { 1.0 };
        self.answer(p, (sigma.0 * inflate, sigma.1 * inflate), w, h)
    }

    fn judge(&self, img: &RgbImage, instruction: &str) -> bool {
        let Some(label) = label_from_instruction(instruction) else {
            return false;
        };
        let seen = perceive(img);
        let (Some(marker), Some(target)) = (seen.marker, seen.find(palette(&label))) else {
            return false;
        };
        let truth = target.contains(marker, 1.0);
        let mut rng = rng_for(
            "verify",
            &[
                label.as_bytes(),
                &marker.x.to_bits().to_le_bytes(),
                &marker.y.to_bits().to_le_bytes(),
                &region_bytes(&target),
            ],
        );
        if rng.random::<f64>() < self.verify_error_rate {
            !truth
        } else {
            truth
        }
    }

    fn choose(&self, images: &[Arc<RgbImage>], instruction: &str) -> usize {
        let label = label_from_instruction(instruction).unwrap_or_default();
        let color = palette(&label);
        let seen: Vec<Perception> = images.iter().map(|i| perceive(i)).collect();
        let target = seen.iter().find_map(|s| s.find(color));
        let mut key: Vec<u8> = label.as_bytes().to_vec();
        for s in &seen {
            let m = s.marker.unwrap_or(Point::new(-1.0, -1.0));
            key.extend(m.x.to_bits().to_le_bytes());
            key.extend(m.y.to_bits().to_le_bytes());
        }
        let mut rng = rng_for("aggregate", &[&key]);
        let Some(t) = target else { return 0 };
        let c = t.center();
        let score = |s: &Perception| match s.marker {
            Some(m) => {
                ((m.x - c.x).abs() / (t.width() / 2.0)).max((m.y - c.y).abs() / (t.height() / 2.0))
            }
            None => f64::INFINITY,
        };
        let best = seen
            .iter()
            .enumerate()
            .min_by(|a, b| score(a.1).total_cmp(&score(b.1)).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if seen.len() > 1 && rng.random::<f64>() < self.aggregate_error_rate {
            let other = rng.random_range(0..seen.len() - 1);
            if other >= best {
                other + 1
            } else {
                other
            }
        } else {
            best
        }
    }
}

impl VisionModel for MockVisionModel {
    fn complete(&self, prompt: &VisionPrompt) -> Result<Completion, BackendError> {
        let Some(first) = prompt.images.first() else {
            return Err(BackendError::InvalidRequest(
                "the mock needs at least one image".into(),
            ));
        };
        let instruction = extract_instruction(&prompt.text).unwrap_or("");
        let mut c = match classify(&prompt.text) {
            PromptTask::Grounding => self.ground_view(first, instruction, &prompt.decoding),
            PromptTask::Verification => {
                let text = if self.judge(first, instruction) {
                    "Yes, the marked point is correct."
                } else {
                    "No, the marked point is incorrect."
                };
                Completion {
                    text: text.into(),
                    tokens: vec![TokenScore::new(text, -0.01)],
                }
            }
            PromptTask::Aggregation => {
                let text = format!("Image {}", self.choose(&prompt.images, instruction) + 1);
                Completion {
                    tokens: vec![TokenScore::new(text.clone(), -0.01)],
                    text,
                }
            }
        };
        if !prompt.logprobs {
            c.tokens.clear();
        }
        Ok(c)
    }

    fn describe(&self) -> String {
        "mock oracle".into()
    }
}

/// Render `scene` and ground `instruction` on it with a fresh mock.
pub fn mock_ground(
    scene: &Scene,
    instruction: &str,
    noise: NoiseModel,
    temperature: f64,
    rng_seed: u64,
    grammar: &CoordinateGrammar,
) -> Result<GroundingResponse, BackendError> {
    let model = MockVisionModel {
        noise,
        grammar: grammar.clone(),
        ..Default::default()
    };
    ground(
        &model,
        &GroundingRequest {
            image: Arc::new(render_scene(scene)),
            instruction: instruction.to_string(),
            decoding: Decoding {
                temperature,
                top_p: 1.0,
                seed: Some(rng_seed),
            },
            grammar: grammar.clone(),
        },
        &RetryPolicy::default(),
    )
}
