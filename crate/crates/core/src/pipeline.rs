//! The refinement loop: greedy guess, self-check, sampling, focusing,
//! zoomed re-grounding and a final multi-image choice.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    aggregate, draw_marker, ground, verify, AggregationOutcome, BackendError, Counting, Decoding,
    GroundingRequest, MarkerStyle, RetryPolicy, VisionModel,
};
use crate::coord_parser::CoordinateGrammar;
use crate::field::{FieldMoments, GaussianKernel};
use crate::geometry::{
    make_crop_transform, remap_to_global, ImageSize, PixelRect, Point, ResizePolicy,
};
use crate::proposals::{plan_focus, ProposalConfig, ProposalError, ProposalKind, RegionProposal};
use crate::uncertainty::{CoordinateSample, SampleSource, UncertaintyConfig, UncertaintyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("initial grounding failed: {0}")]
    Initial(BackendError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
}

/// Which stages run after a failed self-check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single greedy pass, no self-check.
    Baseline,
    /// Keep the lowest-perplexity sample.
    MultiSampleOnly,
    /// Zoom into field-level proposals only.
    GlobalOnly,
    #[default]
    Full,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "multi_sample_only" | "multi-sample-only" => Ok(Self::MultiSampleOnly),
            "global_only" | "global-only" => Ok(Self::GlobalOnly),
            "full" => Ok(Self::Full),
            other => Err(format!(
                "unknown variant {other:?} (expected baseline, multi-sample-only, global-only or full)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub uncertainty: UncertaintyConfig,
    pub proposals: ProposalConfig,
    pub marker: MarkerStyle,
    pub crop_target: ResizePolicy,
    /// Maximum in-flight sampling or refinement calls per query.
    pub concurrency_limit: usize,
    pub refinement_enabled: bool,
    pub variant: Variant,
    pub grammar: CoordinateGrammar,
    /// Base seed of this query; samples and regions derive theirs from it.
    pub seed: u64,
    pub retry: RetryPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            uncertainty: UncertaintyConfig::default(),
            proposals: ProposalConfig::default(),
            marker: MarkerStyle::default(),
            crop_target: ResizePolicy::default(),
            concurrency_limit: 4,
            refinement_enabled: true,
            variant: Variant::Full,
            grammar: CoordinateGrammar::default(),
            seed: 0,
            retry: RetryPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.uncertainty.validate()?;
        self.proposals.validate()?;
        if self.concurrency_limit == 0 {
            return Err(PipelineError::Config(
                "concurrency_limit must be >= 1".into(),
            ));
        }
        if self.marker.radius < 4.0 {
            return Err(PipelineError::Config(format!(
                "marker radius must be >= 4, got {}",
                self.marker.radius
            )));
        }
        Ok(())
    }

    fn refines(&self) -> bool {
        self.refinement_enabled && self.variant != Variant::Baseline
    }
}

/// Predictor, verifier and aggregator may be different models.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub predictor: &'a dyn VisionModel,
    pub verifier: &'a dyn VisionModel,
    pub aggregator: &'a dyn VisionModel,
}

impl<'a> Backends<'a> {
    pub fn single(model: &'a dyn VisionModel) -> Self {
        Self {
            predictor: model,
            verifier: model,
            aggregator: model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Refinement disabled; the greedy answer is final.
    Baseline,
    /// The self-check accepted the greedy answer.
    Accepted,
    /// Lowest-perplexity sample chosen without zooming.
    BestSample,
    /// A zoomed candidate was chosen.
    Refined,
    /// Nothing better was available; see the flags.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum TraceFlag {
    VerifyFailed { error: String },
    SampleFailed { index: usize, error: String },
    NoSamples,
    RegionDropped { region: usize, error: String },
    RemapOutsideProposal { region: usize },
    AllRegionsFailed,
    AggregationUnparseable,
    AggregationFailed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedRegion {
    /// Index into the proposal list.
    pub region: usize,
    pub crop: PixelRect,
    pub resized: ImageSize,
    pub raw_text: String,
    /// Prediction in the resized crop frame.
    pub local: Point,
    /// Prediction mapped back to the original image.
    pub global: Point,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub predictor: usize,
    pub verifier: usize,
    pub aggregator: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.predictor + self.verifier + self.aggregator
    }
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, o: Self) {
        self.predictor += o.predictor;
        self.verifier += o.verifier;
        self.aggregator += o.aggregator;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub initial: Duration,
    pub verify: Duration,
    pub sampling: Duration,
    pub focus: Duration,
    pub refine: Duration,
    pub aggregate: Duration,
    pub total: Duration,
}

/// Everything a query did, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub instruction: String,
    pub image_size: ImageSize,
    pub seed: u64,
    pub initial: CoordinateSample,
    pub initial_text: String,
    /// Absent when refinement is disabled.
    pub verify_result: Option<bool>,
    pub samples: Vec<CoordinateSample>,
    pub kernels: Vec<GaussianKernel>,
    pub moments: Option<FieldMoments>,
    pub proposals: Vec<RegionProposal>,
    pub refined: Vec<RefinedRegion>,
    pub aggregation: Option<AggregationOutcome>,
    /// Index into `refined`.
    pub chosen: Option<usize>,
    #[serde(rename = "final")]
    pub final_point: Point,
    pub outcome: Outcome,
    pub flags: Vec<TraceFlag>,
    pub calls: CallCounts,
    /// Wall-clock is kept out of serialized traces so that they stay
    /// byte-identical between runs.
    #[serde(skip)]
    pub timings: Timings,
}

/// Run `f` over `items` with at most `limit` in flight; results keep input
/// order.
pub fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    limit: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    if limit <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..limit.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

fn grounding_request(
    image: Arc<RgbImage>,
    instruction: &str,
    decoding: Decoding,
    cfg: &PipelineConfig,
) -> GroundingRequest {
    GroundingRequest {
        image,
        instruction: instruction.to_string(),
        decoding,
        grammar: cfg.grammar.clone(),
    }
}

fn sample_of(
    resp: &crate::backend::GroundingResponse,
    cfg: &PipelineConfig,
    source: SampleSource,
) -> Result<CoordinateSample, UncertaintyError> {
    CoordinateSample::from_tokens(
        resp.point,
        &resp.tokens,
        &resp.spans,
        cfg.uncertainty.ppl_scope,
        source,
    )
}

fn lowest_ppl(samples: &[CoordinateSample]) -> Option<usize> {
    samples
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.ppl_total.total_cmp(&b.1.ppl_total).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Crop a proposal, resize it, ground greedily and map the answer back.
pub fn refine_region(
    image: &RgbImage,
    proposal: &RegionProposal,
    region: usize,
    instruction: &str,
    cfg: &PipelineConfig,
    predictor: &dyn VisionModel,
) -> Result<(RefinedRegion, bool), BackendError> {
    let size = ImageSize::of(image);
    let crop = proposal.bbox.rasterize(size);
    if crop.width == 0 || crop.height == 0 {
        return Err(BackendError::InvalidRequest(format!(
            "region {region} is empty after rasterization"
        )));
    }
    let view = imageops::crop_imm(image, crop.x, crop.y, crop.width, crop.height).to_image();
    let target = cfg.crop_target.target_for(crop.width, crop.height);
    let view = if (target.width, target.height) == (crop.width, crop.height) {
        view
    } else {
        imageops::resize(&view, target.width, target.height, FilterType::Triangle)
    };
    let transform = make_crop_transform(crop.to_box(), target)
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    let decoding = Decoding::greedy(Some(cfg.seed.wrapping_add(1000 + region as u64)));
    let resp = ground(
        predictor,
        &grounding_request(Arc::new(view), instruction, decoding, cfg),
        &cfg.retry,
    )?;
    let mut global = remap_to_global(resp.point, &transform);
    let b = crop.to_box();
    let outside = !b.contains(&global);
    if outside {
        global = Point::new(
            global.x.clamp(b.x_min, b.x_max),
            global.y.clamp(b.y_min, b.y_max),
        );
    }
    Ok((
        RefinedRegion {
            region,
            crop,
            resized: target,
            raw_text: resp.raw_text,
            local: resp.point,
            global,
        },
        outside,
    ))
}

/// Answer one grounding query.
pub fn run(
    image: Arc<RgbImage>,
    instruction: &str,
    cfg: &PipelineConfig,
    backends: Backends<'_>,
) -> Result<(Point, Trace), PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let predictor = Counting::new(backends.predictor);
    let verifier = Counting::new(backends.verifier);
    let aggregator = Counting::new(backends.aggregator);
    let size = ImageSize::of(&image);
    let mut timings = Timings::default();

    let t = Instant::now();
    let first = ground(
        &predictor,
        &grounding_request(
            image.clone(),
            instruction,
            Decoding::greedy(Some(cfg.seed)),
            cfg,
        ),
        &cfg.retry,
    )
    .map_err(PipelineError::Initial)?;
    let initial = sample_of(&first, cfg, SampleSource::Initial)?;
    timings.initial = t.elapsed();

    let mut trace = Trace {
        instruction: instruction.to_string(),
        image_size: size,
        seed: cfg.seed,
        initial,
        initial_text: first.raw_text.clone(),
        verify_result: None,
        samples: Vec::new(),
        kernels: Vec::new(),
        moments: None,
        proposals: Vec::new(),
        refined: Vec::new(),
        aggregation: None,
        chosen: None,
        final_point: initial.point,
        outcome: Outcome::Baseline,
        flags: Vec::new(),
        calls: CallCounts::default(),
        timings,
    };
    let finish = |mut trace: Trace, timings: Timings| {
        trace.calls = CallCounts {
            predictor: predictor.calls(),
            verifier: verifier.calls(),
            aggregator: aggregator.calls(),
        };
        trace.timings = Timings {
            total: started.elapsed(),
            ..timings
        };
        Ok((trace.final_point, trace))
    };

    if !cfg.refines() {
        return finish(trace, timings);
    }

    let t = Instant::now();
    let ok = match verify(
        &verifier,
        &image,
        initial.point,
        instruction,
        &cfg.marker,
        &cfg.retry,
    ) {
        Ok(v) => v,
        Err(e) => {
            trace.flags.push(TraceFlag::VerifyFailed {
                error: e.to_string(),
            });
            false
        }
    };
    timings.verify = t.elapsed();
    trace.verify_result = Some(ok);
    if ok {
        trace.outcome = Outcome::Accepted;
        return finish(trace, timings);
    }

    let t = Instant::now();
    let seeds: Vec<u64> = (1..=cfg.uncertainty.n_samples as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let sampled = bounded_map(&seeds, cfg.concurrency_limit, |_, &seed| {
        let decoding = Decoding {
            temperature: cfg.uncertainty.temperature,
            top_p: cfg.uncertainty.top_p,
            seed: Some(seed),
        };
        ground(
            &predictor,
            &grounding_request(image.clone(), instruction, decoding, cfg),
            &cfg.retry,
        )
        .map_err(|e| e.to_string())
        .and_then(|r| sample_of(&r, cfg, SampleSource::Sampled).map_err(|e| e.to_string()))
    });
    for (index, r) in sampled.into_iter().enumerate() {
        match r {
            Ok(s) => trace.samples.push(s),
            Err(error) => trace.flags.push(TraceFlag::SampleFailed { index, error }),
        }
    }
    timings.sampling = t.elapsed();
    if trace.samples.is_empty() {
        trace.flags.push(TraceFlag::NoSamples);
        trace.outcome = Outcome::Fallback;
        return finish(trace, timings);
    }
    let best_sample = lowest_ppl(&trace.samples).expect("samples are non-empty");

    if cfg.variant == Variant::MultiSampleOnly {
        trace.final_point = trace.samples[best_sample].point;
        trace.outcome = Outcome::BestSample;
        return finish(trace, timings);
    }

    let t = Instant::now();
    let mut pcfg = cfg.proposals.clone();
    if cfg.variant == Variant::GlobalOnly {
        pcfg.k_local = 0;
    }
    let plan = plan_focus(&trace.samples, &cfg.uncertainty, &pcfg, size)?;
    trace.kernels = plan.kernels;
    trace.moments = Some(plan.moments);
    trace.proposals = plan.proposals;
    timings.focus = t.elapsed();

    let t = Instant::now();
    let refined = bounded_map(&trace.proposals, cfg.concurrency_limit, |j, p| {
        refine_region(&image, p, j, instruction, cfg, &predictor)
    });
    for (j, r) in refined.into_iter().enumerate() {
        match r {
            Ok((region, outside)) => {
                if outside {
                    trace
                        .flags
                        .push(TraceFlag::RemapOutsideProposal { region: j });
                }
                trace.refined.push(region);
            }
            Err(e) => trace.flags.push(TraceFlag::RegionDropped {
                region: j,
                error: e.to_string(),
            }),
        }
    }
    timings.refine = t.elapsed();
    if trace.refined.is_empty() {
        trace.flags.push(TraceFlag::AllRegionsFailed);
        trace.final_point = trace.samples[best_sample].point;
        trace.outcome = Outcome::Fallback;
        return finish(trace, timings);
    }

    let t = Instant::now();
    let marked: Vec<Arc<RgbImage>> = trace
        .refined
        .iter()
        .map(|r| Arc::new(draw_marker(&image, r.global, &cfg.marker)))
        .collect();
    let chosen = match aggregate(&aggregator, marked, instruction, &cfg.retry) {
        Ok(outcome) => {
            trace.aggregation = Some(outcome);
            match outcome {
                AggregationOutcome::Forced(j) | AggregationOutcome::Chosen(j) => j,
                AggregationOutcome::Unparseable => {
                    trace.flags.push(TraceFlag::AggregationUnparseable);
                    fallback_choice(&trace)
                }
            }
        }
        Err(e) => {
            trace.flags.push(TraceFlag::AggregationFailed {
                error: e.to_string(),
            });
            fallback_choice(&trace)
        }
    };
    timings.aggregate = t.elapsed();
    trace.chosen = Some(chosen);
    trace.final_point = trace.refined[chosen].global;
    trace.outcome = Outcome::Refined;
    finish(trace, timings)
}

/// Candidate from the lowest-perplexity local proposal, else the first
/// global one, else the first candidate.
fn fallback_choice(trace: &Trace) -> usize {
    let local = trace
        .refined
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let p = &trace.proposals[r.region];
            match (p.kind, p.source_sample) {
                (ProposalKind::Local, Some(s)) => Some((i, trace.samples[s].ppl_total)),
                _ => None,
            }
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    local
        .or_else(|| {
            trace
                .refined
                .iter()
                .position(|r| trace.proposals[r.region].kind == ProposalKind::Global)
        })
        .unwrap_or(0)
}
