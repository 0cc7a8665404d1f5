use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{check_case_image, score_case, EvalCase};
use super::HarnessError;
use crate::geometry::Point;
use crate::pipeline::{run, Backends, CallCounts, Outcome, PipelineConfig, Trace};

/// Stride between per-case seeds.
pub const CASE_SEED_STRIDE: u64 = 1_000_003;

pub fn case_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(CASE_SEED_STRIDE))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub n: usize,
    pub correct: usize,
    /// Absent when `n` is zero.
    pub accuracy: Option<f64>,
}

impl SplitStats {
    fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += correct as usize;
        self.accuracy = Some(self.correct as f64 / self.n as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub index: usize,
    pub instruction: String,
    pub platform: String,
    pub target_kind: String,
    #[serde(rename = "final")]
    pub final_point: Option<Point>,
    pub correct: bool,
    pub outcome: Option<Outcome>,
    pub verify_result: Option<bool>,
    pub n_samples: usize,
    pub n_proposals: usize,
    pub n_flags: usize,
    pub calls: CallCounts,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub correct: usize,
    /// Absent for an empty dataset.
    pub accuracy: Option<f64>,
    pub per_platform: BTreeMap<String, SplitStats>,
    pub per_target_kind: BTreeMap<String, SplitStats>,
    pub outcomes: BTreeMap<String, usize>,
    pub calls: CallCounts,
    pub config: PipelineConfig,
    pub cases: Vec<CaseRecord>,
}

impl EvalReport {
    /// Recompute every aggregate from the per-case records.
    pub fn from_cases(config: PipelineConfig, cases: Vec<CaseRecord>) -> Self {
        let mut per_platform: BTreeMap<String, SplitStats> = BTreeMap::new();
        let mut per_target_kind: BTreeMap<String, SplitStats> = BTreeMap::new();
        let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
        let mut calls = CallCounts::default();
        let mut total = SplitStats::default();
        for c in &cases {
            total.add(c.correct);
            per_platform
                .entry(c.platform.clone())
                .or_default()
                .add(c.correct);
            per_target_kind
                .entry(c.target_kind.clone())
                .or_default()
                .add(c.correct);
            let key = match c.outcome {
                Some(o) => serde_json::to_value(o)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                None => "error".into(),
            };
            *outcomes.entry(key).or_default() += 1;
            calls += c.calls;
        }
        Self {
            n_cases: total.n,
            correct: total.correct,
            accuracy: total.accuracy,
            per_platform,
            per_target_kind,
            outcomes,
            calls,
            config,
            cases,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    /// Per-case traces; `None` where the case failed before a trace existed.
    pub traces: Vec<Option<Trace>>,
    pub wall_clock: Duration,
}

fn run_case(
    i: usize,
    case: &EvalCase,
    cfg: &PipelineConfig,
    backends: Backends<'_>,
) -> (CaseRecord, Option<Trace>) {
    let mut record = CaseRecord {
        index: i,
        instruction: case.instruction.clone(),
        platform: case.tags.platform.clone(),
        target_kind: case.tags.target_kind.clone(),
        final_point: None,
        correct: false,
        outcome: None,
        verify_result: None,
        n_samples: 0,
        n_proposals: 0,
        n_flags: 0,
        calls: CallCounts::default(),
        error: None,
    };
    let result = case.image.load().and_then(|img| {
        check_case_image(case, crate::geometry::ImageSize::of(&img))?;
        let cfg = PipelineConfig {
            seed: case_seed(cfg.seed, i),
            ..cfg.clone()
        };
        run(img, &case.instruction, &cfg, backends).map_err(HarnessError::from)
    });
    match result {
        Ok((p, trace)) => {
            record.final_point = Some(p);
            record.correct = score_case(p, case);
            record.outcome = Some(trace.outcome);
            record.verify_result = trace.verify_result;
            record.n_samples = trace.samples.len();
            record.n_proposals = trace.proposals.len();
            record.n_flags = trace.flags.len();
            record.calls = trace.calls;
            (record, Some(trace))
        }
        Err(e) => {
            record.error = Some(e.to_string());
            (record, None)
        }
    }
}

/// Run the pipeline on every case with up to `concurrency` cases in flight.
/// Each case derives its seed from `cfg.seed` and its index, so results do
/// not depend on scheduling.
pub fn evaluate(
    cases: &[EvalCase],
    cfg: &PipelineConfig,
    backends: Backends<'_>,
    concurrency: usize,
) -> Result<EvalOutcome, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let results: Vec<(CaseRecord, Option<Trace>)> = pool.install(|| {
        cases
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_case(i, c, cfg, backends))
            .collect()
    });
    let (records, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(EvalOutcome {
        report: EvalReport::from_cases(cfg.clone(), records),
        traces,
        wall_clock: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, Completion, VisionModel, VisionPrompt};

    struct Never;

    impl VisionModel for Never {
        fn complete(&self, _: &VisionPrompt) -> Result<Completion, BackendError> {
            unreachable!("no cases")
        }
    }

    #[test]
    fn empty_dataset() {
        let out = evaluate(&[], &PipelineConfig::default(), Backends::single(&Never), 2).unwrap();
        assert_eq!(out.report.n_cases, 0);
        assert_eq!(out.report.accuracy, None);
        let json: serde_json::Value = serde_json::from_str(&out.report.to_json()).unwrap();
        assert!(json["accuracy"].is_null());
    }

    #[test]
    fn seeds_are_spread() {
        assert_eq!(case_seed(7, 0), 7);
        assert_eq!(case_seed(7, 2), 7 + 2 * CASE_SEED_STRIDE);
    }
}
