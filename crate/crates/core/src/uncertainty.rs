//! Perplexity to kernel conversion: per-axis spread and softmax weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coord_parser::{
    axial_perplexity, total_perplexity, AxialSpans, PerplexityError, PerplexityScope, TokenScore,
};
use crate::field::GaussianKernel;
use crate::geometry::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Perplexity(#[from] PerplexityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Initial,
    Sampled,
}

/// One coordinate hypothesis with its perplexities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSample {
    pub point: Point,
    pub ppl_x: f64,
    pub ppl_y: f64,
    pub ppl_total: f64,
    pub source: SampleSource,
}

impl CoordinateSample {
    pub fn from_tokens(
        point: Point,
        tokens: &[TokenScore],
        spans: &AxialSpans,
        scope: PerplexityScope,
        source: SampleSource,
    ) -> Result<Self, UncertaintyError> {
        Ok(Self {
            point,
            ppl_x: axial_perplexity(tokens, spans.x.clone())?,
            ppl_y: axial_perplexity(tokens, spans.y.clone())?,
            ppl_total: total_perplexity(tokens, spans, scope)?,
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    /// Pixels of spread per unit of perplexity.
    pub beta: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    #[serde(default)]
    pub ppl_scope: PerplexityScope,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            beta: 50.0,
            temperature: 0.75,
            top_p: 1.0,
            n_samples: 5,
            ppl_scope: PerplexityScope::Coordinate,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(UncertaintyError::InvalidArgument(format!(
                "beta {}",
                self.beta
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(UncertaintyError::InvalidArgument(format!(
                "temperature {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(UncertaintyError::InvalidArgument(format!(
                "top_p {}",
                self.top_p
            )));
        }
        if self.n_samples == 0 {
            return Err(UncertaintyError::InvalidArgument(
                "n_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `σ = β · ppl`.
pub fn sigma_from_ppl(ppl: f64, beta: f64) -> Result<f64, UncertaintyError> {
    if !(ppl >= 1.0 && ppl.is_finite()) {
        return Err(UncertaintyError::InvalidArgument(format!(
            "perplexity must be finite and >= 1, got {ppl}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(UncertaintyError::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    Ok(beta * ppl)
}

/// Softmax of `-ppl`. Infinite perplexities get weight zero.
pub fn sample_weights(ppl_totals: &[f64]) -> Result<Vec<f64>, UncertaintyError> {
    if ppl_totals.is_empty() {
        return Err(UncertaintyError::InvalidArgument("no samples".into()));
    }
    if let Some(bad) = ppl_totals.iter().find(|p| p.is_nan() || **p < 1.0) {
        return Err(UncertaintyError::InvalidArgument(format!(
            "perplexity must be >= 1, got {bad}"
        )));
    }
    let min = ppl_totals.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(UncertaintyError::InvalidArgument(
            "every perplexity is infinite".into(),
        ));
    }
    let exps: Vec<f64> = ppl_totals.iter().map(|p| (min - p).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn build_kernels(
    samples: &[CoordinateSample],
    cfg: &UncertaintyConfig,
) -> Result<Vec<GaussianKernel>, UncertaintyError> {
    let ppls: Vec<f64> = samples.iter().map(|s| s.ppl_total).collect();
    let weights = sample_weights(&ppls)?;
    samples
        .iter()
        .zip(weights)
        .map(|(s, weight)| {
            Ok(GaussianKernel {
                mu: s.point,
                sigma_x: sigma_from_ppl(s.ppl_x, cfg.beta)?,
                sigma_y: sigma_from_ppl(s.ppl_y, cfg.beta)?,
                weight,
            })
        })
        .collect()
}
