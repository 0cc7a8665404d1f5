//! Region proposals: per-sample 3σ boxes pruned by NMS, and field-level
//! boxes sized from the moment-matched spread.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{mixture_moments, FieldError, FieldMoments, GaussianKernel};
use crate::geometry::{
    boundary_adjust, enforce_min_size, global_box, local_box, shape_aware_zoom, BBox,
    GeometryError, ImageSize,
};
use crate::uncertainty::{
    build_kernels, sample_weights, sigma_from_ppl, CoordinateSample, UncertaintyConfig,
    UncertaintyError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    /// Finalised box, inside the image.
    pub bbox: BBox,
    /// Box before shape-aware zoom, minimum size and containment.
    pub raw: BBox,
    pub kind: ProposalKind,
    pub score: f64,
    pub source_sample: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub k_local: usize,
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub iou_threshold: f64,
    pub min_crop: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k_local: 3,
            alphas: vec![5.0, 8.0],
            lambda: 0.5,
            iou_threshold: 0.5,
            min_crop: 336.0,
        }
    }
}

impl ProposalConfig {
    pub fn k_global(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self) -> Result<(), ProposalError> {
        if self.alphas.iter().any(|a| a.is_nan() || *a <= 0.0) {
            return Err(ProposalError::InvalidArgument(format!(
                "alphas must be positive: {:?}",
                self.alphas
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ProposalError::InvalidArgument(format!(
                "lambda {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(ProposalError::InvalidArgument(format!(
                "iou_threshold {}",
                self.iou_threshold
            )));
        }
        if self.min_crop.is_nan() || self.min_crop < 1.0 {
            return Err(ProposalError::InvalidArgument(format!(
                "min_crop {}",
                self.min_crop
            )));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score, lower index first on ties; a candidate is dropped when its IoU with
/// an already selected box exceeds `iou_threshold`. Returns at most `keep`
/// indices in selection order.
pub fn nms(
    boxes: &[BBox],
    scores: &[f64],
    iou_threshold: f64,
    keep: usize,
) -> Result<Vec<usize>, ProposalError> {
    if boxes.len() != scores.len() {
        return Err(ProposalError::InvalidArgument(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut selected: Vec<usize> = Vec::new();
    for i in order {
        if selected.len() >= keep {
            break;
        }
        if selected
            .iter()
            .all(|&s| boxes[s].iou(&boxes[i]) <= iou_threshold)
        {
            selected.push(i);
        }
    }
    Ok(selected)
}

/// Shape-aware zoom, then minimum size, then containment.
pub fn finalize(b: BBox, cfg: &ProposalConfig, image: ImageSize) -> Result<BBox, ProposalError> {
    let zoomed = shape_aware_zoom(b, cfg.lambda)?;
    let sized = enforce_min_size(zoomed, cfg.min_crop, image);
    Ok(boundary_adjust(sized, image))
}

pub fn local_proposals(
    samples: &[CoordinateSample],
    ucfg: &UncertaintyConfig,
    pcfg: &ProposalConfig,
    image: ImageSize,
) -> Result<Vec<RegionProposal>, ProposalError> {
    if samples.is_empty() {
        return Err(ProposalError::InvalidArgument("no samples".into()));
    }
    let boxes = samples
        .iter()
        .map(|s| {
            local_box(
                s.point,
                sigma_from_ppl(s.ppl_x, ucfg.beta)?,
                sigma_from_ppl(s.ppl_y, ucfg.beta)?,
            )
            .map_err(ProposalError::from)
        })
        .collect::<Result<Vec<_>, ProposalError>>()?;
    let scores: Vec<f64> = samples.iter().map(|s| -s.ppl_total).collect();
    let kept = nms(&boxes, &scores, pcfg.iou_threshold, pcfg.k_local)?;
    kept.into_iter()
        .map(|i| {
            Ok(RegionProposal {
                bbox: finalize(boxes[i], pcfg, image)?,
                raw: boxes[i],
                kind: ProposalKind::Local,
                score: scores[i],
                source_sample: Some(i),
                alpha: None,
            })
        })
        .collect()
}

/// Field-level proposals, one per scale factor, all centred on the field mean.
pub fn global_proposals_from_moments(
    moments: &FieldMoments,
    score: f64,
    pcfg: &ProposalConfig,
    image: ImageSize,
) -> Result<Vec<RegionProposal>, ProposalError> {
    pcfg.alphas
        .iter()
        .map(|&alpha| {
            let raw = global_box(moments.mean, moments.sigma_x(), moments.sigma_y(), alpha)?;
            Ok(RegionProposal {
                bbox: finalize(raw, pcfg, image)?,
                raw,
                kind: ProposalKind::Global,
                score,
                source_sample: None,
                alpha: Some(alpha),
            })
        })
        .collect()
}

pub fn global_proposals(
    samples: &[CoordinateSample],
    ucfg: &UncertaintyConfig,
    pcfg: &ProposalConfig,
    image: ImageSize,
) -> Result<Vec<RegionProposal>, ProposalError> {
    let kernels = build_kernels(samples, ucfg)?;
    let moments = mixture_moments(&kernels)?;
    global_proposals_from_moments(&moments, global_score(samples)?, pcfg, image)
}

/// Negated weight-averaged perplexity of the sample set.
pub fn global_score(samples: &[CoordinateSample]) -> Result<f64, ProposalError> {
    let ppls: Vec<f64> = samples.iter().map(|s| s.ppl_total).collect();
    let w = sample_weights(&ppls)?;
    Ok(-ppls.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>())
}

/// Everything the focusing stage derives from one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusPlan {
    pub kernels: Vec<GaussianKernel>,
    pub moments: FieldMoments,
    /// Globals in scale order, then locals in NMS selection order.
    pub proposals: Vec<RegionProposal>,
}

pub fn plan_focus(
    samples: &[CoordinateSample],
    ucfg: &UncertaintyConfig,
    pcfg: &ProposalConfig,
    image: ImageSize,
) -> Result<FocusPlan, ProposalError> {
    let kernels = build_kernels(samples, ucfg)?;
    let moments = mixture_moments(&kernels)?;
    let mut proposals =
        global_proposals_from_moments(&moments, global_score(samples)?, pcfg, image)?;
    proposals.extend(local_proposals(samples, ucfg, pcfg, image)?);
    Ok(FocusPlan {
        kernels,
        moments,
        proposals,
    })
}
