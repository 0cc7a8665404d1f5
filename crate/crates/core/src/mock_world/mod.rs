//! Synthetic GUI scenes and an oracle backend whose errors shrink when it is
//! shown a zoomed-in view.

mod model;
mod render;
mod scene;
mod server;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    label_from_instruction, mock_ground, perceive, sigma_from_mock_ppl, tokenize, MockVisionModel,
    NoiseModel, Perception, Region, CALIBRATION_BETA, CONFUSION_PPL_FACTOR, FILLER_LOGPROB,
};
pub use render::{render_scene, BACKGROUND, INK};
pub use scene::{generate_scene, palette, Element, ElementKind, Scene, SceneSpec};
pub use server::{MockServer, ServerOptions};

use crate::geometry::ImageSize;
use crate::harness::{CaseTags, EvalCase, ImageSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MockError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Parameters of a seeded benchmark of one-target scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_scenes: usize,
    pub seed: u64,
    pub scene: SceneSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            seed: 2024,
            scene: SceneSpec {
                n_elements: 12,
                min_side: 16.0,
                max_side: 40.0,
                size: ImageSize {
                    width: 1920,
                    height: 1080,
                },
            },
        }
    }
}

/// One scene plus the element the case asks for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub scene: Scene,
    pub target: usize,
}

impl BenchmarkItem {
    pub fn target(&self) -> &Element {
        &self.scene.elements[self.target]
    }

    pub fn to_case(&self, image: ImageSource) -> EvalCase {
        let t = self.target();
        EvalCase {
            image,
            instruction: t.instruction(),
            gt_bbox: t.bbox,
            tags: CaseTags {
                platform: "mock".into(),
                target_kind: t.kind.target_kind().into(),
            },
        }
    }
}

pub fn benchmark_items(spec: &BenchmarkSpec) -> Result<Vec<BenchmarkItem>, MockError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_scenes)
        .map(|_| {
            let scene = generate_scene(rng.random(), &spec.scene)?;
            let target = rng.random_range(0..scene.elements.len());
            Ok(BenchmarkItem { scene, target })
        })
        .collect()
}

/// Benchmark cases with the rendered screenshots held in memory.
pub fn benchmark_cases(spec: &BenchmarkSpec) -> Result<Vec<EvalCase>, MockError> {
    Ok(benchmark_items(spec)?
        .iter()
        .map(|item| item.to_case(ImageSource::Memory(Arc::new(render_scene(&item.scene)))))
        .collect())
}
