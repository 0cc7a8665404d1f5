use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::MockError;
use crate::geometry::{BBox, ImageSize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Button,
    Icon,
    TextField,
}

impl ElementKind {
    pub const ALL: [ElementKind; 3] = [
        ElementKind::Button,
        ElementKind::Icon,
        ElementKind::TextField,
    ];

    /// Width over height.
    pub fn aspect(self) -> f64 {
        match self {
            ElementKind::Button => 2.5,
            ElementKind::Icon => 1.0,
            ElementKind::TextField => 6.0,
        }
    }

    pub fn noun(self) -> &'static str {
        match self {
            ElementKind::Button => "button",
            ElementKind::Icon => "icon",
            ElementKind::TextField => "text field",
        }
    }

    /// Coarse benchmark split: text-bearing widgets versus icons.
    pub fn target_kind(self) -> &'static str {
        match self {
            ElementKind::Icon => "icon",
            _ => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub id: usize,
    pub bbox: BBox,
    pub label: String,
    pub kind: ElementKind,
    pub color: [u8; 3],
}

impl Element {
    pub fn instruction(&self) -> String {
        format!("Click the {} labeled \"{}\"", self.kind.noun(), self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: ImageSize,
    pub elements: Vec<Element>,
    pub seed: u64,
}

impl Scene {
    pub fn element_by_label(&self, label: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_elements: usize,
    /// Bounds on the element height in pixels.
    pub min_side: f64,
    pub max_side: f64,
    pub size: ImageSize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_elements: 12,
            min_side: 16.0,
            max_side: 40.0,
            size: ImageSize {
                width: 1920,
                height: 1080,
            },
        }
    }
}

const WORDS: &[&str] = &[
    "SAVE", "OPEN", "CLOSE", "EXPORT", "IMPORT", "PRINT", "SHARE", "DELETE", "RENAME", "SEARCH",
    "FILTER", "SORT", "UNDO", "REDO", "ZOOM", "CROP", "LAYER", "BRUSH", "ERASE", "FILL", "TEXT",
    "GRID", "ALIGN", "GROUP", "LOCK", "HIDE", "SHOW", "PLAY", "PAUSE", "STOP", "RECORD", "MUTE",
    "SYNC", "UPLOAD", "BUILD", "DEBUG", "RUN", "TEST", "MERGE", "PUSH", "PULL", "CLONE", "HELP",
    "MENU", "TOOLS", "VIEW", "EDIT", "FILE", "INSERT", "FORMAT", "TABLE", "CHART", "MACRO",
];

/// Fill color of an element, derived from its label so that any backend that
/// sees the rendered pixels can recover which label an element carries.
pub fn palette(label: &str) -> [u8; 3] {
    let d = Sha256::digest(label.as_bytes());
    [48 + d[0] % 161, 48 + d[1] % 161, 48 + d[2] % 161]
}

fn colors_clash(a: [u8; 3], b: [u8; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) < 6)
}

const GAP: f64 = 6.0;
const ATTEMPTS_PER_ELEMENT: usize = 400;

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene, MockError> {
    if spec.n_elements == 0 {
        return Err(MockError::InvalidArgument(
            "a scene needs at least one element".into(),
        ));
    }
    if !(spec.min_side >= 4.0 && spec.max_side >= spec.min_side) {
        return Err(MockError::InvalidArgument(format!(
            "need 4 <= min_side <= max_side, got {}..{}",
            spec.min_side, spec.max_side
        )));
    }
    let (iw, ih) = (spec.size.width as f64, spec.size.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut elements: Vec<Element> = Vec::with_capacity(spec.n_elements);
    let mut labels = BTreeSet::new();

    for id in 0..spec.n_elements {
        let kind = ElementKind::ALL[rng.random_range(0..ElementKind::ALL.len())];
        let mut placed = None;
        for _ in 0..ATTEMPTS_PER_ELEMENT {
            let h = rng.random_range(spec.min_side..=spec.max_side).round();
            let w = (h * kind.aspect()).round().min(iw - 2.0 * GAP);
            if w + 2.0 * GAP > iw || h + 2.0 * GAP > ih {
                continue;
            }
            let x = rng.random_range(GAP..=iw - GAP - w).round();
            let y = rng.random_range(GAP..=ih - GAP - h).round();
            let b = BBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
            };
            let clear = elements.iter().all(|e| {
                b.x_max + GAP <= e.bbox.x_min
                    || e.bbox.x_max + GAP <= b.x_min
                    || b.y_max + GAP <= e.bbox.y_min
                    || e.bbox.y_max + GAP <= b.y_min
            });
            if clear {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            MockError::InvalidArgument(format!(
                "could not place element {id} of {} without overlap; the scene is too crowded",
                spec.n_elements
            ))
        })?;
        let (label, color) = loop {
            let word = WORDS.choose(&mut rng).expect("word list is not empty");
            let label = format!("{word} {}", rng.random_range(1..100));
            let color = palette(&label);
            if !labels.contains(&label) && !elements.iter().any(|e| colors_clash(e.color, color)) {
                break (label, color);
            }
        };
        labels.insert(label.clone());
        elements.push(Element {
            id,
            bbox,
            label,
            kind,
            color,
        });
    }
    Ok(Scene {
        size: spec.size,
        elements,
        seed,
    })
}
