//! Flat configuration files (TOML or JSON) layered over the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coord_parser::{CoordinateGrammar, GrammarStyle};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub coordinate_grammar: Option<String>,
    pub normalized_coordinates: Option<bool>,
    pub beta: Option<f64>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub n_samples: Option<usize>,
    pub k_local: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub min_crop: Option<f64>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("config {path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |message: String| ConfigError {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| err(e.to_string())),
            _ => toml::from_str(&text).map_err(|e| err(e.to_string())),
        }
    }

    /// Overwrite every field that is set in the file.
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), String> {
        if let Some(g) = &self.coordinate_grammar {
            let style: GrammarStyle = g.parse()?;
            cfg.grammar = CoordinateGrammar {
                style,
                ..cfg.grammar.clone()
            };
        }
        if let Some(n) = self.normalized_coordinates {
            cfg.grammar.normalized = n;
        }
        let u = &mut cfg.uncertainty;
        set(&mut u.beta, self.beta);
        set(&mut u.temperature, self.temperature);
        set(&mut u.top_p, self.top_p);
        set(&mut u.n_samples, self.n_samples);
        let p = &mut cfg.proposals;
        set(&mut p.k_local, self.k_local);
        set(&mut p.alphas, self.alphas.clone());
        set(&mut p.lambda, self.lambda);
        set(&mut p.iou_threshold, self.iou_threshold);
        set(&mut p.min_crop, self.min_crop);
        set(&mut cfg.concurrency_limit, self.concurrency);
        set(&mut cfg.seed, self.seed);
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Reference hyperparameters of the method; defaults must match them.
pub const REFERENCE: &[(&str, f64)] = &[
    ("temperature", 0.75),
    ("top_p", 1.0),
    ("n_samples", 5.0),
    ("beta", 50.0),
    ("k_local", 3.0),
    ("k_global", 2.0),
    ("alpha_small", 5.0),
    ("alpha_large", 8.0),
    ("lambda", 0.5),
    ("min_crop", 336.0),
];

/// Compare a configuration against [`REFERENCE`]; returns the mismatches.
pub fn check_reference(cfg: &PipelineConfig) -> Vec<String> {
    let alphas = &cfg.proposals.alphas;
    let actual = |name: &str| -> f64 {
        match name {
            "temperature" => cfg.uncertainty.temperature,
            "top_p" => cfg.uncertainty.top_p,
            "n_samples" => cfg.uncertainty.n_samples as f64,
            "beta" => cfg.uncertainty.beta,
            "k_local" => cfg.proposals.k_local as f64,
            "k_global" => cfg.proposals.k_global() as f64,
            "alpha_small" => alphas.first().copied().unwrap_or(f64::NAN),
            "alpha_large" => alphas.get(1).copied().unwrap_or(f64::NAN),
            "lambda" => cfg.proposals.lambda,
            "min_crop" => cfg.proposals.min_crop,
            _ => f64::NAN,
        }
    };
    REFERENCE
        .iter()
        .filter(|(name, want)| actual(name) != *want)
        .map(|(name, want)| format!("{name}: expected {want}, got {}", actual(name)))
        .collect()
}
