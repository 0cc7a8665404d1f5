//! The weighted anisotropic Gaussian density field over the image plane.
//!
//! Kernels are unnormalised (peak value 1), so a kernel's mass is
//! `2π σx σy`. Moment matching of the field therefore weighs each kernel by
//! `w · σx · σy`, not by `w` alone. [`grid_moments`] evaluates the discrete
//! pixel sums directly and is the reference the closed form is checked
//! against.

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageSize, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("the kernel set is empty")]
    Empty,
    #[error("invalid kernel {index}: {reason}")]
    InvalidKernel { index: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub mu: Point,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub weight: f64,
}

impl GaussianKernel {
    fn validate(&self, index: usize) -> Result<(), FieldError> {
        let bad = |reason: String| Err(FieldError::InvalidKernel { index, reason });
        if !self.mu.is_finite() {
            return bad(format!("non-finite mean {:?}", self.mu));
        }
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0)
            || !self.sigma_x.is_finite()
            || !self.sigma_y.is_finite()
        {
            return bad(format!(
                "sigmas must be positive, got ({}, {})",
                self.sigma_x, self.sigma_y
            ));
        }
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return bad(format!("weight {} outside (0, 1]", self.weight));
        }
        Ok(())
    }
}

fn validate_all(kernels: &[GaussianKernel]) -> Result<(), FieldError> {
    if kernels.is_empty() {
        return Err(FieldError::Empty);
    }
    kernels
        .iter()
        .enumerate()
        .try_for_each(|(i, k)| k.validate(i))
}

/// Mean and covariance of the normalised field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldMoments {
    pub mean: Point,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl FieldMoments {
    pub fn sigma_x(&self) -> f64 {
        self.var_x.sqrt()
    }

    pub fn sigma_y(&self) -> f64 {
        self.var_y.sqrt()
    }
}

pub fn eval_kernel(k: &GaussianKernel, p: Point) -> f64 {
    let dx = (p.x - k.mu.x) / k.sigma_x;
    let dy = (p.y - k.mu.y) / k.sigma_y;
    (-0.5 * (dx * dx + dy * dy)).exp()
}

pub fn eval_field(kernels: &[GaussianKernel], p: Point) -> f64 {
    kernels.iter().map(|k| k.weight * eval_kernel(k, p)).sum()
}

/// Closed-form mixture moments of the continuous field.
pub fn mixture_moments(kernels: &[GaussianKernel]) -> Result<FieldMoments, FieldError> {
    validate_all(kernels)?;
    let masses: Vec<f64> = kernels
        .iter()
        .map(|k| k.weight * k.sigma_x * k.sigma_y)
        .collect();
    let total: f64 = masses.iter().sum();
    let mut mean = Point::new(0.0, 0.0);
    for (k, m) in kernels.iter().zip(&masses) {
        mean.x += m / total * k.mu.x;
        mean.y += m / total * k.mu.y;
    }
    let (mut var_x, mut var_y, mut cov_xy) = (0.0, 0.0, 0.0);
    for (k, m) in kernels.iter().zip(&masses) {
        let w = m / total;
        let dx = k.mu.x - mean.x;
        let dy = k.mu.y - mean.y;
        var_x += w * (k.sigma_x * k.sigma_x + dx * dx);
        var_y += w * (k.sigma_y * k.sigma_y + dy * dy);
        cov_xy += w * dx * dy;
    }
    Ok(FieldMoments {
        mean,
        var_x,
        var_y,
        cov_xy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMoments {
    pub moments: FieldMoments,
    /// Total field mass over the grid, in pixel² units.
    pub mass: f64,
    /// Some kernel's ±4σ extent leaves the grid, so the sums are truncated.
    pub truncated: bool,
}

/// Moments by direct summation of `M(p)` over the cell centres of a grid
/// covering `[0, W] x [0, H]` with square cells of side `cell`.
pub fn grid_moments(
    kernels: &[GaussianKernel],
    cell: f64,
    extent: ImageSize,
) -> Result<GridMoments, FieldError> {
    validate_all(kernels)?;
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(FieldError::InvalidArgument(format!("cell size {cell}")));
    }
    let nx = ((extent.width as f64 / cell).ceil() as usize).max(1);
    let ny = ((extent.height as f64 / cell).ceil() as usize).max(1);
    let truncated = kernels.iter().any(|k| {
        k.mu.x - 4.0 * k.sigma_x < 0.0
            || k.mu.y - 4.0 * k.sigma_y < 0.0
            || k.mu.x + 4.0 * k.sigma_x > extent.width as f64
            || k.mu.y + 4.0 * k.sigma_y > extent.height as f64
    });

    // Sums are accumulated relative to the grid centre to limit cancellation.
    let cx = extent.width as f64 / 2.0;
    let cy = extent.height as f64 / 2.0;
    let xs: Vec<f64> = (0..nx).map(|i| (i as f64 + 0.5) * cell).collect();
    let ys: Vec<f64> = (0..ny).map(|j| (j as f64 + 0.5) * cell).collect();

    // Each kernel is separable, so its value at a cell is gx[x] * gy[y].
    let gx: Vec<Vec<f64>> = kernels
        .iter()
        .map(|k| {
            xs.iter()
                .map(|&x| {
                    let d = (x - k.mu.x) / k.sigma_x;
                    (-0.5 * d * d).exp()
                })
                .collect()
        })
        .collect();
    let gy: Vec<Vec<f64>> = kernels
        .iter()
        .map(|k| {
            ys.iter()
                .map(|&y| {
                    let d = (y - k.mu.y) / k.sigma_y;
                    (-0.5 * d * d).exp()
                })
                .collect()
        })
        .collect();

    let sums = (0..ny)
        .into_par_iter()
        .map(|j| {
            let row: Vec<f64> = kernels
                .iter()
                .enumerate()
                .map(|(i, k)| k.weight * gy[i][j])
                .collect();
            let y = ys[j] - cy;
            let mut acc = [0.0f64; 6];
            for (ix, &x_abs) in xs.iter().enumerate() {
                let mut m = 0.0;
                for (i, a) in row.iter().enumerate() {
                    m += a * gx[i][ix];
                }
                let x = x_abs - cx;
                acc[0] += m;
                acc[1] += m * x;
                acc[2] += m * y;
                acc[3] += m * x * x;
                acc[4] += m * y * y;
                acc[5] += m * x * y;
            }
            acc
        })
        .reduce(
            || [0.0; 6],
            |mut a, b| {
                for (u, v) in a.iter_mut().zip(b) {
                    *u += v;
                }
                a
            },
        );

    let [s, sx, sy, sxx, syy, sxy] = sums;
    if s <= 0.0 {
        return Err(FieldError::InvalidArgument(
            "field has no mass on the grid".to_string(),
        ));
    }
    let mx = sx / s;
    let my = sy / s;
    Ok(GridMoments {
        moments: FieldMoments {
            mean: Point::new(mx + cx, my + cy),
            var_x: sxx / s - mx * mx,
            var_y: syy / s - my * my,
            cov_xy: sxy / s - mx * my,
        },
        mass: s * cell * cell,
        truncated,
    })
}

/// Row-major field samples at cell centres, scaled so the peak is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: u32,
    pub height: u32,
    /// Original-image pixels per heatmap cell.
    pub downsample: u32,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, col: u32, row: u32) -> f64 {
        self.values[(row * self.width + col) as usize]
    }

    /// `(col, row)` of the first maximum in row-major order.
    pub fn argmax(&self) -> (u32, u32) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best as u32 % self.width, best as u32 / self.width)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |c, r| {
            image::Luma([(self.get(c, r).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

pub fn rasterize_field(
    kernels: &[GaussianKernel],
    extent: ImageSize,
    downsample: u32,
) -> Result<Heatmap, FieldError> {
    validate_all(kernels)?;
    if downsample == 0 {
        return Err(FieldError::InvalidArgument(
            "downsample must be >= 1".into(),
        ));
    }
    let width = extent.width.div_ceil(downsample);
    let height = extent.height.div_ceil(downsample);
    let d = downsample as f64;
    let mut values: Vec<f64> = (0..height)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..width).map(move |c| {
                eval_field(
                    kernels,
                    Point::new((c as f64 + 0.5) * d, (r as f64 + 0.5) * d),
                )
            })
        })
        .collect();
    let peak = values.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut values {
            *v /= peak;
        }
    }
    Ok(Heatmap {
        width,
        height,
        downsample,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(x: f64, y: f64, sx: f64, sy: f64, w: f64) -> GaussianKernel {
        GaussianKernel {
            mu: Point::new(x, y),
            sigma_x: sx,
            sigma_y: sy,
            weight: w,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn kernel_spot_values() {
        let g = k(10.0, 20.0, 4.0, 2.0, 1.0);
        assert_eq!(eval_kernel(&g, Point::new(10.0, 20.0)), 1.0);
        assert!((eval_kernel(&g, Point::new(14.0, 20.0)) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((eval_kernel(&g, Point::new(22.0, 20.0)) - (-4.5f64).exp()).abs() < 1e-15);
        assert!((eval_kernel(&g, Point::new(22.0, 20.0)) - 0.0111).abs() < 1e-4);
    }

    #[test]
    fn field_matches_direct_summation() {
        let single = [k(5.0, 5.0, 3.0, 3.0, 0.7)];
        let p = Point::new(6.0, 4.0);
        assert_eq!(eval_field(&single, p), 0.7 * eval_kernel(&single[0], p));

        let pair = [k(0.0, 0.0, 5.0, 5.0, 0.5), k(1000.0, 0.0, 5.0, 5.0, 0.5)];
        assert!((eval_field(&pair, Point::new(0.0, 0.0)) - 0.5).abs() < 1e-12);
        assert!((eval_field(&pair, Point::new(1000.0, 0.0)) - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ks: Vec<_> = (0..6)
            .map(|_| {
                k(
                    rng.random_range(0.0..500.0),
                    rng.random_range(0.0..500.0),
                    rng.random_range(5.0..80.0),
                    rng.random_range(5.0..80.0),
                    1.0 / 6.0,
                )
            })
            .collect();
        for _ in 0..10 {
            let p = Point::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
            let mut direct = 0.0;
            for g in &ks {
                let q = ((p.x - g.mu.x) / g.sigma_x).powi(2) + ((p.y - g.mu.y) / g.sigma_y).powi(2);
                direct += g.weight * (-q / 2.0).exp();
            }
            assert!((eval_field(&ks, p) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_simple_cases() {
        let m = mixture_moments(&[k(3.0, 4.0, 7.0, 2.0, 1.0)]).unwrap();
        assert_eq!(m.mean, Point::new(3.0, 4.0));
        assert!((m.var_x - 49.0).abs() < 1e-12);
        assert!((m.var_y - 4.0).abs() < 1e-12);
        assert_eq!(m.cov_xy, 0.0);

        let d = 30.0;
        let m = mixture_moments(&[k(-d, 0.0, 10.0, 6.0, 0.5), k(d, 0.0, 10.0, 6.0, 0.5)]).unwrap();
        assert!(m.mean.x.abs() < 1e-12 && m.mean.y.abs() < 1e-12);
        assert!((m.var_x - (100.0 + d * d)).abs() < 1e-9);
        assert!((m.var_y - 36.0).abs() < 1e-12);

        let same = [k(50.0, 60.0, 9.0, 4.0, 0.25); 4];
        let one = mixture_moments(
            &same[..1]
                .iter()
                .map(|g| GaussianKernel { weight: 1.0, ..*g })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(mixture_moments(&same).unwrap(), one);

        assert_eq!(mixture_moments(&[]), Err(FieldError::Empty));
    }

    #[test]
    fn mass_adjusted_weights_matter() {
        // Equal weights, but the wide kernel holds 16x the mass.
        let ks = [k(0.0, 0.0, 40.0, 40.0, 0.5), k(100.0, 0.0, 10.0, 10.0, 0.5)];
        let m = mixture_moments(&ks).unwrap();
        assert!((m.mean.x - 100.0 / 17.0).abs() < 1e-9);
    }

    #[test]
    fn grid_agrees_with_closed_form_single_kernel() {
        let g = [k(500.0, 400.0, 40.0, 25.0, 1.0)];
        let grid = grid_moments(&g, 2.0, ImageSize::new(1000, 800).unwrap()).unwrap();
        let exact = mixture_moments(&g).unwrap();
        assert!(!grid.truncated);
        assert!(rel(grid.moments.mean.x, exact.mean.x) < 1e-3);
        assert!(rel(grid.moments.var_x, exact.var_x) < 1e-3);
        assert!(rel(grid.moments.var_y, exact.var_y) < 1e-3);
        let mass = 2.0 * std::f64::consts::PI * 40.0 * 25.0;
        assert!(rel(grid.mass, mass) < 1e-3);
    }

    #[test]
    fn grid_converges_under_coarsening() {
        let g = [
            k(300.0, 320.0, 32.0, 48.0, 0.6),
            k(380.0, 300.0, 40.0, 32.0, 0.4),
        ];
        let extent = ImageSize::new(700, 700).unwrap();
        let fine = grid_moments(&g, 2.0, extent).unwrap().moments;
        let coarse = grid_moments(&g, 4.0, extent).unwrap().moments;
        assert!(rel(coarse.mean.x, fine.mean.x) < 1e-3);
        assert!(rel(coarse.var_x, fine.var_x) < 1e-3);
        assert!(rel(coarse.var_y, fine.var_y) < 1e-3);
    }

    #[test]
    fn truncation_is_flagged_and_biases_inward() {
        let g = [k(20.0, 500.0, 60.0, 60.0, 1.0)];
        let grid = grid_moments(&g, 2.0, ImageSize::new(1000, 1000).unwrap()).unwrap();
        assert!(grid.truncated);
        assert!(grid.moments.mean.x > 20.0);
    }

    #[test]
    fn weight_scaling_leaves_moments() {
        let a = [
            k(100.0, 50.0, 10.0, 20.0, 0.2),
            k(160.0, 90.0, 30.0, 15.0, 0.8),
        ];
        let b: Vec<_> = a
            .iter()
            .map(|g| GaussianKernel {
                weight: g.weight * 0.5,
                ..*g
            })
            .collect();
        let ma = mixture_moments(&a).unwrap();
        let mb = mixture_moments(&b).unwrap();
        assert!((ma.mean.x - mb.mean.x).abs() < 1e-9);
        assert!((ma.var_y - mb.var_y).abs() < 1e-9);
        let p = Point::new(130.0, 70.0);
        assert!((eval_field(&b, p) - 0.5 * eval_field(&a, p)).abs() < 1e-15);
    }

    #[test]
    fn heatmap_peak_and_argmax() {
        let extent = ImageSize::new(101, 81).unwrap();
        let h = rasterize_field(&[k(50.5, 40.5, 10.0, 10.0, 1.0)], extent, 1).unwrap();
        assert_eq!(h.argmax(), (50, 40));
        assert_eq!(h.get(50, 40), 1.0);
        let n_max = h.values.iter().filter(|v| **v == 1.0).count();
        assert_eq!(n_max, 1);

        let ks = [
            k(30.0, 30.0, 8.0, 8.0, 0.3),
            k(160.0, 100.0, 12.0, 6.0, 0.7),
        ];
        let extent = ImageSize::new(200, 150).unwrap();
        let h = rasterize_field(&ks, extent, 2).unwrap();
        let mut best = (0, 0);
        let mut best_v = f64::MIN;
        for r in 0..h.height {
            for c in 0..h.width {
                let v = eval_field(&ks, Point::new(c as f64 * 2.0 + 1.0, r as f64 * 2.0 + 1.0));
                if v > best_v {
                    best_v = v;
                    best = (c, r);
                }
            }
        }
        assert_eq!(h.argmax(), best);
        assert!(rasterize_field(&ks, extent, 0).is_err());
        assert!(rasterize_field(&[], extent, 1).is_err());
    }
}
