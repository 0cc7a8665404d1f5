//! Seeded inputs shared by the benchmarks.

use autofocus::field::GaussianKernel;
use autofocus::geometry::{BBox, Point};
use autofocus::uncertainty::{CoordinateSample, SampleSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn samples(seed: u64, n: usize) -> Vec<CoordinateSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ppl_x = rng.random_range(1.0..2.0);
            let ppl_y = rng.random_range(1.0..2.0);
            CoordinateSample {
                point: Point::new(
                    rng.random_range(200.0..1700.0),
                    rng.random_range(150.0..900.0),
                ),
                ppl_x,
                ppl_y,
                ppl_total: (ppl_x * ppl_y).sqrt(),
                source: SampleSource::Sampled,
            }
        })
        .collect()
}

pub fn kernels(seed: u64, n: usize) -> Vec<GaussianKernel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter()
        .map(|w| GaussianKernel {
            mu: Point::new(
                rng.random_range(400.0..800.0),
                rng.random_range(300.0..600.0),
            ),
            sigma_x: rng.random_range(20.0..80.0),
            sigma_y: rng.random_range(20.0..80.0),
            weight: w / z,
        })
        .collect()
}

pub fn boxes(seed: u64, n: usize) -> (Vec<BBox>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
            let (w, h) = (rng.random_range(20.0..200.0), rng.random_range(20.0..200.0));
            (
                BBox::new(x, y, x + w, y + h).expect("positive size"),
                rng.random::<f64>(),
            )
        })
        .unzip()
}
