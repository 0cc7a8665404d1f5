use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    /// U statistic of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "the first sample tends to be larger".
    pub p_greater: f64,
}

/// Average ranks (1-based) with ties sharing their mean rank, plus the tie
/// correction term `Σ (t³ - t)`.
fn ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (out, ties)
}

/// Mann-Whitney U test with the normal approximation, tie correction and
/// continuity correction. `None` if either sample is empty or all values
/// are tied.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> Option<RankTest> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (r, ties) = ranks(&all);
    let r1: f64 = r[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return None;
    }
    let z = (u - n1 * n2 / 2.0 - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Some(RankTest {
        u,
        z,
        p_greater: 1.0 - normal.cdf(z),
    })
}

/// Kendall-style trend check: fraction of concordant pairs minus discordant
/// ones, in [-1, 1].
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let s = (x[i] - x[j]) * (y[i] - y[j]);
            if s > 0.0 {
                c += 1;
            } else if s < 0.0 {
                d += 1;
            }
        }
    }
    if c + d == 0 {
        0.0
    } else {
        (c - d) as f64 / (c + d) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_u() {
        let a = [3.0, 5.0, 5.0, 9.0];
        let b = [1.0, 5.0, 2.0];
        let brute: f64 = a
            .iter()
            .flat_map(|x| {
                b.iter().map(move |y| {
                    if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    }
                })
            })
            .sum();
        assert_eq!(mann_whitney_greater(&a, &b).unwrap().u, brute);
    }

    #[test]
    fn separated_samples_are_significant() {
        let a: Vec<f64> = (0..30).map(|i| 10.0 + i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 * 0.3).collect();
        assert!(mann_whitney_greater(&a, &b).unwrap().p_greater < 1e-6);
        assert!(mann_whitney_greater(&b, &a).unwrap().p_greater > 0.99);
        assert!(mann_whitney_greater(&[1.0], &[]).is_none());
        assert!(mann_whitney_greater(&[1.0, 1.0], &[1.0]).is_none());
    }

    #[test]
    fn reference_value() {
        // no ties: U = 2 (4 and 5 beat 3.5), mean 12.5, variance 25 * 11 / 12
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [3.5, 6.0, 7.0, 8.0, 9.0];
        let t = mann_whitney_greater(&a, &b).unwrap();
        assert_eq!(t.u, 2.0);
        let sd = (25.0f64 * 11.0 / 12.0).sqrt();
        assert!((t.z - (2.0 - 12.5 - 0.5) / sd).abs() < 1e-12);
    }

    #[test]
    fn tau_extremes() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(kendall_tau(&x, &[4.0, 5.0, 6.0]), 1.0);
        assert_eq!(kendall_tau(&x, &[6.0, 5.0, 4.0]), -1.0);
    }
}
