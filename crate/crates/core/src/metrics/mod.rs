//! Fréchet distance and Inception Score over pluggable feature extractors.

mod extractor;
mod linalg;

pub use extractor::{FeatureExtractor, RandomConvExtractor, TinyClassifier};
pub use linalg::{matrix_sqrt_psd, symmetric_eigen, Eigen, SquareMatrix};

use crate::error::{bail, Result};

/// Gaussian fit of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: SquareMatrix,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of `n` rows of `d` features.
pub fn fit_gaussian(features: &[f64], n: usize, d: usize) -> Result<GaussianStats> {
    if features.len() != n * d {
        bail!(Dimension, "{} values do not form {n} rows of {d}", features.len());
    }
    if n < 2 {
        bail!(Input, "need at least two samples to fit a covariance, got {n}");
    }
    let mut mean = vec![0.0; d];
    for row in features.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = SquareMatrix::zeros(d);
    let mut centred = vec![0.0; d];
    for row in features.chunks(d) {
        for ((c, v), m) in centred.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centred[i];
            for j in i..d {
                cov.data[i * d + j] += ci * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] / (n - 1) as f64;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// ‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2·(Σ_r^½ Σ_g Σ_r^½)^½).
pub fn fid(real: &GaussianStats, gen: &GaussianStats) -> Result<f64> {
    if real.dim() != gen.dim() || real.cov.n != real.dim() || gen.cov.n != gen.dim() {
        bail!(Dimension, "feature dimensions differ: {} vs {}", real.dim(), gen.dim());
    }
    let diff: f64 = real.mean.iter().zip(&gen.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let root_r = matrix_sqrt_psd(&real.cov)?;
    let inner = root_r.matmul(&gen.cov)?.matmul(&root_r)?;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    Ok((diff + real.cov.trace() + gen.cov.trace() - 2.0 * cross).max(0.0))
}

/// Mean and population standard deviation of exp(E_x KL(p(y|x) ‖ p(y))) over
/// `splits` contiguous chunks of the `n × c` probability matrix.
pub fn inception_score(probs: &[f64], n: usize, c: usize, splits: usize) -> Result<(f64, f64)> {
    if probs.len() != n * c || c == 0 {
        bail!(Dimension, "{} values do not form {n} rows of {c}", probs.len());
    }
    if splits == 0 || n < splits {
        bail!(Input, "need at least as many samples ({n}) as splits ({splits}), and one split");
    }
    for (i, row) in probs.chunks(c).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-5 {
            bail!(Input, "row {i} is not a probability distribution (sums to {s})");
        }
    }
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let part = &probs[k * n / splits * c..(k + 1) * n / splits * c];
        let rows = part.len() / c;
        let mut marginal = vec![0.0; c];
        for row in part.chunks(c) {
            for (m, p) in marginal.iter_mut().zip(row) {
                *m += p / rows as f64;
            }
        }
        let mut kl = 0.0;
        for row in part.chunks(c) {
            for (p, m) in row.iter().zip(&marginal) {
                if *p > 0.0 {
                    kl += p * (p / m).ln();
                }
            }
        }
        scores.push((kl / rows as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use crate::Error;

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: vec![mean], cov: SquareMatrix::diag(&[var]) }
    }

    #[test]
    fn gaussian_two_points() {
        let s = fit_gaussian(&[0.0, 0.0, 2.0, 2.0], 2, 2).unwrap();
        assert_eq!(s.mean, [1.0, 1.0]);
        assert_eq!(s.cov.data, [2.0, 2.0, 2.0, 2.0]);
        let same = fit_gaussian(&[1.5, -2.0, 1.5, -2.0, 1.5, -2.0], 3, 2).unwrap();
        assert!(same.cov.data.iter().all(|&v| v == 0.0));
        assert!(matches!(fit_gaussian(&[1.0, 2.0], 1, 2), Err(Error::Input(_))));
    }

    #[test]
    fn gaussian_matches_scripted_covariance() {
        let mut rng = Rng::new(1);
        let x: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        let s = fit_gaussian(&x, 100, 3).unwrap();
        for i in 0..3 {
            let mi = (0..100).map(|r| x[r * 3 + i]).sum::<f64>() / 100.0;
            assert!((s.mean[i] - mi).abs() < 1e-12);
            for j in 0..3 {
                let mj = (0..100).map(|r| x[r * 3 + j]).sum::<f64>() / 100.0;
                let c = (0..100).map(|r| (x[r * 3 + i] - mi) * (x[r * 3 + j] - mj)).sum::<f64>() / 99.0;
                assert!((s.cov.get(i, j) - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fid_closed_forms() {
        assert!((fid(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((fid(&stats_1d(0.0, 4.0), &stats_1d(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        let mut rng = Rng::new(2);
        let x: Vec<f64> = (0..400).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..400).map(|_| 0.5 * rng.normal() + 0.3).collect();
        let a = fit_gaussian(&x, 50, 8).unwrap();
        let b = fit_gaussian(&y, 50, 8).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
        assert!(fid(&a, &b).unwrap() > 0.0);
        assert!(matches!(fid(&a, &stats_1d(0.0, 1.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn inception_score_cases() {
        let uniform = vec![0.25; 40];
        let (m, s) = inception_score(&uniform, 10, 4, 2).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
        let mut onehot = vec![0.0; 25];
        for i in 0..5 {
            onehot[i * 5 + i] = 1.0;
        }
        let (m, _) = inception_score(&onehot, 5, 5, 1).unwrap();
        assert!((m - 5.0).abs() < 1e-6);
        assert!(matches!(inception_score(&[0.5, 0.6], 1, 2, 1), Err(Error::Input(_))));
        assert!(matches!(inception_score(&uniform, 10, 4, 11), Err(Error::Input(_))));
    }

    #[test]
    fn inception_score_by_direct_summation() {
        let p: [f64; 8] = [0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.7, 0.3];
        let marg: [f64; 2] = [(0.9 + 0.2 + 0.5 + 0.7) / 4.0, (0.1 + 0.8 + 0.5 + 0.3) / 4.0];
        let mut kl = 0.0;
        for r in 0..4 {
            for c in 0..2 {
                kl += p[r * 2 + c] * (p[r * 2 + c] / marg[c]).ln();
            }
        }
        let (m, _) = inception_score(&p, 4, 2, 1).unwrap();
        assert!((m - (kl / 4.0).exp()).abs() < 1e-12);
        assert!((1.0..=2.0).contains(&m));
    }
}
