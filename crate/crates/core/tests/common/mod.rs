#![allow(dead_code)]

use factr_autodiff::{Real, Tensor};
use factr_core::model::{ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// C=3, L=64, P=8, D=8, T=8 with calendar features and one static attribute
/// of each kind.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        lookback: 64,
        patch_len: 8,
        stride: 8,
        d_model: 8,
        fm_rank: 4,
        spatial_rank: 4,
        channels: 3,
        horizon: 8,
        static_cat_cardinalities: vec![2],
        static_categorical: vec![vec![0], vec![1], vec![1]],
        static_continuous: vec![vec![0.5], vec![-1.0], vec![0.25]],
        dropout: 0.0,
        variant,
        ..ModelConfig::default()
    }
}

pub fn random_tensor<F: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn random_codes(cfg: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = cfg.dyn_cardinalities.len();
    (0..batch * cfg.lookback * k)
        .map(|i| rng.random_range(0..cfg.dyn_cardinalities[i % k]))
        .collect()
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}
