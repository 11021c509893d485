//! Test-only oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use discrim::config::{DatasetKind, RunConfig, SynthConfig};
use discrim::losses::one_hot;
use discrim::rng::Rng;
use discrim::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn randn(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn random_labels(rng: &mut Rng, n: usize, k: usize) -> (Vec<usize>, Tensor) {
    let classes: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let t = one_hot(&classes, k);
    (classes, t)
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// `max|a - n| / max(max|a|, max|n|, 1e-6)`: elementwise error scaled by
/// the larger gradient. The floor sits well above finite-difference
/// roundoff (about `1e-16 |f| / h`), so gradients that are zero up to a
/// variance guard are not judged on noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-6)
}

/// `(1 - a) sum_i a^(n-i) w_i r_i` by direct summation.
pub fn weighted_sum(r: &[f64], w: &[f64], alpha: f64) -> f64 {
    let n = r.len();
    (0..n)
        .map(|i| (1.0 - alpha) * alpha.powi((n - 1 - i) as i32) * w[i] * r[i])
        .sum()
}

/// Forgetting mean `E[r]` under the zero prior.
pub fn forgetting_mean(r: &[f64], alpha: f64) -> f64 {
    weighted_sum(r, &vec![1.0; r.len()], alpha)
}

/// Forgetting variance `E[r^2] - E[r]^2`; the zero prior contributes
/// weight to `E[r^2]` only through its zeros, which this form includes.
pub fn forgetting_variance(r: &[f64], alpha: f64) -> f64 {
    let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
    forgetting_mean(&sq, alpha) - forgetting_mean(r, alpha).powi(2)
}

/// Within-class variance as an unrolled sum of the deviation terms, each
/// taken against the masked mean of the sample's role before the sample.
pub fn within_variance_unrolled(z: &[f64], target: &[bool], alpha: f64) -> f64 {
    let n = z.len();
    let role_mean = |upto: usize, role: bool| {
        let w: Vec<f64> = target[..upto]
            .iter()
            .map(|&t| if t == role { 1.0 } else { 0.0 })
            .collect();
        weighted_sum(&z[..upto], &w, alpha)
    };
    (0..n)
        .map(|m| {
            let d = z[m] - role_mean(m, target[m]);
            alpha.powi((n - 1 - m) as i32) * alpha * (1.0 - alpha) * d * d
        })
        .sum()
}

/// Population moments of a batch split by target role, straight from the
/// definitions: `(sigma_W^2, sigma_T^2)`.
pub fn batch_ratio_terms(target: &[f64], non_target: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n = (target.len() + non_target.len()) as f64;
    let (mt, mn) = (mean(target), mean(non_target));
    let all: Vec<f64> = target.iter().chain(non_target).copied().collect();
    let m = mean(&all);
    let within = (target.iter().map(|v| (v - mt).powi(2)).sum::<f64>()
        + non_target.iter().map(|v| (v - mn).powi(2)).sum::<f64>())
        / n;
    let total = all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (within, total)
}

/// Small synthetic problem that trains in well under a second.
pub fn synth_config(seed: u64) -> RunConfig {
    RunConfig {
        dataset: DatasetKind::Synth,
        synth: SynthConfig {
            classes: 3,
            per_class: 60,
            test_per_class: 20,
            separation: 6.0,
            shape: [8, 8, 1],
        },
        conv_widths: Some(vec![2, 4]),
        fc_width: Some(16),
        hidden_width: 4,
        epochs: 3,
        batch_size: 20,
        seed,
        ..RunConfig::default()
    }
}

/// Directory with MNIST IDX files: `DISCRIM_DATA_DIR` or the bundled
/// subset.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os(discrim::data::DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset"),
    }
}
