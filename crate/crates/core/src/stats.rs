//! Exponential-forgetting online statistics.
//!
//! All accumulators start at zero, which corresponds to an unbounded stream
//! of zeros preceding the first observation. Under that prior the
//! recurrences below are exact weighted means and variances with weights
//! `alpha^(n-i)` normalized by the full geometric sum `1/(1-alpha)`.
//!
//! Ordering within one observation is fixed: variance increments use the
//! means from before the observation, then the means advance.

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("forgetting factor must lie strictly inside (0, 1), got {0}")]
    Alpha(f64),
    #[error("center step size must lie in [0, 1], got {0}")]
    Beta(f64),
    #[error("non-finite observation {0}")]
    NonFinite(f64),
    #[error("feature dimension {actual} does not match {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("center bank is in {0} mode")]
    Mode(&'static str),
    #[error("bad snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

/// Forgetting factor `alpha`, strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Alpha(alpha))
        } else {
            Err(StatsError::Alpha(alpha))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `alpha * old + (1 - alpha) * z`.
    #[inline]
    pub fn blend(self, old: f64, z: f64) -> f64 {
        self.0 * old + (1.0 - self.0) * z
    }

    /// `alpha * old_var + alpha (1 - alpha) * dev2`.
    #[inline]
    pub fn blend_var(self, old_var: f64, dev2: f64) -> f64 {
        self.0 * old_var + self.0 * (1.0 - self.0) * dev2
    }

    /// Coefficient `alpha (1 - alpha)` of a squared deviation.
    pub fn var_gain(self) -> f64 {
        self.0 * (1.0 - self.0)
    }
}

fn finite(z: f64) -> Result<f64> {
    if z.is_finite() {
        Ok(z)
    } else {
        Err(StatsError::NonFinite(z))
    }
}

/// A single forgetting estimate: a running mean or variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForgettingScalar {
    value: f64,
    alpha: Alpha,
    steps: u64,
}

impl ForgettingScalar {
    pub fn new(alpha: Alpha) -> Self {
        ForgettingScalar {
            value: 0.0,
            alpha,
            steps: 0,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `mu <- alpha mu + (1 - alpha) z`.
    pub fn mean_update(&mut self, z: f64) -> Result<()> {
        self.value = self.alpha.blend(self.value, finite(z)?);
        self.steps += 1;
        Ok(())
    }

    /// `mu <- alpha mu + (1 - alpha) t z`: a masked-out sample still decays
    /// the estimate.
    pub fn masked_mean_update(&mut self, z: f64, target: bool) -> Result<()> {
        let z = finite(z)?;
        let masked = if target { z } else { 0.0 };
        self.value = self.alpha.blend(self.value, masked);
        self.steps += 1;
        Ok(())
    }
}

/// A forgetting mean paired with the variance around it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForgettingMoments {
    pub mean: ForgettingScalar,
    pub var: ForgettingScalar,
}

impl ForgettingMoments {
    pub fn new(alpha: Alpha) -> Self {
        ForgettingMoments {
            mean: ForgettingScalar::new(alpha),
            var: ForgettingScalar::new(alpha),
        }
    }

    /// `var <- alpha var + alpha (1 - alpha) (z - mean_prev)^2`, then the
    /// mean advances.
    pub fn total_variance_update(&mut self, z: f64) -> Result<()> {
        let z = finite(z)?;
        let dev = z - self.mean.value;
        self.var.value = self.var.alpha.blend_var(self.var.value, dev * dev);
        self.var.steps += 1;
        self.mean.mean_update(z)
    }
}

/// Forgetting statistics of one output neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeuronAccumulator {
    /// Mean of the neuron's input over target-class samples.
    pub target_mean: f64,
    /// Mean over non-target samples.
    pub non_target_mean: f64,
    pub total_mean: f64,
    pub within_var: f64,
    pub total_var: f64,
}

impl NeuronAccumulator {
    /// Squared deviation from the class-matching mean.
    #[inline]
    pub fn within_dev2(&self, z: f64, target: bool) -> f64 {
        let d = if target {
            z - self.target_mean
        } else {
            z - self.non_target_mean
        };
        d * d
    }

    #[inline]
    pub fn total_dev2(&self, z: f64) -> f64 {
        let d = z - self.total_mean;
        d * d
    }

    /// Advances every accumulator by one observation.
    pub fn observe(&mut self, alpha: Alpha, z: f64, target: bool) -> Result<()> {
        let z = finite(z)?;
        self.within_var = alpha.blend_var(self.within_var, self.within_dev2(z, target));
        self.total_var = alpha.blend_var(self.total_var, self.total_dev2(z));
        let (t, nt) = if target { (z, 0.0) } else { (0.0, z) };
        self.target_mean = alpha.blend(self.target_mean, t);
        self.non_target_mean = alpha.blend(self.non_target_mean, nt);
        self.total_mean = alpha.blend(self.total_mean, z);
        Ok(())
    }
}

/// Per-neuron statistics for the adaptive discriminant criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronClassStats {
    alpha: Alpha,
    neurons: Vec<NeuronAccumulator>,
    steps: u64,
}

impl NeuronClassStats {
    pub fn new(neurons: usize, alpha: Alpha) -> Self {
        NeuronClassStats {
            alpha,
            neurons: vec![NeuronAccumulator::default(); neurons],
            steps: 0,
        }
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn neuron(&self, k: usize) -> &NeuronAccumulator {
        &self.neurons[k]
    }

    pub fn neurons(&self) -> &[NeuronAccumulator] {
        &self.neurons
    }

    /// Within-variance update for neuron `k` (which also advances its
    /// means and total variance).
    pub fn within_variance_update(&mut self, k: usize, z: f64, target: bool) -> Result<()> {
        let alpha = self.alpha;
        let classes = self.neurons.len();
        self.neurons
            .get_mut(k)
            .ok_or(StatsError::Class { class: k, classes })?
            .observe(alpha, z, target)
    }

    /// One training sample: its logit row and its class.
    pub fn observe_sample(&mut self, logits: &[f64], class: usize) -> Result<()> {
        if logits.len() != self.neurons.len() {
            return Err(StatsError::Dimension {
                expected: self.neurons.len(),
                actual: logits.len(),
            });
        }
        if class >= self.neurons.len() {
            return Err(StatsError::Class {
                class,
                classes: self.neurons.len(),
            });
        }
        if let Some(&z) = logits.iter().find(|z| !z.is_finite()) {
            return Err(StatsError::NonFinite(z));
        }
        let alpha = self.alpha;
        for (k, (acc, &z)) in self.neurons.iter_mut().zip(logits).enumerate() {
            acc.observe(alpha, z, k == class)?;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.neurons.fill(NeuronAccumulator::default());
        self.steps = 0;
    }

    /// Header tensor `[alpha, steps]` followed by a `K x 5` tensor of
    /// (target mean, non-target mean, total mean, within var, total var).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        Tensor::new(vec![2], vec![self.alpha.0, self.steps as f64])?.write_to(&mut w)?;
        let data = self
            .neurons
            .iter()
            .flat_map(|n| {
                [
                    n.target_mean,
                    n.non_target_mean,
                    n.total_mean,
                    n.within_var,
                    n.total_var,
                ]
            })
            .collect();
        Tensor::new(vec![self.neurons.len(), 5], data)?.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = Tensor::read_from(&mut r)?;
        let body = Tensor::read_from(&mut r)?;
        if header.shape() != [2] || body.rank() != 2 || body.shape()[1] != 5 {
            return Err(StatsError::Snapshot(format!(
                "unexpected shapes {:?} / {:?}",
                header.shape(),
                body.shape()
            )));
        }
        let alpha = Alpha::new(header.data()[0])?;
        let neurons = body
            .data()
            .chunks_exact(5)
            .map(|c| NeuronAccumulator {
                target_mean: c[0],
                non_target_mean: c[1],
                total_mean: c[2],
                within_var: c[3],
                total_var: c[4],
            })
            .collect();
        Ok(NeuronClassStats {
            alpha,
            neurons,
            steps: header.data()[1] as u64,
        })
    }
}

/// How a [`CenterBank`] moves its centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CenterUpdate {
    /// Per-sample forgetting mean of each class's features.
    Adaptive(Alpha),
    /// Batch-wise pull towards the members: `c <- c - beta * delta`.
    MiniBatch { beta: f64 },
}

/// Class centroids in feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    centers: Tensor,
    update: CenterUpdate,
}

impl CenterBank {
    pub fn new(classes: usize, dim: usize, update: CenterUpdate) -> Result<Self> {
        if let CenterUpdate::MiniBatch { beta } = update {
            if !(0.0..=1.0).contains(&beta) {
                return Err(StatsError::Beta(beta));
            }
        }
        Ok(CenterBank {
            centers: Tensor::zeros(vec![classes, dim]),
            update,
        })
    }

    pub fn with_centers(centers: Tensor, update: CenterUpdate) -> Result<Self> {
        let (classes, dim) = centers.dims2()?;
        let mut bank = CenterBank::new(classes, dim, update)?;
        bank.centers = centers;
        Ok(bank)
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn update_mode(&self) -> CenterUpdate {
        self.update
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn center(&self, class: usize) -> &[f64] {
        self.centers.row(class)
    }

    fn check(&self, x: &[f64], class: usize) -> Result<()> {
        if x.len() != self.dim() {
            return Err(StatsError::Dimension {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if class >= self.classes() {
            return Err(StatsError::Class {
                class,
                classes: self.classes(),
            });
        }
        if let Some(&v) = x.iter().find(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(v));
        }
        Ok(())
    }

    /// `c_k <- alpha c_k + (1 - alpha) x` for the sample's class only.
    pub fn update_adaptive(&mut self, x: &[f64], class: usize) -> Result<()> {
        let CenterUpdate::Adaptive(alpha) = self.update else {
            return Err(StatsError::Mode("mini-batch"));
        };
        self.check(x, class)?;
        for (c, &v) in self.centers.row_mut(class).iter_mut().zip(x) {
            *c = alpha.blend(*c, v);
        }
        Ok(())
    }

    /// `delta_k = sum_i t_ik (c_k - z_i) / (1 + sum_i t_ik)`, then
    /// `c_k <- c_k - beta delta_k`, for every class at once.
    pub fn update_minibatch(&mut self, features: &Tensor, classes: &[usize]) -> Result<()> {
        let CenterUpdate::MiniBatch { beta } = self.update else {
            return Err(StatsError::Mode("adaptive"));
        };
        let (n, d) = features.dims2()?;
        if d != self.dim() {
            return Err(StatsError::Dimension {
                expected: self.dim(),
                actual: d,
            });
        }
        if classes.len() != n {
            return Err(StatsError::Dimension {
                expected: n,
                actual: classes.len(),
            });
        }
        let k = self.classes();
        let mut delta = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &class) in classes.iter().enumerate() {
            let z = features.row(i);
            self.check(z, class)?;
            counts[class] += 1;
            let c = self.centers.row(class);
            for j in 0..d {
                delta[class * d + j] += c[j] - z[j];
            }
        }
        let centers = self.centers.data_mut();
        for class in 0..k {
            let denom = 1.0 + counts[class] as f64;
            for j in 0..d {
                centers[class * d + j] -= beta * delta[class * d + j] / denom;
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.centers.data_mut().fill(0.0);
    }

    /// Header tensor `[mode, parameter]` (mode 0 adaptive with alpha, 1
    /// mini-batch with beta) followed by the `K x D` centers.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = match self.update {
            CenterUpdate::Adaptive(a) => [0.0, a.0],
            CenterUpdate::MiniBatch { beta } => [1.0, beta],
        };
        Tensor::new(vec![2], header.to_vec())?.write_to(&mut w)?;
        self.centers.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = Tensor::read_from(&mut r)?;
        let centers = Tensor::read_from(&mut r)?;
        if header.shape() != [2] {
            return Err(StatsError::Snapshot(format!(
                "unexpected header shape {:?}",
                header.shape()
            )));
        }
        let update = match header.data()[0] {
            0.0 => CenterUpdate::Adaptive(Alpha::new(header.data()[1])?),
            1.0 => CenterUpdate::MiniBatch { beta: header.data()[1] },
            m => return Err(StatsError::Snapshot(format!("unknown center mode {m}"))),
        };
        CenterBank::with_centers(centers, update)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha(a: f64) -> Alpha {
        Alpha::new(a).unwrap()
    }

    #[test]
    fn alpha_bounds() {
        assert!(Alpha::new(0.0).is_err());
        assert!(Alpha::new(1.0).is_err());
        assert!(Alpha::new(f64::NAN).is_err());
        assert!(Alpha::new(0.5).is_ok());
    }

    #[test]
    fn mean_update_examples() {
        let mut s = ForgettingScalar::new(alpha(0.99));
        assert_eq!(s.value(), 0.0);
        s.mean_update(1.0).unwrap();
        assert!((s.value() - 0.01).abs() < 1e-15);

        let mut s = ForgettingScalar::new(alpha(0.5));
        for z in [1.0, 2.0, 3.0] {
            s.mean_update(z).unwrap();
        }
        assert_eq!(s.value(), 2.125);
        assert_eq!(s.steps(), 3);

        let mut s = ForgettingScalar::new(alpha(0.9));
        for _ in 0..200 {
            s.mean_update(3.5).unwrap();
        }
        assert!((s.value() - 3.5).abs() < 1e-8);
        assert!(s.mean_update(f64::INFINITY).is_err());
    }

    #[test]
    fn masked_mean_examples() {
        let mut s = ForgettingScalar::new(alpha(0.5));
        s.masked_mean_update(4.0, true).unwrap();
        assert_eq!(s.value(), 2.0);
        s.masked_mean_update(99.0, false).unwrap();
        assert_eq!(s.value(), 1.0);

        let mut s = ForgettingScalar::new(alpha(0.5));
        for (z, t) in [(1.0, true), (5.0, false), (3.0, true)] {
            s.masked_mean_update(z, t).unwrap();
        }
        assert_eq!(s.value(), 1.625);
    }

    #[test]
    fn total_variance_examples() {
        let mut m = ForgettingMoments::new(alpha(0.5));
        m.total_variance_update(1.0).unwrap();
        assert_eq!(m.var.value(), 0.25);
        m.total_variance_update(1.0).unwrap();
        assert_eq!(m.var.value(), 0.1875);

        // Constant input c under the zero prior: var_n = c^2 a^n (1 - a^n),
        // which shrinks from step n - 1 to n exactly when a^n + a^(n-1) < 1.
        for a in [0.5, 0.7, 0.9] {
            let mut m = ForgettingMoments::new(alpha(a));
            let mut prev = f64::INFINITY;
            for n in 1..=60 {
                m.total_variance_update(2.0).unwrap();
                let an = a.powi(n);
                let closed = 4.0 * an * (1.0 - an);
                assert!((m.var.value() - closed).abs() <= 1e-9 * closed, "a={a} n={n}");
                if an + a.powi(n - 1) < 1.0 {
                    assert!(m.var.value() < prev, "a={a} n={n}");
                }
                prev = m.var.value();
            }
        }
    }

    #[test]
    fn within_variance_examples() {
        let mut s = NeuronClassStats::new(1, alpha(0.5));
        s.within_variance_update(0, 2.0, true).unwrap();
        assert_eq!(s.neuron(0).within_var, 1.0);
        assert_eq!(s.neuron(0).target_mean, 1.0);
        s.within_variance_update(0, 2.0, true).unwrap();
        assert_eq!(s.neuron(0).within_var, 0.75);
    }

    #[test]
    fn within_variance_decays_on_zero_deviation() {
        let a = alpha(0.8);
        let mut acc = NeuronAccumulator {
            target_mean: 3.0,
            non_target_mean: -1.0,
            total_mean: 1.0,
            within_var: 2.0,
            total_var: 4.0,
        };
        for step in 0..10 {
            let target = step % 2 == 0;
            let z = if target { acc.target_mean } else { acc.non_target_mean };
            let before = acc.within_var;
            acc.observe(a, z, target).unwrap();
            assert!((acc.within_var - 0.8 * before).abs() < 1e-15);
        }
    }

    #[test]
    fn observe_sample_validates() {
        let mut s = NeuronClassStats::new(3, alpha(0.9));
        assert!(matches!(
            s.observe_sample(&[0.0, 1.0], 0),
            Err(StatsError::Dimension { .. })
        ));
        assert!(matches!(
            s.observe_sample(&[0.0, 1.0, 2.0], 3),
            Err(StatsError::Class { .. })
        ));
        assert!(s.observe_sample(&[0.0, f64::NAN, 2.0], 0).is_err());
        assert_eq!(s.steps(), 0);
        s.observe_sample(&[0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.neuron(1).target_mean - 0.1).abs() < 1e-15);
        assert_eq!(s.neuron(0).target_mean, 0.0);
    }

    #[test]
    fn adaptive_center_examples() {
        let mut bank = CenterBank::new(2, 2, CenterUpdate::Adaptive(alpha(0.99))).unwrap();
        bank.update_adaptive(&[1.0, 1.0], 1).unwrap();
        assert!((bank.center(1)[0] - 0.01).abs() < 1e-15);
        assert_eq!(bank.center(0), &[0.0, 0.0]);

        let c = Tensor::from_rows(&[&[0.3, -2.0]]).unwrap();
        let mut bank = CenterBank::with_centers(c, CenterUpdate::Adaptive(alpha(0.7))).unwrap();
        bank.update_adaptive(&[0.3, -2.0], 0).unwrap();
        assert!((bank.center(0)[0] - 0.3).abs() < 1e-15);
        assert!((bank.center(0)[1] + 2.0).abs() < 1e-15);

        let mut bank = CenterBank::new(1, 2, CenterUpdate::Adaptive(alpha(0.5))).unwrap();
        bank.update_adaptive(&[2.0, 0.0], 0).unwrap();
        bank.update_adaptive(&[0.0, 2.0], 0).unwrap();
        assert_eq!(bank.center(0), &[0.5, 1.0]);
        assert!(matches!(
            bank.update_adaptive(&[1.0], 0),
            Err(StatsError::Dimension { .. })
        ));
        assert!(matches!(
            bank.update_minibatch(&Tensor::zeros(vec![1, 2]), &[0]),
            Err(StatsError::Mode(_))
        ));
    }

    #[test]
    fn minibatch_center_examples() {
        let c = Tensor::from_rows(&[&[1.0, 1.0], &[5.0, 5.0]]).unwrap();
        let mut bank = CenterBank::with_centers(c, CenterUpdate::MiniBatch { beta: 1.0 }).unwrap();
        let z = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        bank.update_minibatch(&z, &[0]).unwrap();
        assert_eq!(bank.center(0), &[0.5, 0.5]);
        assert_eq!(bank.center(1), &[5.0, 5.0]);

        let c = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
        let mut bank = CenterBank::with_centers(c, CenterUpdate::MiniBatch { beta: 0.5 }).unwrap();
        let z = Tensor::from_rows(&[&[0.0, 3.0], &[2.0, -1.0]]).unwrap();
        bank.update_minibatch(&z, &[0, 0]).unwrap();
        assert_eq!(bank.center(0), &[1.0, 1.0]);

        assert!(CenterBank::new(1, 1, CenterUpdate::MiniBatch { beta: 1.5 }).is_err());
    }

    #[test]
    fn snapshots_restore() {
        let mut s = NeuronClassStats::new(3, alpha(0.9));
        s.observe_sample(&[1.0, -2.0, 0.5], 2).unwrap();
        s.observe_sample(&[0.1, 0.2, 0.3], 0).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(NeuronClassStats::read_from(&buf[..]).unwrap(), s);

        let mut bank = CenterBank::new(2, 3, CenterUpdate::Adaptive(alpha(0.5))).unwrap();
        bank.update_adaptive(&[1.0, 2.0, 3.0], 1).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(CenterBank::read_from(&buf[..]).unwrap(), bank);
    }
}
