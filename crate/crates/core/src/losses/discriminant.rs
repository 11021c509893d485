//! Neuron-wise discriminant criterion: for every output neuron, the ratio
//! of its within-class variance (target vs non-target samples) to its total
//! variance, summed over neurons.

use super::{check_grad, check_value, class_ids, same_shape, LossError, Result};
use crate::stats::{NeuronAccumulator, NeuronClassStats};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DiscriminantOutput {
    pub loss: f64,
    pub grad: Tensor,
    /// Neurons whose target or non-target group was empty in this batch.
    /// The empty group's mean is taken as zero and contributes nothing.
    pub degenerate_neurons: Vec<usize>,
}

/// `w / (t + eps)`, with `0/0` read as zero scatter.
fn ratio(w: f64, t: f64, eps: f64) -> Result<f64> {
    let denom = t + eps;
    if denom == 0.0 {
        if w == 0.0 {
            return Ok(0.0);
        }
        return Err(LossError::NonFinite("discriminant ratio"));
    }
    Ok(w / denom)
}

/// Batch discriminant criterion with the full gradient through the batch
/// means and variances.
pub fn discriminant_batch(z: &Tensor, t: &Tensor, epsilon: f64) -> Result<DiscriminantOutput> {
    same_shape("logits/labels", z, t)?;
    let classes = class_ids(t)?;
    let (n, k) = z.dims2()?;
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0;
    let mut degenerate = Vec::new();
    for neuron in 0..k {
        let col = |i: usize| z.data()[i * k + neuron];
        let (mut sum_t, mut sum_nt, mut n_t) = (0.0, 0.0, 0usize);
        for (i, &c) in classes.iter().enumerate() {
            if c == neuron {
                sum_t += col(i);
                n_t += 1;
            } else {
                sum_nt += col(i);
            }
        }
        let n_nt = n - n_t;
        if n_t == 0 || n_nt == 0 {
            degenerate.push(neuron);
        }
        let mu_t = if n_t > 0 { sum_t / n_t as f64 } else { 0.0 };
        let mu_nt = if n_nt > 0 { sum_nt / n_nt as f64 } else { 0.0 };
        let mu_total = (sum_t + sum_nt) * inv_n;
        let group_mean = |c: usize| if c == neuron { mu_t } else { mu_nt };

        let (mut within, mut total) = (0.0, 0.0);
        for (i, &c) in classes.iter().enumerate() {
            let dw = col(i) - group_mean(c);
            let dt = col(i) - mu_total;
            within += dw * dw;
            total += dt * dt;
        }
        within *= inv_n;
        total *= inv_n;
        loss += ratio(within, total, epsilon)?;

        let denom = total + epsilon;
        if denom == 0.0 {
            continue;
        }
        // The mean terms drop out: deviations sum to zero within each group.
        let g = grad.data_mut();
        for (i, &c) in classes.iter().enumerate() {
            let dw = col(i) - group_mean(c);
            let dt = col(i) - mu_total;
            g[i * k + neuron] = 2.0 * inv_n * (dw / denom - within * dt / (denom * denom));
        }
    }
    check_grad(&grad, "discriminant gradient")?;
    Ok(DiscriminantOutput {
        loss: check_value(loss, "discriminant criterion")?,
        grad,
        degenerate_neurons: degenerate,
    })
}

/// Loss value only; convenient for evaluating trained models.
pub fn discriminant_ratio(z: &Tensor, t: &Tensor, epsilon: f64) -> Result<f64> {
    Ok(discriminant_batch(z, t, epsilon)?.loss)
}

/// The adaptive criterion with its running statistics held fixed.
///
/// Each sample's deviation terms are taken against the means that
/// preceded it in the stream; the forgetting statistics themselves are
/// constants. At the batch it was captured from, `value` equals the
/// adaptive loss and `gradient` is the gradient used for training.
#[derive(Clone, Debug)]
pub struct FrozenDiscriminant {
    gain: f64,
    epsilon: f64,
    classes: Vec<usize>,
    base: Tensor,
    /// Per-sample, per-neuron state before that sample was observed.
    before: Vec<NeuronAccumulator>,
    within: Vec<f64>,
    total: Vec<f64>,
}

impl FrozenDiscriminant {
    fn neurons(&self) -> usize {
        self.within.len()
    }

    fn moved_variances(&self, z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        same_shape("frozen logits", z, &self.base)?;
        let k = self.neurons();
        let mut within = self.within.clone();
        let mut total = self.total.clone();
        let mut dw = vec![0.0; k];
        let mut dt = vec![0.0; k];
        for (i, &c) in self.classes.iter().enumerate() {
            for neuron in 0..k {
                let acc = &self.before[i * k + neuron];
                let (new, old) = (z.data()[i * k + neuron], self.base.data()[i * k + neuron]);
                let target = c == neuron;
                dw[neuron] += acc.within_dev2(new, target) - acc.within_dev2(old, target);
                dt[neuron] += acc.total_dev2(new) - acc.total_dev2(old);
            }
        }
        for neuron in 0..k {
            within[neuron] += self.gain * dw[neuron];
            total[neuron] += self.gain * dt[neuron];
        }
        Ok((within, total))
    }

    pub fn value(&self, z: &Tensor) -> Result<f64> {
        let (within, total) = self.moved_variances(z)?;
        let mut loss = 0.0;
        for (w, t) in within.iter().zip(&total) {
            loss += ratio(*w, *t, self.epsilon)?;
        }
        check_value(loss, "frozen discriminant")
    }

    pub fn gradient(&self, z: &Tensor) -> Result<Tensor> {
        let (within, total) = self.moved_variances(z)?;
        let k = self.neurons();
        let mut grad = Tensor::zeros(z.shape().to_vec());
        let g = grad.data_mut();
        for (i, &c) in self.classes.iter().enumerate() {
            for neuron in 0..k {
                let denom = total[neuron] + self.epsilon;
                if denom == 0.0 {
                    continue;
                }
                let acc = &self.before[i * k + neuron];
                let v = z.data()[i * k + neuron];
                let dev_w = if c == neuron {
                    v - acc.target_mean
                } else {
                    v - acc.non_target_mean
                };
                let dev_t = v - acc.total_mean;
                g[i * k + neuron] =
                    2.0 * self.gain * dev_w / denom - 2.0 * self.gain * within[neuron] * dev_t / (denom * denom);
            }
        }
        check_grad(&grad, "frozen discriminant gradient")?;
        Ok(grad)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptiveDiscriminantOutput {
    pub loss: f64,
    pub grad: Tensor,
    pub frozen: FrozenDiscriminant,
}

/// Advances `stats` by every sample of the batch, then evaluates
/// `sum_k within_k / (total_k + eps)` on the updated statistics.
pub fn adaptive_discriminant(
    z: &Tensor,
    t: &Tensor,
    stats: &mut NeuronClassStats,
    epsilon: f64,
) -> Result<AdaptiveDiscriminantOutput> {
    same_shape("logits/labels", z, t)?;
    let classes = class_ids(t)?;
    let (n, k) = z.dims2()?;
    if stats.len() != k {
        return Err(LossError::Shape {
            what: "neuron statistics",
            left: vec![stats.len()],
            right: vec![k],
        });
    }
    if !z.is_finite() {
        return Err(LossError::NonFinite("adaptive discriminant input"));
    }
    let mut before = Vec::with_capacity(n * k);
    for (i, &c) in classes.iter().enumerate() {
        before.extend_from_slice(stats.neurons());
        stats.observe_sample(z.row(i), c)?;
    }
    let frozen = FrozenDiscriminant {
        gain: stats.alpha().var_gain(),
        epsilon,
        classes,
        base: z.clone(),
        before,
        within: stats.neurons().iter().map(|a| a.within_var).collect(),
        total: stats.neurons().iter().map(|a| a.total_var).collect(),
    };
    let mut loss = 0.0;
    for (w, t) in frozen.within.iter().zip(&frozen.total) {
        loss += ratio(*w, *t, epsilon)?;
    }
    let grad = frozen.gradient(z)?;
    Ok(AdaptiveDiscriminantOutput {
        loss: check_value(loss, "adaptive discriminant")?,
        grad,
        frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::one_hot;
    use crate::stats::Alpha;

    #[test]
    fn hand_fixture_ratio() {
        // Neuron 0 sees targets {2, 4} and non-targets {0, 0}; neuron 1 is
        // constant and contributes 0/0 = 0.
        let z = Tensor::from_rows(&[&[2.0, 0.0], &[4.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        let t = one_hot(&[0, 0, 1, 1], 2);
        let out = discriminant_batch(&z, &t, 0.0).unwrap();
        assert!((out.loss - 0.5 / 2.75).abs() < 1e-12);
    }

    #[test]
    fn zero_within_scatter_is_minimal() {
        let z = Tensor::from_rows(&[&[3.0, -1.0], &[-1.0, 5.0], &[3.0, -1.0], &[-1.0, 5.0]]).unwrap();
        let t = one_hot(&[0, 1, 0, 1], 2);
        let out = discriminant_batch(&z, &t, 1e-8).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert!(out.degenerate_neurons.is_empty());
    }

    #[test]
    fn constant_batch_is_guarded() {
        let z = Tensor::filled(vec![3, 2], 1.5);
        let t = one_hot(&[0, 1, 0], 2);
        let out = discriminant_batch(&z, &t, 1e-8).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
        let out = discriminant_batch(&z, &t, 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn absent_class_is_flagged() {
        let z = Tensor::from_rows(&[&[1.0, 2.0, 0.0], &[3.0, 1.0, 0.5]]).unwrap();
        let t = one_hot(&[0, 1], 3);
        let out = discriminant_batch(&z, &t, 1e-8).unwrap();
        assert_eq!(out.degenerate_neurons, vec![2]);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn needs_two_samples() {
        let z = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            discriminant_batch(&z, &one_hot(&[0], 2), 1e-8),
            Err(LossError::TooFewSamples(1))
        ));
    }

    #[test]
    fn adaptive_single_sample_matches_recurrence() {
        let alpha = Alpha::new(0.5).unwrap();
        let mut stats = NeuronClassStats::new(2, alpha);
        let z = Tensor::from_rows(&[&[2.0, -1.0]]).unwrap();
        let out = adaptive_discriminant(&z, &one_hot(&[0], 2), &mut stats, 0.0).unwrap();
        // Fresh state: within and total variance both get 0.25 * z^2.
        assert_eq!(stats.neuron(0).within_var, 1.0);
        assert_eq!(stats.neuron(0).total_var, 1.0);
        assert_eq!(stats.neuron(1).within_var, 0.25);
        assert!((out.loss - 2.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_concentrated_values_drive_loss_to_zero() {
        let alpha = Alpha::new(0.9).unwrap();
        let mut stats = NeuronClassStats::new(2, alpha);
        let mut last = f64::INFINITY;
        // Every neuron sees one role only (target for neuron 0, non-target
        // for neuron 1), each at a fixed value.
        for _ in 0..250 {
            let z = Tensor::from_rows(&[&[4.0, -2.0], &[4.0, -2.0]]).unwrap();
            last = adaptive_discriminant(&z, &one_hot(&[0, 0], 2), &mut stats, 1e-8)
                .unwrap()
                .loss;
        }
        assert!(last < 1e-6, "loss {last}");
    }

    #[test]
    fn frozen_value_matches_loss_at_base() {
        let alpha = Alpha::new(0.9).unwrap();
        let mut stats = NeuronClassStats::new(3, alpha);
        let z = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, -0.5], &[0.2, 0.3, 0.1]]).unwrap();
        let t = one_hot(&[2, 0, 1], 3);
        let out = adaptive_discriminant(&z, &t, &mut stats, 1e-8).unwrap();
        assert_eq!(out.frozen.value(&z).unwrap(), out.loss);
    }
}
