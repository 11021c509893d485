//! The training objective: softmax cross-entropy plus optional weighted
//! discriminant and center terms read at network tap points.

use std::collections::BTreeMap;
use std::fmt;

use super::{
    adaptive_center_loss, adaptive_discriminant, center_loss, class_ids, discriminant_batch, softmax_cross_entropy,
    FrozenDiscriminant, LossError, Reduction, Result, DEFAULT_EPSILON,
};
use crate::network::{TapPoint, Taps};
use crate::stats::{Alpha, CenterBank, CenterUpdate, NeuronClassStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossComponent {
    Softmax,
    Discriminant,
    AdaptiveDiscriminant,
    Center,
    AdaptiveCenter,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [
        LossComponent::Softmax,
        LossComponent::Discriminant,
        LossComponent::AdaptiveDiscriminant,
        LossComponent::Center,
        LossComponent::AdaptiveCenter,
    ];

    /// Column name used in loss logs.
    pub fn column(self) -> &'static str {
        match self {
            LossComponent::Softmax => "L_S",
            LossComponent::Discriminant => "L_D",
            LossComponent::AdaptiveDiscriminant => "L_AD",
            LossComponent::Center => "L_C",
            LossComponent::AdaptiveCenter => "L_AC",
        }
    }
}

impl fmt::Display for LossComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscriminantKind {
    Batch,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CenterKind {
    /// Centers follow the mini-batch rule with step `beta` after each
    /// optimizer step.
    MiniBatch {
        beta: f64,
    },
    Adaptive,
}

/// One weighted auxiliary loss and where it reads its features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxTerm<K> {
    pub kind: K,
    pub weight: f64,
    pub tap: TapPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub reduction: Reduction,
    pub discriminant: Option<AuxTerm<DiscriminantKind>>,
    pub center: Option<AuxTerm<CenterKind>>,
    /// Forgetting factor shared by every adaptive accumulator.
    pub alpha: f64,
    pub epsilon: f64,
    /// Zero the adaptive accumulators at the start of every epoch.
    pub reset_each_epoch: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            reduction: Reduction::Mean,
            discriminant: None,
            center: None,
            alpha: 0.99,
            epsilon: DEFAULT_EPSILON,
            reset_each_epoch: false,
        }
    }
}

impl ObjectiveConfig {
    /// Cross-entropy only.
    pub fn baseline() -> Self {
        ObjectiveConfig::default()
    }

    /// Adaptive discriminant at the logits and adaptive center loss at
    /// the hidden pre-activation.
    pub fn combined(lambda1: f64, lambda2: f64, alpha: f64) -> Self {
        ObjectiveConfig {
            discriminant: Some(AuxTerm {
                kind: DiscriminantKind::Adaptive,
                weight: lambda1,
                tap: TapPoint::Logits,
            }),
            center: Some(AuxTerm {
                kind: CenterKind::Adaptive,
                weight: lambda2,
                tap: TapPoint::HiddenPreact,
            }),
            alpha,
            ..ObjectiveConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LossError::Config(msg));
        if let Some(d) = &self.discriminant {
            if !(d.weight >= 0.0 && d.weight.is_finite()) {
                return bad(format!("discriminant weight {} must be >= 0", d.weight));
            }
        }
        if let Some(c) = &self.center {
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return bad(format!("center weight {} must be >= 0", c.weight));
            }
            if let CenterKind::MiniBatch { beta } = c.kind {
                if !(0.0..=1.0).contains(&beta) {
                    return bad(format!("beta {beta} must lie in [0, 1]"));
                }
            }
        }
        if self.uses_alpha() {
            Alpha::new(self.alpha)?;
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be >= 0", self.epsilon));
        }
        Ok(())
    }

    fn uses_alpha(&self) -> bool {
        matches!(
            self.discriminant,
            Some(AuxTerm {
                kind: DiscriminantKind::Adaptive,
                ..
            })
        ) || matches!(
            self.center,
            Some(AuxTerm {
                kind: CenterKind::Adaptive,
                ..
            })
        )
    }

    /// Tap points the attached network has to expose.
    pub fn required_taps(&self) -> Vec<TapPoint> {
        let mut taps = vec![TapPoint::Logits];
        taps.extend(self.discriminant.map(|d| d.tap));
        taps.extend(self.center.map(|c| c.tap));
        taps.sort();
        taps.dedup();
        taps
    }
}

/// Loss values and tap-point gradients of one batch.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<LossComponent, f64>,
    pub gradients: BTreeMap<TapPoint, Tensor>,
    /// Output neurons whose target or non-target group was empty in the
    /// batch (batch discriminant only).
    pub degenerate_neurons: Vec<usize>,
}

impl LossReport {
    pub fn component(&self, c: LossComponent) -> Option<f64> {
        self.components.get(&c).copied()
    }
}

fn tap(taps: &Taps, point: TapPoint) -> Result<&Tensor> {
    taps.get(point).ok_or(LossError::MissingTap(point.name()))
}

/// The objective together with the state its adaptive terms carry between
/// batches.
#[derive(Clone, Debug)]
pub struct Objective {
    config: ObjectiveConfig,
    neuron_stats: Option<NeuronClassStats>,
    centers: Option<CenterBank>,
}

impl Objective {
    /// `classes` output neurons; `center_dim` is the width of the center
    /// tap (ignored without a center term).
    pub fn new(config: ObjectiveConfig, classes: usize, center_dim: usize) -> Result<Self> {
        config.validate()?;
        let neuron_stats = match config.discriminant {
            Some(AuxTerm {
                kind: DiscriminantKind::Adaptive,
                ..
            }) => Some(NeuronClassStats::new(classes, Alpha::new(config.alpha)?)),
            _ => None,
        };
        let centers = match config.center {
            Some(c) => {
                let update = match c.kind {
                    CenterKind::Adaptive => CenterUpdate::Adaptive(Alpha::new(config.alpha)?),
                    CenterKind::MiniBatch { beta } => CenterUpdate::MiniBatch { beta },
                };
                Some(CenterBank::new(classes, center_dim, update)?)
            }
            None => None,
        };
        Ok(Objective {
            config,
            neuron_stats,
            centers,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn neuron_stats(&self) -> Option<&NeuronClassStats> {
        self.neuron_stats.as_ref()
    }

    pub fn centers(&self) -> Option<&CenterBank> {
        self.centers.as_ref()
    }

    pub fn restore_state(&mut self, stats: Option<NeuronClassStats>, centers: Option<CenterBank>) {
        if stats.is_some() {
            self.neuron_stats = stats;
        }
        if centers.is_some() {
            self.centers = centers;
        }
    }

    pub fn start_epoch(&mut self) {
        if self.config.reset_each_epoch {
            if let Some(s) = &mut self.neuron_stats {
                s.reset();
            }
            if let Some(CenterKind::Adaptive) = self.config.center.map(|c| c.kind) {
                if let Some(b) = &mut self.centers {
                    b.reset();
                }
            }
        }
    }

    /// Evaluates the objective on one batch, advancing adaptive state.
    pub fn evaluate(&mut self, taps: &Taps, labels: &Tensor) -> Result<LossReport> {
        self.evaluate_with_surrogate(taps, labels).map(|(r, _)| r)
    }

    /// Like [`Objective::evaluate`], also returning the differentiable
    /// function whose exact gradient the report carries.
    pub fn evaluate_with_surrogate(&mut self, taps: &Taps, labels: &Tensor) -> Result<(LossReport, Surrogate)> {
        let logits = tap(taps, TapPoint::Logits)?;
        let (ls, ls_grad) = softmax_cross_entropy(logits, labels, self.config.reduction)?;
        let mut report = LossReport {
            total: ls,
            components: BTreeMap::from([(LossComponent::Softmax, ls)]),
            gradients: BTreeMap::from([(TapPoint::Logits, ls_grad)]),
            degenerate_neurons: Vec::new(),
        };
        let mut surrogate = Surrogate {
            reduction: self.config.reduction,
            labels: labels.clone(),
            discriminant: None,
            center: None,
        };

        if let Some(term) = self.config.discriminant {
            let z = tap(taps, term.tap)?;
            let (component, value, grad) = match term.kind {
                DiscriminantKind::Batch => {
                    let out = discriminant_batch(z, labels, self.config.epsilon)?;
                    report.degenerate_neurons = out.degenerate_neurons;
                    surrogate.discriminant = Some((term, FrozenTerm::Batch(self.config.epsilon)));
                    (LossComponent::Discriminant, out.loss, out.grad)
                }
                DiscriminantKind::Adaptive => {
                    let stats = self.neuron_stats.as_mut().expect("created with the objective");
                    let out = adaptive_discriminant(z, labels, stats, self.config.epsilon)?;
                    surrogate.discriminant = Some((term, FrozenTerm::Adaptive(Box::new(out.frozen))));
                    (LossComponent::AdaptiveDiscriminant, out.loss, out.grad)
                }
            };
            add_term(&mut report, component, term.weight, term.tap, value, grad)?;
        }

        if let Some(term) = self.config.center {
            let x = tap(taps, term.tap)?;
            let bank = self.centers.as_mut().expect("created with the objective");
            let (component, out) = match term.kind {
                CenterKind::MiniBatch { .. } => (LossComponent::Center, center_loss(x, labels, bank)?),
                CenterKind::Adaptive => (LossComponent::AdaptiveCenter, adaptive_center_loss(x, labels, bank)?),
            };
            surrogate.center = Some((term, bank.clone()));
            add_term(&mut report, component, term.weight, term.tap, out.loss, out.grad)?;
        }
        Ok((report, surrogate))
    }

    /// Post-step hook: the mini-batch center rule runs after the optimizer
    /// step, using the batch's features from the forward pass.
    pub fn after_step(&mut self, taps: &Taps, labels: &Tensor) -> Result<()> {
        if let Some(AuxTerm {
            kind: CenterKind::MiniBatch { .. },
            tap: point,
            ..
        }) = self.config.center
        {
            let x = tap(taps, point)?;
            let classes = class_ids(labels)?;
            self.centers
                .as_mut()
                .expect("created with the objective")
                .update_minibatch(x, &classes)?;
        }
        Ok(())
    }
}

fn add_term(
    report: &mut LossReport,
    component: LossComponent,
    weight: f64,
    point: TapPoint,
    value: f64,
    grad: Tensor,
) -> Result<()> {
    report.components.insert(component, value);
    report.total += weight * value;
    match report.gradients.get_mut(&point) {
        Some(g) => g.axpy(weight, &grad)?,
        None => {
            report.gradients.insert(point, grad.mul(weight)?);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum FrozenTerm {
    Batch(f64),
    Adaptive(Box<FrozenDiscriminant>),
}

/// The objective as a pure function of the tap features, with adaptive
/// statistics and centers frozen at the values one evaluation used.
#[derive(Clone, Debug)]
pub struct Surrogate {
    reduction: Reduction,
    labels: Tensor,
    discriminant: Option<(AuxTerm<DiscriminantKind>, FrozenTerm)>,
    center: Option<(AuxTerm<CenterKind>, CenterBank)>,
}

impl Surrogate {
    pub fn value(&self, taps: &Taps) -> Result<f64> {
        let (mut total, _) = softmax_cross_entropy(tap(taps, TapPoint::Logits)?, &self.labels, self.reduction)?;
        if let Some((term, frozen)) = &self.discriminant {
            let z = tap(taps, term.tap)?;
            let v = match frozen {
                FrozenTerm::Batch(eps) => discriminant_batch(z, &self.labels, *eps)?.loss,
                FrozenTerm::Adaptive(f) => f.value(z)?,
            };
            total += term.weight * v;
        }
        if let Some((term, bank)) = &self.center {
            total += term.weight * center_loss(tap(taps, term.tap)?, &self.labels, bank)?.loss;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::one_hot;
    use crate::rng::Rng;

    fn random_taps(rng: &mut Rng, n: usize, k: usize, d: usize) -> Taps {
        let mut taps = Taps::default();
        taps.insert(
            TapPoint::Logits,
            Tensor::new(vec![n, k], (0..n * k).map(|_| rng.normal()).collect()).unwrap(),
        );
        taps.insert(
            TapPoint::HiddenPreact,
            Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap(),
        );
        taps
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let mut rng = Rng::new(1);
        let taps = random_taps(&mut rng, 6, 3, 4);
        let labels = one_hot(&[0, 1, 2, 0, 1, 2], 3);
        let mut obj = Objective::new(ObjectiveConfig::combined(0.0, 0.0, 0.99), 3, 4).unwrap();
        let report = obj.evaluate(&taps, &labels).unwrap();
        let (ls, g) = softmax_cross_entropy(taps.get(TapPoint::Logits).unwrap(), &labels, Reduction::Mean).unwrap();
        assert_eq!(report.total.to_bits(), ls.to_bits());
        assert_eq!(report.gradients[&TapPoint::Logits], g);
        assert!(report.gradients[&TapPoint::HiddenPreact]
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn total_is_weighted_component_sum() {
        let mut rng = Rng::new(2);
        let taps = random_taps(&mut rng, 8, 4, 5);
        let labels = one_hot(&[0, 1, 2, 3, 3, 2, 1, 0], 4);
        let mut obj = Objective::new(ObjectiveConfig::combined(0.001, 1.0, 0.99), 4, 5).unwrap();
        let r = obj.evaluate(&taps, &labels).unwrap();
        let expect = r.components[&LossComponent::Softmax]
            + 0.001 * r.components[&LossComponent::AdaptiveDiscriminant]
            + 1.0 * r.components[&LossComponent::AdaptiveCenter];
        assert!((r.total - expect).abs() < 1e-12);
    }

    #[test]
    fn paper_combined_setting() {
        let cfg = ObjectiveConfig::combined(0.001, 1.0, 0.99);
        let d = cfg.discriminant.unwrap();
        let c = cfg.center.unwrap();
        assert_eq!(
            (d.kind, d.weight, d.tap),
            (DiscriminantKind::Adaptive, 0.001, TapPoint::Logits)
        );
        assert_eq!(
            (c.kind, c.weight, c.tap),
            (CenterKind::Adaptive, 1.0, TapPoint::HiddenPreact)
        );
        assert_eq!(cfg.alpha, 0.99);
    }

    #[test]
    fn missing_tap_is_an_error() {
        let mut taps = Taps::default();
        taps.insert(TapPoint::Logits, Tensor::zeros(vec![2, 2]));
        let mut obj = Objective::new(ObjectiveConfig::combined(0.1, 0.1, 0.9), 2, 3).unwrap();
        assert!(matches!(
            obj.evaluate(&taps, &one_hot(&[0, 1], 2)),
            Err(LossError::MissingTap("hidden_preact"))
        ));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ObjectiveConfig::combined(-1.0, 1.0, 0.9);
        assert!(cfg.validate().is_err());
        cfg = ObjectiveConfig::combined(1.0, 1.0, 1.0);
        assert!(cfg.validate().is_err());
        cfg = ObjectiveConfig::baseline();
        cfg.center = Some(AuxTerm {
            kind: CenterKind::MiniBatch { beta: 2.0 },
            weight: 1.0,
            tap: TapPoint::HiddenPreact,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn surrogate_matches_report_at_base() {
        let mut rng = Rng::new(9);
        let taps = random_taps(&mut rng, 5, 3, 2);
        let labels = one_hot(&[0, 1, 2, 2, 1], 3);
        let mut obj = Objective::new(ObjectiveConfig::combined(0.5, 0.7, 0.9), 3, 2).unwrap();
        let (r, s) = obj.evaluate_with_surrogate(&taps, &labels).unwrap();
        assert!((s.value(&taps).unwrap() - r.total).abs() < 1e-12);
    }

    #[test]
    fn minibatch_centers_move_after_step() {
        let mut cfg = ObjectiveConfig::baseline();
        cfg.center = Some(AuxTerm {
            kind: CenterKind::MiniBatch { beta: 1.0 },
            weight: 1.0,
            tap: TapPoint::HiddenPreact,
        });
        let mut obj = Objective::new(cfg, 2, 2).unwrap();
        let mut taps = Taps::default();
        taps.insert(TapPoint::Logits, Tensor::zeros(vec![1, 2]));
        taps.insert(TapPoint::HiddenPreact, Tensor::from_rows(&[&[2.0, 2.0]]).unwrap());
        let labels = one_hot(&[1], 2);
        obj.evaluate(&taps, &labels).unwrap();
        assert_eq!(obj.centers().unwrap().center(1), &[0.0, 0.0]);
        obj.after_step(&taps, &labels).unwrap();
        assert_eq!(obj.centers().unwrap().center(1), &[1.0, 1.0]);
    }
}
