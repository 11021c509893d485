//! SGD with momentum, coupled weight decay, and a step learning-rate schedule.

use thiserror::Error;

use crate::network::Param;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter {index} has shape {actual:?}, velocity has {expected:?}")]
    Shape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Divide the base rate by `factor` every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub factor: f64,
    pub period: usize,
}

impl StepSchedule {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.period).unwrap_or(0);
        self.base_lr / self.factor.powi(drops as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: StepSchedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.01,
            schedule: StepSchedule {
                base_lr: 0.01,
                factor: 10.0,
                period: 50,
            },
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.base_lr > 0.0 && s.base_lr.is_finite()) {
            return Err(OptimError::Config(format!(
                "learning rate {} must be positive",
                s.base_lr
            )));
        }
        if !(s.factor >= 1.0 && s.factor.is_finite()) {
            return Err(OptimError::Config(format!("drop factor {} must be >= 1", s.factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(OptimError::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[&Param]) -> Self {
        Sgd {
            config,
            velocities: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    pub fn set_velocities(&mut self, velocities: Vec<Tensor>) -> Result<()> {
        check_shapes(&self.velocities, velocities.iter().map(|v| v.shape()))?;
        self.velocities = velocities;
        Ok(())
    }

    /// `g' = g + wd*w; v = momentum*v + g'; w -= lr*v`, applied to every
    /// parameter. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        check_shapes(&self.velocities, params.iter().map(|p| p.value.shape()))?;
        if let Some(i) = params.iter().position(|p| !p.grad.is_finite()) {
            return Err(OptimError::NonFiniteGradient(i));
        }
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            let Param { value, grad } = &mut **p;
            for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                *v = m * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

fn check_shapes<'a>(velocities: &[Tensor], shapes: impl ExactSizeIterator<Item = &'a [usize]>) -> Result<()> {
    if shapes.len() != velocities.len() {
        return Err(OptimError::ParamCount {
            expected: velocities.len(),
            actual: shapes.len(),
        });
    }
    for (index, (v, s)) in velocities.iter().zip(shapes).enumerate() {
        if v.shape() != s {
            return Err(OptimError::Shape {
                index,
                expected: v.shape().to_vec(),
                actual: s.to_vec(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn param(w: &[f64], g: &[f64]) -> Param {
        Param {
            value: Tensor::from_vec(w.to_vec()).unwrap(),
            grad: Tensor::from_vec(g.to_vec()).unwrap(),
        }
    }

    fn config(momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig {
            momentum,
            weight_decay,
            ..SgdConfig::default()
        }
    }

    #[test]
    fn weight_decay_only_step() {
        let mut p = param(&[1.0], &[0.0]);
        let mut opt = Sgd::new(config(0.9, 0.01), &[&p]);
        opt.step(&mut [&mut p], 0.01).unwrap();
        assert!((opt.velocities()[0].data()[0] - 0.01).abs() < 1e-15);
        assert!((p.value.data()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn velocity_persists_without_gradient() {
        let mut p = param(&[0.0], &[1.0]);
        let mut opt = Sgd::new(config(0.5, 0.0), &[&p]);
        opt.step(&mut [&mut p], 1.0).unwrap();
        assert_eq!(p.value.data(), &[-1.0]);
        p.grad = Tensor::from_vec(vec![0.0]).unwrap();
        opt.step(&mut [&mut p], 1.0).unwrap();
        assert_eq!(opt.velocities()[0].data(), &[0.5]);
        assert_eq!(p.value.data(), &[-1.5]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = param(&[1.0, 2.0], &[0.5, 0.0]);
        p.grad.data_mut()[1] = f64::NAN;
        let mut opt = Sgd::new(config(0.9, 0.01), &[&p]);
        assert!(matches!(
            opt.step(&mut [&mut p], 0.1),
            Err(OptimError::NonFiniteGradient(0))
        ));
        assert_eq!(p.value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn schedule_steps() {
        let s = SgdConfig::default().schedule;
        assert_eq!(s.lr_at_epoch(0), 0.01);
        assert_eq!(s.lr_at_epoch(49), 0.01);
        assert!((s.lr_at_epoch(50) - 0.001).abs() < 1e-18);
        assert!((s.lr_at_epoch(100) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn invalid_settings() {
        assert!(config(1.0, 0.0).validate().is_err());
        assert!(config(0.9, -1.0).validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn plain_descent(w in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-4f64..1.0, seed in 0u64..100) {
            let g: Vec<f64> = w.iter().enumerate().map(|(i, v)| v * 0.3 - (i as f64 + seed as f64) * 0.01).collect();
            let mut p = param(&w, &g);
            let mut opt = Sgd::new(config(0.0, 0.0), &[&p]);
            opt.step(&mut [&mut p], lr).unwrap();
            for ((after, before), g) in p.value.data().iter().zip(&w).zip(&g) {
                prop_assert_eq!(*after, before - lr * g);
            }
        }

        #[test]
        fn schedule_non_increasing(e in 0usize..1000, period in 1usize..200) {
            let s = StepSchedule { base_lr: 0.01, factor: 10.0, period };
            prop_assert!(s.lr_at_epoch(e + 1) <= s.lr_at_epoch(e));
        }
    }
}
