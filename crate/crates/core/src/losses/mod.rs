//! Loss functions with their input gradients.
//!
//! Label matrices are one-hot `N x K` tensors. Adaptive losses take their
//! running statistics by `&mut` and advance them one sample at a time in
//! batch order before the loss is evaluated; their gradients treat the
//! statistics as constants (see [`FrozenDiscriminant`]).

mod center;
mod discriminant;
mod objective;
mod softmax;

pub use center::{adaptive_center_loss, center_loss, CenterOutput};
pub use discriminant::{
    adaptive_discriminant, discriminant_batch, discriminant_ratio, AdaptiveDiscriminantOutput, DiscriminantOutput,
    FrozenDiscriminant,
};
pub use objective::{
    AuxTerm, CenterKind, DiscriminantKind, LossComponent, LossReport, Objective, ObjectiveConfig, Surrogate,
};
pub use softmax::{softmax, softmax_cross_entropy, Reduction};

use thiserror::Error;

use crate::stats::StatsError;
use crate::tensor::{Tensor, TensorError};

/// Default guard added to every variance denominator.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label row {row} is not one-hot")]
    Labels { row: usize },
    #[error("shape mismatch: {what} {left:?} vs {right:?}")]
    Shape {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("the batch discriminant criterion needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tap point `{0}` was not produced by the network")]
    MissingTap(&'static str),
    #[error("invalid objective: {0}")]
    Config(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Inputs with one-hot labels.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Tensor,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let (rows, _) = labels.dims2()?;
        if rows != n {
            return Err(LossError::Shape {
                what: "batch rows",
                left: inputs.shape().to_vec(),
                right: labels.shape().to_vec(),
            });
        }
        class_ids(&labels)?;
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        class_ids(&self.labels).expect("validated at construction")
    }
}

/// One-hot encoding of class ids.
pub fn one_hot(classes: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![classes.len(), k]);
    for (i, &c) in classes.iter().enumerate() {
        t.row_mut(i)[c] = 1.0;
    }
    t
}

/// Class index of every row of a one-hot matrix.
pub fn class_ids(labels: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = labels.dims2()?;
    (0..n)
        .map(|i| {
            let row = labels.row(i);
            let mut hot = None;
            for (k, &v) in row.iter().enumerate() {
                if v == 1.0 && hot.is_none() {
                    hot = Some(k);
                } else if v != 0.0 {
                    return Err(LossError::Labels { row: i });
                }
            }
            hot.ok_or(LossError::Labels { row: i })
        })
        .collect()
}

fn same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape {
            what,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_value(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite(what))
    }
}

fn check_grad(t: &Tensor, what: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}
