//! Fixed layer chains with manual backpropagation and named tap points.

mod arch;
pub mod layers;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rng::{streams, Rng};
use crate::tensor::{Tensor, TensorError};

pub use arch::{ArchitectureId, ArchitectureSpec};
pub use layers::{Cache, Layer, Param};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{layer}: expected input {expected}, got {actual:?}")]
    Shape {
        layer: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("{0} used before any training batch")]
    Uninitialized(&'static str),
    #[error("backward on {0} without a cached forward pass")]
    BackwardWithoutForward(&'static str),
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("gradient for tap {tap} has shape {actual:?}, expected {expected:?}")]
    TapGradient {
        tap: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("state tensor {0:?} missing or mismatched")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Tap points paired with the index of the layer whose output they read.
type TapIndex = Vec<(TapPoint, usize)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named position in the chain where auxiliary losses read features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapPoint {
    /// Final layer output, before the softmax.
    Logits,
    /// Output of the hidden-feature FC layer, before its ReLU.
    HiddenPreact,
}

impl TapPoint {
    pub const ALL: [TapPoint; 2] = [TapPoint::Logits, TapPoint::HiddenPreact];

    pub fn name(self) -> &'static str {
        match self {
            TapPoint::Logits => "logits",
            TapPoint::HiddenPreact => "hidden_preact",
        }
    }
}

impl std::fmt::Display for TapPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Activations captured at tap points during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Taps(BTreeMap<TapPoint, Tensor>);

impl Taps {
    pub fn insert(&mut self, point: TapPoint, value: Tensor) {
        self.0.insert(point, value);
    }

    pub fn get(&self, point: TapPoint) -> Option<&Tensor> {
        self.0.get(&point)
    }

    pub fn logits(&self) -> &Tensor {
        self.0.get(&TapPoint::Logits).expect("forward always records logits")
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchitectureSpec,
    seed: u64,
    layers: Vec<Layer>,
    caches: Vec<Cache>,
    taps: TapIndex,
    dropout_rng: Rng,
}

impl Network {
    /// Builds and initializes the chain described by `spec`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, streams::INIT);
        let (layers, taps) = spec.layers(&mut rng)?;
        let net = Network {
            spec: spec.clone(),
            seed,
            caches: vec![Cache::None; layers.len()],
            layers,
            taps,
            dropout_rng: Rng::derive(seed, streams::DROPOUT),
        };
        net.layer_shapes()?;
        Ok(net)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Index of the layer whose output is `point`.
    pub fn tap_layer(&self, point: TapPoint) -> usize {
        self.taps
            .iter()
            .find(|(p, _)| *p == point)
            .map(|&(_, i)| i)
            .expect("builders register every tap point")
    }

    /// Declared per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.spec.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.spec.input {
            return Err(NetworkError::Shape {
                layer: "input",
                expected: format!(
                    "[N, {}, {}, {}]",
                    self.spec.input[0], self.spec.input[1], self.spec.input[2]
                ),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass that caches activations for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Taps> {
        self.check_input(x)?;
        let mut taps = Taps::default();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (y, cache) = layer.forward_owned(h, mode, &mut self.dropout_rng)?;
            self.caches[i] = cache;
            h = y;
            for &(p, at) in &self.taps {
                if at == i {
                    taps.insert(p, h.clone());
                }
            }
        }
        Ok(taps)
    }

    /// Evaluation-mode forward pass over shared state.
    pub fn infer(&self, x: &Tensor) -> Result<Taps> {
        self.check_input(x)?;
        let mut taps = Taps::default();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer_owned(h)?;
            for &(p, at) in &self.taps {
                if at == i {
                    taps.insert(p, h.clone());
                }
            }
        }
        Ok(taps)
    }

    /// Backpropagates loss gradients injected at tap points and fills every
    /// parameter gradient. Returns the gradient with respect to the input.
    pub fn backward(&mut self, grads: &BTreeMap<TapPoint, Tensor>) -> Result<Tensor> {
        let mut grad: Option<Tensor> = None;
        for i in (0..self.layers.len()).rev() {
            for &(p, at) in &self.taps {
                if at != i {
                    continue;
                }
                let Some(g) = grads.get(&p) else { continue };
                grad = Some(match grad {
                    None => g.clone(),
                    Some(acc) => {
                        if acc.shape() != g.shape() {
                            return Err(NetworkError::TapGradient {
                                tap: p.name(),
                                expected: acc.shape().to_vec(),
                                actual: g.shape().to_vec(),
                            });
                        }
                        acc.add(g)?
                    }
                });
            }
            let g = match grad.take() {
                Some(g) => g,
                // Nothing flows back past this point yet.
                None => {
                    for p in self.layers[i].params_mut() {
                        p.grad.data_mut().fill(0.0);
                    }
                    continue;
                }
            };
            grad = Some(self.layers[i].backward_owned(&self.caches[i], g)?);
        }
        grad.ok_or(NetworkError::BackwardWithoutForward("network"))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Every tensor needed to restore the network: parameters and
    /// normalization running statistics.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, p) in layer.params().iter().enumerate() {
                out.push((format!("layer{i}.param{j}"), p.value.clone()));
            }
            if let Layer::BatchNorm(b) = layer {
                out.push((format!("layer{i}.running_mean"), b.running_mean.clone()));
                out.push((format!("layer{i}.running_var"), b.running_var.clone()));
                out.push((
                    format!("layer{i}.initialized"),
                    Tensor::scalar(if b.initialized { 1.0 } else { 0.0 }),
                ));
            }
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        fn take(tensors: &BTreeMap<String, Tensor>, name: String, shape: &[usize]) -> Result<Tensor> {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape => Ok(t.clone()),
                _ => Err(NetworkError::State(name)),
            }
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (j, p) in layer.params_mut().into_iter().enumerate() {
                p.value = take(tensors, format!("layer{i}.param{j}"), p.value.shape())?;
            }
            if let Layer::BatchNorm(b) = layer {
                b.running_mean = take(tensors, format!("layer{i}.running_mean"), b.running_mean.shape())?;
                b.running_var = take(tensors, format!("layer{i}.running_var"), b.running_var.shape())?;
                b.initialized = take(tensors, format!("layer{i}.initialized"), &[])?.data()[0] != 0.0;
            }
        }
        Ok(())
    }
}
