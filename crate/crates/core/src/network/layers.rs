//! Layer kernels. Activations are batch-first; image tensors are
//! `N x H x W x C`.

use super::{Mode, NetworkError, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Mat, Tensor};

/// A trainable tensor and the gradient of the last backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param { value, grad }
    }
}

/// Forward-pass values a layer needs for its backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    None,
    Input(Tensor),
    Mask(Vec<bool>),
    Scale(Vec<f64>),
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Norm {
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Shape(Vec<usize>),
}

fn shape_err(layer: &'static str, expected: String, actual: &[usize]) -> NetworkError {
    NetworkError::Shape {
        layer,
        expected,
        actual: actual.to_vec(),
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Target element count of one im2col scratch block.
const COL_BLOCK: usize = 1 << 18;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            weight: Param::new(he_uniform(vec![inputs, outputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(vec![outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.inputs()] {
            return Err(shape_err("dense", format!("[{}]", self.inputs()), input));
        }
        Ok(vec![self.outputs()])
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if f != self.inputs() {
            return Err(shape_err("dense", format!("[N, {}]", self.inputs()), x.shape()));
        }
        let m = self.outputs();
        let mut out = vec![0.0; n * m];
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            n,
            f,
            m,
            Mat::new(x.data(), false),
            Mat::new(self.weight.value.data(), false),
            &mut out,
            true,
        );
        Ok(Tensor::new(vec![n, m], out)?)
    }

    fn backward(&mut self, input: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let (n, f) = input.dims2()?;
        let m = self.outputs();
        gemm(
            f,
            n,
            m,
            Mat::new(input.data(), true),
            Mat::new(grad.data(), false),
            self.weight.grad.data_mut(),
            false,
        );
        let db = self.bias.grad.data_mut();
        db.fill(0.0);
        for row in grad.data().chunks_exact(m) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = vec![0.0; n * f];
        gemm(
            n,
            m,
            f,
            Mat::new(grad.data(), false),
            Mat::new(self.weight.value.data(), true),
            &mut dx,
            false,
        );
        Ok(Tensor::new(vec![n, f], dx)?)
    }
}

/// Square-kernel convolution with stride 1 and symmetric zero padding.
/// Weights are stored as `(k*k*C_in) x C_out` with rows ordered by
/// (kernel row, kernel column, input channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub padding: usize,
    pub in_channels: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Conv2d {
            weight: Param::new(he_uniform(vec![fan_in, out_channels], fan_in, rng)),
            bias: Param::new(Tensor::zeros(vec![out_channels])),
            kernel,
            padding,
            in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = (h + 2 * self.padding).checked_sub(self.kernel)? + 1;
        let wo = (w + 2 * self.padding).checked_sub(self.kernel)? + 1;
        Some((ho, wo))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [h, w, c] if c == self.in_channels => {
                let (ho, wo) = self
                    .out_hw(h, w)
                    .ok_or_else(|| shape_err("conv2d", format!("spatial size >= {}", self.kernel), input))?;
                Ok(vec![ho, wo, self.out_channels()])
            }
            _ => Err(shape_err("conv2d", format!("[H, W, {}]", self.in_channels), input)),
        }
    }

    fn geometry(&self, shape: &[usize]) -> Result<Geometry> {
        let &[n, h, w, c] = shape else {
            return Err(shape_err("conv2d", "[N, H, W, C]".into(), shape));
        };
        self.output_shape(&[h, w, c])?;
        let (ho, wo) = self.out_hw(h, w).expect("checked");
        Ok(Geometry { n, h, w, c, ho, wo })
    }

    /// Samples per im2col block, keeping the scratch buffer small enough
    /// to be reused instead of mapped and unmapped every batch.
    fn block(&self, g: &Geometry) -> usize {
        (COL_BLOCK / (g.ho * g.wo * self.weight.value.shape()[0]).max(1)).max(1)
    }

    /// Unfolds samples `b0..b1` into `cols`, one row per output pixel.
    fn im2col(&self, x: &[f64], g: &Geometry, b0: usize, b1: usize, cols: &mut Vec<f64>) {
        let k = self.kernel;
        let row_len = k * k * g.c;
        cols.clear();
        cols.resize((b1 - b0) * g.ho * g.wo * row_len, 0.0);
        let pad = self.padding as isize;
        for b in b0..b1 {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = (((b - b0) * g.ho + oy) * g.wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                            let dst = row + (ky * k + kx) * g.c;
                            cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds column gradients for samples `b0..b1` back into `dx`.
    fn col2im(&self, dcols: &[f64], g: &Geometry, b0: usize, b1: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let row_len = k * k * g.c;
        let pad = self.padding as isize;
        for b in b0..b1 {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = (((b - b0) * g.ho + oy) * g.wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                            let src = row + (ky * k + kx) * g.c;
                            for (d, s) in dx[dst..dst + g.c].iter_mut().zip(&dcols[src..src + g.c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x.shape())?;
        let co = self.out_channels();
        let row_len = self.weight.value.shape()[0];
        let per = g.ho * g.wo;
        let mut out = vec![0.0; g.n * per * co];
        for row in out.chunks_exact_mut(co) {
            row.copy_from_slice(self.bias.value.data());
        }
        let block = self.block(&g);
        let mut cols = Vec::new();
        for b0 in (0..g.n).step_by(block) {
            let b1 = (b0 + block).min(g.n);
            self.im2col(x.data(), &g, b0, b1, &mut cols);
            gemm(
                (b1 - b0) * per,
                row_len,
                co,
                Mat::new(&cols, false),
                Mat::new(self.weight.value.data(), false),
                &mut out[b0 * per * co..b1 * per * co],
                true,
            );
        }
        Ok(Tensor::new(vec![g.n, g.ho, g.wo, co], out)?)
    }

    fn backward(&mut self, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x.shape())?;
        let co = self.out_channels();
        let row_len = self.weight.value.shape()[0];
        let per = g.ho * g.wo;
        if grad.shape() != [g.n, g.ho, g.wo, co] {
            return Err(shape_err(
                "conv2d backward",
                format!("{:?}", [g.n, g.ho, g.wo, co]),
                grad.shape(),
            ));
        }
        let db = self.bias.grad.data_mut();
        db.fill(0.0);
        for row in grad.data().chunks_exact(co) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        self.weight.grad.data_mut().fill(0.0);
        let mut dx = vec![0.0; x.len()];
        let block = self.block(&g);
        let (mut cols, mut dcols) = (Vec::new(), Vec::new());
        for b0 in (0..g.n).step_by(block) {
            let b1 = (b0 + block).min(g.n);
            let rows = (b1 - b0) * per;
            let gy = &grad.data()[b0 * per * co..b1 * per * co];
            self.im2col(x.data(), &g, b0, b1, &mut cols);
            gemm(
                row_len,
                rows,
                co,
                Mat::new(&cols, true),
                Mat::new(gy, false),
                self.weight.grad.data_mut(),
                true,
            );
            dcols.clear();
            dcols.resize(rows * row_len, 0.0);
            gemm(
                rows,
                co,
                row_len,
                Mat::new(gy, false),
                Mat::new(self.weight.value.data(), true),
                &mut dcols,
                false,
            );
            self.col2im(&dcols, &g, b0, b1, &mut dx);
        }
        Ok(Tensor::new(x.shape().to_vec(), dx)?)
    }
}

/// `max(0, x)`; the derivative at exactly zero is zero.
pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(grad: &Tensor, input: &Tensor) -> Tensor {
    let data = grad
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.shape().to_vec(), data).expect("same shape")
}

fn relu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        if v.is_nan() || *v <= 0.0 {
            *v = 0.0;
        }
    }
}

fn flatten(x: Tensor) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let per = x.len().checked_div(n).unwrap_or(0);
    Ok(x.into_shape(vec![n, per])?)
}

fn check_len(grad: &Tensor, len: usize) -> Result<()> {
    if grad.len() != len {
        return Err(NetworkError::Shape {
            layer: "gradient",
            expected: format!("{len} elements"),
            actual: grad.shape().to_vec(),
        });
    }
    Ok(())
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped;
/// ties go to the first maximal element in row-major window order.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[n, h, w, c] = x.shape() else {
        return Err(shape_err("maxpool2x2", "[N, H, W, C]".into(), x.shape()));
    };
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(shape_err("maxpool2x2", "H, W >= 2".into(), x.shape()));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut argmax = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let off = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if best == usize::MAX || xd[off] > best_v {
                                best = off;
                                best_v = xd[off];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, ho, wo, c], out)?, argmax))
}

pub fn maxpool_backward(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        d[i] += g;
    }
    Ok(dx)
}

/// Batch normalization over the last (channel) axis; every other axis
/// counts as a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    /// Set once a training batch has populated the running statistics.
    pub initialized: bool,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Param::new(Tensor::filled(vec![channels], 1.0)),
            shift: Param::new(Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.channels()) {
            return Err(shape_err("batchnorm", format!("[..., {}]", self.channels()), input));
        }
        Ok(input.to_vec())
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(shape_err("batchnorm", format!("[..., {c}]"), x.shape()));
        }
        let m = x.len() / c;
        if m < 2 {
            return Err(shape_err(
                "batchnorm",
                "at least 2 values per channel".into(),
                x.shape(),
            ));
        }
        let mut mean = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, v) in x.data().iter().enumerate() {
            let ch = i % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            normalized[i] = xh;
            out[i] = self.scale.value.data()[ch] * xh + self.shift.value.data()[ch];
        }

        let unbias = m as f64 / (m as f64 - 1.0);
        let mom = if self.initialized { self.momentum } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - mom) * *rm + mom * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - mom) * *rv + mom * var[ch] * unbias;
        }
        self.initialized = true;
        Ok((Tensor::new(x.shape().to_vec(), out)?, normalized, inv_std))
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if !self.initialized {
            return Err(NetworkError::Uninitialized("batchnorm running statistics"));
        }
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(shape_err("batchnorm", format!("[..., {c}]"), x.shape()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i % c;
                let inv = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
                self.scale.value.data()[ch] * (v - self.running_mean.data()[ch]) * inv + self.shift.value.data()[ch]
            })
            .collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }

    fn backward(&mut self, normalized: &[f64], inv_std: &[f64], grad: &Tensor) -> Result<Tensor> {
        let c = self.channels();
        let m = (grad.len() / c) as f64;
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        for (i, g) in grad.data().iter().enumerate() {
            dscale[i % c] += g * normalized[i];
            dshift[i % c] += g;
        }
        let gamma = self.scale.value.data();
        let dx = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let ch = i % c;
                // d xhat = g * gamma; sums of d xhat are gamma * dshift and
                // gamma * dscale.
                gamma[ch] * inv_std[ch] / m * (m * g - dshift[ch] - normalized[i] * dscale[ch])
            })
            .collect();
        self.scale.grad.data_mut().copy_from_slice(&dscale);
        self.shift.grad.data_mut().copy_from_slice(&dshift);
        Ok(Tensor::new(grad.shape().to_vec(), dx)?)
    }
}

/// Inverted dropout with keep probability `keep`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    pub keep: f64,
}

impl Dropout {
    pub const DEFAULT_KEEP: f64 = 0.5;

    fn forward_train(&self, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, Vec<f64>)> {
        let scale = 1.0 / self.keep;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.uniform() < self.keep { scale } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok((Tensor::new(x.shape().to_vec(), data)?, mask))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool2x2,
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten => "flatten",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => d.output_shape(input),
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::BatchNorm(b) => b.output_shape(input),
            Layer::MaxPool2x2 => match *input {
                [h, w, c] if h >= 2 && w >= 2 => Ok(vec![h / 2, w / 2, c]),
                _ => Err(shape_err("maxpool2x2", "[H>=2, W>=2, C]".into(), input)),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Cache)> {
        self.forward_owned(x.clone(), mode, rng)
    }

    /// Like [`Layer::forward`] but consumes the input, so caches keep it
    /// without a copy and elementwise layers work in place.
    pub fn forward_owned(&mut self, x: Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Cache)> {
        match (self, mode) {
            (Layer::Dense(d), _) => Ok((d.forward(&x)?, Cache::Input(x))),
            (Layer::Conv2d(c), _) => Ok((c.forward(&x)?, Cache::Input(x))),
            (Layer::Relu, _) => {
                let mut x = x;
                let mask = x.data().iter().map(|&v| v > 0.0).collect();
                relu_in_place(&mut x);
                Ok((x, Cache::Mask(mask)))
            }
            (Layer::MaxPool2x2, _) => {
                let (y, argmax) = maxpool_forward(&x)?;
                Ok((
                    y,
                    Cache::Pool {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            (Layer::BatchNorm(b), Mode::Train) => {
                let (y, normalized, inv_std) = b.forward_train(&x)?;
                Ok((y, Cache::Norm { normalized, inv_std }))
            }
            (Layer::BatchNorm(b), Mode::Eval) => Ok((b.forward_eval(&x)?, Cache::None)),
            (Layer::Dropout(d), Mode::Train) => {
                let (y, mask) = d.forward_train(&x, rng)?;
                Ok((y, Cache::Scale(mask)))
            }
            (Layer::Dropout(_), Mode::Eval) => Ok((x, Cache::None)),
            (Layer::Flatten, _) => {
                let shape = x.shape().to_vec();
                let y = flatten(x)?;
                Ok((y, Cache::Shape(shape)))
            }
        }
    }

    /// Evaluation-mode forward pass without caching.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_owned(x.clone())
    }

    pub fn infer_owned(&self, x: Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => d.forward(&x),
            Layer::Conv2d(c) => c.forward(&x),
            Layer::Relu => {
                let mut x = x;
                relu_in_place(&mut x);
                Ok(x)
            }
            Layer::MaxPool2x2 => Ok(maxpool_forward(&x)?.0),
            Layer::BatchNorm(b) => b.forward_eval(&x),
            Layer::Dropout(_) => Ok(x),
            Layer::Flatten => flatten(x),
        }
    }

    /// Fills parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Cache, grad: &Tensor) -> Result<Tensor> {
        self.backward_owned(cache, grad.clone())
    }

    pub fn backward_owned(&mut self, cache: &Cache, grad: Tensor) -> Result<Tensor> {
        let mut grad = grad;
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => d.backward(x, &grad),
            (Layer::Conv2d(c), Cache::Input(x)) => c.backward(x, &grad),
            (Layer::Relu, Cache::Mask(mask)) => {
                check_len(&grad, mask.len())?;
                for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *g = 0.0;
                    }
                }
                Ok(grad)
            }
            (Layer::MaxPool2x2, Cache::Pool { argmax, input_shape }) => maxpool_backward(&grad, argmax, input_shape),
            (Layer::BatchNorm(b), Cache::Norm { normalized, inv_std }) => b.backward(normalized, inv_std, &grad),
            (Layer::Dropout(_), Cache::Scale(mask)) => {
                check_len(&grad, mask.len())?;
                for (g, m) in grad.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
                Ok(grad)
            }
            (Layer::Flatten, Cache::Shape(shape)) => Ok(grad.into_shape(shape.clone())?),
            (layer, _) => Err(NetworkError::BackwardWithoutForward(layer.kind())),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.scale, &b.shift],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.scale, &mut b.shift],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    /// Checks input and parameter gradients of `layer` against central
    /// differences of `sum(w * layer(x))` for a fixed random `w`.
    fn check_layer(mut layer: Layer, x: Tensor, tol: f64) {
        const H: f64 = 1e-5;
        let mut rng = Rng::new(99);
        let mut dummy = Rng::new(0);
        let (y, cache) = layer.forward(&x, Mode::Train, &mut dummy).unwrap();
        let w = randn(&mut rng, y.shape().to_vec());
        let dx = layer.backward(&cache, &w).unwrap();
        let objective = |layer: &mut Layer, x: &Tensor| -> f64 {
            // Batchnorm running stats change on every call; they do not
            // enter the training-mode output.
            let (y, _) = layer.forward(x, Mode::Train, &mut Rng::new(0)).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= H;
            let num = (objective(&mut layer, &xp) - objective(&mut layer, &xm)) / (2.0 * H);
            let e = rel_err(dx.data()[i], num);
            assert!(
                e < tol,
                "{} input grad {i}: {} vs {num} ({e})",
                layer.kind(),
                dx.data()[i]
            );
        }
        let grads: Vec<Tensor> = layer.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let orig = layer.params()[pi].value.data()[i];
                layer.params_mut()[pi].value.data_mut()[i] = orig + H;
                let fp = objective(&mut layer, &x);
                layer.params_mut()[pi].value.data_mut()[i] = orig - H;
                let fm = objective(&mut layer, &x);
                layer.params_mut()[pi].value.data_mut()[i] = orig;
                let num = (fp - fm) / (2.0 * H);
                let e = rel_err(g.data()[i], num);
                assert!(
                    e < tol,
                    "{} param {pi}[{i}]: {} vs {num} ({e})",
                    layer.kind(),
                    g.data()[i]
                );
            }
        }
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(vec![-2.0, 3.0, 0.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 3.0, 0.0]);
        let g = Tensor::from_vec(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&g, &x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = Rng::new(5);
        let mut x = randn(&mut rng, vec![4, 6]);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        check_layer(Layer::Relu, x, 1e-6);
    }

    #[test]
    fn dense_gradients() {
        let mut rng = Rng::new(1);
        let layer = Layer::Dense(Dense::new(5, 3, &mut rng));
        check_layer(layer, randn(&mut rng, vec![4, 5]), 1e-4);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = Rng::new(2);
        for padding in [0, 1] {
            let layer = Layer::Conv2d(Conv2d::new(2, 3, 3, padding, &mut rng));
            check_layer(layer, randn(&mut rng, vec![2, 5, 4, 2]), 1e-4);
        }
    }

    #[test]
    fn maxpool_gradients() {
        let mut rng = Rng::new(3);
        check_layer(Layer::MaxPool2x2, randn(&mut rng, vec![2, 4, 6, 3]), 1e-4);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = Rng::new(4);
        let mut bn = BatchNorm::new(3);
        bn.scale.value = randn(&mut rng, vec![3]);
        bn.shift.value = randn(&mut rng, vec![3]);
        check_layer(Layer::BatchNorm(bn), randn(&mut rng, vec![2, 3, 2, 3]), 1e-4);
    }

    #[test]
    fn conv_shapes() {
        let mut rng = Rng::new(0);
        let conv = Conv2d::new(1, 32, 3, 1, &mut rng);
        assert_eq!(conv.output_shape(&[28, 28, 1]).unwrap(), vec![28, 28, 32]);
        let x = Tensor::zeros(vec![1, 28, 28, 1]);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 28, 28, 32]);
        let valid = Conv2d::new(3, 4, 3, 0, &mut rng);
        assert_eq!(valid.output_shape(&[6, 6, 3]).unwrap(), vec![4, 4, 4]);
        assert!(valid.output_shape(&[6, 6, 2]).is_err());
    }

    #[test]
    fn maxpool_shape_and_tie_break() {
        let (y, _) = maxpool_forward(&Tensor::zeros(vec![1, 28, 28, 2])).unwrap();
        assert_eq!(y.shape(), &[1, 14, 14, 2]);
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        let (y, argmax) = maxpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(argmax, vec![1]);
        let g = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let dx = maxpool_backward(&g, &argmax, x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = Rng::new(8);
        let x = randn(&mut rng, vec![3, 4]);
        let mut layer = Layer::Dropout(Dropout { keep: 0.5 });
        let (y, _) = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        let (y, cache) = layer.forward(&x, Mode::Train, &mut rng).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
        let dx = layer.backward(&cache, &Tensor::filled(vec![3, 4], 1.0)).unwrap();
        for (d, a) in dx.data().iter().zip(y.data()) {
            assert_eq!(*d == 0.0, *a == 0.0);
        }
    }

    #[test]
    fn batchnorm_normalizes_and_guards_eval() {
        let mut rng = Rng::new(6);
        let x = randn(&mut rng, vec![50, 3]).mul(4.0).unwrap().add(2.0).unwrap();
        let mut layer = Layer::BatchNorm(BatchNorm::new(3));
        assert!(matches!(
            layer.forward(&x, Mode::Eval, &mut rng),
            Err(NetworkError::Uninitialized(_))
        ));
        let (y, _) = layer.forward(&x, Mode::Train, &mut rng).unwrap();
        for ch in 0..3 {
            let col: Vec<f64> = (0..50).map(|i| y.data()[i * 3 + ch]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert!(layer.forward(&x, Mode::Eval, &mut rng).is_ok());
    }

    #[test]
    fn backward_requires_forward_cache() {
        let mut rng = Rng::new(0);
        let mut layer = Layer::Dense(Dense::new(2, 2, &mut rng));
        assert!(matches!(
            layer.backward(&Cache::None, &Tensor::zeros(vec![1, 2])),
            Err(NetworkError::BackwardWithoutForward("dense"))
        ));
    }
}
