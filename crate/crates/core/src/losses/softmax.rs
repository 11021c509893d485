use super::{check_value, class_ids, same_shape, Result};
use crate::tensor::Tensor;

/// How per-sample cross-entropy terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Average over the batch; keeps auxiliary weights batch-size free.
    #[default]
    Mean,
    /// Plain sum over the batch.
    Sum,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    let (n, k) = z.dims2()?;
    let mut out = Tensor::zeros(vec![n, k]);
    for i in 0..n {
        softmax_row(z.row(i), out.row_mut(i));
    }
    Ok(out)
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax cross-entropy `-sum_i sum_k t_ik log y_ik` and its gradient
/// `y - t` (both divided by `N` under [`Reduction::Mean`]).
pub fn softmax_cross_entropy(z: &Tensor, t: &Tensor, reduction: Reduction) -> Result<(f64, Tensor)> {
    same_shape("logits/labels", z, t)?;
    let classes = class_ids(t)?;
    let (n, k) = z.dims2()?;
    let scale = match reduction {
        Reduction::Mean if n > 0 => 1.0 / n as f64,
        _ => 1.0,
    };
    let mut grad = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        let row = z.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        // -log y_c computed in log space so confident rows stay exact.
        loss += log_total - (row[c] - max);
        let g = grad.row_mut(i);
        softmax_row(row, g);
        g[c] -= 1.0;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((check_value(loss * scale, "softmax cross-entropy")?, grad))
}
