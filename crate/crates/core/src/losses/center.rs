use super::{check_grad, check_value, class_ids, LossError, Result};
use crate::stats::CenterBank;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CenterOutput {
    pub loss: f64,
    pub grad: Tensor,
}

/// `(1/N) sum_i ||x_i - c_{class(i)}||^2` and its gradient
/// `(2/N)(x_i - c_{class(i)})`. The bank is read, not modified.
pub fn center_loss(x: &Tensor, t: &Tensor, bank: &CenterBank) -> Result<CenterOutput> {
    let (n, d) = x.dims2()?;
    let classes = class_ids(t)?;
    if classes.len() != n {
        return Err(LossError::Shape {
            what: "features/labels",
            left: x.shape().to_vec(),
            right: t.shape().to_vec(),
        });
    }
    if d != bank.dim() || t.shape()[1] != bank.classes() {
        return Err(LossError::Shape {
            what: "center bank",
            left: vec![bank.classes(), bank.dim()],
            right: vec![t.shape()[1], d],
        });
    }
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let mut grad = Tensor::zeros(vec![n, d]);
    let mut loss = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        let center = bank.center(c);
        let g = grad.row_mut(i);
        for ((g, &xv), &cv) in g.iter_mut().zip(x.row(i)).zip(center) {
            let diff = xv - cv;
            loss += diff * diff;
            *g = 2.0 * scale * diff;
        }
    }
    check_grad(&grad, "center loss gradient")?;
    Ok(CenterOutput {
        loss: check_value(loss * scale, "center loss")?,
        grad,
    })
}

/// Moves each sample's class center by the forgetting recurrence, in batch
/// order, then evaluates [`center_loss`] against the updated centers.
pub fn adaptive_center_loss(x: &Tensor, t: &Tensor, bank: &mut CenterBank) -> Result<CenterOutput> {
    let (n, _) = x.dims2()?;
    let classes = class_ids(t)?;
    if classes.len() != n {
        return Err(LossError::Shape {
            what: "features/labels",
            left: x.shape().to_vec(),
            right: t.shape().to_vec(),
        });
    }
    for (i, &c) in classes.iter().enumerate() {
        bank.update_adaptive(x.row(i), c)?;
    }
    center_loss(x, t, bank)
}
