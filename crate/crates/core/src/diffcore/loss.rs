use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{LossWeights, EPS_DEN};

/// Differentiable CCC of `x` against a fixed `y`, with `EPS_DEN` added to
/// the denominator. Returns the value and `∂ccc/∂x`.
pub fn ccc_and_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    let num = 2.0 * sxy;
    let den = sxx + syy + (mx - my) * (mx - my) + EPS_DEN;
    let value = num / den;
    let grad = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let dnum = 2.0 * (b - my) / n;
            let dden = 2.0 * (a - mx) / n + 2.0 * (mx - my) / n;
            (dnum * den - num * dden) / (den * den)
        })
        .collect();
    (value, grad)
}

/// Composite CCC loss over a `[batch, 3]` prediction tensor (columns
/// act, val, dom) with its exact gradient through the batch moments.
pub fn ccc_loss_grad(pred: &Tensor, target: &Tensor, w: LossWeights) -> Result<(f64, Tensor)> {
    let batch = match pred.shape() {
        &[b, 3] => b,
        s => {
            return Err(Error::invalid(format!(
                "ccc loss: expected [batch, 3] predictions, got {s:?}"
            )))
        }
    };
    target.expect_shape(pred.shape(), "ccc loss target")?;
    if batch < 2 {
        return Err(Error::invalid("ccc loss needs a batch of at least 2"));
    }
    let weights = w.per_dim();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for (d, wd) in weights.iter().enumerate() {
        let x: Vec<f64> = pred.data().iter().skip(d).step_by(3).copied().collect();
        let y: Vec<f64> = target.data().iter().skip(d).step_by(3).copied().collect();
        let (c, g) = ccc_and_grad(&x, &y);
        loss -= wd * c;
        for (i, gi) in g.iter().enumerate() {
            grad.data_mut()[i * 3 + d] = -wd * gi;
        }
    }
    Ok((loss, grad))
}
