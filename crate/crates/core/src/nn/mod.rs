//! The numeric engine: tensors, operator kernels, loss and SGD.

mod ops;
mod tensor;

pub use ops::{backward, forward, op_cost, Cost, Expansion, OperatorKind};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            momentum: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

impl AsRef<Tensor> for Parameter {
    fn as_ref(&self) -> &Tensor {
        &self.value
    }
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            clip_norm: Some(5.0),
        }
    }
}

/// One SGD step with heavy-ball momentum over every parameter reachable
/// through `params`. Gradients are zeroed afterwards. A non-finite
/// gradient aborts the step before any value is touched.
pub fn sgd_step<'a, I>(params: I, lr: f64, momentum: f64, clip_norm: Option<f64>) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    if !(lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Invalid(format!("momentum must be in [0, 1), got {momentum}")));
    }
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    let sq: f64 = params.iter().map(|p| p.grad.sq_norm()).sum();
    if !sq.is_finite() {
        return Err(Error::NonFinite("gradient norm in sgd step".into()));
    }
    let scale = match clip_norm {
        Some(c) if sq.sqrt() > c => c / sq.sqrt(),
        _ => 1.0,
    };
    for p in params.iter_mut() {
        let Parameter { value, grad, momentum: buf } = &mut **p;
        for ((v, g), b) in value.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
            *b = momentum * *b + g * scale;
            *v -= lr * *b;
        }
        grad.fill(0.0);
    }
    Ok(())
}

/// Mean softmax cross-entropy over a batch of logits `[N, C]`, returning
/// the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let (n, c) = (s[0], s[1]);
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    for ((row, g), &y) in logits.data().chunks(c).zip(grad.chunks_mut(c)).zip(labels) {
        if y >= c {
            return Err(Error::shape("softmax_cross_entropy", format!("label {y} >= {c} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
