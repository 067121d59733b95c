//! Helpers shared by integration test targets.
#![allow(dead_code)]

use fnas_core::nn::{backward, forward, OperatorKind, Parameter, Tensor};
use fnas_core::rng::rng_from;
use rand::Rng;

const H: f64 = 1e-5;

/// Scalar objective: <w, forward(x)> for a fixed random weighting w.
fn objective(op: OperatorKind, params: &[Parameter], x: &Tensor, w: &[f64]) -> f64 {
    let y = forward(op, params, x).unwrap();
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-6)
}

pub struct Report {
    pub checked: usize,
    pub within: usize,
    pub max_rel: f64,
}

/// Compare analytic and numeric gradients for inputs and all parameters.
pub fn check(op: OperatorKind, sample_shape: &[usize], batch: usize, seed: u64) -> Report {
    let mut rng = rng_from(seed, &[]);
    let mut shape = vec![batch];
    shape.extend_from_slice(sample_shape);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut params = op.init_params(sample_shape, &mut rng).unwrap();
    // Perturb norm scales and biases away from their init values.
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let out_n = forward(op, &params, &x).unwrap().numel();
    let w: Vec<f64> = (0..out_n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream = Tensor::new(forward(op, &params, &x).unwrap().shape().to_vec(), w.clone()).unwrap();
    let gin = backward(op, &mut params, &x, &upstream).unwrap();

    let mut errs = Vec::new();
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let num = (objective(op, &params, &xp, &w) - objective(op, &params, &xm, &w)) / (2.0 * H);
        errs.push(rel_err(gin.data()[i], num));
    }
    for pi in 0..params.len() {
        for j in 0..params[pi].value.numel() {
            let orig = params[pi].value.data()[j];
            params[pi].value.data_mut()[j] = orig + H;
            let fp = objective(op, &params, &x, &w);
            params[pi].value.data_mut()[j] = orig - H;
            let fm = objective(op, &params, &x, &w);
            params[pi].value.data_mut()[j] = orig;
            errs.push(rel_err(params[pi].grad.data()[j], (fp - fm) / (2.0 * H)));
        }
    }
    Report {
        checked: errs.len(),
        within: errs.iter().filter(|&&e| e < 1e-4).count(),
        max_rel: errs.iter().cloned().fold(0.0, f64::max),
    }
}
