//! Analytic gradients of every parameterized kernel against central
//! finite differences.

mod common;

use common::check;
use fnas_core::nn::{backward, forward, Expansion, OperatorKind, Parameter, Tensor};
use fnas_core::rng::rng_from;
use rand::Rng;

pub fn parameterized_cases() -> Vec<(OperatorKind, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, c) in [1usize, 2, 3, 4].iter().enumerate() {
        let side = 3 + i;
        let s = vec![*c, side, side + 1];
        out.push((OperatorKind::Conv1x1 { out_channels: c + 1 }, s.clone()));
        out.push((OperatorKind::Conv3x3 { out_channels: 2 }, s.clone()));
        out.push((OperatorKind::DwSepConv { kernel: 3, expansion: [Expansion::Half, Expansion::One, Expansion::Two][i % 3] }, s.clone()));
        out.push((OperatorKind::AffineNorm, s.clone()));
        out.push((OperatorKind::LayerNorm, s.clone()));
        out.push((OperatorKind::Dense { out_features: 3 + i }, vec![5 + i]));
    }
    out
}

#[test]
fn finite_difference_agreement() {
    for (seed, (op, shape)) in parameterized_cases().into_iter().enumerate() {
        let r = check(op, &shape, 2, seed as u64);
        let frac = r.within as f64 / r.checked as f64;
        assert!(frac >= 0.95 && r.max_rel < 1e-2, "{op} {shape:?}: {frac:.3} within, max {:.2e}", r.max_rel);
    }
}

#[test]
fn non_parametric_gradients() {
    for (op, shape) in [
        (OperatorKind::AvgPool { window: 3, stride: 1 }, vec![2, 5, 5]),
        (OperatorKind::AvgPool { window: 2, stride: 2 }, vec![2, 4, 6]),
        (OperatorKind::GlobalAvgPool, vec![3, 4, 4]),
        (OperatorKind::Relu, vec![3, 4, 4]),
        (OperatorKind::DwSepConv { kernel: 1, expansion: Expansion::Two }, vec![3, 4, 4]),
    ] {
        let r = check(op, &shape, 2, 99);
        assert!(r.within as f64 / r.checked as f64 >= 0.95 && r.max_rel < 1e-2, "{op}: max {:.2e}", r.max_rel);
    }
}

#[test]
fn dense_input_gradient_is_upstream_times_weight() {
    let op = OperatorKind::Dense { out_features: 2 };
    let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
    let mut params = vec![Parameter::new(w), Parameter::new(Tensor::zeros(&[2]))];
    let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
    let g = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
    let gin = backward(op, &mut params, &x, &g).unwrap();
    assert_eq!(gin.data(), &[3.0, 3.5, 6.0]);
    assert_eq!(params[1].grad.data(), &[2.0, -1.0]);
}

#[test]
fn forward_is_pure() {
    for (op, shape) in parameterized_cases() {
        let mut rng = rng_from(5, &[]);
        let params = op.init_params(&shape, &mut rng).unwrap();
        let mut s = vec![3];
        s.extend(&shape);
        let n: usize = s.iter().product();
        let x = Tensor::new(s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = forward(op, &params, &x).unwrap();
        let b = forward(op, &params, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
