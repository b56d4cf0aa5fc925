//! Loop-based reference implementations for unit tests.

use crate::numerics::nn::{Attention, Linear, Mlp};
use crate::numerics::{gelu_scalar, ParamStore, Tensor};

pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut out = Tensor::zeros(&[x.rows(), w.cols()]);
    for i in 0..x.rows() {
        for j in 0..w.cols() {
            let mut s = b.map_or(0.0, |b| b.get(0, j));
            for p in 0..x.cols() {
                s += x.get(i, p) * w.get(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Tensor) -> Tensor {
    let bias = l.bias.map(|b| &store.get(b).value);
    affine(x, &store.get(l.weight).value, bias)
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Tensor) -> Tensor {
    let mut h = linear(store, &m.fc1, x);
    h.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    linear(store, &m.fc2, &h)
}

/// Per-head loop with scalar softmax.
pub fn attention(store: &ParamStore, a: &Attention, x: &Tensor) -> Tensor {
    let (q, k, v) = (linear(store, &a.q, x), linear(store, &a.k, x), linear(store, &a.v, x));
    let s = x.rows();
    let dh = a.width / a.heads;
    let mut cat = Tensor::zeros(&[s, a.width]);
    for h in 0..a.heads {
        for i in 0..s {
            let mut scores: Vec<f64> = (0..s)
                .map(|j| {
                    (0..dh)
                        .map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            scores.iter_mut().for_each(|s| *s = (*s - m).exp() / z);
            for c in 0..dh {
                let val: f64 = (0..s).map(|j| scores[j] * v.get(j, h * dh + c)).sum();
                cat.set(i, h * dh + c, val);
            }
        }
    }
    linear(store, &a.o, &cat)
}
