//! Linear layers and small MLPs with explicit backward passes.
//!
//! Weights are row-major `out_dim x in_dim`; forward computes
//! y = x W^T + b. Gradients accumulate into a same-shaped parameter
//! struct so an optimizer can walk parameters and gradients in lockstep.

use crate::math::{matmul, matmul_nt, matmul_tn, Mat};
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// out_dim x in_dim, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Linear {
        Linear { in_dim, out_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    /// Gaussian init scaled by 1/sqrt(in_dim); zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut w = crate::math::gauss_vec(rng, out_dim * in_dim);
        for x in &mut w {
            *x *= scale;
        }
        Linear { in_dim, out_dim, w, b: vec![0.0; out_dim] }
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut s = 0.0;
            for (wi, xi) in wrow.iter().zip(x) {
                s += wi * xi;
            }
            *yo += s;
        }
        y
    }

    /// x: N x in_dim -> N x out_dim.
    pub fn forward(&self, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols, self.in_dim);
        let mut y = Mat::from_vec(
            x.rows,
            self.out_dim,
            matmul_nt(&x.data, &self.w, x.rows, self.in_dim, self.out_dim),
        );
        for r in 0..y.rows {
            let row = y.row_mut(r);
            for (v, b) in row.iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        y
    }

    /// dX only, for frozen layers.
    pub fn backward_input(&self, dy: &Mat) -> Mat {
        debug_assert_eq!(dy.cols, self.out_dim);
        Mat::from_vec(
            dy.rows,
            self.in_dim,
            matmul(&dy.data, &self.w, dy.rows, self.out_dim, self.in_dim),
        )
    }

    /// Accumulates dW, db into `grad`; returns dX.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        debug_assert_eq!(dy.cols, self.out_dim);
        debug_assert_eq!(x.cols, self.in_dim);
        debug_assert_eq!(x.rows, dy.rows);
        let dw = matmul_tn(&dy.data, &x.data, x.rows, self.out_dim, self.in_dim);
        for (g, d) in grad.w.iter_mut().zip(&dw) {
            *g += d;
        }
        for r in 0..dy.rows {
            for (g, d) in grad.b.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        Mat::from_vec(
            x.rows,
            self.in_dim,
            matmul(&dy.data, &self.w, x.rows, self.out_dim, self.in_dim),
        )
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Stack of linear layers with SiLU between them (none after the last).
/// A single layer is a plain linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// Input to each layer (after the previous activation).
    pub inputs: Vec<Mat>,
    /// Pre-activation output of each non-final layer.
    pub pre_acts: Vec<Mat>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn zeros(dims: &[usize]) -> Mlp {
        assert!(dims.len() >= 2);
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, x: &Mat, mut cache: Option<&mut MlpCache>) -> Mat {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(h.clone());
            }
            let mut y = layer.forward(&h);
            if i + 1 < self.layers.len() {
                if let Some(c) = cache.as_deref_mut() {
                    c.pre_acts.push(y.clone());
                }
                for v in &mut y.data {
                    *v = silu(*v);
                }
            }
            h = y;
        }
        h
    }

    /// Accumulates parameter gradients into `grad`; returns dX.
    pub fn backward(&self, cache: &MlpCache, dy: &Mat, grad: &mut Mlp) -> Mat {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let pre = &cache.pre_acts[i];
                for (dv, p) in d.data.iter_mut().zip(&pre.data) {
                    *dv *= silu_prime(*p);
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.w"), &l.w);
            f(&format!("layer{i}.b"), &l.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.w"), &mut l.w);
            f(&format!("layer{i}.b"), &mut l.b);
        }
    }
}
