//! Dense layers over a flat parameter vector, with hand-written backprop.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Shape of one dense layer `y = W x + b`, `W` row-major `rows x cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Offset of `W` in the parameter vector; `b` follows it.
    pub offset: usize,
}

impl Layer {
    pub fn size(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    pub fn w<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.rows * self.cols]
    }

    pub fn b<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let s = self.offset + self.rows * self.cols;
        &p[s..s + self.rows]
    }

    /// `y = W x + b`.
    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let w = self.w(p);
        self.b(p)
            .iter()
            .enumerate()
            .map(|(r, b)| b + dot(&w[r * self.cols..(r + 1) * self.cols], x))
            .collect()
    }

    /// Accumulates `dL/dW`, `dL/db` into `g` and returns `dL/dx` when asked.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        gy: &[f64],
        g: &mut [f64],
        want_gx: bool,
    ) -> Vec<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let (gw, gb) = g[self.offset..self.offset + self.size()].split_at_mut(rows * cols);
        for r in 0..rows {
            let gr = gy[r];
            if gr == 0.0 {
                continue;
            }
            gb[r] += gr;
            for (a, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *a += gr * xv;
            }
        }
        if !want_gx {
            return Vec::new();
        }
        let w = self.w(p);
        let mut gx = vec![0.0; cols];
        for r in 0..rows {
            let gr = gy[r];
            if gr == 0.0 {
                continue;
            }
            for (a, wv) in gx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *a += gr * wv;
            }
        }
        gx
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lays out consecutive layers and returns them with the total size.
pub(crate) fn layout(shapes: &[(usize, usize)]) -> (Vec<Layer>, usize) {
    let mut offset = 0;
    let layers = shapes
        .iter()
        .map(|&(rows, cols)| {
            let l = Layer { rows, cols, offset };
            offset += l.size();
            l
        })
        .collect();
    (layers, offset)
}

/// Gaussian weights with variance `gain^2 / fan_in`, zero biases.
pub(crate) fn init_params(layers: &[Layer], gains: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let total = layers.iter().map(|l| l.size()).sum();
    let mut p = vec![0.0; total];
    for (l, gain) in layers.iter().zip(gains) {
        let std = gain / (l.cols as f64).sqrt();
        for v in &mut p[l.offset..l.offset + l.rows * l.cols] {
            let z: f64 = StandardNormal.sample(rng);
            *v = std * z;
        }
    }
    p
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Adam state for a flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Adam {
    pub fn new(n: usize, step: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            step,
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            params[k] -= self.step * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

/// Sums per-sample gradients in order and divides by their count.
pub(crate) fn mean_of(grads: Vec<Vec<f64>>) -> Vec<f64> {
    let n = grads.len() as f64;
    let mut it = grads.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
