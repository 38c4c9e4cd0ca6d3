//! A small fully-connected network with hand-written backpropagation and an
//! Adam optimizer. Shared by the prompter and the embedding model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::colorspace::Image;
use crate::{Error, Result};

/// Grid the input image is mean-pooled to: rows × cols × 3.
pub const GRID_ROWS: usize = 16;
pub const GRID_COLS: usize = 8;
pub const GRID_INPUTS: usize = GRID_ROWS * GRID_COLS * 3;

fn cell_bounds(i: usize, cells: usize, len: usize) -> (usize, usize) {
    let start = (i * len / cells).min(len - 1);
    let end = ((i + 1) * len / cells).clamp(start + 1, len);
    (start, end)
}

/// Mean-pool an image onto the input grid and center values at 0.
pub fn grid_features(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(GRID_INPUTS);
    for gr in 0..GRID_ROWS {
        let (r0, r1) = cell_bounds(gr, GRID_ROWS, h);
        for gc in 0..GRID_COLS {
            let (c0, c1) = cell_bounds(gc, GRID_COLS, w);
            let mut acc = [0.0; 3];
            for r in r0..r1 {
                for p in &img.pixels()[r * w + c0..r * w + c1] {
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            out.extend(acc.map(|a| a / n - 0.5));
        }
    }
    out
}

/// ReLU multilayer perceptron; the last layer is affine.
///
/// Parameters live in one flat vector: for each layer, the `out × in`
/// row-major weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Inputs to every layer plus every pre-activation, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        if params.len() != param_count(&sizes) {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                param_count(&sizes),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network weights"));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("network weights"))
        }
    }

    fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let off: usize = self.sizes[..k + 1].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        b.iter().zip(w.chunks_exact(x.len())).map(|(bi, row)| bi + dot(row, x)).collect()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.input_len(), "input width");
        let layers = self.sizes.len() - 1;
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for k in 0..layers {
            let (w, b) = self.layer(k);
            let z = match pre.last() {
                None => Self::affine(w, b, x),
                Some(prev) => {
                    let a: Vec<f64> = prev.iter().map(|v| v.max(0.0)).collect();
                    Self::affine(w, b, &a)
                }
            };
            pre.push(z);
        }
        Trace { input: x.to_vec(), pre }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).pre.pop().unwrap()
    }

    /// Activations of the last hidden layer (post-ReLU).
    pub fn penultimate(&self, x: &[f64]) -> Vec<f64> {
        let t = self.forward_trace(x);
        match t.pre.len() {
            1 => t.input,
            n => t.pre[n - 2].iter().map(|v| v.max(0.0)).collect(),
        }
    }

    /// Accumulate `∂L/∂θ` into `grads` given `∂L/∂output`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(grad_out.len(), self.output_len());
        let layers = self.sizes.len() - 1;
        let mut delta = grad_out.to_vec();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for k in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let a_prev: Vec<f64> = if k == 0 {
                trace.input.clone()
            } else {
                trace.pre[k - 1].iter().map(|v| v.max(0.0)).collect()
            };
            let off = offsets[k];
            {
                let g = &mut grads[off..off + n_in * n_out + n_out];
                let (gw, gb) = g.split_at_mut(n_in * n_out);
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (gwi, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(&a_prev) {
                        *gwi += d * a;
                    }
                    gb[o] += d;
                }
            }
            if k > 0 {
                let (w, _) = self.layer(k);
                let mut next = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (n, wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *n += d * wi;
                    }
                }
                for (n, z) in next.iter_mut().zip(&trace.pre[k - 1]) {
                    if *z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    /// Sum of per-sample gradients. `per_sample(i)` returns the input and a
    /// closure-computed output gradient for sample `i`. Samples are split
    /// into fixed chunks and summed in index order, so the result does not
    /// depend on the thread count.
    pub fn batch_gradient<F>(&self, n: usize, per_sample: F) -> Vec<f64>
    where
        F: Fn(usize, &Self) -> Option<(Trace, Vec<f64>)> + Sync,
    {
        const CHUNK: usize = 8;
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; self.params.len()];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    if let Some((trace, grad_out)) = per_sample(i, self) {
                        self.backward(&trace, &grad_out, &mut g);
                    }
                }
                g
            })
            .collect();
        let mut total = vec![0.0; self.params.len()];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        total
    }
}

/// Dot product with four independent accumulators (lets the compiler vectorize).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub const DEFAULT_LR: f64 = 2e-4;

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
