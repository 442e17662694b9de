//! Small fully connected networks with tanh hidden layers and a scalar
//! linear output, with hand-derived backpropagation.
//!
//! Parameters are stored in one flat vector, layer by layer: the weight
//! matrix row-major, then the bias.

use nalgebra::{DMatrixView, DVectorView};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng;

/// Hidden widths used by every critic in the crate.
pub const HIDDEN: [usize; 2] = [10, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths including input and the scalar output.
    widths: Vec<usize>,
    params: Vec<f64>,
}

struct Cache {
    /// Layer inputs; `acts[0]` is the network input.
    acts: Vec<Vector>,
}

impl Mlp {
    /// Network `input → 10 → 50 → 1`, Glorot-normal weights, zero biases.
    pub fn critic(input: usize, seed: u64) -> Self {
        let mut widths = vec![input];
        widths.extend(HIDDEN);
        widths.push(1);
        Self::new(widths, seed)
    }

    pub fn new(widths: Vec<usize>, seed: u64) -> Self {
        assert!(widths.len() >= 2 && *widths.last().unwrap() == 1);
        let mut rng = rng::seeded(seed);
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { widths, params }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_vector(&self) -> Vector {
        Vector::from_column_slice(&self.params)
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn offset(&self, l: usize) -> usize {
        self.widths.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weight matrix of layer `l` viewed as its transpose (`in × out`,
    /// column-major over the row-major storage) and the bias.
    fn layer(&self, l: usize) -> (DMatrixView<'_, f64>, DVectorView<'_, f64>, usize) {
        let off = self.offset(l);
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let wt = DMatrixView::from_slice(&self.params[off..off + fan_in * fan_out], fan_in, fan_out);
        let b = DVectorView::from_slice(&self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out], fan_out);
        (wt, b, off)
    }

    fn forward_cache(&self, x: &Vector) -> (f64, Cache) {
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        let mut h = x.clone();
        for l in 0..layers {
            let (wt, b, _) = self.layer(l);
            let z = wt.tr_mul(&h) + b;
            acts.push(h);
            h = if l + 1 < layers { z.map(f64::tanh) } else { z };
        }
        (h[0], Cache { acts })
    }

    pub fn forward(&self, x: &Vector) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        self.forward_cache(x).0
    }

    /// Value together with its gradients with respect to the parameters and
    /// the input.
    pub fn backward(&self, x: &Vector) -> (f64, Vector, Vector) {
        let (y, cache) = self.forward_cache(x);
        let layers = self.widths.len() - 1;
        let mut grad = Vector::zeros(self.params.len());
        // derivative of the output with respect to the current layer output
        let mut delta = Vector::from_element(1, 1.0);
        for l in (0..layers).rev() {
            let (wt, _, off) = self.layer(l);
            let input = &cache.acts[l];
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            for i in 0..fan_out {
                for j in 0..fan_in {
                    grad[off + i * fan_in + j] = delta[i] * input[j];
                }
                grad[off + fan_in * fan_out + i] = delta[i];
            }
            let back = wt * &delta;
            delta = if l > 0 {
                // input to layer l is tanh of the previous pre-activation
                back.component_mul(&input.map(|a| 1.0 - a * a))
            } else {
                back
            };
        }
        (y, grad, delta)
    }

    /// Row `∇_φ V(x)`.
    pub fn param_gradient(&self, x: &Vector) -> Vector {
        self.backward(x).1
    }

    pub fn input_gradient(&self, x: &Vector) -> Vector {
        self.backward(x).2
    }

    /// Elementwise `self ← τ other + (1 − τ) self`.
    pub fn blend_from(&mut self, other: &Mlp, tau: f64) {
        debug_assert_eq!(self.widths, other.widths);
        for (t, s) in self.params.iter_mut().zip(&other.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(net: &Mlp, x: &Vector) {
        let (_, gp, gx) = net.backward(x);
        let h = 1e-6;
        let mut p = net.params().to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let mut up = net.clone();
            up.set_params(&p).unwrap();
            p[i] = orig - h;
            let mut dn = net.clone();
            dn.set_params(&p).unwrap();
            p[i] = orig;
            let fd = (up.forward(x) - dn.forward(x)) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(1e-3);
            assert!((fd - gp[i]).abs() <= tol, "param {i}: fd {fd} vs {}", gp[i]);
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * h);
            assert!((fd - gx[j]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn critic_shape() {
        let net = Mlp::critic(4, 1);
        assert_eq!(net.n_params(), 4 * 10 + 10 + 10 * 50 + 50 + 50 + 1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = Mlp::critic(3, 5);
        // non-zero biases exercise every term
        let p: Vec<f64> = net.params().iter().enumerate().map(|(i, v)| v + 0.01 * (i % 7) as f64).collect();
        net.set_params(&p).unwrap();
        fd_check(&net, &Vector::from_column_slice(&[0.3, -1.2, 0.7]));
    }

    #[test]
    fn blend_is_convex_combination() {
        let a = Mlp::critic(2, 1);
        let mut t = Mlp::critic(2, 2);
        let before = t.params().to_vec();
        t.blend_from(&a, 0.25);
        for ((x, y), z) in t.params().iter().zip(a.params()).zip(before) {
            assert!((x - (0.25 * y + 0.75 * z)).abs() < 1e-15);
        }
    }
}
