//! Small building blocks shared by the networks.

use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{glorot, Binder, ParamId, ParamStore};
use crate::Real;

/// Fully connected layer `x W + b`, with `W` stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, d_in, d_out), true);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, d_out)), true);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    pub fn set_trainable<T: Real>(&self, store: &mut ParamStore<T>, trainable: bool) {
        store.set_trainable(self.weight, trainable);
        store.set_trainable(self.bias, trainable);
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, dim)), true);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, dim)), true);
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let n = g.normalize_rows(x, T::c(Self::EPS));
        let gain = p.var(g, self.gain);
        let bias = p.var(g, self.bias);
        let h = g.mul_row(n, gain);
        g.add_row(h, bias)
    }
}
