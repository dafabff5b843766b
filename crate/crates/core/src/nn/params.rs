//! Named parameter storage and binding of parameters into a [`Graph`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph, Var};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Insertion order is the serialization
/// order, so two stores built by the same constructor line up index by index.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            buf.clear();
            for &x in v.iter() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Copy values (not trainability) from a store with identical layout.
    pub fn assign_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }

    /// Convert every tensor to another float type, keeping names and flags.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::c(x.f64())))
                .collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Binds parameters into one graph, creating each leaf at most once.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a, T: Real> Binder<'a, T> {
    /// `track = false` binds everything as constants (inference / frozen use).
    pub fn new(store: &'a ParamStore<T>, track: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track && self.store.is_trainable(id) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with the store; `None` for unbound or frozen params.
    pub fn gradients(&self, grads: &mut Grads<T>) -> Vec<Option<Array2<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

pub(crate) fn normal_matrix<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::c(mean + std * z)
    })
}

/// Glorot-uniform initialisation for a `fan_in × fan_out` weight.
pub(crate) fn glorot<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || T::c(rng.random_range(-limit..limit)))
}

/// Global L2 norm over all present gradients.
pub fn global_norm<T: Real>(grads: &[Option<Array2<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&x| x.f64() * x.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Array2<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binder_creates_each_leaf_once_and_respects_freeze() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Array2::ones((1, 2)), true);
        let b = store.add("b", Array2::ones((1, 2)), false);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, true);
        let va = binder.var(&mut g, a);
        assert_eq!(binder.var(&mut g, a), va);
        let vb = binder.var(&mut g, b);
        let s = g.mul(va, vb);
        let l = g.sum_all(s);
        let mut grads = g.backward(l);
        let out = binder.gradients(&mut grads);
        assert!(out[0].is_some());
        assert!(out[1].is_none());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = vec![Some(Array2::from_elem((1, 4), 3.0f64)), None];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 6.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn digest_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", glorot(&mut rng, 3, 2), true);
        let d0 = store.digest();
        assert_eq!(d0, store.clone().digest());
        store.get_mut(id)[[0, 0]] += 1.0;
        assert_ne!(d0, store.digest());
    }
}
