//! The trained system (style encoder, pooled statistics, compatibility
//! network) and the scoring interface used by evaluation and generation.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, HighCategory};
use crate::encoder::FeatureTable;
use crate::error::{Error, Result};
use crate::scanet::{GateTable, ScaNet};
use crate::senet::{PooledStyleStats, SeNet, StyleDistribution};
use crate::style_rep::{RepParts, StyleRepConfig};
use crate::Real;

/// Seed and stream position of the training RNG when the model was saved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string in JSON.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub styles: Vec<String>,
    pub senet: SeNet<T>,
    pub pooled: Option<PooledStyleStats>,
    pub scanet: Option<ScaNet<T>>,
    pub rng: RngState,
}

impl<T: Real> Model<T> {
    pub fn rep_config(&self) -> &StyleRepConfig {
        match &self.scanet {
            Some(s) => &s.config.rep,
            None => &self.senet.config.rep,
        }
    }

    pub fn style_index(&self, name: &str) -> Result<usize> {
        self.styles
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownStyle(name.to_string()))
    }

    pub fn pooled(&self) -> Result<&PooledStyleStats> {
        self.pooled
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no pooled style statistics".into()))
    }

    pub fn require_scanet(&self) -> Result<&ScaNet<T>> {
        self.scanet
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no scanet section (stage 2 not trained)".into()))
    }

    /// Deterministic pooled-fallback representation of a style.
    pub fn style_rep(&self, style: usize) -> Result<Array1<T>> {
        let pooled = self.pooled()?;
        if style >= pooled.len() {
            return Err(Error::UnknownStyle(format!("#{style}")));
        }
        let mut parts = RepParts::with_capacity(self.senet.config.d_s);
        parts.push_pooled(pooled, style, None);
        Ok(self.build_reps(&parts).row(0).to_owned())
    }

    pub fn build_reps(&self, parts: &RepParts<T>) -> Array2<T> {
        let lambda = self.scanet.as_ref().map_or(1.0, |s| s.lambda());
        self.rep_config().build(parts, lambda)
    }

    /// Gaussians for item sets (catalog positions), batched.
    pub fn encode_sets(&self, table: &FeatureTable, sets: &[Vec<usize>]) -> Result<Vec<StyleDistribution<T>>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(256) {
            let idx: Vec<usize> = chunk.iter().flatten().copied().collect();
            let sizes: Vec<usize> = chunk.iter().map(Vec::len).collect();
            let x = table.rows::<T>(&idx);
            out.extend(self.senet.encode_sets(&x, &sizes)?);
        }
        Ok(out)
    }

    /// Predicted style (argmax of the classifier) for item sets.
    pub fn predict_styles(&self, table: &FeatureTable, sets: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(256) {
            let idx: Vec<usize> = chunk.iter().flatten().copied().collect();
            let sizes: Vec<usize> = chunk.iter().map(Vec::len).collect();
            let probs = self.senet.classify_sets(&table.rows::<T>(&idx), &sizes)?;
            out.extend(probs.rows().into_iter().map(|r| argmax(r.iter().map(|v| v.f64()))));
        }
        Ok(out)
    }

    pub fn scorer<'a>(&'a self, catalog: &Catalog, table: &FeatureTable) -> Result<ModelScorer<'a, T>> {
        ModelScorer::new(self, catalog, table)
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Reference items plus their style, used to condition on a specific outfit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Context {
    pub items: Vec<usize>,
    pub style: usize,
}

/// Pairwise distances under a conditioning representation. Items are
/// catalog positions.
pub trait Scorer {
    type Rep: Clone;

    fn n_styles(&self) -> usize;

    /// Representation of a style with no reference outfit.
    fn style_rep(&self, style: usize) -> Self::Rep;

    /// Representations conditioned on reference item sets.
    fn context_reps(&self, contexts: &[Context]) -> Result<Vec<Self::Rep>>;

    fn distance(&self, rep: &Self::Rep, a: usize, b: usize) -> f64;
}

/// Mean distance from `anchor` to each query item.
pub fn positive_distance<S: Scorer + ?Sized>(scorer: &S, rep: &S::Rep, anchor: usize, query: &[usize]) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::InvalidRequest("positive distance needs at least one query item".into()));
    }
    Ok(query.iter().map(|&t| scorer.distance(rep, anchor, t)).sum::<f64>() / query.len() as f64)
}

/// Negated mean pairwise distance over all unordered pairs.
pub fn outfit_score<S: Scorer + ?Sized>(scorer: &S, rep: &S::Rep, items: &[usize]) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::InvalidRequest("an outfit score needs at least two items".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            sum += scorer.distance(rep, items[i], items[j]);
            n += 1;
        }
    }
    Ok(-sum / n as f64)
}

/// Scorer backed by a trained model. Item embeddings and per-style gates are
/// computed once.
pub struct ModelScorer<'a, T> {
    model: &'a Model<T>,
    scanet: &'a ScaNet<T>,
    table: FeatureTable,
    embeddings: Array2<T>,
    categories: Vec<HighCategory>,
    style_gates: Vec<Arc<GateTable<T>>>,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, catalog: &Catalog, table: &FeatureTable) -> Result<Self> {
        let scanet = model.require_scanet()?;
        if table.len() != catalog.len() {
            return Err(Error::Dimension {
                expected: catalog.len(),
                got: table.len(),
            });
        }
        let embeddings = scanet.encode_items(&table.all::<T>())?;
        let categories = catalog.items().iter().map(|i| i.category.high).collect();
        let n = model.pooled()?.len();
        let mut reps = Array2::zeros((n, 2 * scanet.config.d_s));
        for s in 0..n {
            reps.row_mut(s).assign(&model.style_rep(s)?);
        }
        let style_gates = gates_for(scanet, &reps)?;
        Ok(Self {
            model,
            scanet,
            table: table.clone(),
            embeddings,
            categories,
            style_gates,
        })
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    /// Gates for an explicit representation vector (e.g. a style blend).
    pub fn rep_from_vector(&self, rep: &Array1<T>) -> Result<Arc<GateTable<T>>> {
        Ok(Arc::new(self.scanet.gates(rep)?))
    }

    pub fn embeddings(&self) -> &Array2<T> {
        &self.embeddings
    }
}

fn gates_for<T: Real>(scanet: &ScaNet<T>, reps: &Array2<T>) -> Result<Vec<Arc<GateTable<T>>>> {
    reps.rows()
        .into_iter()
        .map(|r| scanet.gates(&r.to_owned()).map(Arc::new))
        .collect()
}

impl<T: Real> Scorer for ModelScorer<'_, T> {
    type Rep = Arc<GateTable<T>>;

    fn n_styles(&self) -> usize {
        self.style_gates.len()
    }

    fn style_rep(&self, style: usize) -> Self::Rep {
        self.style_gates[style].clone()
    }

    /// Sets with fewer than two items fall back to the pooled style
    /// representation.
    fn context_reps(&self, contexts: &[Context]) -> Result<Vec<Self::Rep>> {
        let usable: Vec<Vec<usize>> = contexts
            .iter()
            .filter(|c| c.items.len() >= 2)
            .map(|c| c.items.clone())
            .collect();
        let dists = self.model.encode_sets(&self.table, &usable)?;
        let pooled = self.model.pooled()?;
        let mut parts = RepParts::with_capacity(self.scanet.config.d_s);
        let mut it = dists.iter();
        let mut fallback = Vec::with_capacity(contexts.len());
        for c in contexts {
            if c.items.len() >= 2 {
                parts.push_outfit(it.next().expect("one dist per usable set"), pooled, c.style, None);
                fallback.push(false);
            } else {
                parts.push_zero();
                fallback.push(true);
            }
        }
        let reps = self.model.build_reps(&parts);
        let gates = gates_for(self.scanet, &reps)?;
        Ok(gates
            .into_iter()
            .zip(contexts.iter().zip(fallback))
            .map(|(g, (c, fb))| if fb { self.style_gates[c.style].clone() } else { g })
            .collect())
    }

    fn distance(&self, rep: &Self::Rep, a: usize, b: usize) -> f64 {
        rep.distance(
            self.embeddings.row(a),
            self.categories[a],
            self.embeddings.row(b),
            self.categories[b],
        )
    }
}
