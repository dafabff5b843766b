//! Style-conditioned outfit generation by beam search, style blending and
//! interpolation sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, Template};
use crate::error::{Error, Result};
use crate::model::{outfit_score, Model, ModelScorer, Scorer};
use crate::style_rep::RepParts;
use crate::Real;

pub const DEFAULT_BEAM: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub parent_id: String,
    pub template: Template,
    pub style_weights: BTreeMap<String, f64>,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Sample style representations from the pooled Gaussians with this seed
    /// instead of using their means.
    #[serde(default)]
    pub sample_seed: Option<u64>,
    /// Rescale weights to sum to 1.
    #[serde(default)]
    pub normalize: bool,
}

fn default_beam() -> usize {
    DEFAULT_BEAM
}

fn default_top_k() -> usize {
    5
}

/// A complete outfit as catalog positions in template order.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub items: Vec<usize>,
    pub score: f64,
}

/// Rank of each item id in ascending id order, by catalog position.
pub fn id_ranks(catalog: &Catalog) -> Vec<usize> {
    let mut order: Vec<usize> = (0..catalog.len()).collect();
    order.sort_by(|&a, &b| catalog.item(a).id.cmp(&catalog.item(b).id));
    let mut rank = vec![0; catalog.len()];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Higher score first; equal scores by item ids (in fill order) ascending.
fn order(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>), rank: &[usize]) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.iter().map(|&i| rank[i]).cmp(b.1.iter().map(|&i| rank[i])))
}

/// Beam search starting from `parent`, filling `slots` in order. Returned
/// item lists are in fill order (parent first).
pub fn beam_search(
    parent: usize,
    slots: &[Vec<usize>],
    beam: usize,
    top_k: usize,
    rank: &[usize],
    score: impl Fn(&[usize]) -> f64,
) -> Result<Vec<Ranked>> {
    if beam == 0 || top_k == 0 {
        return Err(Error::InvalidRequest("beam width and top_k must be at least 1".into()));
    }
    if slots.is_empty() {
        return Err(Error::InvalidTemplate(
            "template holds only the parent's category; an outfit needs at least two items".into(),
        ));
    }
    let mut partials: Vec<(f64, Vec<usize>)> = vec![(0.0, vec![parent])];
    for (k, slot) in slots.iter().enumerate() {
        let mut next = Vec::new();
        for (_, items) in &partials {
            for &c in slot {
                if items.contains(&c) {
                    continue;
                }
                let mut ext = items.clone();
                ext.push(c);
                next.push((score(&ext), ext));
            }
        }
        if next.is_empty() {
            return Err(Error::Insufficient(format!("no eligible items for slot {}", k + 1)));
        }
        next.sort_by(|a, b| order(a, b, rank));
        let keep = if k + 1 == slots.len() { top_k } else { beam };
        next.truncate(keep);
        partials = next;
    }
    Ok(partials
        .into_iter()
        .map(|(score, items)| Ranked { items, score })
        .collect())
}

/// Exhaustive ranking over all completions (test oracle and small catalogs).
pub fn exhaustive_search(
    parent: usize,
    slots: &[Vec<usize>],
    top_k: usize,
    rank: &[usize],
    score: impl Fn(&[usize]) -> f64,
) -> Vec<Ranked> {
    let mut all = Vec::new();
    let mut stack = vec![parent];
    fn rec(
        slots: &[Vec<usize>],
        stack: &mut Vec<usize>,
        all: &mut Vec<(f64, Vec<usize>)>,
        score: &dyn Fn(&[usize]) -> f64,
    ) {
        match slots.split_first() {
            None => all.push((score(stack), stack.clone())),
            Some((slot, rest)) => {
                for &c in slot {
                    if !stack.contains(&c) {
                        stack.push(c);
                        rec(rest, stack, all, score);
                        stack.pop();
                    }
                }
            }
        }
    }
    rec(slots, &mut stack, &mut all, &score);
    all.sort_by(|a, b| order(a, b, rank));
    all.truncate(top_k);
    all.into_iter().map(|(score, items)| Ranked { items, score }).collect()
}

/// Parent position, eligible items for the remaining slots (in template
/// order), and the template position of every fill-order slot.
pub struct SlotPlan {
    pub parent: usize,
    pub slots: Vec<Vec<usize>>,
    /// `fill_to_template[k]` = template index of fill-order position `k`.
    pub fill_to_template: Vec<usize>,
}

impl SlotPlan {
    pub fn new(catalog: &Catalog, parent_id: &str, template: &Template) -> Result<Self> {
        let parent = catalog
            .position(parent_id)
            .ok_or_else(|| Error::UnknownItem(parent_id.to_string()))?;
        let pc = catalog.item(parent).category.high;
        let parent_slot = template.slots().iter().position(|&c| c == pc).ok_or_else(|| {
            Error::InvalidTemplate(format!("template {template} does not contain the parent's category {pc}"))
        })?;
        let mut slots = Vec::new();
        let mut fill_to_template = vec![parent_slot];
        for (i, &c) in template.slots().iter().enumerate() {
            if i == parent_slot {
                continue;
            }
            let eligible: Vec<usize> = catalog.in_high(c).into_iter().filter(|&j| j != parent).collect();
            if eligible.is_empty() {
                return Err(Error::Insufficient(format!("no catalog items for slot {c}")));
            }
            slots.push(eligible);
            fill_to_template.push(i);
        }
        Ok(Self {
            parent,
            slots,
            fill_to_template,
        })
    }

    /// Reorder a fill-order outfit to template order.
    pub fn to_template_order(&self, items: &[usize]) -> Vec<usize> {
        let mut out = vec![0; items.len()];
        for (k, &i) in items.iter().enumerate() {
            out[self.fill_to_template[k]] = i;
        }
        out
    }
}

/// Resolve and validate style weights into `(style index, weight)` pairs.
pub fn resolve_weights<T: Real>(model: &Model<T>, weights: &BTreeMap<String, f64>, normalize: bool) -> Result<Vec<(usize, f64)>> {
    if weights.is_empty() {
        return Err(Error::InvalidRequest("style_weights is empty".into()));
    }
    let mut out = Vec::with_capacity(weights.len());
    for (name, &w) in weights {
        let idx = model.style_index(name)?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidRequest(format!("weight for {name} must be finite and non-negative")));
        }
        out.push((idx, w));
    }
    let total: f64 = out.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Err(Error::InvalidRequest("at least one style weight must be positive".into()));
    }
    if normalize {
        for p in &mut out {
            p.1 /= total;
        }
    }
    Ok(out)
}

/// `r = Σ w_i r_i` over pooled-fallback style representations.
pub fn blend_style_rep<T: Real>(
    model: &Model<T>,
    weights: &BTreeMap<String, f64>,
    normalize: bool,
    sample_seed: Option<u64>,
) -> Result<Array1<T>> {
    let resolved = resolve_weights(model, weights, normalize)?;
    let pooled = model.pooled()?;
    let mut rng = sample_seed.map(ChaCha8Rng::seed_from_u64);
    let mut parts = RepParts::with_capacity(model.senet.config.d_s);
    for &(s, _) in &resolved {
        parts.push_pooled(pooled, s, rng.as_mut().map(|r| r as &mut dyn rand::RngCore));
    }
    let reps = model.build_reps(&parts);
    let mut r = Array1::zeros(reps.ncols());
    for (row, &(_, w)) in reps.rows().into_iter().zip(&resolved) {
        r.scaled_add(T::c(w), &row);
    }
    Ok(r)
}

/// Generate ranked outfits for a request. Outfits are in template order.
pub fn generate<T: Real>(scorer: &ModelScorer<'_, T>, catalog: &Catalog, request: &GenerationRequest) -> Result<Vec<Ranked>> {
    let plan = SlotPlan::new(catalog, &request.parent_id, &request.template)?;
    let r = blend_style_rep(scorer.model(), &request.style_weights, request.normalize, request.sample_seed)?;
    let rep = scorer.rep_from_vector(&r)?;
    let rank = id_ranks(catalog);
    let ranked = beam_search(plan.parent, &plan.slots, request.beam, request.top_k, &rank, |items| {
        outfit_score(scorer, &rep, items).expect("at least two items")
    })?;
    Ok(ranked
        .into_iter()
        .map(|r| Ranked {
            items: plan.to_template_order(&r.items),
            score: r.score,
        })
        .collect())
}

/// Top-1 outfit for a fixed scorer representation (used by evaluation).
pub fn top_outfits<S: Scorer + ?Sized>(
    scorer: &S,
    rep: &S::Rep,
    plan: &SlotPlan,
    beam: usize,
    top_k: usize,
    rank: &[usize],
) -> Result<Vec<Ranked>> {
    beam_search(plan.parent, &plan.slots, beam, top_k, rank, |items| {
        outfit_score(scorer, rep, items).expect("at least two items")
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepStep {
    pub t: f64,
    pub outfit: Ranked,
}

/// Top-1 outfits along `{a: 1 − t, b: t}` for `t` in `linspace(0, 1, steps)`.
pub fn style_sweep<T: Real>(
    scorer: &ModelScorer<'_, T>,
    catalog: &Catalog,
    parent_id: &str,
    template: &Template,
    style_a: &str,
    style_b: &str,
    steps: usize,
    beam: usize,
) -> Result<Vec<SweepStep>> {
    if steps < 2 {
        return Err(Error::InvalidRequest("a sweep needs at least two steps".into()));
    }
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let mut weights = BTreeMap::new();
            weights.insert(style_a.to_string(), 1.0 - t);
            *weights.entry(style_b.to_string()).or_insert(0.0) += t;
            let request = GenerationRequest {
                parent_id: parent_id.to_string(),
                template: template.clone(),
                style_weights: weights,
                beam,
                top_k: 1,
                sample_seed: None,
                normalize: false,
            };
            let outfit = generate(scorer, catalog, &request)?.remove(0);
            Ok(SweepStep { t, outfit })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(items: &[usize]) -> f64 {
        // Deterministic pseudo-random pair distances.
        let mut s = 0.0;
        let mut n = 0;
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                let (a, b) = (items[i].min(items[j]), items[i].max(items[j]));
                s += ((a * 31 + b * 17) % 13) as f64;
                n += 1;
            }
        }
        -s / n as f64
    }

    #[test]
    fn beam_matches_exhaustive_when_wide() {
        let slots = vec![(10..20).collect::<Vec<_>>(), (20..30).collect()];
        let rank: Vec<usize> = (0..30).collect();
        let beam = beam_search(0, &slots, 10, 100, &rank, score).unwrap();
        let ex = exhaustive_search(0, &slots, 100, &rank, score);
        assert_eq!(beam, ex);
    }

    #[test]
    fn ties_break_by_id() {
        let slots = vec![vec![3, 1, 2]];
        let rank: Vec<usize> = (0..4).collect();
        let out = beam_search(0, &slots, 5, 3, &rank, |_| 0.0).unwrap();
        let firsts: Vec<usize> = out.iter().map(|r| r.items[1]).collect();
        assert_eq!(firsts, vec![1, 2, 3]);
    }

    #[test]
    fn parent_only_template_is_error() {
        let rank = vec![0];
        assert!(matches!(
            beam_search(0, &[], 3, 1, &rank, score),
            Err(Error::InvalidTemplate(_))
        ));
    }

    #[test]
    fn used_items_excluded() {
        let slots = vec![vec![0, 1]];
        let rank = vec![0, 1];
        let out = beam_search(0, &slots, 2, 5, &rank, score).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].items, vec![0, 1]);
    }
}
