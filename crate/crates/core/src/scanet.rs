//! Style-conditioned compatibility network: masked subspace embeddings whose
//! mixing weights depend on the (anchor, target) categories and the style
//! representation, plus the compatibility and style-compatibility triplet
//! losses.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::HighCategory;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::params::normal_matrix;
use crate::nn::{Binder, Graph, Linear, ParamId, ParamStore, Var};
use crate::style_rep::StyleRepConfig;
use crate::Real;

const N_CAT: usize = HighCategory::COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeAggregation {
    #[default]
    Mean,
    /// Hardest (closest) negative.
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaNetConfig {
    pub d_s: usize,
    /// Number of subspace masks.
    pub tau: usize,
    pub attn_hidden: usize,
    pub margin: f64,
    pub alpha_compat: f64,
    pub alpha_style_compat: f64,
    pub mask_init_mean: f64,
    pub mask_init_std: f64,
    pub negative_aggregation: NegativeAggregation,
    pub encoder: EncoderConfig,
    pub rep: StyleRepConfig,
}

impl ScaNetConfig {
    pub fn new(encoder: EncoderConfig, rep: StyleRepConfig) -> Self {
        Self {
            d_s: encoder.d_s,
            tau: 5,
            attn_hidden: 32,
            margin: 0.3,
            alpha_compat: 1.0,
            alpha_style_compat: 0.5,
            mask_init_mean: 0.9,
            mask_init_std: 0.7,
            negative_aggregation: NegativeAggregation::Mean,
            encoder,
            rep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.d_s != self.d_s {
            return Err(Error::Config("encoder output must equal d_s".into()));
        }
        if self.tau == 0 || self.attn_hidden == 0 {
            return Err(Error::Config("tau and attn_hidden must be positive".into()));
        }
        if self.margin < 0.0 || self.alpha_compat < 0.0 || self.alpha_style_compat < 0.0 {
            return Err(Error::Config("margin and loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ordered item pairs to compare. `a`/`t` index rows of the item embedding
/// matrix, `rep` rows of the representation matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub a: Vec<usize>,
    pub t: Vec<usize>,
    pub ca: Vec<HighCategory>,
    pub ct: Vec<HighCategory>,
    pub rep: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn push(&mut self, a: usize, ca: HighCategory, t: usize, ct: HighCategory, rep: usize) -> usize {
        self.a.push(a);
        self.t.push(t);
        self.ca.push(ca);
        self.ct.push(ct);
        self.rep.push(rep);
        self.a.len() - 1
    }
}

/// One training triplet in catalog positions. Representation indices refer
/// to rows of the batch representation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSpec {
    pub anchor: usize,
    pub query: Vec<usize>,
    pub negatives: Vec<usize>,
    pub rep_true: usize,
    pub rep_wrong: usize,
}

/// Pairs and averaging matrices for a batch of triplets.
#[derive(Clone, Debug)]
pub struct TripletBatch<T> {
    /// Catalog positions of the distinct items, in first-use order.
    pub items: Vec<usize>,
    pub pairs: PairBatch,
    /// `T × P`: mean anchor–query distance under the true style.
    pub pos: Array2<T>,
    /// `(T·n_neg) × P`: per-negative mean distance, row `t·n_neg + j`.
    pub neg: Array2<T>,
    /// `T × P`: mean anchor–query distance under the wrong style.
    pub wrong: Array2<T>,
    pub n_neg: usize,
}

impl<T: Real> TripletBatch<T> {
    pub fn new(specs: &[TripletSpec], category: impl Fn(usize) -> HighCategory) -> Result<Self> {
        let n_neg = specs.first().map_or(0, |s| s.negatives.len());
        if n_neg == 0 {
            return Err(Error::InvalidRequest("triplets need at least one negative".into()));
        }
        let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
        let mut items = Vec::new();
        let mut row_of = |i: usize| -> usize {
            *rows.entry(i).or_insert_with(|| {
                items.push(i);
                items.len() - 1
            })
        };
        let mut pairs = PairBatch::default();
        // (triplet row in matrix, pair index, weight)
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut wrong = Vec::new();
        for (k, s) in specs.iter().enumerate() {
            if s.query.is_empty() {
                return Err(Error::InvalidRequest("triplet query set is empty".into()));
            }
            if s.negatives.len() != n_neg {
                return Err(Error::InvalidRequest("all triplets need the same negative count".into()));
            }
            let w = T::c(1.0 / s.query.len() as f64);
            let ca = category(s.anchor);
            let ra = row_of(s.anchor);
            for &q in &s.query {
                let ct = category(q);
                let rq = row_of(q);
                pos.push((k, pairs.push(ra, ca, rq, ct, s.rep_true), w));
                wrong.push((k, pairs.push(ra, ca, rq, ct, s.rep_wrong), w));
                for (j, &n) in s.negatives.iter().enumerate() {
                    let cn = category(n);
                    let rn = row_of(n);
                    neg.push((k * n_neg + j, pairs.push(rn, cn, rq, ct, s.rep_true), w));
                }
            }
        }
        let p = pairs.len();
        let fill = |n_rows: usize, entries: &[(usize, usize, T)]| {
            let mut m = Array2::zeros((n_rows, p));
            for &(r, c, w) in entries {
                m[[r, c]] = w;
            }
            m
        };
        Ok(Self {
            pos: fill(specs.len(), &pos),
            neg: fill(specs.len() * n_neg, &neg),
            wrong: fill(specs.len(), &wrong),
            items,
            pairs,
            n_neg,
        })
    }

    pub fn triplets(&self) -> usize {
        self.pos.nrows()
    }
}

/// Loss nodes for a triplet batch.
#[derive(Clone, Copy, Debug)]
pub struct TripletVars {
    pub loss: Var,
    pub compat: Var,
    pub style_compat: Var,
    /// `T × 1` each.
    pub d_pos: Var,
    pub d_neg: Var,
    pub d_wrong: Var,
}

#[derive(Clone, Debug)]
pub struct ScaNet<T> {
    pub config: ScaNetConfig,
    pub store: ParamStore<T>,
    encoder: Encoder,
    masks: ParamId,
    cat_fc: Linear,
    rep_fc: Linear,
    fc1: Linear,
    fc2: Linear,
    lambda: ParamId,
}

impl<T: Real> ScaNet<T> {
    pub fn new(config: ScaNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, "scanet.encoder", rng)?;
        let masks = store.add(
            "scanet.masks",
            normal_matrix(rng, config.tau, config.d_s, config.mask_init_mean, config.mask_init_std),
            true,
        );
        let h = config.attn_hidden;
        let cat_fc = Linear::new(&mut store, "scanet.attn.cat", 2 * N_CAT, h, rng);
        let rep_fc = Linear::new(&mut store, "scanet.attn.rep", 2 * config.d_s, h, rng);
        let fc1 = Linear::new(&mut store, "scanet.attn.fc1", 2 * h, h, rng);
        let fc2 = Linear::new(&mut store, "scanet.attn.fc2", h, config.tau, rng);
        let learn = config.rep.learned_lambda && config.rep.uses_lambda();
        let lambda = store.add("scanet.lambda", Array2::ones((1, 1)), learn);
        Ok(Self {
            config,
            store,
            encoder,
            masks,
            cat_fc,
            rep_fc,
            fc1,
            fc2,
            lambda,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn lambda(&self) -> f64 {
        self.store.get(self.lambda)[[0, 0]].f64()
    }

    pub fn lambda_var(&self, g: &mut Graph<T>, p: &mut Binder<T>) -> Var {
        p.var(g, self.lambda)
    }

    pub fn masks(&self) -> &Array2<T> {
        self.store.get(self.masks)
    }

    fn one_hot(ca: &[HighCategory], ct: &[HighCategory]) -> Array2<T> {
        let mut m = Array2::zeros((ca.len(), 2 * N_CAT));
        for (i, (a, t)) in ca.iter().zip(ct).enumerate() {
            m[[i, a.index()]] = T::one();
            m[[i, N_CAT + t.index()]] = T::one();
        }
        m
    }

    /// Attention weights `ω` (`P × τ`) for category pairs and rep features.
    fn attention(&self, g: &mut Graph<T>, p: &mut Binder<T>, ca: &[HighCategory], ct: &[HighCategory], rep_feat: Var) -> Var {
        let oh = g.constant(Self::one_hot(ca, ct));
        let a = self.cat_fc.forward(g, p, oh);
        let a = g.relu(a);
        let h = g.concat_cols(&[a, rep_feat]);
        let h = self.fc1.forward(g, p, h);
        let h = g.relu(h);
        let logits = self.fc2.forward(g, p, h);
        g.softmax_rows(logits)
    }

    fn rep_features(&self, g: &mut Graph<T>, p: &mut Binder<T>, reps: Var) -> Var {
        let b = self.rep_fc.forward(g, p, reps);
        g.relu(b)
    }

    /// Distances (`P × 1`) for `pairs` given item embeddings `x` (`U × d_s`)
    /// and representations `reps` (`Q × 2d_s`).
    pub fn pair_distances(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var, reps: Var, pairs: &PairBatch) -> Var {
        let feat = self.rep_features(g, p, reps);
        let feat = g.gather_rows(feat, &pairs.rep);
        let masks = p.var(g, self.masks);
        let w_a = self.attention(g, p, &pairs.ca, &pairs.ct, feat);
        let w_t = self.attention(g, p, &pairs.ct, &pairs.ca, feat);
        let gate_a = g.matmul(w_a, masks);
        let gate_t = g.matmul(w_t, masks);
        let xa = g.gather_rows(x, &pairs.a);
        let xt = g.gather_rows(x, &pairs.t);
        let fa = g.mul(xa, gate_a);
        let ft = g.mul(xt, gate_t);
        let diff = g.sub(fa, ft);
        g.row_norm(diff)
    }

    /// Item embeddings for raw feature rows.
    pub fn embed_items(&self, g: &mut Graph<T>, p: &mut Binder<T>, raw: &Array2<T>) -> Result<Var> {
        self.encoder.forward(g, p, raw)
    }

    /// Weighted triplet losses. `raw` holds the raw inputs of `batch.items`.
    pub fn triplet_loss(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        raw: &Array2<T>,
        reps: Var,
        batch: &TripletBatch<T>,
    ) -> Result<TripletVars> {
        let x = self.embed_items(g, p, raw)?;
        let d = self.pair_distances(g, p, x, reps, &batch.pairs);
        let pos = g.constant(batch.pos.clone());
        let d_pos = g.matmul(pos, d);
        let wrong = g.constant(batch.wrong.clone());
        let d_wrong = g.matmul(wrong, d);
        let neg = g.constant(batch.neg.clone());
        let d_negs = g.matmul(neg, d);
        let t = batch.triplets();
        let d_neg = match self.config.negative_aggregation {
            NegativeAggregation::Mean => {
                let mut avg = Array2::zeros((t, t * batch.n_neg));
                let w = T::c(1.0 / batch.n_neg as f64);
                for k in 0..t {
                    for j in 0..batch.n_neg {
                        avg[[k, k * batch.n_neg + j]] = w;
                    }
                }
                let avg = g.constant(avg);
                g.matmul(avg, d_negs)
            }
            NegativeAggregation::Min => {
                let vals = g.value(d_negs).clone();
                let idx: Vec<usize> = (0..t)
                    .map(|k| {
                        let rows = k * batch.n_neg..(k + 1) * batch.n_neg;
                        rows.min_by(|&a, &b| vals[[a, 0]].partial_cmp(&vals[[b, 0]]).expect("finite distances"))
                            .expect("n_neg > 0")
                    })
                    .collect();
                g.gather_rows(d_negs, &idx)
            }
        };
        let m = T::c(self.config.margin);
        let c = g.sub(d_pos, d_neg);
        let c = g.add_const(c, m);
        let c = g.relu(c);
        let compat = g.mean_all(c);
        let s = g.sub(d_pos, d_wrong);
        let s = g.add_const(s, m);
        let s = g.relu(s);
        let style_compat = g.mean_all(s);
        let a = g.scale(compat, T::c(self.config.alpha_compat));
        let b = g.scale(style_compat, T::c(self.config.alpha_style_compat));
        let loss = g.add(a, b);
        Ok(TripletVars {
            loss,
            compat,
            style_compat,
            d_pos,
            d_neg,
            d_wrong,
        })
    }

    /// Eval-mode embeddings of raw inputs.
    pub fn encode_items(&self, raw: &Array2<T>) -> Result<Array2<T>> {
        self.encoder.encode_batch(&self.store, raw)
    }

    /// Attention weights for one (anchor category, target category, r).
    pub fn attention_weights(&self, ca: HighCategory, ct: HighCategory, rep: &Array1<T>) -> Result<Array1<T>> {
        self.check_rep(rep)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let r = g.row(rep.as_slice().expect("contiguous"));
        let feat = self.rep_features(&mut g, &mut p, r);
        let w = self.attention(&mut g, &mut p, &[ca], &[ct], feat);
        Ok(g.value(w).row(0).to_owned())
    }

    /// `ψ(x; c_a, c_t, r) = Σ_j ω_j (x ⊙ m_j)` for an already-encoded item.
    pub fn embed(&self, x: &Array1<T>, ca: HighCategory, ct: HighCategory, rep: &Array1<T>) -> Result<Array1<T>> {
        if x.len() != self.config.d_s {
            return Err(Error::Dimension {
                expected: self.config.d_s,
                got: x.len(),
            });
        }
        let w = self.attention_weights(ca, ct, rep)?;
        Ok(x * &w.dot(self.masks()))
    }

    fn check_rep(&self, rep: &Array1<T>) -> Result<()> {
        if rep.len() != 2 * self.config.d_s {
            return Err(Error::Dimension {
                expected: 2 * self.config.d_s,
                got: rep.len(),
            });
        }
        Ok(())
    }

    /// Precompute the gates `ω M` of every category pair under `rep`.
    pub fn gates(&self, rep: &Array1<T>) -> Result<GateTable<T>> {
        self.check_rep(rep)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let r = g.row(rep.as_slice().expect("contiguous"));
        let feat = self.rep_features(&mut g, &mut p, r);
        let (mut ca, mut ct) = (Vec::new(), Vec::new());
        for a in HighCategory::ALL {
            for t in HighCategory::ALL {
                ca.push(a);
                ct.push(t);
            }
        }
        let feat = g.gather_rows(feat, &vec![0; ca.len()]);
        let w = self.attention(&mut g, &mut p, &ca, &ct, feat);
        let masks = p.var(&mut g, self.masks);
        let gates = g.matmul(w, masks);
        Ok(GateTable {
            gates: g.value(gates).clone(),
        })
    }
}

/// Gates `ω(c_a, c_t, r) M` for all 36 ordered category pairs of one r.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTable<T> {
    gates: Array2<T>,
}

impl<T: Real> GateTable<T> {
    pub fn gate(&self, ca: HighCategory, ct: HighCategory) -> ndarray::ArrayView1<'_, T> {
        self.gates.row(ca.index() * N_CAT + ct.index())
    }

    /// `‖x_a ⊙ g(c_a, c_t) − x_t ⊙ g(c_t, c_a)‖₂`.
    pub fn distance(
        &self,
        xa: ndarray::ArrayView1<'_, T>,
        ca: HighCategory,
        xt: ndarray::ArrayView1<'_, T>,
        ct: HighCategory,
    ) -> f64 {
        let ga = self.gate(ca, ct);
        let gt = self.gate(ct, ca);
        let mut s = 0.0;
        for k in 0..xa.len() {
            let d = (xa[k] * ga[k] - xt[k] * gt[k]).f64();
            s += d * d;
        }
        s.sqrt()
    }
}
