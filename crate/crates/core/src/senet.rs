//! Style encoder network: a set transformer mapping an outfit (a set of item
//! feature rows) to a diagonal Gaussian in style space, plus the style
//! classifier and the pooled per-style Gaussians.
//!
//! Batches of outfits are stacked row-wise and attention is masked so each
//! item attends only within its own outfit; this keeps a whole batch in a
//! handful of matrix products.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::params::normal_matrix;
use crate::nn::{Binder, Graph, LayerNorm, Linear, ParamId, ParamStore, Var};
use crate::style_rep::{ClassifierInput, StyleRepConfig};
use crate::Real;

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeNetConfig {
    pub d_s: usize,
    pub d_z: usize,
    pub heads: usize,
    pub n_sab: usize,
    pub classifier_hidden: usize,
    pub m_styles: usize,
    /// `log σ²` is clamped to `[-logvar_clamp, logvar_clamp]`.
    pub logvar_clamp: f64,
    pub encoder: EncoderConfig,
    pub rep: StyleRepConfig,
}

impl SeNetConfig {
    pub fn new(encoder: EncoderConfig, m_styles: usize, rep: StyleRepConfig) -> Self {
        Self {
            d_s: encoder.d_s,
            d_z: 32,
            heads: 2,
            n_sab: 2,
            classifier_hidden: 32,
            m_styles,
            logvar_clamp: 10.0,
            encoder,
            rep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.d_s != self.d_s {
            return Err(Error::Config("encoder output must equal d_s".into()));
        }
        if self.heads == 0 || !self.d_z.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} must divide d_z {}",
                self.heads, self.d_z
            )));
        }
        if self.m_styles < 2 {
            return Err(Error::Config("at least two styles are required".into()));
        }
        if self.logvar_clamp <= 0.0 {
            return Err(Error::Config("logvar_clamp must be positive".into()));
        }
        Ok(())
    }

    fn classifier_in(&self) -> usize {
        match self.rep.classifier_input() {
            ClassifierInput::Sample => self.d_s,
            ClassifierInput::Params => 2 * self.d_s,
        }
    }
}

/// Multihead attention block `MAB(Q, K)` with residuals and layer norms.
#[derive(Clone, Debug)]
struct Mab {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    heads: usize,
    d_z: usize,
}

impl Mab {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_q: usize, d_kv: usize, d_z: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_q, d_z, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_z, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_z, rng),
            o: Linear::new(store, &format!("{name}.o"), d_z, d_z, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_z),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_z),
            heads,
            d_z,
        }
    }

    /// `mask` is added to the attention logits (0 = visible, very negative =
    /// hidden).
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x_q: Var, x_kv: Var, mask: Var) -> Var {
        let q = self.q.forward(g, p, x_q);
        let k = self.k.forward(g, p, x_kv);
        let v = self.v.forward(g, p, x_kv);
        let dh = self.d_z / self.heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let s = g.add(s, mask);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let h = g.add(q, o);
        let h = self.ln1.forward(g, p, h);
        let ff = self.o.forward(g, p, h);
        let ff = g.relu(ff);
        let h2 = g.add(h, ff);
        self.ln2.forward(g, p, h2)
    }
}

/// Diagonal Gaussian `N(μ, diag σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDistribution<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

impl<T: Real> StyleDistribution<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kl_to_unit(&self) -> Result<f64> {
        kl_to_unit(
            &self.mean.iter().map(|x| x.f64()).collect::<Vec<_>>(),
            &self.var.iter().map(|x| x.f64()).collect::<Vec<_>>(),
        )
    }
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (σ² + μ² − 1 − ln σ²)`.
pub fn kl_to_unit(mean: &[f64], var: &[f64]) -> Result<f64> {
    if mean.len() != var.len() {
        return Err(Error::Dimension {
            expected: mean.len(),
            got: var.len(),
        });
    }
    if let Some(v) = var.iter().find(|&&v| v.is_nan() || v <= 0.0) {
        return Err(Error::InvalidRequest(format!("variance must be positive, got {v}")));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(var)
            .map(|(&m, &v)| v + m * m - 1.0 - v.ln())
            .sum::<f64>())
}

/// Nodes produced by a forward pass over a batch of outfits.
#[derive(Clone, Copy, Debug)]
pub struct DistVars {
    /// `B × d_s`
    pub mean: Var,
    /// Clamped `log σ²`, `B × d_s`.
    pub logvar: Var,
    /// `σ²`, `B × d_s`.
    pub var: Var,
}

/// Stage-1 loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Vars {
    pub loss: Var,
    pub classif: Var,
    pub kl: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SeNet<T> {
    pub config: SeNetConfig,
    pub store: ParamStore<T>,
    encoder: Encoder,
    sabs: Vec<Mab>,
    seed: ParamId,
    pma: Mab,
    head: Linear,
    cls1: Linear,
    cls2: Linear,
}

impl<T: Real> SeNet<T> {
    pub fn new(config: SeNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, "senet.encoder", rng)?;
        let mut sabs = Vec::with_capacity(config.n_sab);
        for i in 0..config.n_sab {
            let d_in = if i == 0 { config.d_s } else { config.d_z };
            sabs.push(Mab::new(&mut store, &format!("senet.sab{i}"), d_in, d_in, config.d_z, config.heads, rng));
        }
        let d_set = if config.n_sab == 0 { config.d_s } else { config.d_z };
        let seed = store.add("senet.pma.seed", normal_matrix(rng, 1, config.d_z, 0.0, 1.0 / (config.d_z as f64).sqrt()), true);
        let pma = Mab::new(&mut store, "senet.pma", config.d_z, d_set, config.d_z, config.heads, rng);
        let head = Linear::new(&mut store, "senet.head", config.d_z, 2 * config.d_s, rng);
        let cls1 = Linear::new(&mut store, "classifier.fc1", config.classifier_in(), config.classifier_hidden, rng);
        let cls2 = Linear::new(&mut store, "classifier.fc2", config.classifier_hidden, config.m_styles, rng);
        Ok(Self {
            config,
            store,
            encoder,
            sabs,
            seed,
            pma,
            head,
            cls1,
            cls2,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Forward a row-stacked batch of outfits (`sizes[b]` consecutive rows
    /// each) to their Gaussians.
    pub fn forward(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: &Array2<T>, sizes: &[usize]) -> Result<DistVars> {
        check_sizes(x.nrows(), sizes)?;
        let n = x.nrows();
        let b = sizes.len();
        let mut block = Array2::from_elem((n, n), T::c(MASKED));
        let mut member = Array2::from_elem((b, n), T::c(MASKED));
        let mut start = 0;
        for (o, &len) in sizes.iter().enumerate() {
            for i in start..start + len {
                for j in start..start + len {
                    block[[i, j]] = T::zero();
                }
                member[[o, i]] = T::zero();
            }
            start += len;
        }
        let block = g.constant(block);
        let member = g.constant(member);

        let mut h = self.encoder.forward(g, p, x)?;
        for sab in &self.sabs {
            h = sab.forward(g, p, h, h, block);
        }
        let ones = g.constant(Array2::ones((b, 1)));
        let seed = p.var(g, self.seed);
        let seeds = g.matmul(ones, seed);
        let pooled = self.pma.forward(g, p, seeds, h, member);
        let out = self.head.forward(g, p, pooled);
        let d = self.config.d_s;
        let mean = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let c = T::c(self.config.logvar_clamp);
        let logvar = g.clamp(raw, -c, c);
        let var = g.exp(logvar);
        Ok(DistVars { mean, logvar, var })
    }

    /// Per-row KL to the unit Gaussian as a `B × 1` node.
    pub fn kl_rows(&self, g: &mut Graph<T>, d: DistVars) -> Var {
        let m2 = g.mul(d.mean, d.mean);
        let t = g.add(d.var, m2);
        let t = g.sub(t, d.logvar);
        let t = g.add_const(t, -T::one());
        let s = g.row_sums(t);
        g.scale(s, T::c(0.5))
    }

    /// Classifier input rows: a reparameterised sample (with `eps`) or the
    /// parameters. With `eps = None` the sample path uses the mean.
    pub fn classifier_input(&self, g: &mut Graph<T>, d: DistVars, eps: Option<&Array2<T>>) -> Var {
        match self.config.rep.classifier_input() {
            ClassifierInput::Params => g.concat_cols(&[d.mean, d.var]),
            ClassifierInput::Sample => match eps {
                None => d.mean,
                Some(eps) => {
                    let half = g.scale(d.logvar, T::c(0.5));
                    let sd = g.exp(half);
                    let e = g.constant(eps.clone());
                    let noise = g.mul(sd, e);
                    g.add(d.mean, noise)
                }
            },
        }
    }

    pub fn classifier_logits(&self, g: &mut Graph<T>, p: &mut Binder<T>, input: Var) -> Var {
        let h = self.cls1.forward(g, p, input);
        let h = g.relu(h);
        self.cls2.forward(g, p, h)
    }

    /// `mean CE + alpha_kl · mean KL` over the batch.
    pub fn stage1_loss(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        x: &Array2<T>,
        sizes: &[usize],
        labels: &[usize],
        eps: Option<&Array2<T>>,
        alpha_kl: f64,
    ) -> Result<Stage1Vars> {
        let d = self.forward(g, p, x, sizes)?;
        let input = self.classifier_input(g, d, eps);
        let logits = self.classifier_logits(g, p, input);
        let classif = g.softmax_xent(logits, labels);
        let kl_rows = self.kl_rows(g, d);
        let kl = g.mean_all(kl_rows);
        let weighted = g.scale(kl, T::c(alpha_kl));
        let loss = g.add(classif, weighted);
        Ok(Stage1Vars {
            loss,
            classif,
            kl,
            logits,
        })
    }

    /// Eval-mode Gaussians for a row-stacked batch.
    pub fn encode_sets(&self, x: &Array2<T>, sizes: &[usize]) -> Result<Vec<StyleDistribution<T>>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let d = self.forward(&mut g, &mut p, x, sizes)?;
        let (mean, var) = (g.value(d.mean), g.value(d.var));
        Ok((0..sizes.len())
            .map(|i| StyleDistribution {
                mean: mean.row(i).to_owned(),
                var: var.row(i).to_owned(),
            })
            .collect())
    }

    /// Gaussian of a single outfit given its item feature rows.
    pub fn encode_outfit(&self, x: &Array2<T>) -> Result<StyleDistribution<T>> {
        Ok(self.encode_sets(x, &[x.nrows()])?.remove(0))
    }

    /// Style probabilities for a batch (sample input uses the mean).
    pub fn classify_sets(&self, x: &Array2<T>, sizes: &[usize]) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let d = self.forward(&mut g, &mut p, x, sizes)?;
        let input = self.classifier_input(&mut g, d, None);
        let logits = self.classifier_logits(&mut g, &mut p, input);
        let probs = g.softmax_rows(logits);
        Ok(g.value(probs).clone())
    }

    /// Style probabilities from a precomputed Gaussian or sample.
    pub fn classify(&self, input: &ClassifierFeed<T>) -> Result<Vec<f64>> {
        let row = match (input, self.config.rep.classifier_input()) {
            (ClassifierFeed::Sample(s), ClassifierInput::Sample) => s.clone(),
            (ClassifierFeed::Dist(d), ClassifierInput::Params) => {
                ndarray::concatenate(ndarray::Axis(0), &[d.mean.view(), d.var.view()]).expect("1-d concat")
            }
            (ClassifierFeed::Dist(d), ClassifierInput::Sample) => d.mean.clone(),
            (ClassifierFeed::Sample(s), ClassifierInput::Params) => {
                return Err(Error::Dimension {
                    expected: 2 * self.config.d_s,
                    got: s.len(),
                })
            }
        };
        if row.len() != self.cls1.d_in {
            return Err(Error::Dimension {
                expected: self.cls1.d_in,
                got: row.len(),
            });
        }
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let x = g.row(row.as_slice().expect("contiguous"));
        let logits = self.classifier_logits(&mut g, &mut p, x);
        let probs = g.softmax_rows(logits);
        Ok(g.value(probs).iter().map(|v| v.f64()).collect())
    }
}

/// Input to [`SeNet::classify`].
#[derive(Clone, Debug)]
pub enum ClassifierFeed<T> {
    Sample(Array1<T>),
    Dist(StyleDistribution<T>),
}

fn check_sizes(rows: usize, sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidRequest("cannot encode an empty set".into()));
    }
    let total: usize = sizes.iter().sum();
    if total != rows {
        return Err(Error::Dimension {
            expected: total,
            got: rows,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledStyle {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Pooled Gaussian per style: mean of outfit means and `(1/n²) Σ σ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledStyleStats {
    pub styles: Vec<PooledStyle>,
}

/// Per-style running sums of means, variances and outfit count.
type MomentSums = (Vec<f64>, Vec<f64>, usize);

impl PooledStyleStats {
    /// Pool `(style index, distribution)` pairs over `names.len()` styles.
    pub fn from_distributions<'a, T: Real + 'a>(
        names: &[String],
        dists: impl IntoIterator<Item = (usize, &'a StyleDistribution<T>)>,
    ) -> Result<Self> {
        let mut sums: Vec<Option<MomentSums>> = vec![None; names.len()];
        for (s, d) in dists {
            let entry = sums[s].get_or_insert_with(|| (vec![0.0; d.dim()], vec![0.0; d.dim()], 0));
            for (acc, x) in entry.0.iter_mut().zip(d.mean.iter()) {
                *acc += x.f64();
            }
            for (acc, x) in entry.1.iter_mut().zip(d.var.iter()) {
                *acc += x.f64();
            }
            entry.2 += 1;
        }
        let styles = names
            .iter()
            .zip(sums)
            .map(|(name, sum)| {
                let (mean, var, n) =
                    sum.ok_or_else(|| Error::Insufficient(format!("style {name} has no training outfits")))?;
                let nf = n as f64;
                Ok(PooledStyle {
                    name: name.clone(),
                    mean: mean.into_iter().map(|x| x / nf).collect(),
                    var: var.into_iter().map(|x| x / (nf * nf)).collect(),
                    count: n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { styles })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn arrays<T: Real>(&self, style: usize) -> (Array1<T>, Array1<T>) {
        let s = &self.styles[style];
        (
            s.mean.iter().map(|&x| T::c(x)).collect(),
            s.var.iter().map(|&x| T::c(x)).collect(),
        )
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.styles.iter().position(|s| s.name == name)
    }
}
