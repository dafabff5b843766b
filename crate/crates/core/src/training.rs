//! Two-stage training. Stage 1 fits the set encoder and style classifier on
//! `CE + α_KL·KL`; the encoder is then frozen and pooled style statistics
//! are computed on the train split. Stage 2 fits the item encoder and the
//! subspace-attention network on the two hinge losses.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, Outfit, Split};
use crate::encoder::{EncoderConfig, EncoderKind, FeatureTable};
use crate::error::{Error, Result};
use crate::evaluation::{fitb, EvalInput, RepSource};
use crate::model::{Model, RngState};
use crate::nn::{clip_global_norm, Adam, AdamConfig, Binder, Graph};
use crate::scanet::{NegativeAggregation, ScaNet, ScaNetConfig, TripletBatch, TripletSpec};
use crate::senet::{PooledStyleStats, SeNet, SeNetConfig, StyleDistribution};
use crate::style_rep::{standard_normal, RepParts, StyleRepConfig};
use crate::synthgen::{NegativeKind, NegativeSampler};
use crate::Real;

/// Architecture settings shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_s: usize,
    pub d_z: usize,
    pub heads: usize,
    pub n_sab: usize,
    pub classifier_hidden: usize,
    pub tau: usize,
    pub attn_hidden: usize,
    pub margin: f64,
    /// `None` picks the linear encoder for vector catalogs and the CNN for
    /// image catalogs.
    pub encoder: Option<EncoderKind>,
    pub trainable_tail: bool,
    pub rep: StyleRepConfig,
    pub negative_aggregation: NegativeAggregation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_s: 64,
            d_z: 32,
            heads: 2,
            n_sab: 2,
            classifier_hidden: 32,
            tau: 5,
            attn_hidden: 32,
            margin: 0.3,
            encoder: None,
            trainable_tail: true,
            rep: StyleRepConfig::default(),
            negative_aggregation: NegativeAggregation::Mean,
        }
    }
}

impl ModelSpec {
    pub fn encoder_config(&self, table: &FeatureTable, image_mode: bool) -> EncoderConfig {
        let kind = self.encoder.unwrap_or(if image_mode {
            EncoderKind::TinyCnn
        } else {
            EncoderKind::IdentityLinear
        });
        let mut cfg = match kind {
            EncoderKind::IdentityLinear => EncoderConfig::linear(table.dim(), self.d_s),
            EncoderKind::TinyCnn => EncoderConfig::cnn(self.d_s),
        };
        cfg.trainable_tail = self.trainable_tail;
        cfg
    }

    pub fn senet_config(&self, encoder: EncoderConfig, m: usize) -> SeNetConfig {
        let mut c = SeNetConfig::new(encoder, m, self.rep.clone());
        c.d_z = self.d_z;
        c.heads = self.heads;
        c.n_sab = self.n_sab;
        c.classifier_hidden = self.classifier_hidden;
        c
    }

    pub fn scanet_config(&self, encoder: EncoderConfig, rep: StyleRepConfig, stage2: &Stage2Config) -> ScaNetConfig {
        let mut c = ScaNetConfig::new(encoder, rep);
        c.tau = self.tau;
        c.attn_hidden = self.attn_hidden;
        c.margin = self.margin;
        c.alpha_compat = stage2.alpha_compat;
        c.alpha_style_compat = stage2.alpha_style_compat;
        c.negative_aggregation = self.negative_aggregation;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub alpha_kl: f64,
    /// Stop after this many epochs without a better validation accuracy
    /// (0 disables early stopping).
    pub patience: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch: 128,
            epochs: 20,
            alpha_kl: 0.05,
            patience: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    /// Triplets per batch.
    pub batch: usize,
    pub epochs: usize,
    pub n_neg: usize,
    pub negatives: NegativeKind,
    /// Probability that a triplet uses pooled representations for both the
    /// true and the wrong style.
    pub pooled_rep_prob: f64,
    pub alpha_compat: f64,
    pub alpha_style_compat: f64,
    pub patience: usize,
    /// Validate on at most this many valid outfits (0 = all).
    pub valid_outfits: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            epochs: 30,
            n_neg: 3,
            negatives: NegativeKind::Soft,
            pooled_rep_prob: 0.5,
            alpha_compat: 1.0,
            alpha_style_compat: 0.5,
            patience: 0,
            valid_outfits: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub clip_norm: f64,
    pub model: ModelSpec,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            clip_norm: 5.0,
            model: ModelSpec::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let positive = [s1.lr, s2.lr, self.clip_norm].iter().all(|&x| x > 0.0 && x.is_finite());
        if !positive || s1.batch == 0 || s2.batch == 0 {
            return Err(Error::Config("learning rates, batch sizes and clip norm must be positive".into()));
        }
        if s1.alpha_kl < 0.0 || s2.alpha_compat < 0.0 || s2.alpha_style_compat < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if s2.n_neg == 0 {
            return Err(Error::Config("stage 2 needs at least one negative".into()));
        }
        if !(0.0..=1.0).contains(&s2.pooled_rep_prob) {
            return Err(Error::Config("pooled_rep_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything training reads: catalog, outfits with splits, raw features.
pub struct TrainData<'a> {
    pub catalog: &'a Catalog,
    pub outfits: &'a [Outfit],
    pub table: &'a FeatureTable,
    pub styles: &'a [String],
}

impl TrainData<'_> {
    fn split(&self, split: Split) -> Result<Vec<(Vec<usize>, usize)>> {
        self.outfits
            .iter()
            .filter(|o| o.split == split)
            .map(|o| {
                let pos = o
                    .items
                    .iter()
                    .map(|id| self.catalog.position(id).ok_or_else(|| Error::UnknownItem(id.clone())))
                    .collect::<Result<Vec<_>>>()?;
                Ok((pos, o.style.index))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub classif: f64,
    pub kl: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub compat: f64,
    pub style_compat: f64,
    pub valid_fitb: f64,
}

pub struct Stage1Output<T> {
    pub model: Model<T>,
    pub log: Vec<Stage1Epoch>,
    /// Mean loss of the first and last training batch.
    pub first_loss: f64,
    pub last_loss: f64,
}

pub struct Stage2Output<T> {
    pub model: Model<T>,
    pub log: Vec<Stage2Epoch>,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn rng_state(seed: u64, rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed,
        word_pos: rng.get_word_pos(),
    }
}

fn check_finite(stage: &str, value: f64, lr: f64, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "{stage}: loss {value} at epoch {epoch}, batch {batch} (lr {lr})"
        )))
    }
}

fn accuracy<T: Real>(senet: &SeNet<T>, table: &FeatureTable, sets: &[(Vec<usize>, usize)]) -> Result<f64> {
    if sets.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in sets.chunks(256) {
        let idx: Vec<usize> = chunk.iter().flat_map(|s| s.0.iter().copied()).collect();
        let sizes: Vec<usize> = chunk.iter().map(|s| s.0.len()).collect();
        let probs = senet.classify_sets(&table.rows::<T>(&idx), &sizes)?;
        for (row, s) in probs.rows().into_iter().zip(chunk) {
            correct += usize::from(crate::model::argmax(row.iter().map(|v| v.f64())) == s.1);
        }
    }
    Ok(correct as f64 / sets.len() as f64)
}

/// Classification accuracy of a stage-1 model on one split.
pub fn style_accuracy<T: Real>(model: &Model<T>, data: &TrainData<'_>, split: Split) -> Result<f64> {
    accuracy(&model.senet, data.table, &data.split(split)?)
}

/// Mean per-outfit KL to the unit Gaussian over one split.
pub fn mean_kl<T: Real>(model: &Model<T>, data: &TrainData<'_>, split: Split) -> Result<f64> {
    let sets: Vec<Vec<usize>> = data.split(split)?.into_iter().map(|s| s.0).collect();
    let dists = model.encode_sets(data.table, &sets)?;
    let mut total = 0.0;
    for d in &dists {
        total += d.kl_to_unit()?;
    }
    Ok(total / dists.len().max(1) as f64)
}

/// Pooled statistics of the train split under a frozen encoder.
pub fn pool_styles<T: Real>(senet: &SeNet<T>, data: &TrainData<'_>) -> Result<PooledStyleStats> {
    let train = data.split(Split::Train)?;
    let mut dists = Vec::with_capacity(train.len());
    for chunk in train.chunks(256) {
        let idx: Vec<usize> = chunk.iter().flat_map(|s| s.0.iter().copied()).collect();
        let sizes: Vec<usize> = chunk.iter().map(|s| s.0.len()).collect();
        dists.extend(senet.encode_sets(&data.table.rows::<T>(&idx), &sizes)?);
    }
    PooledStyleStats::from_distributions(data.styles, train.iter().map(|s| s.1).zip(dists.iter()))
}

/// Stage 1: set encoder + style classifier.
pub fn train_stage1<T: Real>(data: &TrainData<'_>, config: &TrainConfig) -> Result<Stage1Output<T>> {
    config.validate()?;
    let cfg = &config.stage1;
    let train = data.split(Split::Train)?;
    let valid = data.split(Split::Valid)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Insufficient("stage 1 needs non-empty train and valid splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoder = config.model.encoder_config(data.table, data.catalog.is_image_mode());
    let mut senet = SeNet::<T>::new(config.model.senet_config(encoder, data.styles.len()), &mut rng)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &senet.store);
    let sample_input = senet.config.rep.classifier_input() == crate::style_rep::ClassifierInput::Sample;
    let d_s = senet.config.d_s;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, senet.store.clone());
    let mut stale = 0usize;
    let (mut first_loss, mut last_loss) = (f64::NAN, f64::NAN);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_cls, mut sum_kl, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let idx: Vec<usize> = chunk.iter().flat_map(|&o| train[o].0.iter().copied()).collect();
            let sizes: Vec<usize> = chunk.iter().map(|&o| train[o].0.len()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&o| train[o].1).collect();
            let x = data.table.rows::<T>(&idx);
            let eps: Option<Array2<T>> = sample_input.then(|| standard_normal(&mut rng, chunk.len(), d_s));
            let mut g = Graph::new();
            let mut p = Binder::new(&senet.store, true);
            let vars = senet.stage1_loss(&mut g, &mut p, &x, &sizes, &labels, eps.as_ref(), cfg.alpha_kl)?;
            let loss = g.scalar(vars.loss).f64();
            check_finite("stage 1", loss, cfg.lr, epoch, b)?;
            if first_loss.is_nan() {
                first_loss = loss;
            }
            last_loss = loss;
            sum_loss += loss * chunk.len() as f64;
            sum_cls += g.scalar(vars.classif).f64() * chunk.len() as f64;
            sum_kl += g.scalar(vars.kl).f64() * chunk.len() as f64;
            n += chunk.len();
            let mut grads = g.backward(vars.loss);
            let mut grads = p.gradients(&mut grads);
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut senet.store, &grads);
            if !senet.store.all_finite() {
                return Err(Error::Diverged(format!(
                    "stage 1: non-finite parameters after epoch {epoch}, batch {b} (lr {})",
                    cfg.lr
                )));
            }
        }
        let valid_accuracy = accuracy(&senet, data.table, &valid)?;
        let nf = n as f64;
        log::info!(
            "stage 1 epoch {epoch}: loss {:.4} classif {:.4} kl {:.4} valid acc {valid_accuracy:.4}",
            sum_loss / nf,
            sum_cls / nf,
            sum_kl / nf
        );
        log.push(Stage1Epoch {
            epoch,
            loss: sum_loss / nf,
            classif: sum_cls / nf,
            kl: sum_kl / nf,
            valid_accuracy,
        });
        if valid_accuracy > best.0 {
            best = (valid_accuracy, senet.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("stage 1: early stop after epoch {epoch}");
                break;
            }
        }
    }
    senet.store.assign_from(&best.1);
    let pooled = pool_styles(&senet, data)?;
    Ok(Stage1Output {
        model: Model {
            styles: data.styles.to_vec(),
            senet,
            pooled: Some(pooled),
            scanet: None,
            rng: rng_state(config.seed, &rng),
        },
        log,
        first_loss,
        last_loss,
    })
}

/// Frozen-encoder Gaussians used to build stage-2 representations.
struct Stage2Cache<T> {
    /// Train outfits: positions and style.
    outfits: Vec<(Vec<usize>, usize)>,
    /// Gaussian of each full outfit.
    full: Vec<StyleDistribution<T>>,
    /// Gaussian of each outfit minus its k-th item (`None` below two items).
    without: Vec<Vec<Option<StyleDistribution<T>>>>,
    /// Train outfits grouped by style.
    by_style: Vec<Vec<usize>>,
}

impl<T: Real> Stage2Cache<T> {
    fn new(model: &Model<T>, data: &TrainData<'_>) -> Result<Self> {
        let outfits = data.split(Split::Train)?;
        let sets: Vec<Vec<usize>> = outfits.iter().map(|o| o.0.clone()).collect();
        let full = model.encode_sets(data.table, &sets)?;
        let mut queries = Vec::new();
        for o in &outfits {
            for k in 0..o.0.len() {
                if o.0.len() > 2 {
                    let mut q = o.0.clone();
                    q.remove(k);
                    queries.push(q);
                }
            }
        }
        let mut encoded = model.encode_sets(data.table, &queries)?.into_iter();
        let without = outfits
            .iter()
            .map(|o| {
                (0..o.0.len())
                    .map(|_| if o.0.len() > 2 { encoded.next() } else { None })
                    .collect()
            })
            .collect();
        let mut by_style = vec![Vec::new(); data.styles.len()];
        for (i, o) in outfits.iter().enumerate() {
            by_style[o.1].push(i);
        }
        Ok(Self {
            outfits,
            full,
            without,
            by_style,
        })
    }
}

/// Stage 2: compatibility network on top of a frozen stage-1 model. `rep`
/// selects the style representation (the style-independent ablation uses
/// [`crate::style_rep::RepVariant::Independent`]).
pub fn train_stage2<T: Real>(
    data: &TrainData<'_>,
    stage1: Model<T>,
    rep: StyleRepConfig,
    config: &TrainConfig,
) -> Result<Stage2Output<T>> {
    config.validate()?;
    let cfg = &config.stage2;
    let pooled = stage1.pooled()?.clone();
    let senet_digest = stage1.senet.store.digest();
    let m = data.styles.len();
    let valid_outfits: Vec<&Outfit> = {
        let mut v: Vec<&Outfit> = data.outfits.iter().filter(|o| o.split == Split::Valid).collect();
        if cfg.valid_outfits > 0 {
            v.truncate(cfg.valid_outfits);
        }
        v
    };
    if valid_outfits.is_empty() {
        return Err(Error::Insufficient("stage 2 needs a non-empty valid split".into()));
    }
    let cache = Stage2Cache::new(&stage1, data)?;
    if m > 1 && cache.by_style.iter().any(Vec::is_empty) {
        return Err(Error::Insufficient("every style needs train outfits".into()));
    }
    let sampler = NegativeSampler::new(data.catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5CA_2E7);
    let encoder = config.model.encoder_config(data.table, data.catalog.is_image_mode());
    let scanet = ScaNet::<T>::new(config.model.scanet_config(encoder, rep, cfg), &mut rng)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &scanet.store);
    let mut model = Model {
        scanet: Some(scanet),
        ..stage1
    };
    let d_s = model.senet.config.d_s;
    let category = |i: usize| data.catalog.item(i).category.high;

    let anchors: Vec<(usize, usize)> = cache
        .outfits
        .iter()
        .enumerate()
        .flat_map(|(o, (items, _))| (0..items.len()).map(move |k| (o, k)))
        .collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, crate::nn::ParamStore<T>)> = None;
    let mut stale = 0usize;
    let (mut first_loss, mut last_loss) = (f64::NAN, f64::NAN);
    let mut order = anchors.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_c, mut sum_s, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut specs = Vec::with_capacity(chunk.len());
            let mut parts = RepParts::<T>::with_capacity(d_s);
            for &(o, k) in chunk {
                let (items, style) = &cache.outfits[o];
                let anchor = items[k];
                let query: Vec<usize> = items.iter().copied().filter(|&i| i != anchor).collect();
                let negatives = sampler.sample(data.catalog, anchor, cfg.negatives, cfg.n_neg, &mut rng)?;
                let wrong_style = if m > 1 {
                    let q = rng.random_range(0..m - 1);
                    if q >= *style {
                        q + 1
                    } else {
                        q
                    }
                } else {
                    *style
                };
                let rep_true = parts.rows();
                if rng.random_bool(cfg.pooled_rep_prob) {
                    parts.push_pooled(&pooled, *style, Some(&mut rng));
                    parts.push_pooled(&pooled, wrong_style, Some(&mut rng));
                } else {
                    match &cache.without[o][k] {
                        Some(d) => parts.push_outfit(d, &pooled, *style, Some(&mut rng)),
                        None => parts.push_pooled(&pooled, *style, Some(&mut rng)),
                    }
                    let other = *cache.by_style[wrong_style].choose(&mut rng).expect("non-empty style");
                    parts.push_outfit(&cache.full[other], &pooled, wrong_style, Some(&mut rng));
                }
                specs.push(TripletSpec {
                    anchor,
                    query,
                    negatives,
                    rep_true,
                    rep_wrong: rep_true + 1,
                });
            }
            let batch = TripletBatch::<T>::new(&specs, category)?;
            let raw = data.table.rows::<T>(&batch.items);
            let scanet = model.scanet.as_mut().expect("set above");
            let mut g = Graph::new();
            let mut p = Binder::new(&scanet.store, true);
            let lambda = scanet.lambda_var(&mut g, &mut p);
            let reps = scanet.config.rep.build_graph(&mut g, &parts, lambda);
            let vars = scanet.triplet_loss(&mut g, &mut p, &raw, reps, &batch)?;
            let loss = g.scalar(vars.loss).f64();
            check_finite("stage 2", loss, cfg.lr, epoch, b)?;
            if first_loss.is_nan() {
                first_loss = loss;
            }
            last_loss = loss;
            let w = chunk.len() as f64;
            sum_loss += loss * w;
            sum_c += g.scalar(vars.compat).f64() * w;
            sum_s += g.scalar(vars.style_compat).f64() * w;
            n += chunk.len();
            let mut grads = g.backward(vars.loss);
            let mut grads = p.gradients(&mut grads);
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut scanet.store, &grads);
            if !scanet.store.all_finite() {
                return Err(Error::Diverged(format!(
                    "stage 2: non-finite parameters after epoch {epoch}, batch {b} (lr {})",
                    cfg.lr
                )));
            }
        }
        let valid_fitb = {
            let scorer = model.scorer(data.catalog, data.table)?;
            let input = EvalInput {
                catalog: data.catalog,
                sampler: &sampler,
            };
            fitb(&scorer, &input, &valid_outfits, NegativeKind::Soft, 4, 1, RepSource::Outfit, config.seed)?.mean
        };
        let nf = n as f64;
        log::info!(
            "stage 2 epoch {epoch}: loss {:.4} compat {:.4} style {:.4} valid fitb {valid_fitb:.4}",
            sum_loss / nf,
            sum_c / nf,
            sum_s / nf
        );
        log.push(Stage2Epoch {
            epoch,
            loss: sum_loss / nf,
            compat: sum_c / nf,
            style_compat: sum_s / nf,
            valid_fitb,
        });
        let store = &model.scanet.as_ref().expect("set above").store;
        if best.as_ref().is_none_or(|b| valid_fitb > b.0) {
            best = Some((valid_fitb, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("stage 2: early stop after epoch {epoch}");
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.scanet.as_mut().expect("set above").store.assign_from(&store);
    }
    if model.senet.store.digest() != senet_digest {
        return Err(Error::Diverged("stage 2 modified the frozen style encoder".into()));
    }
    model.rng = rng_state(config.seed, &rng);
    Ok(Stage2Output {
        model,
        log,
        first_loss,
        last_loss,
    })
}

/// Write per-epoch records as CSV.
pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
