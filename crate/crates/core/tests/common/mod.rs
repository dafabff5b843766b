#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylefit::encoder::{EncoderConfig, FeatureTable};
use stylefit::nn::ParamStore;
use stylefit::scanet::{ScaNet, ScaNetConfig};
use stylefit::senet::{SeNet, SeNetConfig};
use stylefit::style_rep::{RepVariant, StyleRepConfig};
use stylefit::synthgen::{generate, Dataset, GenConfig};
use stylefit::training::{TrainConfig, TrainData};
use stylefit::Real;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Fixture {
    pub ds: Dataset,
    pub table: FeatureTable,
    pub styles: Vec<String>,
}

impl Fixture {
    pub fn new(config: &GenConfig) -> Self {
        let ds = generate(config).unwrap();
        let table = FeatureTable::from_catalog(&ds.catalog, std::path::Path::new(".")).unwrap();
        let styles = ds.styles.names().to_vec();
        Self { ds, table, styles }
    }

    pub fn small(n_outfits: usize) -> Self {
        Self::new(&GenConfig {
            n_outfits,
            ..GenConfig::default()
        })
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            catalog: &self.ds.catalog,
            outfits: &self.ds.outfits,
            table: &self.table,
            styles: &self.styles,
        }
    }
}

/// A few quick epochs on a narrow model.
pub fn quick_train(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.d_s = 16;
    cfg.model.d_z = 16;
    cfg.stage1.epochs = epochs;
    cfg.stage2.epochs = epochs;
    cfg
}

pub fn random_rows<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::c(scale * rng.random_range(-1.0..1.0)))
}

pub fn senet<T: Real>(seed: u64, d_in: usize, d_s: usize, d_z: usize, m: usize, variant: RepVariant) -> SeNet<T> {
    let mut cfg = SeNetConfig::new(EncoderConfig::linear(d_in, d_s), m, StyleRepConfig::new(variant));
    cfg.d_z = d_z;
    cfg.classifier_hidden = d_z;
    SeNet::new(cfg, &mut rng(seed)).unwrap()
}

pub fn scanet<T: Real>(seed: u64, d_in: usize, d_s: usize, hidden: usize) -> ScaNet<T> {
    let mut cfg = ScaNetConfig::new(EncoderConfig::linear(d_in, d_s), StyleRepConfig::new(RepVariant::Params));
    cfg.attn_hidden = hidden;
    ScaNet::new(cfg, &mut rng(seed)).unwrap()
}

/// Largest elementwise relative error, `|a − n| / max(|a|, |n|, floor)`,
/// between analytic gradients and central differences.
pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn grad_check<M: Clone>(
    model: &M,
    store: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> f64,
    analytic: &[Option<Array2<f64>>],
    h: f64,
    floor: f64,
) -> GradCheck {
    let mut probe = model.clone();
    let ids: Vec<_> = store(&mut probe).ids().collect();
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (k, id) in ids.into_iter().enumerate() {
        let Some(grad) = &analytic[k] else { continue };
        let (rows, cols) = grad.dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store(&mut probe).get(id)[[r, c]];
                store(&mut probe).get_mut(id)[[r, c]] = orig + h;
                let up = loss(&probe);
                store(&mut probe).get_mut(id)[[r, c]] = orig - h;
                let down = loss(&probe);
                store(&mut probe).get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = grad[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                out.checked += 1;
                if rel > out.max_rel {
                    out.max_rel = rel;
                    out.worst = format!("{}[{r},{c}] analytic {a:.6e} numeric {numeric:.6e}", store(&mut probe).name(id));
                }
            }
        }
    }
    out
}

/// Small dataset plus a briefly trained model and its r = 0 ablation.
pub struct Trained {
    pub fx: Fixture,
    pub model: stylefit::model::Model<f32>,
    pub ablation: stylefit::model::Model<f32>,
}

pub fn trained(n_outfits: usize, epochs: usize) -> Trained {
    use stylefit::training::{train_stage1, train_stage2};
    let fx = Fixture::small(n_outfits);
    let mut cfg = quick_train(epochs);
    cfg.stage1.lr = 1e-3;
    cfg.stage2.lr = 1e-3;
    let s1 = train_stage1::<f32>(&fx.data(), &cfg).unwrap().model;
    let model = train_stage2(&fx.data(), s1.clone(), cfg.model.rep.clone(), &cfg).unwrap().model;
    let ablation = train_stage2(&fx.data(), s1, StyleRepConfig::new(RepVariant::Independent), &cfg)
        .unwrap()
        .model;
    Trained { fx, model, ablation }
}
