//! Item feature backbone: a linear map for vector features or a tiny CNN for
//! 16×16 RGB images, followed by the networks that consume `d_s`-dim rows.

use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, FeatureSource};
use crate::error::{Error, Result};
use crate::nn::params::normal_matrix;
use crate::nn::{Binder, ConvGeom, Graph, Linear, ParamId, ParamStore, Var};
use crate::synthgen::IMAGE_SIZE;
use crate::Real;

pub const IMAGE_CHANNELS: usize = 3;
/// Flattened CHW length of one image.
pub const IMAGE_DIM: usize = IMAGE_CHANNELS * (IMAGE_SIZE as usize) * (IMAGE_SIZE as usize);

const CNN_CHANNELS: [usize; 4] = [3, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    IdentityLinear,
    TinyCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_in: usize,
    pub d_s: usize,
    /// Linear: whether the map is trained. CNN: whether the last conv block
    /// and the output layer are trained (earlier blocks stay frozen).
    pub trainable_tail: bool,
}

impl EncoderConfig {
    pub fn linear(d_in: usize, d_s: usize) -> Self {
        Self {
            kind: EncoderKind::IdentityLinear,
            d_in,
            d_s,
            trainable_tail: true,
        }
    }

    pub fn cnn(d_s: usize) -> Self {
        Self {
            kind: EncoderKind::TinyCnn,
            d_in: IMAGE_DIM,
            d_s,
            trainable_tail: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.d_in == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.kind == EncoderKind::TinyCnn && self.d_in != IMAGE_DIM {
            return Err(Error::Config(format!(
                "tiny_cnn expects {IMAGE_DIM} inputs (3×{IMAGE_SIZE}×{IMAGE_SIZE}), got {}",
                self.d_in
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
enum Layers {
    Linear(Linear),
    Cnn { convs: [Conv; 3], fc: Linear },
}

/// Parameter handles for one encoder inside a network's [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Layers,
}

impl Encoder {
    pub fn new<T: Real>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let layers = match config.kind {
            EncoderKind::IdentityLinear => {
                let mut w: Array2<T> = normal_matrix(rng, config.d_in, config.d_s, 0.0, 0.01);
                for i in 0..config.d_in.min(config.d_s) {
                    w[[i, i]] += T::one();
                }
                let weight = store.add(format!("{prefix}.linear.weight"), w, config.trainable_tail);
                let bias = store.add(
                    format!("{prefix}.linear.bias"),
                    Array2::zeros((1, config.d_s)),
                    config.trainable_tail,
                );
                Layers::Linear(Linear {
                    weight,
                    bias,
                    d_in: config.d_in,
                    d_out: config.d_s,
                })
            }
            EncoderKind::TinyCnn => {
                let mut side = IMAGE_SIZE as usize;
                let convs = std::array::from_fn(|i| {
                    let (cin, cout) = (CNN_CHANNELS[i], CNN_CHANNELS[i + 1]);
                    let geom = ConvGeom {
                        channels: cin,
                        height: side,
                        width: side,
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    };
                    side = geom.out_height();
                    let fan_in = cin * 9;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let trainable = config.trainable_tail && i == 2;
                    let weight = store.add(
                        format!("{prefix}.conv{}.weight", i + 1),
                        normal_matrix(rng, cout, fan_in, 0.0, std),
                        trainable,
                    );
                    let bias = store.add(format!("{prefix}.conv{}.bias", i + 1), Array2::zeros((cout, 1)), trainable);
                    Conv { weight, bias, geom }
                });
                let fc = Linear::new(store, &format!("{prefix}.fc"), CNN_CHANNELS[3], config.d_s, rng);
                fc.set_trainable(store, config.trainable_tail);
                Layers::Cnn { convs, fc }
            }
        };
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encode the rows of `x` (`n × d_in`) to an `n × d_s` node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: &Array2<T>) -> Result<Var> {
        if x.ncols() != self.config.d_in {
            return Err(Error::Dimension {
                expected: self.config.d_in,
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        match &self.layers {
            Layers::Linear(lin) => {
                let xv = g.constant(x.clone());
                Ok(lin.forward(g, p, xv))
            }
            Layers::Cnn { convs, fc } => {
                let mut rows = Vec::with_capacity(x.nrows());
                let side = IMAGE_SIZE as usize;
                for row in x.rows() {
                    let img = row
                        .to_owned()
                        .into_shape_with_order((IMAGE_CHANNELS, side * side))
                        .expect("image row shape");
                    let mut h = g.constant(img);
                    for conv in convs {
                        let cols = g.im2col(h, conv.geom);
                        let w = p.var(g, conv.weight);
                        let b = p.var(g, conv.bias);
                        let y = g.matmul(w, cols);
                        let y = g.add_col(y, b);
                        h = g.relu(y);
                    }
                    let t = g.transpose(h);
                    let pooled = g.col_means(t);
                    rows.push(fc.forward(g, p, pooled));
                }
                Ok(g.concat_rows(&rows))
            }
        }
    }

    /// Eval-mode encoding without gradient tracking.
    pub fn encode_batch<T: Real>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let mut p = Binder::new(store, false);
        let v = self.forward(&mut g, &mut p, x)?;
        Ok(g.value(v).clone())
    }
}

/// Raw item inputs (vector features or flattened images) by catalog position.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    data: Array2<f32>,
}

impl FeatureTable {
    pub fn new(data: Array2<f32>) -> Self {
        Self { data }
    }

    /// Build from a catalog. Image paths are resolved against `root`.
    pub fn from_catalog(catalog: &Catalog, root: &Path) -> Result<Self> {
        if catalog.is_empty() {
            return Ok(Self {
                data: Array2::zeros((0, 0)),
            });
        }
        let dim = catalog.feature_dim().unwrap_or(IMAGE_DIM);
        let mut data = Array2::zeros((catalog.len(), dim));
        for (i, item) in catalog.items().iter().enumerate() {
            match &item.features {
                FeatureSource::Vector(v) => {
                    data.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
                }
                FeatureSource::Image(rel) => {
                    let row = load_image(&root.join(rel))?;
                    data.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
                }
            }
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn raw(&self) -> &Array2<f32> {
        &self.data
    }

    /// Rows at `idx`, converted to `T`.
    pub fn rows<T: Real>(&self, idx: &[usize]) -> Array2<T> {
        let mut out = Array2::zeros((idx.len(), self.dim()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r)
                .iter_mut()
                .zip(self.data.slice(s![i, ..]))
                .for_each(|(o, &v)| *o = T::c(v as f64));
        }
        out
    }

    pub fn all<T: Real>(&self) -> Array2<T> {
        self.data.mapv(|v| T::c(v as f64))
    }
}

/// Decode a 16×16 RGB image to a CHW vector scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Vec<f32>> {
    let err = |message: String| Error::Image {
        path: path.display().to_string(),
        message,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb8();
    if img.dimensions() != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(err(format!(
            "expected {IMAGE_SIZE}×{IMAGE_SIZE}, got {}×{}",
            img.width(),
            img.height()
        )));
    }
    Ok(image_to_chw(&img))
}

pub fn image_to_chw(img: &image::RgbImage) -> Vec<f32> {
    let n = (img.width() * img.height()) as usize;
    let mut out = vec![0.0; IMAGE_CHANNELS * n];
    for (k, px) in img.pixels().enumerate() {
        for c in 0..IMAGE_CHANNELS {
            out[c * n + k] = px.0[c] as f32 / 255.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(EncoderConfig::linear(3, 3), &mut store, "enc", &mut rng).unwrap();
        let w = store.find("enc.linear.weight").unwrap();
        *store.get_mut(w) = Array2::eye(3);
        let x = ndarray::array![[1.0, -2.0, 0.5]];
        assert_eq!(enc.encode_batch(&store, &x).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(EncoderConfig::linear(4, 2), &mut store, "enc", &mut rng).unwrap();
        let b = store.find("enc.linear.bias").unwrap();
        *store.get_mut(b) = ndarray::array![[0.3, -0.7]];
        let out = enc.encode_batch(&store, &Array2::zeros((1, 4))).unwrap();
        assert_eq!(out, ndarray::array![[0.3, -0.7]]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(EncoderConfig::linear(4, 2), &mut store, "enc", &mut rng).unwrap();
        assert!(matches!(
            enc.encode_batch(&store, &Array2::zeros((1, 5))),
            Err(Error::Dimension { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn cnn_freezes_all_but_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        Encoder::new(EncoderConfig::cnn(8), &mut store, "enc", &mut rng).unwrap();
        let trainable: Vec<&str> = store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .map(|id| store.name(id))
            .collect();
        assert_eq!(
            trainable,
            ["enc.conv3.weight", "enc.conv3.bias", "enc.fc.weight", "enc.fc.bias"]
        );
    }
}
