//! Style representation `r = [λ1 s + λ2 μ + λ4 μ̄, λ3 σ² + λ5 σ̄²]` built from
//! an outfit's Gaussian and the pooled per-style Gaussian.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Graph, Var};
use crate::senet::{PooledStyleStats, StyleDistribution};
use crate::Real;

/// One λ coefficient: absent, fixed at 1, or the shared scalar λ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coef {
    Zero,
    One,
    Lambda,
}

/// What the style classifier sees during stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Reparameterised sample `s = μ + σ ⊙ ε`.
    Sample,
    /// Parameters `[μ, σ²]`.
    Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepVariant {
    /// λ = (1, 0, 0, 0, 0)
    Sample,
    /// λ = (0, 1, 1, 0, 0)
    Params,
    /// λ = (0, λ, 0, 1, 0)
    MeanPlusPooledMean,
    /// λ = (0, λ, λ, 1, 1)
    ParamsPlusPooled,
    /// λ = (λ, 0, 0, 1, 0)
    SamplePlusPooledMean,
    /// All λ zero: style-independent ablation.
    Independent,
    Custom {
        lambdas: [Coef; 5],
        classifier_input: ClassifierInput,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRepConfig {
    pub variant: RepVariant,
    /// Learn the shared λ (initialised to 1). When false λ stays 1.
    #[serde(default)]
    pub learned_lambda: bool,
}

impl Default for StyleRepConfig {
    fn default() -> Self {
        Self::new(RepVariant::Params)
    }
}

impl StyleRepConfig {
    pub fn new(variant: RepVariant) -> Self {
        Self {
            variant,
            learned_lambda: false,
        }
    }

    pub fn coefs(&self) -> [Coef; 5] {
        use Coef::*;
        match &self.variant {
            RepVariant::Sample => [One, Zero, Zero, Zero, Zero],
            RepVariant::Params => [Zero, One, One, Zero, Zero],
            RepVariant::MeanPlusPooledMean => [Zero, Lambda, Zero, One, Zero],
            RepVariant::ParamsPlusPooled => [Zero, Lambda, Lambda, One, One],
            RepVariant::SamplePlusPooledMean => [Lambda, Zero, Zero, One, Zero],
            RepVariant::Independent => [Zero; 5],
            RepVariant::Custom { lambdas, .. } => *lambdas,
        }
    }

    pub fn classifier_input(&self) -> ClassifierInput {
        match &self.variant {
            RepVariant::Sample | RepVariant::MeanPlusPooledMean | RepVariant::SamplePlusPooledMean => {
                ClassifierInput::Sample
            }
            RepVariant::Params | RepVariant::ParamsPlusPooled | RepVariant::Independent => ClassifierInput::Params,
            RepVariant::Custom { classifier_input, .. } => *classifier_input,
        }
    }

    pub fn uses_lambda(&self) -> bool {
        self.coefs().contains(&Coef::Lambda)
    }

    pub fn is_independent(&self) -> bool {
        self.coefs().iter().all(|&c| c == Coef::Zero)
    }

    /// Whether the sample term is used (so reps are stochastic in training).
    pub fn uses_sample(&self) -> bool {
        self.coefs()[0] != Coef::Zero
    }

    fn coef_value(c: Coef, lambda: f64) -> f64 {
        match c {
            Coef::Zero => 0.0,
            Coef::One => 1.0,
            Coef::Lambda => lambda,
        }
    }

    /// Combine parts row-wise into `B × 2d_s` representations.
    pub fn build<T: Real>(&self, parts: &RepParts<T>, lambda: f64) -> Array2<T> {
        let c = self.coefs().map(|c| T::c(Self::coef_value(c, lambda)));
        let first = &parts.sample * c[0] + &parts.mean * c[1] + &parts.pooled_mean * c[3];
        let second = &parts.var * c[2] + &parts.pooled_var * c[4];
        concatenate(Axis(1), &[first.view(), second.view()]).expect("equal row counts")
    }

    /// Graph version of [`build`](Self::build); `lambda` is a `1×1` node.
    pub fn build_graph<T: Real>(&self, g: &mut Graph<T>, parts: &RepParts<T>, lambda: Var) -> Var {
        let coefs = self.coefs();
        let (rows, d) = parts.mean.dim();
        let term = |g: &mut Graph<T>, c: Coef, x: &Array2<T>| -> Option<Var> {
            match c {
                Coef::Zero => None,
                Coef::One => Some(g.constant(x.clone())),
                Coef::Lambda => {
                    let v = g.constant(x.clone());
                    Some(g.mul_scalar(lambda, v))
                }
            }
        };
        let first = [
            term(g, coefs[0], &parts.sample),
            term(g, coefs[1], &parts.mean),
            term(g, coefs[3], &parts.pooled_mean),
        ];
        let second = [term(g, coefs[2], &parts.var), term(g, coefs[4], &parts.pooled_var)];
        let sum = |g: &mut Graph<T>, terms: &[Option<Var>]| -> Var {
            let mut acc: Option<Var> = None;
            for t in terms.iter().flatten() {
                acc = Some(match acc {
                    None => *t,
                    Some(a) => g.add(a, *t),
                });
            }
            acc.unwrap_or_else(|| g.constant(Array2::zeros((rows, d))))
        };
        let a = sum(g, &first);
        let b = sum(g, &second);
        g.concat_cols(&[a, b])
    }
}

/// Row-stacked ingredients of a batch of style representations.
#[derive(Clone, Debug, PartialEq)]
pub struct RepParts<T> {
    pub sample: Array2<T>,
    pub mean: Array2<T>,
    pub var: Array2<T>,
    pub pooled_mean: Array2<T>,
    pub pooled_var: Array2<T>,
}

impl<T: Real> RepParts<T> {
    pub fn with_capacity(d: usize) -> Self {
        let z = Array2::zeros((0, d));
        Self {
            sample: z.clone(),
            mean: z.clone(),
            var: z.clone(),
            pooled_mean: z.clone(),
            pooled_var: z,
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    fn push_row(&mut self, sample: &Array1<T>, mean: &Array1<T>, var: &Array1<T>, pm: &Array1<T>, pv: &Array1<T>) {
        for (dst, src) in [
            (&mut self.sample, sample),
            (&mut self.mean, mean),
            (&mut self.var, var),
            (&mut self.pooled_mean, pm),
            (&mut self.pooled_var, pv),
        ] {
            dst.push_row(src.view()).expect("row length");
        }
    }

    /// Append an outfit-specific row. The sample term is drawn from the
    /// outfit Gaussian when `rng` is given and equals the mean otherwise.
    pub fn push_outfit(
        &mut self,
        dist: &StyleDistribution<T>,
        pooled: &PooledStyleStats,
        style: usize,
        rng: Option<&mut dyn rand::RngCore>,
    ) {
        let sample = draw(&dist.mean, &dist.var, rng);
        let (pm, pv) = pooled.arrays::<T>(style);
        self.push_row(&sample, &dist.mean, &dist.var, &pm, &pv);
    }

    /// Append a pooled-fallback row: the pooled Gaussian stands in for the
    /// outfit Gaussian.
    pub fn push_pooled(&mut self, pooled: &PooledStyleStats, style: usize, rng: Option<&mut dyn rand::RngCore>) {
        let (pm, pv) = pooled.arrays::<T>(style);
        let sample = draw(&pm, &pv, rng);
        self.push_row(&sample, &pm, &pv, &pm, &pv);
    }

    /// Append a row of zeros (representation unused).
    pub fn push_zero(&mut self) {
        let z = Array1::zeros(self.mean.ncols());
        self.push_row(&z, &z, &z, &z, &z);
    }
}

fn draw<T: Real>(mean: &Array1<T>, var: &Array1<T>, rng: Option<&mut dyn rand::RngCore>) -> Array1<T> {
    match rng {
        None => mean.clone(),
        Some(rng) => {
            let mut out = mean.clone();
            for (o, &v) in out.iter_mut().zip(var.iter()) {
                let z: f64 = StandardNormal.sample(rng);
                *o += T::c(v.f64().sqrt() * z);
            }
            out
        }
    }
}

/// Standard normal matrix, used for reparameterised sampling.
pub fn standard_normal<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::c(z)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::senet::PooledStyle;
    use ndarray::array;

    fn pooled() -> PooledStyleStats {
        PooledStyleStats {
            styles: vec![PooledStyle {
                name: "party".into(),
                mean: vec![10.0, 20.0],
                var: vec![0.5, 0.25],
                count: 3,
            }],
        }
    }

    fn dist() -> StyleDistribution<f64> {
        StyleDistribution {
            mean: array![1.0, 2.0],
            var: array![3.0, 4.0],
        }
    }

    fn rep(variant: RepVariant) -> Array2<f64> {
        let mut parts = RepParts::with_capacity(2);
        parts.push_outfit(&dist(), &pooled(), 0, None);
        StyleRepConfig::new(variant).build(&parts, 1.0)
    }

    #[test]
    fn params_row() {
        assert_eq!(rep(RepVariant::Params), array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn sample_row_without_rng_is_mean_and_zero_padded() {
        assert_eq!(rep(RepVariant::Sample), array![[1.0, 2.0, 0.0, 0.0]]);
    }

    #[test]
    fn independent_is_zero() {
        assert_eq!(rep(RepVariant::Independent), Array2::<f64>::zeros((1, 4)));
    }

    #[test]
    fn params_plus_pooled() {
        assert_eq!(rep(RepVariant::ParamsPlusPooled), array![[11.0, 22.0, 3.5, 4.25]]);
    }

    #[test]
    fn graph_build_matches_direct() {
        let mut parts = RepParts::with_capacity(2);
        parts.push_outfit(&dist(), &pooled(), 0, None);
        parts.push_pooled(&pooled(), 0, None);
        for v in [
            RepVariant::Sample,
            RepVariant::Params,
            RepVariant::MeanPlusPooledMean,
            RepVariant::ParamsPlusPooled,
            RepVariant::SamplePlusPooledMean,
            RepVariant::Independent,
        ] {
            let cfg = StyleRepConfig::new(v);
            let mut g = Graph::new();
            let lam = g.constant(array![[0.7]]);
            let r = cfg.build_graph(&mut g, &parts, lam);
            assert_eq!(g.value(r), &cfg.build(&parts, 0.7), "{cfg:?}");
        }
    }

    #[test]
    fn classifier_inputs_follow_variants() {
        assert_eq!(
            StyleRepConfig::new(RepVariant::Sample).classifier_input(),
            ClassifierInput::Sample
        );
        assert_eq!(
            StyleRepConfig::new(RepVariant::ParamsPlusPooled).classifier_input(),
            ClassifierInput::Params
        );
    }
}
