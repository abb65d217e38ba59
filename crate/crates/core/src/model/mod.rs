//! Neural collaborative-filtering router.
//!
//! Instance and context embeddings are projected into a shared latent space
//! (`u = W_x e`, `v = W_p h`), combined into `z = [u; v; u⊙v; |u−v|]`, and
//! scored by a ReLU MLP that ends in a single logit. Gradients are written by
//! hand; [`loss`] holds the objectives and [`train`] the optimizer loop.

pub mod checkpoint;
pub mod loss;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed;

pub use checkpoint::Checkpoint;
pub use loss::{
    build_observations, build_pair_triples, gradients, pairwise_loss, pointwise_loss, sigmoid,
    softplus, Batch, LossConfig, LossKind, Observation, PairTriple, PointRef, TripleRef,
};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory};

/// Anything that scores an (instance, context) embedding pair by a logit and
/// can differentiate that logit with respect to the context.
pub trait Scorer: Sync {
    fn score_logit(&self, e: &[f64], h: &[f64]) -> Result<f64>;
    fn logit_and_context_grad(&self, e: &[f64], h: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl Scorer for PreferenceModel {
    fn score_logit(&self, e: &[f64], h: &[f64]) -> Result<f64> {
        self.logit(e, h)
    }

    fn logit_and_context_grad(&self, e: &[f64], h: &[f64]) -> Result<(f64, Vec<f64>)> {
        PreferenceModel::logit_and_context_grad(self, e, h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            embedding_dim: crate::embedding::DEFAULT_DIMENSION,
            latent_dim: 128,
            hidden: vec![1024, 512],
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weights.matvec(x);
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        y
    }
}

/// Router parameters θ. The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceModel {
    pub instance_projection: Matrix,
    pub context_projection: Matrix,
    /// Hidden ReLU layers followed by the 1-unit output layer.
    pub layers: Vec<Dense>,
}

/// `[u; v; u⊙v; |u−v|]`
pub fn interaction_vector(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "interaction vector",
            expected: u.len(),
            actual: v.len(),
        });
    }
    let mut z = Vec::with_capacity(4 * u.len());
    z.extend_from_slice(u);
    z.extend_from_slice(v);
    z.extend(u.iter().zip(v).map(|(a, b)| a * b));
    z.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
    Ok(z)
}

/// Inverted-dropout multipliers for each hidden layer (0 or `1/(1−rate)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMask {
    pub fn sample(model: &PreferenceModel, rate: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let layers = model.layers[..model.layers.len() - 1]
            .iter()
            .map(|l| {
                (0..l.bias.len())
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOutput {
    pub logit: f64,
    /// `σ(logit / τ)`
    pub score: f64,
}

/// Intermediate values kept for backpropagation.
pub(crate) struct ForwardCache {
    u: Vec<f64>,
    v: Vec<f64>,
    /// Input to each layer (`z` first, then post-activation hidden outputs).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    pub(crate) logit: f64,
}

fn check_finite(values: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer() })
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_rows(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect(),
    )
}

impl PreferenceModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: &ModelShape, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value);
        let d_lat = shape.latent_dim;
        let instance_projection = glorot(d_lat, shape.embedding_dim, &mut rng);
        let context_projection = glorot(d_lat, shape.embedding_dim, &mut rng);
        let mut layers = Vec::new();
        let mut inp = 4 * d_lat;
        for &out in shape.hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense {
                weights: glorot(out, inp, &mut rng),
                bias: vec![0.0; out],
            });
            inp = out;
        }
        Self {
            instance_projection,
            context_projection,
            layers,
        }
    }

    pub fn zeros(shape: &ModelShape) -> Self {
        let d_lat = shape.latent_dim;
        let mut layers = Vec::new();
        let mut inp = 4 * d_lat;
        for &out in shape.hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::zeros(out, inp));
            inp = out;
        }
        Self {
            instance_projection: Matrix::zeros(d_lat, shape.embedding_dim),
            context_projection: Matrix::zeros(d_lat, shape.embedding_dim),
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            embedding_dim: self.instance_projection.cols,
            latent_dim: self.instance_projection.rows,
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.bias.len())
                .collect(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.instance_projection.cols
    }

    /// Every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.instance_projection.data,
            &self.context_projection.data,
        ];
        for l in &self.layers {
            out.push(&l.weights.data);
            out.push(&l.bias);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.instance_projection.data,
            &mut self.context_projection.data,
        ];
        for l in &mut self.layers {
            out.push(&mut l.weights.data);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `‖θ‖²` over all weights and biases.
    pub fn squared_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            crate::linalg::axpy(alpha, src, dst);
        }
    }

    /// Digest of every parameter's bit pattern.
    pub fn digest(&self) -> String {
        let flat: Vec<f64> = self
            .blocks()
            .iter()
            .flat_map(|b| b.iter().copied())
            .collect();
        seed::digest_f64(&flat)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn check_inputs(&self, e: &[f64], h: &[f64]) -> Result<()> {
        let d = self.embedding_dim();
        for (what, x) in [("instance embedding", e), ("context embedding", h)] {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: d,
                    actual: x.len(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn project_instance(&self, e: &[f64]) -> Result<Vec<f64>> {
        let u = self.instance_projection.matvec(e);
        check_finite(&u, || "instance_projection".into())?;
        Ok(u)
    }

    pub(crate) fn project_context(&self, h: &[f64]) -> Result<Vec<f64>> {
        let v = self.context_projection.matvec(h);
        check_finite(&v, || "context_projection".into())?;
        Ok(v)
    }

    pub(crate) fn forward_cached(
        &self,
        e: &[f64],
        h: &[f64],
        mask: Option<&DropoutMask>,
    ) -> Result<ForwardCache> {
        self.check_inputs(e, h)?;
        let u = self.project_instance(e)?;
        let v = self.project_context(h)?;
        self.forward_latent(u, v, mask)
    }

    /// Forward pass from already projected `u = W_x e` and `v = W_p h`.
    pub(crate) fn forward_latent(
        &self,
        u: Vec<f64>,
        v: Vec<f64>,
        mask: Option<&DropoutMask>,
    ) -> Result<ForwardCache> {
        let z = interaction_vector(&u, &v)?;

        let n_hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(n_hidden);
        let mut x = z;
        for (l, layer) in self.layers[..n_hidden].iter().enumerate() {
            let p = layer.apply(&x);
            check_finite(&p, || format!("hidden[{l}]"))?;
            let mut a: Vec<f64> = p.iter().map(|&t| t.max(0.0)).collect();
            if let Some(m) = mask {
                for (ai, mi) in a.iter_mut().zip(&m.layers[l]) {
                    *ai *= mi;
                }
            }
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(p);
        }
        let logit = self.layers[n_hidden].apply(&x)[0];
        inputs.push(x);
        if !logit.is_finite() {
            return Err(Error::Numeric {
                layer: "output".into(),
            });
        }
        Ok(ForwardCache {
            u,
            v,
            inputs,
            pre,
            logit,
        })
    }

    /// Backpropagates `dlogit` through the MLP, accumulating its layer
    /// gradients into `grads`, and returns `(∂/∂u, ∂/∂v)`.
    pub(crate) fn backward_latent(
        &self,
        cache: &ForwardCache,
        dlogit: f64,
        mask: Option<&DropoutMask>,
        mut grads: Option<&mut PreferenceModel>,
    ) -> (Vec<f64>, Vec<f64>) {
        let n_hidden = self.layers.len() - 1;
        let mut delta = vec![dlogit];
        for l in (0..=n_hidden).rev() {
            let layer = &self.layers[l];
            if let Some(g) = grads.as_deref_mut() {
                g.layers[l].weights.add_outer(1.0, &delta, &cache.inputs[l]);
                crate::linalg::axpy(1.0, &delta, &mut g.layers[l].bias);
            }
            if l == 0 {
                break;
            }
            let mut back = layer.weights.matvec_t(&delta);
            // Undo dropout and ReLU of the hidden layer that produced inputs[l].
            let hl = l - 1;
            for (i, b) in back.iter_mut().enumerate() {
                if cache.pre[hl][i] <= 0.0 {
                    *b = 0.0;
                } else if let Some(m) = mask {
                    *b *= m.layers[hl][i];
                }
            }
            delta = back;
        }
        let dz = self.layers[0].weights.matvec_t(&delta);

        let d = cache.u.len();
        let mut du = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for i in 0..d {
            let diff = cache.u[i] - cache.v[i];
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            du[i] = dz[i] + dz[2 * d + i] * cache.v[i] + dz[3 * d + i] * s;
            dv[i] = dz[d + i] + dz[2 * d + i] * cache.u[i] - dz[3 * d + i] * s;
        }
        (du, dv)
    }

    /// With `grads`, accumulates `dlogit · ∂logit/∂θ` into it and returns an
    /// empty vector; without, returns `dlogit · ∂logit/∂h`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        e: &[f64],
        h: &[f64],
        dlogit: f64,
        mask: Option<&DropoutMask>,
        grads: Option<&mut PreferenceModel>,
    ) -> Vec<f64> {
        match grads {
            Some(g) => {
                let (du, dv) = self.backward_latent(cache, dlogit, mask, Some(&mut *g));
                g.instance_projection.add_outer(1.0, &du, e);
                g.context_projection.add_outer(1.0, &dv, h);
                Vec::new()
            }
            None => {
                let (_, dv) = self.backward_latent(cache, dlogit, mask, None);
                self.context_projection.matvec_t(&dv)
            }
        }
    }

    /// Logit and score `σ(logit/τ)`. Dropout applies only when a mask is given.
    pub fn forward(
        &self,
        e: &[f64],
        h: &[f64],
        mask: Option<&DropoutMask>,
        temperature: f64,
    ) -> Result<ForwardOutput> {
        let logit = self.forward_cached(e, h, mask)?.logit;
        Ok(ForwardOutput {
            logit,
            score: sigmoid(logit / temperature),
        })
    }

    pub fn logit(&self, e: &[f64], h: &[f64]) -> Result<f64> {
        Ok(self.forward_cached(e, h, None)?.logit)
    }

    /// Logit of `(e, h)` and its gradient with respect to `h`.
    pub fn logit_and_context_grad(&self, e: &[f64], h: &[f64]) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward_cached(e, h, None)?;
        let grad = self.backward(&cache, e, h, 1.0, None, None);
        Ok((cache.logit, grad))
    }

    /// Rejects parameter sets whose layer shapes do not chain.
    pub fn check_shapes(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        let (d_lat, d_emb) = (self.instance_projection.rows, self.instance_projection.cols);
        for (name, m) in [
            ("instance_projection", &self.instance_projection),
            ("context_projection", &self.context_projection),
        ] {
            if m.rows != d_lat || m.cols != d_emb || m.data.len() != m.rows * m.cols {
                return bad(format!(
                    "{name} is {}x{} ({} values), expected {d_lat}x{d_emb}",
                    m.rows,
                    m.cols,
                    m.data.len()
                ));
            }
        }
        if self.layers.is_empty() {
            return bad("no MLP layers".into());
        }
        let mut inp = 4 * d_lat;
        for (i, l) in self.layers.iter().enumerate() {
            let w = &l.weights;
            if w.cols != inp || w.data.len() != w.rows * w.cols || l.bias.len() != w.rows {
                return bad(format!(
                    "layer {i} is {}x{} with {} biases, expected input width {inp}",
                    w.rows,
                    w.cols,
                    l.bias.len()
                ));
            }
            inp = w.rows;
        }
        if inp != 1 {
            return bad(format!("output layer has {inp} units, expected 1"));
        }
        if !self.is_finite() {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interaction_vector_examples() {
        assert_eq!(
            interaction_vector(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
        let z = interaction_vector(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        let expect = [0.6, 0.8, 0.6, 0.8, 0.36, 0.64, 0.0, 0.0];
        for (a, b) in z.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(interaction_vector(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn interaction_vector_matches_scalar_loop(
            uv in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 5)
        ) {
            let u: Vec<f64> = uv.iter().map(|p| p.0).collect();
            let v: Vec<f64> = uv.iter().map(|p| p.1).collect();
            let z = interaction_vector(&u, &v).unwrap();
            for i in 0..5 {
                prop_assert_eq!(z[i], u[i]);
                prop_assert_eq!(z[5 + i], v[i]);
                prop_assert_eq!(z[10 + i], u[i] * v[i]);
                prop_assert_eq!(z[15 + i], if u[i] > v[i] { u[i] - v[i] } else { v[i] - u[i] });
            }
        }
    }

    fn tiny_shape() -> ModelShape {
        ModelShape {
            embedding_dim: 4,
            latent_dim: 2,
            hidden: vec![3],
        }
    }

    #[test]
    fn zero_parameters_score_half() {
        let m = PreferenceModel::zeros(&tiny_shape());
        let out = m
            .forward(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], None, 1.0)
            .unwrap();
        assert_eq!(out.logit, 0.0);
        assert_eq!(out.score, 0.5);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // d_emb = d_lat = 1, no hidden layer, unit weights: logit = u + v + uv + |u−v|.
        let shape = ModelShape {
            embedding_dim: 1,
            latent_dim: 1,
            hidden: vec![],
        };
        let mut m = PreferenceModel::zeros(&shape);
        m.instance_projection.data[0] = 0.5;
        m.context_projection.data[0] = 2.0;
        m.layers[0].weights.data = vec![1.0; 4];
        let (e, h) = (0.8f64, -0.3f64);
        let (u, v) = (0.5 * e, 2.0 * h);
        let expect = u + v + u * v + (u - v).abs();
        let out = m.forward(&[e], &[h], None, 1.0).unwrap();
        assert!((out.logit - expect).abs() < 1e-15);
        assert!((out.score - 1.0 / (1.0 + (-expect).exp())).abs() < 1e-15);
    }

    #[test]
    fn output_bias_moves_score_monotonically() {
        let mut m = PreferenceModel::init(&tiny_shape(), 1);
        let (e, h) = ([0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]);
        m.layers.last_mut().unwrap().bias[0] = 1.0;
        let hi = m.forward(&e, &h, None, 1.0).unwrap().score;
        m.layers.last_mut().unwrap().bias[0] = -1.0;
        let lo = m.forward(&e, &h, None, 1.0).unwrap().score;
        assert!(hi > lo);
    }

    #[test]
    fn non_finite_names_layer() {
        let mut m = PreferenceModel::init(&tiny_shape(), 1);
        m.context_projection.data[0] = f64::NAN;
        match m.forward(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], None, 1.0) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "context_projection"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(m.forward(&[1.0], &[1.0], None, 1.0).is_err());
    }

    #[test]
    fn glorot_bounds_and_shape() {
        let shape = ModelShape {
            embedding_dim: 6,
            latent_dim: 3,
            hidden: vec![5, 4],
        };
        let m = PreferenceModel::init(&shape, 9);
        assert_eq!(m.shape(), shape);
        m.check_shapes().unwrap();
        let a = (6.0f64 / (5 + 12) as f64).sqrt();
        assert!(m.layers[0].weights.data.iter().all(|w| w.abs() <= a));
        assert_eq!(m, PreferenceModel::init(&shape, 9));
        assert_ne!(m, PreferenceModel::init(&shape, 10));
    }
}
