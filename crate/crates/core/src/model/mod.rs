//! Projected multilayer perceptron with a temperature softmax output.
//!
//! Inference path: `x -> xR -> (.. - mean) / stddev -> [ReLU(W h + b)]^H ->
//! W_out h + b_out -> softmax(z / T)`.

mod io;
mod projection;

pub use io::{read_ensemble, read_model, write_ensemble, write_model, MODEL_HEADER};
pub use projection::{sign_probability, ProjectionMatrix};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distributions::{Distribution, Uniform};

use crate::corpus::MALWARE;
use crate::error::{Error, Result};
use crate::features::SparseBinaryVector;
use crate::scalar::Scalar;
use crate::seed::{derived_rng, Rng};

pub const CLASS_COUNT: usize = 2;
pub const STDDEV_FLOOR: f64 = 1e-8;

/// Hidden-layer layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub hidden_count: usize,
    pub hidden_dim: usize,
}

impl Arch {
    pub fn new(hidden_count: usize, hidden_dim: usize) -> Self {
        Self {
            hidden_count,
            hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_count == 0 {
            return Err(Error::config("hidden_count", "must be >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for Arch {
    fn default() -> Self {
        Self::new(1, 128)
    }
}

/// Per-dimension standardization of the projected input.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<F> {
    pub mean: Array1<F>,
    pub stddev: Array1<F>,
}

impl<F: Scalar> Normalizer<F> {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            stddev: Array1::ones(dim),
        }
    }

    /// Population mean and standard deviation of the rows of `projected`.
    pub fn fit(projected: &Array2<F>) -> Result<Self> {
        if projected.nrows() == 0 {
            return Err(Error::contract("cannot fit a normalizer on zero rows"));
        }
        let n = F::of(projected.nrows() as f64);
        let mean = projected.sum_axis(Axis(0)) / n;
        let floor = F::of(STDDEV_FLOOR);
        let mut stddev = Array1::zeros(projected.ncols());
        for row in projected.rows() {
            for ((s, &x), &m) in stddev.iter_mut().zip(row).zip(&mean) {
                let d: F = x - m;
                *s += d * d;
            }
        }
        stddev.mapv_inplace(|s: F| (s / n).sqrt().max(floor));
        Ok(Self { mean, stddev })
    }

    pub fn apply_inplace(&self, v: &mut [F]) {
        for ((x, &m), &s) in v.iter_mut().zip(&self.mean).zip(&self.stddev) {
            *x = (*x - m) / s;
        }
    }
}

/// Fully connected layer; `weight` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || F::of(dist.sample(rng)));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Numerically stable `softmax(z / T)`.
pub fn softmax<F: Scalar>(z: ArrayView1<F>, temperature: F) -> Array1<F> {
    let scaled = z.mapv(|v| v / temperature);
    let max = scaled.fold(F::neg_infinity(), |m, &v| m.max(v));
    let e = scaled.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F> {
    pub logits: Array1<F>,
    pub probs: Array1<F>,
}

impl<F: Scalar> Prediction<F> {
    pub fn p_malware(&self) -> F {
        self.probs[MALWARE as usize]
    }

    /// Decision rule `p_M >= 0.5`.
    pub fn is_malware(&self) -> bool {
        self.p_malware() >= F::of(0.5)
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace<F> {
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Array1<F>>,
    pub logits: Array1<F>,
}

/// The classifier. Immutable after training; cheap to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<F> {
    pub(crate) projection: ProjectionMatrix,
    pub(crate) normalizer: Normalizer<F>,
    /// Hidden layers followed by the output layer.
    pub(crate) layers: Vec<Dense<F>>,
    pub(crate) temperature: F,
    /// Temperature the model was trained at; informational once deployed.
    pub(crate) train_temperature: F,
    pub(crate) training: TrainingMeta,
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingMeta {
    pub seed: u64,
    /// Defense label such as `none` or `distill:T=10`.
    pub defense: String,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            seed: 0,
            defense: "none".to_string(),
        }
    }
}

impl<F: Scalar> MlpModel<F> {
    /// Freshly initialized weights drawn from `seed`.
    pub fn init(projection: ProjectionMatrix, normalizer: Normalizer<F>, arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        if normalizer.mean.len() != projection.projected_dim() || normalizer.stddev.len() != projection.projected_dim()
        {
            return Err(Error::contract("normalizer length differs from projected dimension"));
        }
        let mut rng = derived_rng(seed, "model/init");
        let mut layers = Vec::with_capacity(arch.hidden_count + 1);
        let mut fan_in = projection.projected_dim();
        for _ in 0..arch.hidden_count {
            layers.push(Dense::init(fan_in, arch.hidden_dim, &mut rng));
            fan_in = arch.hidden_dim;
        }
        layers.push(Dense::init(fan_in, CLASS_COUNT, &mut rng));
        Ok(Self {
            projection,
            normalizer,
            layers,
            temperature: F::one(),
            train_temperature: F::one(),
            training: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    /// Assembles a model from explicit parts, checking that shapes chain.
    pub fn from_parts(
        projection: ProjectionMatrix,
        normalizer: Normalizer<F>,
        layers: Vec<Dense<F>>,
        temperature: F,
    ) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::contract("need at least one hidden layer and an output layer"));
        }
        let mut fan_in = projection.projected_dim();
        if normalizer.mean.len() != fan_in || normalizer.stddev.len() != fan_in {
            return Err(Error::contract("normalizer length differs from projected dimension"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in() != fan_in || l.bias.len() != l.fan_out() {
                return Err(Error::contract(format!("layer {i} shape does not chain")));
            }
            fan_in = l.fan_out();
        }
        if fan_in != CLASS_COUNT {
            return Err(Error::contract(format!(
                "output layer has {fan_in} units, expected {CLASS_COUNT}"
            )));
        }
        if !(temperature > F::zero()) {
            return Err(Error::contract("temperature must be positive"));
        }
        Ok(Self {
            projection,
            normalizer,
            layers,
            temperature,
            train_temperature: temperature,
            training: TrainingMeta::default(),
        })
    }

    pub fn original_dim(&self) -> usize {
        self.projection.original_dim()
    }

    pub fn projected_dim(&self) -> usize {
        self.projection.projected_dim()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].fan_out()
    }

    pub fn arch(&self) -> Arch {
        Arch::new(self.hidden_count(), self.hidden_dim())
    }

    pub fn temperature(&self) -> F {
        self.temperature
    }

    pub fn train_temperature(&self) -> F {
        self.train_temperature
    }

    pub fn training(&self) -> &TrainingMeta {
        &self.training
    }

    pub fn with_training(mut self, training: TrainingMeta) -> Self {
        self.training = training;
        self
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    pub fn normalizer(&self) -> &Normalizer<F> {
        &self.normalizer
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    /// Same parameters evaluated with a different softmax temperature.
    pub fn with_temperature(&self, temperature: F) -> Self {
        assert!(temperature > F::zero(), "temperature must be positive");
        Self {
            temperature,
            ..self.clone()
        }
    }

    pub fn sum_squared_weights(&self) -> F {
        self.layers
            .iter()
            .map(|l| l.weight.iter().fold(F::zero(), |a, &w| a + w * w))
            .fold(F::zero(), |a, b| a + b)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.original_dim() {
            return Err(Error::contract(format!(
                "input has dim {dim}, model expects {}",
                self.original_dim()
            )));
        }
        Ok(())
    }

    /// Normalized projected input `v` for a binary sample.
    pub fn project(&self, x: &SparseBinaryVector) -> Result<Array1<F>> {
        self.check_dim(x.dim())?;
        let mut v = Array1::zeros(self.projected_dim());
        let buf = v.as_slice_mut().expect("contiguous");
        self.projection.apply_sparse(x, buf);
        self.normalizer.apply_inplace(buf);
        Ok(v)
    }

    /// Normalized projected input for a relaxed, real-valued sample.
    pub fn project_dense(&self, x: &[F]) -> Result<Array1<F>> {
        self.check_dim(x.len())?;
        let mut v = Array1::zeros(self.projected_dim());
        let buf = v.as_slice_mut().expect("contiguous");
        self.projection.apply_dense(x, buf);
        self.normalizer.apply_inplace(buf);
        Ok(v)
    }

    pub(crate) fn trace(&self, v: ArrayView1<F>) -> Trace<F> {
        let mut pre = Vec::with_capacity(self.hidden_count());
        let (hidden, out) = self.layers.split_at(self.layers.len() - 1);
        let mut h = v.to_owned();
        for layer in hidden {
            let a = layer.weight.dot(&h) + &layer.bias;
            h = a.mapv(|x| x.max(F::zero()));
            pre.push(a);
        }
        let logits = out[0].weight.dot(&h) + &out[0].bias;
        Trace { pre, logits }
    }

    pub fn logits_projected(&self, v: ArrayView1<F>) -> Array1<F> {
        self.trace(v).logits
    }

    pub fn predict_projected(&self, v: ArrayView1<F>) -> Prediction<F> {
        let logits = self.logits_projected(v);
        let probs = softmax(logits.view(), self.temperature);
        Prediction { logits, probs }
    }

    pub fn forward(&self, x: &SparseBinaryVector) -> Result<Prediction<F>> {
        let v = self.project(x)?;
        Ok(self.predict_projected(v.view()))
    }

    pub fn forward_dense(&self, x: &[F]) -> Result<Prediction<F>> {
        let v = self.project_dense(x)?;
        Ok(self.predict_projected(v.view()))
    }

    /// `dz_k / dv` for every logit `k`, as a `c x P` matrix.
    fn logit_jacobian(&self, trace: &Trace<F>) -> Array2<F> {
        let mut rows = Array2::zeros((CLASS_COUNT, self.projected_dim()));
        for k in 0..CLASS_COUNT {
            let out = &self.layers[self.layers.len() - 1];
            let mut g: Array1<F> = out.weight.row(k).to_owned();
            for (layer, pre) in self.layers[..self.layers.len() - 1].iter().zip(&trace.pre).rev() {
                g.zip_mut_with(pre, |gi, &a| {
                    if a <= F::zero() {
                        *gi = F::zero();
                    }
                });
                g = layer.weight.t().dot(&g);
            }
            rows.row_mut(k).assign(&g);
        }
        rows
    }

    /// Exact `dp_i / dv_j` of the temperature softmax with respect to the
    /// normalized projected input.
    ///
    /// Uses `dp_i/dv = (1/T) sum_k p_i p_k (dz_i/dv - dz_k/dv)`, which avoids the
    /// cancellation in `p_i (1 - p_i)` when a probability rounds to one.
    pub fn jacobian_projected_at(&self, v: ArrayView1<F>) -> Array2<F> {
        let trace = self.trace(v);
        let probs = softmax(trace.logits.view(), self.temperature);
        let dz = self.logit_jacobian(&trace);
        let mut jac = Array2::zeros(dz.raw_dim());
        for i in 0..CLASS_COUNT {
            let mut row = jac.row_mut(i);
            for k in 0..CLASS_COUNT {
                if k == i {
                    continue;
                }
                let w = probs[i] * probs[k] / self.temperature;
                let diff = &dz.row(i) - &dz.row(k);
                row.scaled_add(w, &diff);
            }
        }
        jac
    }

    pub fn jacobian_projected(&self, x: &SparseBinaryVector) -> Result<Array2<F>> {
        let v = self.project(x)?;
        Ok(self.jacobian_projected_at(v.view()))
    }

    /// Chains a projected-space Jacobian back to the original features:
    /// `J diag(1/stddev) R^T`.
    pub fn chain_to_original(&self, projected: &Array2<F>) -> Array2<F> {
        let scaled = projected / &self.normalizer.stddev;
        let mut out = Array2::zeros((projected.nrows(), self.original_dim()));
        for j in 0..self.original_dim() {
            for &(col, sign) in self.projection.row(j) {
                for i in 0..projected.nrows() {
                    let s = scaled[[i, col as usize]];
                    if sign > 0 {
                        out[[i, j]] += s;
                    } else {
                        out[[i, j]] -= s;
                    }
                }
            }
        }
        out
    }

    /// `dp_i / dx_j` with respect to the original binary features.
    pub fn jacobian_original(&self, x: &SparseBinaryVector) -> Result<Array2<F>> {
        Ok(self.chain_to_original(&self.jacobian_projected(x)?))
    }

    pub fn jacobian_original_dense(&self, x: &[F]) -> Result<Array2<F>> {
        let v = self.project_dense(x)?;
        Ok(self.chain_to_original(&self.jacobian_projected_at(v.view())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(h: usize, seed: u64) -> MlpModel<f64> {
        let projection = ProjectionMatrix::new(40, 12, seed).unwrap();
        let normalizer = Normalizer {
            mean: Array1::from_shape_fn(12, |i| 0.1 * i as f64),
            stddev: Array1::from_shape_fn(12, |i| 0.5 + 0.05 * i as f64),
        };
        MlpModel::init(projection, normalizer, Arch::new(h, 9), seed).unwrap()
    }

    #[test]
    fn softmax_reference_values() {
        let p = softmax(ndarray::arr1(&[0.0, 0.0]).view(), 3.0);
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        let p = softmax(ndarray::arr1(&[2.0f64, 0.0]).view(), 2.0);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
        let p = softmax(ndarray::arr1(&[1000.0f64, -1000.0]).view(), 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_is_legal() {
        let m = model(2, 1);
        let x = SparseBinaryVector::zeros(40);
        let v = m.project(&x).unwrap();
        for i in 0..12 {
            assert_eq!(v[i], -m.normalizer.mean[i] / m.normalizer.stddev[i]);
        }
        let p = m.forward(&x).unwrap();
        assert!(p.probs.iter().all(|v| v.is_finite()));
        assert!(m.forward(&SparseBinaryVector::zeros(41)).is_err());
    }

    #[test]
    fn rejects_bad_parts() {
        let m = model(1, 2);
        let mut layers = m.layers.clone();
        layers.pop();
        assert!(MlpModel::from_parts(m.projection.clone(), m.normalizer.clone(), layers, 1.0).is_err());
        assert!(MlpModel::from_parts(m.projection.clone(), m.normalizer.clone(), m.layers.clone(), 0.0).is_err());
    }

    #[test]
    fn identity_projection_collapses_chain_rule() {
        let base = model(2, 3);
        let m = MlpModel::from_parts(
            ProjectionMatrix::identity(12),
            Normalizer::identity(12),
            base.layers.clone(),
            1.5,
        )
        .unwrap();
        let x = SparseBinaryVector::new(12, vec![0, 5, 7]).unwrap();
        assert_eq!(m.jacobian_original(&x).unwrap(), m.jacobian_projected(&x).unwrap());
    }

    #[test]
    fn unused_feature_has_zero_column() {
        let base = model(1, 4);
        let mut rows: Vec<Vec<(u32, i8)>> = (0..40).map(|j| base.projection.row(j).to_vec()).collect();
        rows[7].clear();
        let proj = ProjectionMatrix::from_rows(12, 0, rows).unwrap();
        let m = MlpModel::from_parts(proj, base.normalizer.clone(), base.layers.clone(), 1.0).unwrap();
        let j = m
            .jacobian_original(&SparseBinaryVector::new(40, vec![1, 7, 30]).unwrap())
            .unwrap();
        assert_eq!(j.column(7).to_vec(), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(z0 in -50.0f64..50.0, z1 in -50.0f64..50.0, t in 0.05f64..100.0) {
            let p = softmax(ndarray::arr1(&[z0, z1]).view(), t);
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // exp underflows to zero below about -745; 1 - e^-u rounds to 1 past u ~ 36.7.
            let gap = ((z0 - z1) / t).abs();
            if gap < 700.0 {
                prop_assert!(p.iter().all(|&v| v > 0.0));
            }
            if gap < 36.0 {
                prop_assert!(p.iter().all(|&v| v < 1.0));
            }
        }

        #[test]
        fn argmax_ignores_temperature(z0 in -1e3f64..1e3, z1 in -1e3f64..1e3, t in 1e-2f64..1e3) {
            prop_assume!(z0 != z1);
            let p = softmax(ndarray::arr1(&[z0, z1]).view(), t);
            prop_assert_eq!(p[0] > p[1], z0 > z1);
        }

        #[test]
        fn jacobian_rows_cancel(bits in prop::collection::vec(any::<bool>(), 40), t in 0.5f64..10.0) {
            let m = model(2, 9).with_temperature(t);
            let x = SparseBinaryVector::from_dense(&bits);
            let j = m.jacobian_projected(&x).unwrap();
            for c in 0..12 {
                prop_assert!((j[[0, c]] + j[[1, c]]).abs() < 1e-15);
            }
        }

        #[test]
        fn inference_is_deterministic(bits in prop::collection::vec(any::<bool>(), 40)) {
            let m = model(3, 5);
            let x = SparseBinaryVector::from_dense(&bits);
            prop_assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        }
    }
}
