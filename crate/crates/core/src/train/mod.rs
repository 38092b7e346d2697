//! Training: Adam with validation-driven step halving and early stopping,
//! inverted dropout on hidden activations, and an L2 penalty on weights.
//! Distillation and ensembles are built on the same loop.

mod adam;

pub use adam::{Adam, BETA1, BETA2, EPSILON};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::MALWARE;
use crate::error::{Error, Result};
use crate::features::{Dataset, SplitDataset};
use crate::model::{Arch, MlpModel, Normalizer, ProjectionMatrix, CLASS_COUNT};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, derived_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    /// Coefficient of `sum ||W||^2` over weight matrices (biases excluded).
    pub weight_decay: f64,
    pub temperature: f64,
    /// Width of the random projection in front of the first layer.
    pub projected_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            min_step: 1e-4,
            max_epochs: 200,
            batch_size: 256,
            dropout_rate: 0.25,
            weight_decay: 0.0,
            temperature: 1.0,
            projected_dim: 256,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.min_step > 0.0 && self.initial_step > self.min_step) {
            return Err(Error::config("initial_step", "need initial_step > min_step > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be finite and > 0"));
        }
        if self.projected_dim == 0 {
            return Err(Error::config("projected_dim", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step_size: f64,
    pub train_loss: f64,
    pub valid_error: f64,
}

/// Renders `epoch,step_size,train_loss,valid_error`.
pub fn training_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,step_size,train_loss,valid_error\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            crate::scalar::fmt_exact(r.step_size),
            crate::scalar::fmt_exact(r.train_loss),
            crate::scalar::fmt_exact(r.valid_error)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Trained<F> {
    pub model: MlpModel<F>,
    pub log: Vec<EpochRecord>,
}

/// Training targets: class labels or per-sample probability vectors.
pub enum Targets<'a, F> {
    Hard(&'a [u8]),
    Soft(&'a Array2<F>),
}

impl<F: Scalar> Targets<'_, F> {
    fn len(&self) -> usize {
        match self {
            Targets::Hard(l) => l.len(),
            Targets::Soft(p) => p.nrows(),
        }
    }

    fn row(&self, i: usize, out: &mut [F]) {
        match self {
            Targets::Hard(l) => {
                out.iter_mut().for_each(|o| *o = F::zero());
                out[l[i] as usize] = F::one();
            }
            Targets::Soft(p) => {
                for (o, &v) in out.iter_mut().zip(p.row(i)) {
                    *o = v;
                }
            }
        }
    }
}

/// Projection, normalizer and projected inputs shared by every model trained
/// on one dataset with one seed.
pub struct Prepared<F> {
    pub projection: ProjectionMatrix,
    pub normalizer: Normalizer<F>,
    pub train_inputs: Array2<F>,
    pub valid_inputs: Array2<F>,
}

fn project_rows<F: Scalar>(projection: &ProjectionMatrix, data: &Dataset) -> Array2<F> {
    let p = projection.projected_dim();
    let mut out = Array2::zeros((data.len(), p));
    for (mut row, x) in out.rows_mut().into_iter().zip(&data.vectors) {
        projection.apply_sparse(x, row.as_slice_mut().expect("row-major"));
    }
    out
}

fn normalize_rows<F: Scalar>(normalizer: &Normalizer<F>, rows: &mut Array2<F>) {
    for mut row in rows.rows_mut() {
        normalizer.apply_inplace(row.as_slice_mut().expect("row-major"));
    }
}

/// Draws the projection for `seed`, fits the normalizer on the training split
/// and normalizes both training and validation inputs.
pub fn prepare<F: Scalar>(data: &SplitDataset, projected_dim: usize, seed: u64) -> Result<Prepared<F>> {
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::contract("training needs nonempty train and valid splits"));
    }
    let projection = ProjectionMatrix::new(data.dim(), projected_dim, derive_seed(seed, "projection"))?;
    let mut train_inputs = project_rows(&projection, &data.train);
    let normalizer = Normalizer::fit(&train_inputs)?;
    normalize_rows(&normalizer, &mut train_inputs);
    let mut valid_inputs = project_rows(&projection, &data.valid);
    normalize_rows(&normalizer, &mut valid_inputs);
    Ok(Prepared {
        projection,
        normalizer,
        train_inputs,
        valid_inputs,
    })
}

/// Batched forward pass at a given temperature, no dropout.
pub fn batch_probs<F: Scalar>(model: &MlpModel<F>, inputs: ArrayView2<F>, temperature: F) -> Array2<F> {
    let logits = batch_logits(model, inputs);
    let mut probs = logits.mapv(|z| z / temperature);
    for mut row in probs.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    probs
}

pub fn batch_logits<F: Scalar>(model: &MlpModel<F>, inputs: ArrayView2<F>) -> Array2<F> {
    let (hidden, out) = model.layers.split_at(model.layers.len() - 1);
    let mut h = inputs.to_owned();
    for layer in hidden {
        h = h.dot(&layer.weight.t()) + &layer.bias;
        h.mapv_inplace(|v| v.max(F::zero()));
    }
    h.dot(&out[0].weight.t()) + &out[0].bias
}

fn count_errors<F: Scalar>(model: &MlpModel<F>, inputs: ArrayView2<F>, labels: &[u8]) -> usize {
    let probs = batch_probs(model, inputs, model.temperature);
    let half = F::of(0.5);
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(p, &l)| (p[MALWARE as usize] >= half) != (l == MALWARE))
        .count()
}

struct Gradients<F> {
    weights: Vec<Array2<F>>,
    biases: Vec<Array1<F>>,
}

/// One minibatch: forward with dropout, backward, returns the mean
/// cross-entropy (without the L2 term).
fn batch_gradients<F: Scalar>(
    model: &MlpModel<F>,
    x: Array2<F>,
    targets: &Array2<F>,
    temperature: F,
    dropout: f64,
    rng: &mut Rng,
    grads: &mut Gradients<F>,
) -> F {
    let n = F::of(x.nrows() as f64);
    let keep = 1.0 - dropout;
    let scale = F::of(1.0 / keep);
    let (hidden, out) = model.layers.split_at(model.layers.len() - 1);

    // Activations entering each layer, and the masked ReLU derivative of each hidden layer.
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut gates = Vec::with_capacity(hidden.len());
    let mut h = x;
    for layer in hidden {
        let mut a = h.dot(&layer.weight.t()) + &layer.bias;
        let mut gate = Array2::zeros(a.raw_dim());
        Zip::from(&mut a).and(&mut gate).for_each(|v, g| {
            let kept = dropout == 0.0 || rng.gen_bool(keep);
            if *v > F::zero() && kept {
                *g = scale;
                *v *= scale;
            } else {
                *v = F::zero();
            }
        });
        inputs.push(h);
        gates.push(gate);
        h = a;
    }
    let logits = h.dot(&out[0].weight.t()) + &out[0].bias;
    inputs.push(h);

    // dL/dz = (softmax(z/T) - y) / (T n); loss = -sum y log softmax(z/T) / n.
    let mut dz = logits.mapv(|v| v / temperature);
    let mut loss = F::zero();
    for (mut row, t) in dz.rows_mut().into_iter().zip(targets.rows()) {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = row.fold(F::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        for (z, &y) in row.iter_mut().zip(t) {
            let logp = *z - lse;
            if y > F::zero() {
                loss -= y * logp;
            }
            *z = (logp.exp() - y) / (temperature * n);
        }
    }

    let mut delta = dz;
    for li in (0..model.layers.len()).rev() {
        let input = &inputs[li];
        grads.weights[li] = delta.t().dot(input);
        grads.biases[li] = delta.sum_axis(Axis(0));
        if li > 0 {
            let mut back = delta.dot(&model.layers[li].weight);
            back *= &gates[li - 1];
            delta = back;
        }
    }
    loss / n
}

/// Core loop shared by every trainer. Returns the parameters with the best
/// validation error seen.
pub fn fit<F: Scalar>(
    mut model: MlpModel<F>,
    train_inputs: &Array2<F>,
    targets: Targets<'_, F>,
    valid_inputs: &Array2<F>,
    valid_labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<Trained<F>> {
    config.validate()?;
    if targets.len() != train_inputs.nrows() || valid_labels.len() != valid_inputs.nrows() {
        return Err(Error::contract("inputs and targets differ in length"));
    }
    if train_inputs.nrows() == 0 || valid_inputs.nrows() == 0 {
        return Err(Error::contract("training needs nonempty train and valid splits"));
    }
    let temperature = F::of(config.temperature);
    model.temperature = temperature;
    model.train_temperature = temperature;
    let decay = F::of(config.weight_decay);
    let sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    let mut adam = Adam::<F>::new(&sizes);
    let mut grads = Gradients {
        weights: model.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
        biases: model.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
    };
    let mut shuffle_rng = derived_rng(seed, "train/shuffle");
    let mut dropout_rng = derived_rng(seed, "train/dropout");

    let n = train_inputs.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = config.initial_step;
    let mut best = model.clone();
    let mut best_errors = usize::MAX;
    let mut log = Vec::new();
    let mut target_row = vec![F::zero(); CLASS_COUNT];

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = train_inputs.select(Axis(0), chunk);
            let mut y = Array2::zeros((chunk.len(), CLASS_COUNT));
            for (r, &i) in chunk.iter().enumerate() {
                targets.row(i, &mut target_row);
                y.row_mut(r).assign(&ndarray::ArrayView1::from(&target_row[..]));
            }
            let ce = batch_gradients(
                &model,
                x,
                &y,
                temperature,
                config.dropout_rate,
                &mut dropout_rng,
                &mut grads,
            );
            let penalty = if config.weight_decay > 0.0 {
                decay * model.sum_squared_weights()
            } else {
                F::zero()
            };
            let loss = (ce + penalty).f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step_size: step,
                    reason: format!("non-finite training loss {loss}"),
                });
            }
            loss_sum += loss;
            batches += 1;
            if config.weight_decay > 0.0 {
                let two_d = decay + decay;
                for (g, l) in grads.weights.iter_mut().zip(&model.layers) {
                    g.scaled_add(two_d, &l.weight);
                }
            }
            let groups = model
                .layers
                .iter_mut()
                .zip(grads.weights.iter().zip(&grads.biases))
                .flat_map(|(l, (gw, gb))| {
                    [
                        (
                            l.weight.as_slice_mut().expect("contiguous"),
                            gw.as_slice().expect("contiguous"),
                        ),
                        (
                            l.bias.as_slice_mut().expect("contiguous"),
                            gb.as_slice().expect("contiguous"),
                        ),
                    ]
                });
            adam.step(F::of(step), groups);
        }
        let train_loss = loss_sum / batches as f64;
        let errors = count_errors(&model, valid_inputs.view(), valid_labels);
        if model.layers.iter().any(|l| l.weight.iter().any(|w| !w.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                step_size: step,
                reason: "non-finite weights".into(),
            });
        }
        log.push(EpochRecord {
            epoch,
            step_size: step,
            train_loss,
            valid_error: errors as f64 / valid_labels.len() as f64,
        });
        log::debug!("epoch {epoch}: step {step:e} loss {train_loss:.5} valid errors {errors}");
        if errors < best_errors {
            best_errors = errors;
            best = model.clone();
        } else {
            step /= 2.0;
            if step < config.min_step {
                break;
            }
        }
    }
    Ok(Trained { model: best, log })
}

/// Cross-entropy on hard labels at `config.temperature`.
pub fn train_baseline<F: Scalar>(data: &SplitDataset, arch: Arch, config: &TrainConfig) -> Result<Trained<F>> {
    config.validate()?;
    arch.validate()?;
    let prep = prepare::<F>(data, config.projected_dim, config.seed)?;
    train_prepared(&prep, data, arch, config)
}

fn train_prepared<F: Scalar>(
    prep: &Prepared<F>,
    data: &SplitDataset,
    arch: Arch,
    config: &TrainConfig,
) -> Result<Trained<F>> {
    let init = MlpModel::init(prep.projection.clone(), prep.normalizer.clone(), arch, config.seed)?;
    fit(
        init,
        &prep.train_inputs,
        Targets::Hard(&data.train.labels),
        &prep.valid_inputs,
        &data.valid.labels,
        config,
        config.seed,
    )
}

#[derive(Debug, Clone)]
pub struct Distilled<F> {
    pub teacher: Trained<F>,
    /// Deployed with the standard softmax (T = 1).
    pub student: Trained<F>,
}

/// Teacher on hard labels at temperature T, then a same-architecture student
/// on the teacher's temperature-T probabilities, deployed at T = 1.
pub fn train_distilled<F: Scalar>(data: &SplitDataset, arch: Arch, config: &TrainConfig) -> Result<Distilled<F>> {
    config.validate()?;
    arch.validate()?;
    if config.temperature < 1.0 {
        return Err(Error::config("temperature", "distillation needs T >= 1"));
    }
    let prep = prepare::<F>(data, config.projected_dim, config.seed)?;
    let teacher = train_prepared(&prep, data, arch, config)?;
    let soft = soft_targets(&teacher.model, &prep.train_inputs, F::of(config.temperature));

    let student_seed = derive_seed(config.seed, "distill/student");
    let init = MlpModel::init(prep.projection.clone(), prep.normalizer.clone(), arch, student_seed)?;
    let mut student = fit(
        init,
        &prep.train_inputs,
        Targets::Soft(&soft),
        &prep.valid_inputs,
        &data.valid.labels,
        config,
        student_seed,
    )?;
    student.model.temperature = F::one();
    Ok(Distilled { teacher, student })
}

/// Teacher probabilities at temperature `T`, one row per input.
pub fn soft_targets<F: Scalar>(teacher: &MlpModel<F>, inputs: &Array2<F>, temperature: F) -> Array2<F> {
    let mut out = Array2::zeros((inputs.nrows(), CLASS_COUNT));
    let chunk = 1024;
    for start in (0..inputs.nrows()).step_by(chunk) {
        let end = (start + chunk).min(inputs.nrows());
        let p = batch_probs(teacher, inputs.slice(s![start..end, ..]), temperature);
        out.slice_mut(s![start..end, ..]).assign(&p);
    }
    out
}

/// `E` baselines with seeds `seed, seed + 1, ..`.
pub fn train_ensemble<F: Scalar>(
    data: &SplitDataset,
    arch: Arch,
    config: &TrainConfig,
    members: usize,
) -> Result<Vec<Trained<F>>> {
    if members < 3 || members % 2 == 0 {
        return Err(Error::config(
            "ensemble",
            format!("E must be odd and >= 3, got {members}"),
        ));
    }
    (0..members as u64)
        .map(|i| {
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(i),
                ..config.clone()
            };
            train_baseline(data, arch, &cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SparseBinaryVector;

    /// Two informative features plus noise; class 1 iff feature 0 is on,
    /// feature 1 mirrors feature 0 with the opposite sign.
    fn separable(n: usize, seed: u64) -> SplitDataset {
        let mut rng = crate::seed::rng(seed);
        let mut make = |n: usize| {
            let mut vectors = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                let y = rng.gen_bool(0.5);
                let mut on = vec![if y { 0 } else { 1 }];
                for j in 2..12 {
                    if rng.gen_bool(0.3) {
                        on.push(j);
                    }
                }
                vectors.push(SparseBinaryVector::new(12, on).unwrap());
                labels.push(y as u8);
            }
            Dataset::new(12, vectors, labels).unwrap()
        };
        SplitDataset {
            train: make(n),
            valid: make(n / 4),
            test: make(n / 4),
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            initial_step: 0.01,
            max_epochs: 50,
            batch_size: 32,
            projected_dim: 12,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let data = separable(400, 1);
        let run = train_baseline::<f64>(&data, Arch::new(1, 16), &quick()).unwrap();
        assert!(run.log.len() <= 50);
        let errors = count_errors(
            &run.model,
            prepare_inputs(&run.model, &data.train).view(),
            &data.train.labels,
        );
        assert_eq!(errors, 0);
    }

    fn prepare_inputs<F: Scalar>(model: &MlpModel<F>, data: &Dataset) -> Array2<F> {
        let mut rows = project_rows(&model.projection, data);
        normalize_rows(&model.normalizer, &mut rows);
        rows
    }

    #[test]
    fn rejects_bad_configs() {
        let data = separable(40, 1);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..quick()
        };
        assert!(matches!(
            train_baseline::<f64>(&data, Arch::new(1, 4), &cfg),
            Err(Error::Config {
                field: "max_epochs",
                ..
            })
        ));
        let cfg = TrainConfig {
            dropout_rate: 1.0,
            ..quick()
        };
        assert!(train_baseline::<f64>(&data, Arch::new(1, 4), &cfg).is_err());
        assert!(matches!(
            train_ensemble::<f64>(&data, Arch::new(1, 4), &quick(), 2),
            Err(Error::Config { field: "ensemble", .. })
        ));
    }

    #[test]
    fn step_sizes_halve_monotonically() {
        let data = separable(200, 2);
        let run = train_baseline::<f64>(
            &data,
            Arch::new(2, 8),
            &TrainConfig {
                max_epochs: 200,
                ..quick()
            },
        )
        .unwrap();
        let first = run.log[0].step_size;
        for w in run.log.windows(2) {
            assert!(w[1].step_size <= w[0].step_size);
        }
        for r in &run.log {
            let k = (first / r.step_size).log2();
            assert!((k - k.round()).abs() < 1e-12);
            assert!(r.train_loss.is_finite());
        }
        // Stops once the step falls below the floor.
        assert!(run.log.len() < 200);
    }

    #[test]
    fn deterministic_training() {
        let data = separable(120, 3);
        let a = train_baseline::<f64>(&data, Arch::new(1, 8), &quick()).unwrap();
        let b = train_baseline::<f64>(&data, Arch::new(1, 8), &quick()).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn weight_decay_shrinks_weights() {
        let data = separable(200, 4);
        let plain = train_baseline::<f64>(&data, Arch::new(1, 8), &quick()).unwrap();
        let decayed = train_baseline::<f64>(
            &data,
            Arch::new(1, 8),
            &TrainConfig {
                weight_decay: 0.01,
                ..quick()
            },
        )
        .unwrap();
        assert!(decayed.model.sum_squared_weights() < plain.model.sum_squared_weights());
    }

    #[test]
    fn soft_targets_are_distributions() {
        let data = separable(100, 6);
        let run = train_baseline::<f64>(&data, Arch::new(1, 8), &quick()).unwrap();
        let inputs = prepare_inputs(&run.model, &data.train);
        for t in [1.0, 2.0, 10.0] {
            let soft = soft_targets(&run.model, &inputs, t);
            for row in soft.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distilled_student_is_deployed_at_unit_temperature() {
        let data = separable(200, 7);
        let d = train_distilled::<f64>(
            &data,
            Arch::new(1, 8),
            &TrainConfig {
                temperature: 10.0,
                ..quick()
            },
        )
        .unwrap();
        assert_eq!(d.student.model.temperature(), 1.0);
        assert_eq!(d.student.model.train_temperature(), 10.0);
        assert_eq!(d.teacher.model.temperature(), 10.0);
        assert!(train_distilled::<f64>(
            &data,
            Arch::new(1, 8),
            &TrainConfig {
                temperature: 0.5,
                ..quick()
            }
        )
        .is_err());
    }

    #[test]
    fn ensemble_members_differ() {
        let data = separable(80, 8);
        let members = train_ensemble::<f64>(&data, Arch::new(1, 6), &quick(), 3).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                let a = &members[i].model.layers()[0].weight;
                let b = &members[j].model.layers()[0].weight;
                let max_diff = (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(max_diff > 0.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Without dropout, the batch gradient of the mean cross-entropy equals
        // a central difference of the loss.
        let data = separable(20, 9);
        let prep = prepare::<f64>(&data, 12, 1).unwrap();
        let model = MlpModel::init(prep.projection.clone(), prep.normalizer.clone(), Arch::new(2, 5), 3).unwrap();
        let x = prep.train_inputs.clone();
        let mut y = Array2::zeros((x.nrows(), 2));
        for (i, &l) in data.train.labels.iter().enumerate() {
            y[[i, l as usize]] = 1.0;
        }
        let t = 2.0;
        let mut grads = Gradients {
            weights: model.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: model.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        };
        let mut rng = crate::seed::rng(0);
        batch_gradients(&model, x.clone(), &y, t, 0.0, &mut rng, &mut grads);
        let loss = |m: &MlpModel<f64>| {
            let mut g = Gradients {
                weights: grads.weights.clone(),
                biases: grads.biases.clone(),
            };
            batch_gradients(m, x.clone(), &y, t, 0.0, &mut crate::seed::rng(0), &mut g)
        };
        let h = 1e-6;
        for li in 0..model.layers.len() {
            for idx in [(0, 0), (1, 2), (0, 4)] {
                let mut plus = model.clone();
                plus.layers[li].weight[idx] += h;
                let mut minus = model.clone();
                minus.layers[li].weight[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.weights[li][idx];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
                    "layer {li} {idx:?}: {fd} vs {an}"
                );
            }
            let mut plus = model.clone();
            plus.layers[li].bias[1] += h;
            let mut minus = model.clone();
            minus.layers[li].bias[1] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - grads.biases[li][1]).abs() < 1e-6);
        }
    }
}
