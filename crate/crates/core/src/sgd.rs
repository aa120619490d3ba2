//! Softmax-regression training engine.
//!
//! Everything here is a pure function over immutable inputs. Gradients are
//! mean-reduced over the batch so that averaging per-worker gradients of
//! equal-sized batches yields the gradient of the concatenated batch.
//!
//! Flat layout of a parameter or gradient vector: weights row-major by class
//! (`classes × features`), followed by `classes` biases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the symmetric range used by [`init_model`].
pub const INIT_SCALE: f64 = 0.01;

/// Default step for [`finite_diff_gradient`].
pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub classes: usize,
    pub features: usize,
}

impl Dims {
    pub fn new(classes: usize, features: usize) -> Self {
        Dims { classes, features }
    }

    pub fn weight_len(&self) -> usize {
        self.classes * self.features
    }

    /// Length of the flat parameter (and gradient) vector.
    pub fn param_len(&self) -> usize {
        self.classes * (self.features + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.features < 1 {
            return Err(Error::config("features must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dims: Dims,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        ModelParams {
            weights: vec![0.0; dims.weight_len()],
            bias: vec![0.0; dims.classes],
            dims,
        }
    }

    pub fn from_flat(dims: Dims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.param_len() {
            return Err(Error::contract(format!(
                "flat parameter length {} does not match dims {}x{}",
                flat.len(),
                dims.classes,
                dims.features
            )));
        }
        let (w, b) = flat.split_at(dims.weight_len());
        Ok(ModelParams {
            weights: w.to_vec(),
            bias: b.to_vec(),
            dims,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_len());
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let f = self.dims.features;
        for (c, z) in out.iter_mut().enumerate() {
            let row = &self.weights[c * f..(c + 1) * f];
            *z = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[c];
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.dims.classes];
        self.logits(x, &mut z);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub dims: Dims,
}

impl GradientVector {
    pub fn zeros(dims: Dims) -> Self {
        GradientVector {
            values: vec![0.0; dims.param_len()],
            dims,
        }
    }

    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_len() {
            return Err(Error::contract(format!(
                "gradient length {} does not match dims {}x{} (expected {})",
                values.len(),
                dims.classes,
                dims.features,
                dims.param_len()
            )));
        }
        Ok(GradientVector { values, dims })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum, used for residual accumulation.
    pub fn add(&self, other: &GradientVector) -> Result<GradientVector> {
        if self.dims != other.dims {
            return Err(Error::contract("gradient dims mismatch in add"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(GradientVector {
            values,
            dims: self.dims,
        })
    }
}

/// Arithmetic mean of equal-length vectors, summed in slice order then divided
/// by the count. Every aggregation path in the crate goes through this so that
/// identical inputs in identical order give bitwise-identical results.
pub fn mean_of<'a, I>(vectors: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::contract("mean of zero vectors"))?;
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        if v.len() != acc.len() {
            return Err(Error::contract(format!(
                "length mismatch in mean: {} vs {}",
                v.len(),
                acc.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    let n = count as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    /// Row-major `size × features`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dims: Dims,
}

impl Minibatch {
    pub fn new(dims: Dims, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let batch = Minibatch {
            features,
            labels,
            dims,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let f = self.dims.features;
        &self.features[i * f..(i + 1) * f]
    }

    /// Concatenation of two batches with the same dims.
    pub fn concat(&self, other: &Minibatch) -> Result<Minibatch> {
        if self.dims != other.dims {
            return Err(Error::contract("minibatch dims mismatch in concat"));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Minibatch::new(self.dims, features, labels)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::contract("minibatch must hold at least one example"));
        }
        if self.features.len() != self.labels.len() * self.dims.features {
            return Err(Error::contract("minibatch feature block has the wrong length"));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.dims.classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                self.dims.classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `n × features`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub dims: Dims,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let f = self.dims.features;
        &self.features[i * f..(i + 1) * f]
    }

    /// Gathers the given example indices into a minibatch.
    pub fn gather(&self, indices: &[usize]) -> Result<Minibatch> {
        let mut features = Vec::with_capacity(indices.len() * self.dims.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        Minibatch::new(self.dims, features, labels)
    }

    pub fn as_batch(&self) -> Result<Minibatch> {
        Minibatch::new(self.dims, self.features.clone(), self.labels.clone())
    }
}

fn check_dims(params: &ModelParams, batch: &Minibatch) -> Result<()> {
    if params.dims != batch.dims {
        return Err(Error::contract(format!(
            "model dims {:?} do not match batch dims {:?}",
            params.dims, batch.dims
        )));
    }
    if params.weights.len() != params.dims.weight_len() || params.bias.len() != params.dims.classes
    {
        return Err(Error::contract("model parameter buffers do not match dims"));
    }
    Ok(())
}

pub fn init_model(classes: usize, features: usize, seed: u64) -> Result<ModelParams> {
    let dims = Dims::new(classes, features);
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(-INIT_SCALE..=INIT_SCALE);
    let weights = (0..dims.weight_len()).map(|_| draw()).collect();
    let bias = (0..classes).map(|_| draw()).collect();
    Ok(ModelParams {
        weights,
        bias,
        dims,
    })
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy gradient over the batch.
pub fn compute_gradient(params: &ModelParams, batch: &Minibatch) -> Result<GradientVector> {
    check_dims(params, batch)?;
    let dims = params.dims;
    let (c_n, f_n) = (dims.classes, dims.features);
    let mut grad = vec![0.0; dims.param_len()];
    let mut p = vec![0.0; c_n];
    for i in 0..batch.size() {
        let x = batch.example(i);
        params.logits(x, &mut p);
        softmax_in_place(&mut p);
        p[batch.labels[i]] -= 1.0;
        for c in 0..c_n {
            let d = p[c];
            let row = &mut grad[c * f_n..(c + 1) * f_n];
            for (g, v) in row.iter_mut().zip(x) {
                *g += d * v;
            }
            grad[dims.weight_len() + c] += d;
        }
    }
    let n = batch.size() as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok(GradientVector { values: grad, dims })
}

/// Mean softmax cross-entropy over the batch.
pub fn compute_loss(params: &ModelParams, batch: &Minibatch) -> Result<f64> {
    check_dims(params, batch)?;
    let mut z = vec![0.0; params.dims.classes];
    let mut total = 0.0;
    for i in 0..batch.size() {
        params.logits(batch.example(i), &mut z);
        total += log_sum_exp(&z) - z[batch.labels[i]];
    }
    Ok(total / batch.size() as f64)
}

pub fn apply_update(params: &ModelParams, grad: &GradientVector, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if params.dims != grad.dims || grad.values.len() != params.dims.param_len() {
        return Err(Error::contract("gradient dims do not match model dims"));
    }
    let w_len = params.dims.weight_len();
    let weights = params
        .weights
        .iter()
        .zip(&grad.values[..w_len])
        .map(|(p, g)| p - lr * g)
        .collect();
    let bias = params
        .bias
        .iter()
        .zip(&grad.values[w_len..])
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(ModelParams {
        weights,
        bias,
        dims: params.dims,
    })
}

/// Central differences of [`compute_loss`], one coordinate at a time.
pub fn finite_diff_gradient(
    params: &ModelParams,
    batch: &Minibatch,
    eps: f64,
) -> Result<GradientVector> {
    check_dims(params, batch)?;
    if !(eps > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let flat = params.to_flat();
    let mut probe = flat.clone();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        probe[i] = flat[i] + eps;
        let up = compute_loss(&ModelParams::from_flat(params.dims, &probe)?, batch)?;
        probe[i] = flat[i] - eps;
        let down = compute_loss(&ModelParams::from_flat(params.dims, &probe)?, batch)?;
        probe[i] = flat[i];
        out.push((up - down) / (2.0 * eps));
    }
    GradientVector::new(params.dims, out)
}

/// Fraction of examples whose arg-max prediction matches the label.
pub fn accuracy(params: &ModelParams, ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let hits = (0..ds.len())
        .filter(|&i| params.predict(ds.example(i)) == ds.labels[i])
        .count();
    hits as f64 / ds.len() as f64
}

fn class_centers(dims: Dims, separation: f64) -> Vec<Vec<f64>> {
    let (c_n, f_n) = (dims.classes, dims.features);
    let mut centers = vec![vec![0.0; f_n]; c_n];
    if c_n <= f_n {
        // Scaled basis vectors: every pair sits exactly `separation` apart.
        let scale = separation / std::f64::consts::SQRT_2;
        for (c, center) in centers.iter_mut().enumerate() {
            center[c] = scale;
        }
    } else if f_n >= 2 {
        // Regular polygon with adjacent vertices `separation` apart.
        let radius = separation / (2.0 * (std::f64::consts::PI / c_n as f64).sin());
        for (c, center) in centers.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / c_n as f64;
            center[0] = radius * angle.cos();
            center[1] = radius * angle.sin();
        }
    } else {
        for (c, center) in centers.iter_mut().enumerate() {
            center[0] = separation * c as f64;
        }
    }
    centers
}

/// Unit-variance Gaussian clusters, one per class. Labels are assigned
/// round-robin, then shuffled with the seed.
pub fn generate_synthetic_dataset(
    n: usize,
    classes: usize,
    features: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let dims = Dims::new(classes, features);
    dims.validate()?;
    if n < classes {
        return Err(Error::config(format!(
            "dataset size {n} is smaller than the class count {classes}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::config("separation must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let centers = class_centers(dims, separation);
    let mut data = Vec::with_capacity(n * features);
    for &label in &labels {
        for f in 0..features {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(centers[label][f] + noise);
        }
    }
    Ok(Dataset {
        features: data,
        labels,
        seed,
        dims,
    })
}

/// One worker's minibatches for an epoch, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSchedule {
    pub worker: usize,
    pub batches: Vec<Minibatch>,
    /// Dataset indices behind each batch.
    pub indices: Vec<Vec<usize>>,
}

/// Samples `workers × batches_per_worker × batch_size` examples without
/// replacement and deals them out as contiguous blocks: worker `i` gets
/// the `i`-th block of the permutation.
pub fn partition_dataset(
    ds: &Dataset,
    workers: usize,
    batches_per_worker: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<WorkerSchedule>> {
    if workers == 0 || batches_per_worker == 0 || batch_size == 0 {
        return Err(Error::config(
            "workers, batches_per_worker and batch_size must all be >= 1",
        ));
    }
    let needed = workers
        .checked_mul(batches_per_worker)
        .and_then(|v| v.checked_mul(batch_size))
        .ok_or_else(|| Error::config("partition size overflows"))?;
    if needed > ds.len() {
        return Err(Error::config(format!(
            "partition needs {needed} examples but the dataset holds {}",
            ds.len()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut schedules = Vec::with_capacity(workers);
    for w in 0..workers {
        let mut batches = Vec::with_capacity(batches_per_worker);
        let mut indices = Vec::with_capacity(batches_per_worker);
        for b in 0..batches_per_worker {
            let start = (w * batches_per_worker + b) * batch_size;
            let idx = perm[start..start + batch_size].to_vec();
            batches.push(ds.gather(&idx)?);
            indices.push(idx);
        }
        schedules.push(WorkerSchedule {
            worker: w,
            batches,
            indices,
        });
    }
    Ok(schedules)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_instance(seed: u64, dims: Dims, size: usize) -> (ModelParams, Minibatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..dims.param_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let params = ModelParams::from_flat(dims, &flat).unwrap();
        let features = (0..size * dims.features)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let labels = (0..size).map(|_| rng.random_range(0..dims.classes)).collect();
        (params, Minibatch::new(dims, features, labels).unwrap())
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = init_model(2, 3, 7).unwrap();
        assert_eq!(p.to_flat().len(), 8);
        assert!(p.is_finite());
        assert_eq!(p, init_model(2, 3, 7).unwrap());
        assert_eq!(init_model(10, 32, 1).unwrap().len(), 330);
        assert!(p.to_flat().iter().all(|v| v.abs() <= INIT_SCALE));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_model(1, 3, 0), Err(Error::Config(_))));
        assert!(matches!(init_model(3, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_batch_gives_zero_weight_gradient() {
        let dims = Dims::new(3, 4);
        let params = ModelParams::zeros(dims);
        let batch = Minibatch::new(dims, vec![0.0; 6 * 4], vec![0, 1, 2, 2, 1, 0]).unwrap();
        let g = compute_gradient(&params, &batch).unwrap();
        assert!(g.values[..dims.weight_len()].iter().all(|&v| v == 0.0));
        // balanced labels also zero the bias block
        assert!(g.values.iter().all(|v| v.abs() < 1e-15));
        let fd = finite_diff_gradient(&params, &batch, DEFAULT_FD_EPS).unwrap();
        assert!(fd.values.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn uniform_logits_loss_is_log_classes() {
        for classes in [2usize, 10] {
            let dims = Dims::new(classes, 3);
            let batch = Minibatch::new(dims, vec![0.5; 3 * 4], vec![0, 1, 0, 1]).unwrap();
            let loss = compute_loss(&ModelParams::zeros(dims), &batch).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_per_example_recomputation() {
        let dims = Dims::new(4, 5);
        let (params, batch) = random_instance(11, dims, 9);
        let mut total = 0.0;
        for i in 0..batch.size() {
            let x = batch.example(i);
            let logits: Vec<f64> = (0..dims.classes)
                .map(|c| {
                    (0..dims.features)
                        .map(|f| params.weights[c * dims.features + f] * x[f])
                        .sum::<f64>()
                        + params.bias[c]
                })
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            total += -(logits[batch.labels[i]].exp() / denom).ln();
        }
        let expected = total / batch.size() as f64;
        let got = compute_loss(&params, &batch).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (params, batch) = random_instance(seed, Dims::new(2, 3), 5);
            let g = compute_gradient(&params, &batch).unwrap();
            let fd = finite_diff_gradient(&params, &batch, DEFAULT_FD_EPS).unwrap();
            let scale = fd.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.values.iter().zip(&fd.values) {
                assert!((a - b).abs() <= 1e-6 * scale.max(1e-8));
            }
        }
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let (params, batch) = random_instance(3, Dims::new(3, 2), 6);
        let g = compute_gradient(&params, &batch).unwrap();
        let err = |eps: f64| {
            let fd = finite_diff_gradient(&params, &batch, eps).unwrap();
            g.values
                .iter()
                .zip(&fd.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(0.1) / err(0.05);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn gradient_of_concatenation_is_mean_of_halves() {
        let dims = Dims::new(3, 4);
        let (params, b1) = random_instance(5, dims, 7);
        let (_, b2) = random_instance(6, dims, 7);
        let whole = compute_gradient(&params, &b1.concat(&b2).unwrap()).unwrap();
        let g1 = compute_gradient(&params, &b1).unwrap();
        let g2 = compute_gradient(&params, &b2).unwrap();
        for ((w, a), b) in whole.values.iter().zip(&g1.values).zip(&g2.values) {
            assert!((w - (a + b) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dims_mismatch_is_contract_error() {
        let (params, _) = random_instance(1, Dims::new(2, 3), 2);
        let (_, batch) = random_instance(1, Dims::new(2, 4), 2);
        assert!(matches!(compute_gradient(&params, &batch), Err(Error::Contract(_))));
        assert!(matches!(compute_loss(&params, &batch), Err(Error::Contract(_))));
    }

    #[test]
    fn update_arithmetic() {
        let dims = Dims::new(2, 1);
        let p = ModelParams::from_flat(dims, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = GradientVector::new(dims, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let out = apply_update(&p, &g, 0.1).unwrap();
        assert!((out.weights[0] - 0.8).abs() < 1e-15);

        let zero = GradientVector::zeros(dims);
        assert_eq!(apply_update(&p, &zero, 0.3).unwrap(), p);

        let g = GradientVector::new(dims, vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let neg = apply_update(&ModelParams::zeros(dims), &g, 1.0).unwrap();
        assert_eq!(neg.to_flat(), vec![-1.5, 2.0, -0.25, -3.0]);

        assert!(matches!(apply_update(&p, &g, 0.0), Err(Error::Config(_))));
        assert!(matches!(apply_update(&p, &g, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn full_batch_step_decreases_loss() {
        let ds = generate_synthetic_dataset(300, 3, 4, 5.0, 2).unwrap();
        let batch = ds.as_batch().unwrap();
        let params = init_model(3, 4, 9).unwrap();
        let before = compute_loss(&params, &batch).unwrap();
        let g = compute_gradient(&params, &batch).unwrap();
        let after = compute_loss(&apply_update(&params, &g, 1e-3).unwrap(), &batch).unwrap();
        assert!(after < before);
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let a = generate_synthetic_dataset(101, 3, 4, 5.0, 3).unwrap();
        assert_eq!(a, generate_synthetic_dataset(101, 3, 4, 5.0, 3).unwrap());
        let mut hist = [0usize; 3];
        for &l in &a.labels {
            hist[l] += 1;
        }
        for h in hist {
            assert!((h as f64 - 101.0 / 3.0).abs() <= 1.0);
        }
        assert!(matches!(
            generate_synthetic_dataset(2, 3, 4, 5.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn separated_dataset_is_learnable() {
        // plain full-batch gradient descent as the reference trainer
        let ds = generate_synthetic_dataset(100, 2, 2, 10.0, 3).unwrap();
        let batch = ds.as_batch().unwrap();
        let mut params = init_model(2, 2, 0).unwrap();
        for _ in 0..200 {
            let g = compute_gradient(&params, &batch).unwrap();
            params = apply_update(&params, &g, 0.5).unwrap();
        }
        assert!(accuracy(&params, &ds) > 0.99);
    }

    #[test]
    fn exact_partition_covers_dataset() {
        let ds = generate_synthetic_dataset(96, 2, 2, 1.0, 0).unwrap();
        let scheds = partition_dataset(&ds, 4, 24, 1, 0).unwrap();
        assert_eq!(scheds.len(), 4);
        let mut seen: Vec<usize> = scheds
            .iter()
            .inspect(|s| assert_eq!(s.batches.len(), 24))
            .flat_map(|s| s.indices.iter().flatten().copied())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..96).collect::<Vec<_>>());
        assert_eq!(scheds, partition_dataset(&ds, 4, 24, 1, 0).unwrap());
    }

    #[test]
    fn single_worker_partition_is_prefix_of_a_permutation() {
        let ds = generate_synthetic_dataset(50, 2, 2, 1.0, 0).unwrap();
        let s = partition_dataset(&ds, 1, 4, 5, 8).unwrap();
        let mut idx: Vec<usize> = s[0].indices.iter().flatten().copied().collect();
        assert_eq!(idx.len(), 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
    }

    #[test]
    fn partition_size_checks() {
        let ds = generate_synthetic_dataset(100, 2, 2, 1.0, 0).unwrap();
        assert!(matches!(partition_dataset(&ds, 4, 24, 2, 0), Err(Error::Config(_))));
        // 4 workers × 24 batches × 512 fits exactly in 49152 examples
        assert_eq!(4 * 24 * 512, 49_152);
        let big = Dataset {
            features: vec![0.0; 49_152],
            labels: vec![0; 49_152],
            seed: 0,
            dims: Dims::new(2, 1),
        };
        let scheds = partition_dataset(&big, 4, 24, 512, 0).unwrap();
        assert!(scheds.iter().all(|s| s.batches.iter().all(|b| b.size() == 512)));
    }
}
