//! Differentiable training tasks.
//!
//! Three task kinds share one flat parameter layout convention:
//!
//! * `SoftmaxLinear` and `Mlp` are classifiers trained with mean cross-entropy.
//!   Parameters are stored layer by layer, each layer as its weight matrix
//!   (`out x in`, row-major) followed by its bias vector. Hidden layers use
//!   `tanh`.
//! * `MeanQuadratic` is the analytic task `f_m(w) = ½‖w − b_m‖²`. A sample's
//!   label is the index of its target `b_m`, so a shard made of samples
//!   labelled `m` realizes `f_m`, and the full dataset realizes the
//!   size-weighted mean of the `f_m`.

use std::borrow::Cow;
use std::ops::{Add, Sub};

use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Flat real-valued model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

/// Gradient of a loss with respect to a [`ParamVector`]; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

macro_rules! vector_common {
    ($t:ident) => {
        impl $t {
            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn from_vec(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            /// Euclidean distance; panics on dimension mismatch.
            pub fn distance(&self, other: &Self) -> f64 {
                assert_eq!(self.dim(), other.dim(), "dimension mismatch");
                self.0
                    .iter()
                    .zip(&other.0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            }

            pub fn scale(&self, factor: f64) -> Self {
                Self(self.0.iter().map(|v| v * factor).collect())
            }

            /// `self += factor * other`
            pub fn add_scaled(&mut self, factor: f64, other: &Self) {
                assert_eq!(self.dim(), other.dim(), "dimension mismatch");
                for (a, b) in self.0.iter_mut().zip(&other.0) {
                    *a += factor * b;
                }
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            /// Weighted sum `Σ weights[i] * vectors[i]`, accumulated in index order.
            pub fn weighted_sum<'a, I>(dim: usize, terms: I) -> Self
            where
                I: IntoIterator<Item = (f64, &'a Self)>,
            {
                let mut out = Self::zeros(dim);
                for (w, v) in terms {
                    out.add_scaled(w, v);
                }
                out
            }
        }

        impl Add for &$t {
            type Output = $t;
            fn add(self, rhs: &$t) -> $t {
                assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
                $t(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
            }
        }

        impl Sub for &$t {
            type Output = $t;
            fn sub(self, rhs: &$t) -> $t {
                assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
                $t(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
            }
        }

        impl From<Vec<f64>> for $t {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }
    };
}

vector_common!(ParamVector);
vector_common!(GradientVector);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SoftmaxLinear,
    Mlp,
    MeanQuadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    SoftmaxLinear {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
    MeanQuadratic {
        targets: Vec<ParamVector>,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::SoftmaxLinear { .. } => ModelKind::SoftmaxLinear,
            ModelSpec::Mlp { .. } => ModelKind::Mlp,
            ModelSpec::MeanQuadratic { .. } => ModelKind::MeanQuadratic,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::MeanQuadratic { .. })
    }

    /// Width of a sample's feature row. Zero for the mean-quadratic task.
    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::SoftmaxLinear { input_dim, .. } | ModelSpec::Mlp { input_dim, .. } => {
                *input_dim
            }
            ModelSpec::MeanQuadratic { .. } => 0,
        }
    }

    /// Number of distinct labels: classes for classifiers, targets for the quadratic.
    pub fn label_count(&self) -> usize {
        match self {
            ModelSpec::SoftmaxLinear { num_classes, .. } | ModelSpec::Mlp { num_classes, .. } => {
                *num_classes
            }
            ModelSpec::MeanQuadratic { targets } => targets.len(),
        }
    }

    fn layer_sizes(&self) -> Vec<usize> {
        match self {
            ModelSpec::SoftmaxLinear {
                input_dim,
                num_classes,
            } => vec![*input_dim, *num_classes],
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let mut sizes = vec![*input_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(*num_classes);
                sizes
            }
            ModelSpec::MeanQuadratic { .. } => Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::MeanQuadratic { targets } => targets.first().map_or(0, ParamVector::dim),
            _ => self
                .layer_sizes()
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::SoftmaxLinear {
                input_dim,
                num_classes,
            } => {
                if *num_classes < 2 {
                    return Err(Error::contract("classifier needs at least 2 classes"));
                }
                if *input_dim == 0 {
                    return Err(Error::contract("input_dim must be positive"));
                }
            }
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                if *num_classes < 2 {
                    return Err(Error::contract("classifier needs at least 2 classes"));
                }
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(Error::contract("layer widths must be positive"));
                }
            }
            ModelSpec::MeanQuadratic { targets } => {
                let Some(first) = targets.first() else {
                    return Err(Error::contract("mean-quadratic needs at least one target"));
                };
                if first.dim() == 0 || targets.iter().any(|t| t.dim() != first.dim()) {
                    return Err(Error::contract("targets must share one positive dimension"));
                }
            }
        }
        Ok(())
    }

    /// Deterministic uniform initialization in `[-0.05, 0.05]`.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        ParamVector((0..self.dim()).map(|_| rng.random_range(-0.05..=0.05)).collect())
    }

    /// Size-weighted mean of the quadratic targets, i.e. the minimizer of the
    /// global loss when target `m` carries `weights[m]`.
    pub fn weighted_target(&self, weights: &[f64]) -> Result<ParamVector> {
        let ModelSpec::MeanQuadratic { targets } = self else {
            return Err(Error::Unsupported("weighted_target on a classifier".into()));
        };
        if weights.len() != targets.len() {
            return Err(Error::contract("one weight per target required"));
        }
        Ok(ParamVector::weighted_sum(
            self.dim(),
            weights.iter().copied().zip(targets.iter()),
        ))
    }
}

/// A batch of samples: row-major inputs plus labels.
#[derive(Debug, Clone)]
pub struct DataBatch<'a> {
    inputs: Cow<'a, [f64]>,
    labels: Cow<'a, [usize]>,
    input_dim: usize,
}

impl<'a> DataBatch<'a> {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<DataBatch<'static>> {
        DataBatch::check(&inputs, &labels, input_dim)?;
        Ok(DataBatch {
            inputs: Cow::Owned(inputs),
            labels: Cow::Owned(labels),
            input_dim,
        })
    }

    pub fn borrowed(inputs: &'a [f64], labels: &'a [usize], input_dim: usize) -> Result<Self> {
        DataBatch::check(inputs, labels, input_dim)?;
        Ok(DataBatch {
            inputs: Cow::Borrowed(inputs),
            labels: Cow::Borrowed(labels),
            input_dim,
        })
    }

    fn check(inputs: &[f64], labels: &[usize], input_dim: usize) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Empty("batch has no samples".into()));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::contract(format!(
                "batch inputs hold {} values, expected {} x {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

fn check_shapes(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch<'_>) -> Result<()> {
    if params.dim() != spec.dim() {
        return Err(Error::contract(format!(
            "params have dim {}, model expects {}",
            params.dim(),
            spec.dim()
        )));
    }
    if batch.input_dim() != spec.input_dim() {
        return Err(Error::contract(format!(
            "batch rows have width {}, model expects {}",
            batch.input_dim(),
            spec.input_dim()
        )));
    }
    let limit = spec.label_count();
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= limit) {
        return Err(Error::contract(format!("label {bad} out of range [0, {limit})")));
    }
    Ok(())
}

/// Mean sample loss over the batch.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch<'_>) -> Result<f64> {
    check_shapes(spec, params, batch)?;
    let loss = match spec {
        ModelSpec::MeanQuadratic { targets } => quadratic(targets, params, batch, None),
        _ => network(&spec.layer_sizes(), params, batch, None),
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: "loss".into(),
        });
    }
    Ok(loss)
}

/// Exact gradient of [`forward_loss`] with respect to `params`.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch<'_>) -> Result<GradientVector> {
    loss_and_gradient(spec, params, batch).map(|(_, g)| g)
}

pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch<'_>,
) -> Result<(f64, GradientVector)> {
    check_shapes(spec, params, batch)?;
    let mut grad = vec![0.0; params.dim()];
    let loss = match spec {
        ModelSpec::MeanQuadratic { targets } => quadratic(targets, params, batch, Some(&mut grad)),
        _ => network(&spec.layer_sizes(), params, batch, Some(&mut grad)),
    };
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            index,
            context: "gradient".into(),
        });
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: "loss".into(),
        });
    }
    Ok((loss, GradientVector(grad)))
}

fn quadratic(
    targets: &[ParamVector],
    params: &ParamVector,
    batch: &DataBatch<'_>,
    mut grad: Option<&mut Vec<f64>>,
) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &y in batch.labels() {
        let target = targets[y].as_slice();
        let mut sq = 0.0;
        for (i, (w, b)) in params.as_slice().iter().zip(target).enumerate() {
            let diff = w - b;
            sq += diff * diff;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += scale * diff;
            }
        }
        loss += 0.5 * sq;
    }
    loss * scale
}

/// Forward (and optionally backward) pass of a tanh MLP with softmax output.
/// An empty hidden list is the softmax-linear model.
fn network(sizes: &[usize], params: &ParamVector, batch: &DataBatch<'_>, mut grad: Option<&mut Vec<f64>>) -> f64 {
    let p = params.as_slice();
    let layers = sizes.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for w in sizes.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + w[1];
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    // activations[l] is the input to layer l; activations[layers] is the logits.
    let mut activations: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut deltas: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();

    for i in 0..batch.len() {
        activations[0].copy_from_slice(batch.row(i));
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let weights = &p[offsets[l]..offsets[l] + n_in * n_out];
            let bias = &p[offsets[l] + n_in * n_out..offsets[l] + n_in * n_out + n_out];
            let (head, tail) = activations.split_at_mut(l + 1);
            let input = &head[l];
            let output = &mut tail[0];
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let z = bias[o] + row.iter().zip(input.iter()).map(|(a, b)| a * b).sum::<f64>();
                output[o] = if l + 1 < layers { z.tanh() } else { z };
            }
        }
        let logits = &activations[layers];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        let y = batch.labels()[i];
        total += log_norm - logits[y];

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // dL/dlogits = softmax - onehot
        for (c, d) in deltas[layers].iter_mut().enumerate() {
            *d = (logits[c] - log_norm).exp() - if c == y { 1.0 } else { 0.0 };
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w_off = offsets[l];
            let b_off = w_off + n_in * n_out;
            let input = &activations[l];
            for o in 0..n_out {
                let d = deltas[l + 1][o] * scale;
                g[b_off + o] += d;
                let row = &mut g[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (gw, x) in row.iter_mut().zip(input.iter()) {
                    *gw += d * x;
                }
            }
            if l > 0 {
                let weights = &p[w_off..b_off];
                let (lower, upper) = deltas.split_at_mut(l + 1);
                let back = &mut lower[l];
                let upstream = &upper[0];
                for (k, b) in back.iter_mut().enumerate() {
                    let s: f64 = (0..n_out).map(|o| weights[o * n_in + k] * upstream[o]).sum();
                    // input to layer l is tanh output: derivative 1 - a²
                    *b = s * (1.0 - input[k] * input[k]);
                }
            }
        }
    }
    total * scale
}

/// `params − eta·grad`
pub fn sgd_step(params: &ParamVector, grad: &GradientVector, eta: f64) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::config("eta", format!("learning rate must be positive, got {eta}")));
    }
    if params.dim() != grad.dim() {
        return Err(Error::contract("gradient and params differ in dimension"));
    }
    Ok(ParamVector(
        params.0.iter().zip(&grad.0).map(|(w, g)| w - eta * g).collect(),
    ))
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn predict(spec: &ModelSpec, params: &ParamVector, row: &[f64]) -> Result<usize> {
    if !spec.is_classifier() {
        return Err(Error::Unsupported("prediction on the mean-quadratic task".into()));
    }
    let batch = DataBatch::borrowed(row, &[0], row.len())?;
    let logits = logits(spec, params, &batch, 0);
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    Ok(best)
}

fn logits(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch<'_>, i: usize) -> Vec<f64> {
    let sizes = spec.layer_sizes();
    let p = params.as_slice();
    let mut act = batch.row(i).to_vec();
    let mut off = 0;
    let layers = sizes.len() - 1;
    for l in 0..layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let weights = &p[off..off + n_in * n_out];
        let bias = &p[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        act = (0..n_out)
            .map(|o| {
                let z = bias[o]
                    + weights[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(&act)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                if l + 1 < layers {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect();
    }
    act
}

/// Fraction of argmax-correct predictions.
pub fn evaluate_accuracy(spec: &ModelSpec, params: &ParamVector, dataset: &LabeledDataset) -> Result<f64> {
    if !spec.is_classifier() {
        return Err(Error::Unsupported("accuracy of the mean-quadratic task".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let batch = dataset.full_batch()?;
    check_shapes(spec, params, &batch)?;
    let mut correct = 0usize;
    for i in 0..batch.len() {
        let z = logits(spec, params, &batch, i);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        if best == batch.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Max over coordinates of `|analytic − central difference| / (|analytic| + step)`.
pub fn finite_diff_check(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch<'_>,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let analytic = gradient(spec, params, batch)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + step;
        let plus = forward_loss(spec, &probe, batch)?;
        probe.0[i] = orig - step;
        let minus = forward_loss(spec, &probe, batch)?;
        probe.0[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.0[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + step));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand_distr::{Distribution, StandardNormal};

    fn quad(targets: &[&[f64]]) -> ModelSpec {
        ModelSpec::MeanQuadratic {
            targets: targets.iter().map(|t| ParamVector::from_vec(t.to_vec())).collect(),
        }
    }

    fn random_batch(d: usize, c: usize, n: usize, seed: u64) -> DataBatch<'static> {
        let mut rng = stream(seed, Domain::Dataset, 0, 0);
        let inputs: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let labels = (0..n).map(|i| i % c).collect();
        DataBatch::new(inputs, labels, d).unwrap()
    }

    fn random_params(dim: usize, seed: u64, scale: f64) -> ParamVector {
        let mut rng = stream(seed, Domain::Init, 1, 0);
        ParamVector::from_vec(
            (0..dim)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect(),
        )
    }

    fn quad_batch(label: usize) -> DataBatch<'static> {
        DataBatch::new(vec![], vec![label], 0).unwrap()
    }

    #[test]
    fn quadratic_loss_at_target_is_zero() {
        let spec = quad(&[&[1.0, 0.0]]);
        let w = ParamVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(forward_loss(&spec, &w, &quad_batch(0)).unwrap(), 0.0);
        assert_eq!(gradient(&spec, &w, &quad_batch(0)).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_loss_and_gradient_values() {
        let spec = quad(&[&[1.0, 0.0]]);
        let w = ParamVector::zeros(2);
        assert!((forward_loss(&spec, &w, &quad_batch(0)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(gradient(&spec, &w, &quad_batch(0)).unwrap().as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_c() {
        let spec = ModelSpec::SoftmaxLinear {
            input_dim: 5,
            num_classes: 8,
        };
        let batch = random_batch(5, 8, 13, 1);
        let loss = forward_loss(&spec, &ParamVector::zeros(spec.dim()), &batch).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let spec = ModelSpec::SoftmaxLinear {
            input_dim: 3,
            num_classes: 2,
        };
        let batch = random_batch(3, 2, 4, 2);
        let err = forward_loss(&spec, &ParamVector::zeros(3), &batch).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let narrow = random_batch(2, 2, 4, 2);
        let err = gradient(&spec, &ParamVector::zeros(spec.dim()), &narrow).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_finite_params_are_reported() {
        let spec = quad(&[&[1.0, 0.0]]);
        let w = ParamVector::from_vec(vec![0.0, f64::INFINITY]);
        let err = gradient(&spec, &w, &quad_batch(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn sgd_step_examples() {
        let w = ParamVector::zeros(2);
        let g = GradientVector::from_vec(vec![-1.0, 0.0]);
        let next = sgd_step(&w, &g, 0.1).unwrap();
        assert!((next.as_slice()[0] - 0.1).abs() < 1e-15);
        assert_eq!(next.as_slice()[1], 0.0);

        let same = sgd_step(&next, &GradientVector::zeros(2), 0.1).unwrap();
        assert_eq!(same, next);

        assert!(matches!(sgd_step(&w, &g, 0.0), Err(Error::Config { .. })));
        assert!(matches!(sgd_step(&w, &g, -1.0), Err(Error::Config { .. })));
    }

    #[test]
    fn two_quadratic_steps() {
        let spec = quad(&[&[1.0, 0.0]]);
        let mut w = ParamVector::zeros(2);
        for _ in 0..2 {
            let g = gradient(&spec, &w, &quad_batch(0)).unwrap();
            w = sgd_step(&w, &g, 0.1).unwrap();
        }
        assert!((w.as_slice()[0] - 0.19).abs() < 1e-15);
        assert_eq!(w.as_slice()[1], 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let spec = ModelSpec::SoftmaxLinear {
            input_dim: 2,
            num_classes: 3,
        };
        // W row for class 2 picks up the first feature.
        let mut w = ParamVector::zeros(spec.dim());
        w.as_mut_slice()[4] = 1.0;
        let one = LabeledDataset::new(vec![1.0, 0.0], vec![2], 2, 3).unwrap();
        assert_eq!(evaluate_accuracy(&spec, &w, &one).unwrap(), 1.0);

        // All-zero params predict class 0 everywhere.
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        let balanced = LabeledDataset::new(vec![0.5; 14], labels.clone(), 2, 3).unwrap();
        let expected = labels.iter().filter(|&&y| y == 0).count() as f64 / labels.len() as f64;
        let acc = evaluate_accuracy(&spec, &ParamVector::zeros(spec.dim()), &balanced).unwrap();
        assert_eq!(acc, expected);

        let q = quad(&[&[1.0]]);
        assert!(matches!(
            evaluate_accuracy(&q, &ParamVector::zeros(1), &one),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn empty_dataset_cannot_be_evaluated() {
        let spec = ModelSpec::SoftmaxLinear {
            input_dim: 2,
            num_classes: 3,
        };
        let empty = LabeledDataset::empty(2, 3);
        assert!(evaluate_accuracy(&spec, &ParamVector::zeros(spec.dim()), &empty).is_err());
    }

    #[test]
    fn finite_differences_per_kind() {
        let q = quad(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let batch = DataBatch::new(vec![], vec![0, 1, 1], 0).unwrap();
        let w = random_params(3, 4, 1.0);
        assert!(finite_diff_check(&q, &w, &batch, 1e-4).unwrap() <= 1e-10);

        let lin = ModelSpec::SoftmaxLinear {
            input_dim: 4,
            num_classes: 3,
        };
        let batch = random_batch(4, 3, 3, 5);
        let w = random_params(lin.dim(), 6, 0.5);
        assert!(finite_diff_check(&lin, &w, &batch, 1e-4).unwrap() <= 1e-5);

        let mlp = ModelSpec::Mlp {
            input_dim: 4,
            hidden: vec![5],
            num_classes: 3,
        };
        let w = random_params(mlp.dim(), 7, 0.5);
        assert!(finite_diff_check(&mlp, &w, &batch, 1e-4).unwrap() <= 1e-4);
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let q = quad(&[&[1.0]]);
        let batch = quad_batch(0);
        assert!(finite_diff_check(&q, &ParamVector::zeros(1), &batch, 0.0).is_err());
    }

    #[test]
    fn quadratic_analytics() {
        // β = 1, ∇f_m − ∇F = b̄ − b_m for every w, w* = b̄
        let targets: &[&[f64]] = &[&[1.0, 0.0], &[0.0, 2.0], &[-1.0, 1.0]];
        let spec = quad(targets);
        let alpha = [0.5, 0.25, 0.25];
        let bbar = spec.weighted_target(&alpha).unwrap();
        // full dataset: 2 samples of target 0, 1 each of the others
        let full = DataBatch::new(vec![], vec![0, 0, 1, 2], 0).unwrap();
        for seed in 0..5 {
            let w = random_params(2, seed, 3.0);
            let w2 = random_params(2, seed + 100, 3.0);
            let gf = gradient(&spec, &w, &full).unwrap();
            let gf2 = gradient(&spec, &w2, &full).unwrap();
            assert!((gf.distance(&gf2) - w.distance(&w2)).abs() < 1e-12);
            for (m, t) in targets.iter().enumerate() {
                let gm = gradient(&spec, &w, &quad_batch(m)).unwrap();
                let diff = &gm - &gf;
                let expected = &bbar - &ParamVector::from_vec(t.to_vec());
                for (a, b) in diff.as_slice().iter().zip(expected.as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(gradient(&spec, &bbar, &full).unwrap().norm() < 1e-15);
    }

    #[test]
    fn mlp_dimension_layout() {
        let mlp = ModelSpec::Mlp {
            input_dim: 16,
            hidden: vec![10, 6],
            num_classes: 8,
        };
        assert_eq!(mlp.dim(), 16 * 10 + 10 + 10 * 6 + 6 + 6 * 8 + 8);
        let lin = ModelSpec::SoftmaxLinear {
            input_dim: 16,
            num_classes: 8,
        };
        assert_eq!(lin.dim(), 136);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let lin = ModelSpec::SoftmaxLinear {
            input_dim: 16,
            num_classes: 8,
        };
        let a = lin.init_params(&mut stream(3, Domain::Init, 0, 0));
        let b = lin.init_params(&mut stream(3, Domain::Init, 0, 0));
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.abs() <= 0.05));
    }
}
