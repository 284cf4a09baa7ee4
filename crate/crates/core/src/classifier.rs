//! Trainable softmax head over frozen features.
//!
//! The head computes `softmax(W^T x)` with `W` of shape `h x k` and no bias.
//! Gradients are analytic: for one example `(x, y)` the negative
//! log-likelihood has `d/dw_{aj} = x_a (p_j - [j == y])`.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::linalg::{argmax, log_softmax, softmax, Matrix};
use crate::rng::Rng;
use crate::scalar::{all_finite, Scalar};

/// External class identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ClassId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Anything that carries a class label.
pub trait HasLabel {
    fn label(&self) -> &ClassId;
}

/// Feature vector with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample<T> {
    pub features: Vec<T>,
    pub label: ClassId,
}

impl<T: Scalar> LabeledExample<T> {
    pub fn new(features: Vec<T>, label: impl Into<ClassId>) -> Result<Self> {
        if !all_finite(&features) {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self {
            features,
            label: label.into(),
        })
    }
}

impl<T> HasLabel for LabeledExample<T> {
    fn label(&self) -> &ClassId {
        &self.label
    }
}

/// Ordered class registry. Indices are assigned in arrival order and never
/// change, so extending the registry never renumbers existing classes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassRegistry {
    ids: Vec<ClassId>,
    index: HashMap<ClassId, usize>,
}

impl ClassRegistry {
    pub fn new(ids: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let mut reg = Self::default();
        reg.extend(ids)?;
        Ok(reg)
    }

    /// Appends ids; fails without modifying `self` if any is already present
    /// or repeated.
    pub fn extend(&mut self, ids: impl IntoIterator<Item = ClassId>) -> Result<Range<usize>> {
        let ids: Vec<ClassId> = ids.into_iter().collect();
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if self.index.contains_key(id) || !seen.insert(id) {
                return Err(Error::DuplicateClass(id.to_string()));
            }
        }
        let start = self.ids.len();
        for id in ids {
            self.index.insert(id.clone(), self.ids.len());
            self.ids.push(id);
        }
        Ok(start..self.ids.len())
    }

    pub fn get(&self, id: &ClassId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn index_of(&self, id: &ClassId) -> Result<usize> {
        self.get(id).ok_or_else(|| Error::UnknownClass(id.to_string()))
    }

    pub fn contains(&self, id: &ClassId) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Softmax classifier `p(y | x) = softmax(W^T x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<T> {
    weights: Matrix<T>,
    classes: ClassRegistry,
}

impl<T: Scalar> SoftmaxHead<T> {
    /// Zero-initialized head.
    pub fn zeros(dim: usize, class_ids: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let classes = ClassRegistry::new(class_ids)?;
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        Ok(Self {
            weights: Matrix::zeros(dim, classes.len()),
            classes,
        })
    }

    /// Head with entries drawn from `N(0, std_dev^2)`.
    pub fn random(
        dim: usize,
        class_ids: impl IntoIterator<Item = ClassId>,
        std_dev: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut head = Self::zeros(dim, class_ids)?;
        for w in head.weights.as_mut_slice() {
            *w = T::lit(rng.normal(0.0, std_dev));
        }
        Ok(head)
    }

    pub fn from_weights(weights: Matrix<T>, class_ids: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let classes = ClassRegistry::new(class_ids)?;
        if weights.cols() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: classes.len(),
                actual: weights.cols(),
            });
        }
        if weights.rows() == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("weights"));
        }
        Ok(Self { weights, classes })
    }

    /// Feature dimension `h`.
    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    /// Number of registered classes `k`.
    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weights
    }

    pub fn classes(&self) -> &ClassRegistry {
        &self.classes
    }

    pub fn class_ids(&self) -> &[ClassId] {
        self.classes.ids()
    }

    pub fn class_index(&self, id: &ClassId) -> Result<usize> {
        self.classes.index_of(id)
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.weights.transpose_matvec(x)
    }

    pub fn predict_proba(&self, x: &[T]) -> Result<Vec<T>> {
        softmax(&self.logits(x)?)
    }

    pub fn predict_logprobs(&self, x: &[T]) -> Result<Vec<T>> {
        log_softmax(&self.logits(x)?)
    }

    /// Predicted class index; ties go to the lowest index.
    pub fn predict(&self, x: &[T]) -> Result<usize> {
        let logits = self.logits(x)?;
        argmax(&logits).ok_or(Error::Empty("class registry"))
    }

    fn check_example(&self, example: &LabeledExample<T>) -> Result<usize> {
        if example.features.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: example.features.len(),
            });
        }
        self.class_index(&example.label)
    }

    /// Adds one example's NLL gradient into `grad` and returns its loss.
    pub fn accumulate_nll_gradient(&self, example: &LabeledExample<T>, grad: &mut Matrix<T>) -> Result<T> {
        ensure_shape(grad.shape(), self.weights.shape())?;
        let y = self.check_example(example)?;
        let logprobs = self.predict_logprobs(&example.features)?;
        let residual = output_residual(&logprobs, y);
        for (j, &coeff) in residual.iter().enumerate() {
            if coeff == T::zero() {
                continue;
            }
            for (g, &x) in grad.column_mut(j).iter_mut().zip(&example.features) {
                *g = *g + coeff * x;
            }
        }
        Ok(-logprobs[y])
    }

    /// Summed negative log-likelihood of `batch`.
    pub fn nll_loss<'a, I>(&self, batch: I) -> Result<T>
    where
        I: IntoIterator<Item = &'a LabeledExample<T>>,
    {
        let mut total = T::zero();
        let mut n = 0usize;
        for example in batch {
            let y = self.check_example(example)?;
            total = total - self.predict_logprobs(&example.features)?[y];
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(total)
    }

    /// Gradient of [`Self::nll_loss`] with respect to `W`.
    pub fn nll_gradient<'a, I>(&self, batch: I) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a LabeledExample<T>>,
    {
        Ok(self.nll_loss_and_gradient(batch)?.1)
    }

    pub fn nll_loss_and_gradient<'a, I>(&self, batch: I) -> Result<(T, Matrix<T>)>
    where
        I: IntoIterator<Item = &'a LabeledExample<T>>,
    {
        let mut grad = Matrix::zeros(self.dim(), self.num_classes());
        let mut total = T::zero();
        let mut n = 0usize;
        for example in batch {
            total = total + self.accumulate_nll_gradient(example, &mut grad)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok((total, grad))
    }

    /// Fraction of `dataset` whose argmax prediction equals the label.
    pub fn accuracy<'a, I>(&self, dataset: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a LabeledExample<T>>,
    {
        let (correct, total) = self.correct_count(dataset)?;
        if total == 0 {
            return Err(Error::Empty("dataset"));
        }
        Ok(correct as f64 / total as f64)
    }

    /// `(correct, total)` over `dataset`.
    pub fn correct_count<'a, I>(&self, dataset: I) -> Result<(usize, usize)>
    where
        I: IntoIterator<Item = &'a LabeledExample<T>>,
    {
        let mut correct = 0;
        let mut total = 0;
        for example in dataset {
            let y = self.check_example(example)?;
            if self.predict(&example.features)? == y {
                correct += 1;
            }
            total += 1;
        }
        Ok((correct, total))
    }

    /// Appends zero columns for `ids` and returns their index range. Callers
    /// normally go through [`extend_classes`].
    fn push_classes(&mut self, ids: Vec<ClassId>, mut init: impl FnMut() -> T) -> Result<Range<usize>> {
        let range = self.classes.extend(ids)?;
        self.weights.append_columns(range.len(), |_, _| init());
        Ok(range)
    }
}

/// `p - onehot(y)` from log-probabilities. The true-class entry is formed as
/// `-(sum of the other probabilities)` so it keeps full relative precision
/// when `p_y` rounds to 1.
pub fn output_residual<T: Scalar>(logprobs: &[T], y: usize) -> Vec<T> {
    let mut residual: Vec<T> = logprobs.iter().map(|lp| lp.exp()).collect();
    let rest: T = residual
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &p)| p)
        .sum();
    residual[y] = -rest;
    residual
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        Self {
            step_size,
            ..Self::default()
        }
    }
}

/// Adam moment accumulators shaped like the head's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first: Matrix<T>,
    pub second: Matrix<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, head: &SoftmaxHead<T>) -> Self {
        Self {
            config,
            first: Matrix::zeros(head.dim(), head.num_classes()),
            second: Matrix::zeros(head.dim(), head.num_classes()),
            step: 0,
        }
    }

    /// Appends zero-moment columns.
    pub fn extend(&mut self, count: usize) {
        self.first.append_columns(count, |_, _| T::zero());
        self.second.append_columns(count, |_, _| T::zero());
    }

    pub fn shape(&self) -> (usize, usize) {
        self.first.shape()
    }
}

/// One bias-corrected Adam update of every weight.
pub fn adam_step<T: Scalar>(head: &mut SoftmaxHead<T>, adam: &mut AdamState<T>, grad: &Matrix<T>) -> Result<()> {
    let cols = head.num_classes();
    adam_step_columns(head, adam, grad, 0..cols)
}

/// Adam update restricted to the class columns in `columns`. Moments of the
/// other columns are left untouched, so those weights stay bit-identical.
pub fn adam_step_columns<T: Scalar>(
    head: &mut SoftmaxHead<T>,
    adam: &mut AdamState<T>,
    grad: &Matrix<T>,
    columns: Range<usize>,
) -> Result<()> {
    ensure_shape(grad.shape(), head.weights.shape())?;
    ensure_shape(adam.shape(), head.weights.shape())?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    if columns.end > head.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "column range {columns:?} exceeds {} classes",
            head.num_classes()
        )));
    }
    adam.step += 1;
    let cfg = adam.config;
    let beta1 = T::lit(cfg.beta1);
    let beta2 = T::lit(cfg.beta2);
    let t = adam.step as i32;
    let correction1 = T::one() - beta1.powi(t);
    let correction2 = T::one() - beta2.powi(t);
    let step_size = T::lit(cfg.step_size);
    let eps = T::lit(cfg.epsilon);
    let rows = head.dim();
    let lo = columns.start * rows;
    let hi = columns.end * rows;
    let w = &mut head.weights.as_mut_slice()[lo..hi];
    let m = &mut adam.first.as_mut_slice()[lo..hi];
    let v = &mut adam.second.as_mut_slice()[lo..hi];
    let g = &grad.as_slice()[lo..hi];
    for i in 0..w.len() {
        m[i] = beta1 * m[i] + (T::one() - beta1) * g[i];
        v[i] = beta2 * v[i] + (T::one() - beta2) * g[i] * g[i];
        let m_hat = m[i] / correction1;
        let v_hat = v[i] / correction2;
        w[i] = w[i] - step_size * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Mini-batch training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Reshuffle the data every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            shuffle: true,
        }
    }
}

/// Summed training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Runs one epoch of mini-batch Adam over `dataset` and returns the summed loss.
pub fn train_epoch<T: Scalar>(
    head: &mut SoftmaxHead<T>,
    adam: &mut AdamState<T>,
    dataset: &[LabeledExample<T>],
    batch_size: usize,
    shuffle: bool,
    rng: &mut Rng,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    let mut epoch_loss = 0.0;
    for chunk in order.chunks(batch_size) {
        let (loss, grad) = head.nll_loss_and_gradient(chunk.iter().map(|&i| &dataset[i]))?;
        adam_step(head, adam, &grad)?;
        epoch_loss += loss.as_f64();
    }
    Ok(epoch_loss)
}

/// Trains `head` for `config.epochs` epochs. `epochs == 0` leaves it unchanged.
pub fn train<T: Scalar>(
    head: &mut SoftmaxHead<T>,
    adam: &mut AdamState<T>,
    dataset: &[LabeledExample<T>],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    for example in dataset {
        head.check_example(example)?;
    }
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        let loss = train_epoch(head, adam, dataset, config.batch_size, config.shuffle, rng)?;
        report.epoch_losses.push(loss);
    }
    Ok(report)
}

/// Registers `new_ids`, appending weight columns drawn from
/// `N(0, init_std^2)` and zero Adam moments. Existing columns are untouched.
pub fn extend_classes<T: Scalar>(
    head: &mut SoftmaxHead<T>,
    adam: &mut AdamState<T>,
    new_ids: impl IntoIterator<Item = ClassId>,
    init_std: f64,
    rng: &mut Rng,
) -> Result<Range<usize>> {
    ensure_shape(adam.shape(), head.weights.shape())?;
    let ids: Vec<ClassId> = new_ids.into_iter().collect();
    let range = head.push_classes(ids, || T::lit(rng.normal(0.0, init_std)))?;
    adam.extend(range.len());
    Ok(range)
}

/// Default standard deviation for freshly added class columns.
pub const NEW_COLUMN_STD: f64 = 0.02;
