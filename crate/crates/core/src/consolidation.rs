//! Dynamical weight consolidation.
//!
//! A retrain step minimizes
//!
//! ```text
//! loss = CE(new batch) + CE(exemplar batch) + lambda/2 * sum_j I_j (w_j - w°_j)^2
//! ```
//!
//! where `I` is the parameter information table and `w°` the anchor weights
//! captured at the start of the round. With the dynamic policy `lambda` is
//! recomputed from the current batch as `floor(log10(CE_new / cons))`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::classifier::{adam_step_columns, extend_classes, AdamState, ClassId, LabeledExample, SoftmaxHead};
use crate::error::{ensure_shape, Error, Result};
use crate::fisher::{empirical_fisher, select, ExemplarStore, ParameterInfoTable, SelectionConfig, Selector};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Weight snapshot that drift is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorWeights<T> {
    weights: Matrix<T>,
}

impl<T: Scalar> AnchorWeights<T> {
    pub fn from_head(head: &SoftmaxHead<T>) -> Self {
        Self {
            weights: head.weights().clone(),
        }
    }

    pub fn from_matrix(weights: Matrix<T>) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::NonFinite("anchor weights"));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    /// Copies the head's columns beyond the anchor's current width, so new
    /// classes are anchored at their initialization.
    pub fn extend_from(&mut self, head: &SoftmaxHead<T>) -> Result<()> {
        let (rows, cols) = self.shape();
        if head.dim() != rows || head.num_classes() < cols {
            return Err(Error::ShapeMismatch {
                left_rows: rows,
                left_cols: cols,
                right_rows: head.dim(),
                right_cols: head.num_classes(),
            });
        }
        let w = head.weights();
        self.weights
            .append_columns(head.num_classes() - cols, |r, c| w.get(r, cols + c));
        Ok(())
    }
}

/// How lambda is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// `floor(log10(CE_new / cons))`, clamped.
    Dynamic,
    Fixed(f64),
}

/// When the dynamic lambda is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaCadence {
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPolicy {
    pub mode: LambdaMode,
    /// Lower clamp for the dynamic value. Keeps the penalty from turning into a reward.
    pub floor: f64,
    /// Upper clamp for the dynamic value.
    pub ceiling: f64,
    /// Value carried before the ratio is first defined.
    pub initial: f64,
    pub cadence: LambdaCadence,
}

impl LambdaPolicy {
    pub fn dynamic() -> Self {
        Self {
            mode: LambdaMode::Dynamic,
            floor: 1.0,
            ceiling: 1e30,
            initial: 1.0,
            cadence: LambdaCadence::PerBatch,
        }
    }

    pub fn fixed(value: f64) -> Self {
        Self {
            mode: LambdaMode::Fixed(value),
            initial: value,
            ..Self::dynamic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LambdaMode::Fixed(v) = self.mode {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "fixed lambda must be positive, got {v}"
                )));
            }
        }
        if !(self.floor <= self.ceiling) {
            return Err(Error::InvalidArgument("lambda floor exceeds ceiling".into()));
        }
        Ok(())
    }
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        Self::dynamic()
    }
}

/// `sum_j I_j (w_j - w°_j)^2` over every weight.
pub fn consolidation_term<T: Scalar>(
    head: &SoftmaxHead<T>,
    anchor: &AnchorWeights<T>,
    table: &ParameterInfoTable<T>,
) -> Result<T> {
    ensure_shape(head.weights().shape(), anchor.shape())?;
    ensure_shape(head.weights().shape(), table.shape())?;
    let w = head.weights().as_slice();
    let w0 = anchor.weights().as_slice();
    let info = table.values().as_slice();
    Ok(w.iter()
        .zip(w0)
        .zip(info)
        .map(|((&w, &w0), &i)| {
            let d = w - w0;
            i * d * d
        })
        .sum())
}

/// Gradient of `lambda/2 * consolidation_term`: `lambda * I_j (w_j - w°_j)`.
pub fn consolidation_gradient<T: Scalar>(
    head: &SoftmaxHead<T>,
    anchor: &AnchorWeights<T>,
    table: &ParameterInfoTable<T>,
    lambda: T,
) -> Result<Matrix<T>> {
    let mut grad = Matrix::zeros(head.dim(), head.num_classes());
    add_consolidation_gradient(head, anchor, table, lambda, &mut grad)?;
    Ok(grad)
}

fn add_consolidation_gradient<T: Scalar>(
    head: &SoftmaxHead<T>,
    anchor: &AnchorWeights<T>,
    table: &ParameterInfoTable<T>,
    lambda: T,
    grad: &mut Matrix<T>,
) -> Result<()> {
    ensure_shape(head.weights().shape(), anchor.shape())?;
    ensure_shape(head.weights().shape(), table.shape())?;
    ensure_shape(head.weights().shape(), grad.shape())?;
    let w = head.weights().as_slice();
    let w0 = anchor.weights().as_slice();
    let info = table.values().as_slice();
    for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
        *g = *g + lambda * info[i] * (w[i] - w0[i]);
    }
    Ok(())
}

fn floor_log10(x: f64) -> f64 {
    let mut n = x.log10().floor();
    // log10 can land one ulp on the wrong side of an integer
    if 10f64.powf(n + 1.0) <= x {
        n += 1.0;
    } else if 10f64.powf(n) > x {
        n -= 1.0;
    }
    n
}

/// Smallest consolidation value the ratio is computed for.
pub const CONSOLIDATION_GUARD: f64 = 1e-300;

/// `floor(log10(ce_new / cons))` clamped to the policy's range. Returns
/// `prev_lambda` when the ratio is undefined (`cons` below the guard or
/// `ce_new == 0`); fixed policies return their value.
pub fn dynamic_lambda<T: Scalar>(ce_new: T, cons: T, policy: &LambdaPolicy, prev_lambda: T) -> Result<T> {
    let ce = ce_new.as_f64();
    let cons = cons.as_f64();
    if !(ce >= 0.0) || !(cons >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda inputs must be non-negative, got ce={ce}, cons={cons}"
        )));
    }
    if let LambdaMode::Fixed(v) = policy.mode {
        return Ok(T::lit(v));
    }
    if cons < CONSOLIDATION_GUARD || ce == 0.0 || !ce.is_finite() || !cons.is_finite() {
        return Ok(prev_lambda);
    }
    let ratio = ce / cons;
    let exponent = if ratio.is_finite() && ratio > 0.0 {
        floor_log10(ratio)
    } else {
        (ce.log10() - cons.log10()).floor()
    };
    Ok(T::lit(exponent.clamp(policy.floor, policy.ceiling)))
}

/// How the two cross-entropy terms are aggregated over their batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeNormalization {
    #[default]
    Sum,
    Mean,
}

/// Components of one retrain-loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainLoss<T> {
    pub loss: T,
    pub lambda: T,
    pub ce_new: T,
    pub ce_exemplar: T,
    /// Unweighted `sum_j I_j (w_j - w°_j)^2`.
    pub consolidation: T,
    pub gradient: Matrix<T>,
}

impl<T: Scalar> RetrainLoss<T> {
    /// `lambda/2 * consolidation`, the penalty as it enters the loss.
    pub fn penalty(&self) -> T {
        self.lambda * self.consolidation / T::lit(2.0)
    }
}

/// Consolidation setup for one retrain round.
#[derive(Debug, Clone, Copy)]
pub struct RetrainObjective<'a, T> {
    pub anchor: &'a AnchorWeights<T>,
    pub table: &'a ParameterInfoTable<T>,
    /// `None` disables the penalty entirely.
    pub policy: Option<LambdaPolicy>,
    pub normalization: CeNormalization,
}

impl<'a, T: Scalar> RetrainObjective<'a, T> {
    /// Loss and gradient for one (new, exemplar) batch pair. With a dynamic
    /// policy, lambda is recomputed from this batch's values unless
    /// `hold_lambda` is set, in which case `prev_lambda` is used as is.
    pub fn evaluate(
        &self,
        head: &SoftmaxHead<T>,
        new_batch: &[&LabeledExample<T>],
        exemplar_batch: &[&LabeledExample<T>],
        prev_lambda: T,
        hold_lambda: bool,
    ) -> Result<RetrainLoss<T>> {
        if new_batch.is_empty() && exemplar_batch.is_empty() {
            return Err(Error::Empty("retrain batches"));
        }
        let mut gradient = Matrix::zeros(head.dim(), head.num_classes());
        let (ce_new, grad_new) = batch_ce(head, new_batch, self.normalization)?;
        let (ce_exemplar, grad_ex) = batch_ce(head, exemplar_batch, self.normalization)?;
        if let Some(g) = grad_new {
            gradient.add_assign(&g)?;
        }
        if let Some(g) = grad_ex {
            gradient.add_assign(&g)?;
        }
        let (lambda, consolidation) = match &self.policy {
            None => (T::zero(), consolidation_term(head, self.anchor, self.table)?),
            Some(policy) => {
                let cons = consolidation_term(head, self.anchor, self.table)?;
                let lambda = if hold_lambda {
                    prev_lambda
                } else {
                    dynamic_lambda(ce_new, cons, policy, prev_lambda)?
                };
                add_consolidation_gradient(head, self.anchor, self.table, lambda, &mut gradient)?;
                (lambda, cons)
            }
        };
        let loss = ce_new + ce_exemplar + lambda * consolidation / T::lit(2.0);
        Ok(RetrainLoss {
            loss,
            lambda,
            ce_new,
            ce_exemplar,
            consolidation,
            gradient,
        })
    }
}

fn batch_ce<T: Scalar>(
    head: &SoftmaxHead<T>,
    batch: &[&LabeledExample<T>],
    normalization: CeNormalization,
) -> Result<(T, Option<Matrix<T>>)> {
    if batch.is_empty() {
        return Ok((T::zero(), None));
    }
    let (mut loss, mut grad) = head.nll_loss_and_gradient(batch.iter().copied())?;
    if normalization == CeNormalization::Mean {
        let inv = T::one() / T::lit(batch.len() as f64);
        loss = loss * inv;
        grad.as_mut_slice().iter_mut().for_each(|g| *g = *g * inv);
    }
    Ok((loss, Some(grad)))
}

/// Retrain loss with a freshly computed lambda (`prev_lambda` is the value
/// carried when the dynamic ratio is undefined).
#[allow(clippy::too_many_arguments)]
pub fn retrain_loss<T: Scalar>(
    head: &SoftmaxHead<T>,
    anchor: &AnchorWeights<T>,
    table: &ParameterInfoTable<T>,
    new_batch: &[&LabeledExample<T>],
    exemplar_batch: &[&LabeledExample<T>],
    policy: &LambdaPolicy,
    prev_lambda: T,
) -> Result<RetrainLoss<T>> {
    policy.validate()?;
    RetrainObjective {
        anchor,
        table,
        policy: Some(*policy),
        normalization: CeNormalization::Sum,
    }
    .evaluate(head, new_batch, exemplar_batch, prev_lambda, false)
}

/// Copy of `table` with `count` zero columns appended.
pub fn extend_table<T: Scalar>(table: &ParameterInfoTable<T>, count: usize) -> ParameterInfoTable<T> {
    let mut out = table.clone();
    out.extend_zero_columns(count);
    out
}

/// Settings for a retrain round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    /// Combined size of the new and exemplar mini-batches.
    pub batch_size: usize,
    /// `None` trains without the consolidation penalty.
    pub penalty: Option<LambdaPolicy>,
    pub normalization: CeNormalization,
    /// Restrict updates to these class columns (frozen-head baseline).
    pub trainable: Option<Range<usize>>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            penalty: Some(LambdaPolicy::dynamic()),
            normalization: CeNormalization::Sum,
            trainable: None,
        }
    }
}

/// Per-step values for diagnostics traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ce_new: f64,
    pub ce_exemplar: f64,
    /// Unweighted `sum_j I_j (w_j - w°_j)^2`.
    pub consolidation: f64,
    /// `lambda/2 * consolidation`.
    pub penalty: f64,
    pub lambda: f64,
}

/// Mini-batch sizes for the new and exemplar streams.
pub fn batch_split(batch_size: usize, n_new: usize, n_exemplar: usize) -> (usize, usize) {
    match (n_new, n_exemplar) {
        (0, 0) => (0, 0),
        (_, 0) => (batch_size, 0),
        (0, _) => (0, batch_size),
        _ => {
            let share = batch_size as f64 * n_new as f64 / (n_new + n_exemplar) as f64;
            let b_new = (share.round() as usize).clamp(1, batch_size.saturating_sub(1).max(1));
            let b_ex = batch_size.saturating_sub(b_new).max(1);
            (b_new, b_ex)
        }
    }
}

/// Stateful driver for one retrain round: carries lambda, the step counter
/// and the exemplar cursor across epochs.
pub struct RetrainSession<'a, T> {
    anchor: &'a AnchorWeights<T>,
    table: &'a ParameterInfoTable<T>,
    new_data: &'a [LabeledExample<T>],
    exemplars: Vec<&'a LabeledExample<T>>,
    config: RetrainConfig,
    lambda: T,
    step: usize,
    exemplar_order: Vec<usize>,
    exemplar_cursor: usize,
}

impl<'a, T: Scalar> RetrainSession<'a, T> {
    pub fn new(
        anchor: &'a AnchorWeights<T>,
        table: &'a ParameterInfoTable<T>,
        new_data: &'a [LabeledExample<T>],
        exemplars: Vec<&'a LabeledExample<T>>,
        config: RetrainConfig,
    ) -> Result<Self> {
        if new_data.is_empty() && exemplars.is_empty() {
            return Err(Error::Empty("retrain data"));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        ensure_shape(anchor.shape(), table.shape())?;
        let lambda = match &config.penalty {
            Some(p) => {
                p.validate()?;
                T::lit(p.initial)
            }
            None => T::zero(),
        };
        Ok(Self {
            anchor,
            table,
            new_data,
            exemplars,
            config,
            lambda,
            step: 0,
            exemplar_order: Vec::new(),
            exemplar_cursor: 0,
        })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn objective(&self) -> RetrainObjective<'a, T> {
        RetrainObjective {
            anchor: self.anchor,
            table: self.table,
            policy: self.config.penalty,
            normalization: self.config.normalization,
        }
    }

    fn next_exemplars(&mut self, count: usize, rng: &mut Rng) -> Vec<&'a LabeledExample<T>> {
        let mut out = Vec::with_capacity(count);
        if self.exemplars.is_empty() {
            return out;
        }
        while out.len() < count {
            if self.exemplar_cursor >= self.exemplar_order.len() {
                self.exemplar_order = (0..self.exemplars.len()).collect();
                rng.shuffle(&mut self.exemplar_order);
                self.exemplar_cursor = 0;
            }
            out.push(self.exemplars[self.exemplar_order[self.exemplar_cursor]]);
            self.exemplar_cursor += 1;
        }
        out
    }

    /// One pass over the new data (or over the exemplars when there is no
    /// new data), returning per-step diagnostics.
    pub fn run_epoch(
        &mut self,
        head: &mut SoftmaxHead<T>,
        adam: &mut AdamState<T>,
        rng: &mut Rng,
    ) -> Result<Vec<StepDiagnostics>> {
        self.run_epoch_observed(head, adam, rng, |_, _| Ok(()))
    }

    /// [`run_epoch`](Self::run_epoch), calling `observe` with the updated
    /// head after every step.
    pub fn run_epoch_observed<F>(
        &mut self,
        head: &mut SoftmaxHead<T>,
        adam: &mut AdamState<T>,
        rng: &mut Rng,
        mut observe: F,
    ) -> Result<Vec<StepDiagnostics>>
    where
        F: FnMut(&SoftmaxHead<T>, &StepDiagnostics) -> Result<()>,
    {
        ensure_shape(head.weights().shape(), self.anchor.shape())?;
        let (b_new, b_ex) = batch_split(self.config.batch_size, self.new_data.len(), self.exemplars.len());
        let mut order: Vec<usize> = (0..self.new_data.len()).collect();
        rng.shuffle(&mut order);
        let steps = if self.new_data.is_empty() {
            self.exemplars.len().div_ceil(b_ex)
        } else {
            self.new_data.len().div_ceil(b_new)
        };
        let columns = self.config.trainable.clone().unwrap_or(0..head.num_classes());
        let objective = self.objective();
        let per_epoch = matches!(
            self.config.penalty,
            Some(LambdaPolicy {
                cadence: LambdaCadence::PerEpoch,
                ..
            })
        );
        let mut out = Vec::with_capacity(steps);
        for s in 0..steps {
            let new_batch: Vec<&LabeledExample<T>> = if b_new == 0 {
                Vec::new()
            } else {
                order[s * b_new..((s + 1) * b_new).min(order.len())]
                    .iter()
                    .map(|&i| &self.new_data[i])
                    .collect()
            };
            let ex_batch = self.next_exemplars(b_ex, rng);
            let hold = per_epoch && s > 0;
            let eval = objective.evaluate(head, &new_batch, &ex_batch, self.lambda, hold)?;
            self.lambda = eval.lambda;
            out.push(StepDiagnostics {
                step: self.step,
                ce_new: eval.ce_new.as_f64(),
                ce_exemplar: eval.ce_exemplar.as_f64(),
                consolidation: eval.consolidation.as_f64(),
                penalty: eval.penalty().as_f64(),
                lambda: eval.lambda.as_f64(),
            });
            adam_step_columns(head, adam, &eval.gradient, columns.clone())?;
            self.step += 1;
            observe(head, out.last().expect("pushed above"))?;
        }
        Ok(out)
    }
}

/// Whether anchor and table are recomputed after each increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lifecycle {
    /// Anchor := current weights and table := Fisher over exemplars plus the
    /// round's data after every increment.
    #[default]
    Refresh,
    /// Anchor and table stay at their initial-training values (extended with
    /// zero columns for new classes).
    Frozen,
}

/// Everything carried from one round to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualState<T> {
    pub head: SoftmaxHead<T>,
    pub adam: AdamState<T>,
    pub table: ParameterInfoTable<T>,
    pub anchor: AnchorWeights<T>,
    pub exemplars: ExemplarStore<T>,
    pub round: usize,
}

impl<T: Scalar> ContinualState<T> {
    /// Outputs of initial training: table from `train_data`, exemplars from
    /// `train_data`, anchor at the trained weights.
    pub fn after_initial_training(
        head: SoftmaxHead<T>,
        adam: AdamState<T>,
        train_data: &[LabeledExample<T>],
        selector: Selector,
        selection: &SelectionConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let table = empirical_fisher(&head, train_data)?;
        let exemplars = select(selector, train_data, &head, selection, rng)?;
        let anchor = AnchorWeights::from_head(&head);
        let state = Self {
            head,
            adam,
            table,
            anchor,
            exemplars,
            round: 0,
        };
        state.check_invariants()?;
        Ok(state)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let shape = self.head.weights().shape();
        ensure_shape(shape, self.table.shape())?;
        ensure_shape(shape, self.anchor.shape())?;
        ensure_shape(shape, self.adam.shape())?;
        for bucket in self.exemplars.classes() {
            if !self.head.classes().contains(&bucket.class) {
                return Err(Error::UnknownClass(bucket.class.to_string()));
            }
        }
        Ok(())
    }

    /// Registers new classes: random head columns, zero Adam moments, zero
    /// table columns, anchor columns at the new initialization.
    pub fn extend_classes(
        &mut self,
        new_ids: impl IntoIterator<Item = ClassId>,
        init_std: f64,
        rng: &mut Rng,
    ) -> Result<Range<usize>> {
        let range = extend_classes(&mut self.head, &mut self.adam, new_ids, init_std, rng)?;
        self.table.extend_zero_columns(range.len());
        self.anchor.extend_from(&self.head)?;
        Ok(range)
    }
}

/// End-of-round bookkeeping: exemplars for the round's classes are selected
/// under the converged head and, with [`Lifecycle::Refresh`], the anchor is
/// moved to the current weights and the table recomputed over the previous
/// exemplars plus `round_data`.
pub fn refresh_anchor_and_table<T: Scalar>(
    state: &mut ContinualState<T>,
    round_data: &[LabeledExample<T>],
    selector: Selector,
    selection: &SelectionConfig,
    lifecycle: Lifecycle,
    rng: &mut Rng,
) -> Result<()> {
    let new_exemplars = select(selector, round_data, &state.head, selection, rng)?;
    if lifecycle == Lifecycle::Refresh {
        let table = empirical_fisher(&state.head, state.exemplars.examples().chain(round_data))?;
        state.table = table;
        state.anchor = AnchorWeights::from_head(&state.head);
    }
    state.exemplars.merge(new_exemplars)?;
    state.check_invariants()
}
