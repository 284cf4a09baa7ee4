//! The two single-retrain ablations: exemplar sampling rate against
//! recovery speed, and fixed against dynamic lambda.
//!
//! Both start from the initial round of the protocol and then add every
//! class of the increment schedule at once.

use std::path::Path;

use ccfi_core::{
    select, AnchorWeights, ClassId, Example, LambdaMode, LambdaPolicy, ParameterInfoTable, RetrainConfig,
    RetrainSession, Rng, SelectionConfig, Selector, StepDiagnostics, Stream,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ProtocolSpec;
use crate::error::{HarnessError, Result};
use crate::metrics::{write_table, write_trace};
use crate::protocol::{prepare_data, run_initial, PreparedData};

const EXEMPLAR_STREAM: Stream = Stream::Custom(1);
const NEW_COLUMN_STREAM: Stream = Stream::Custom(2);
const RETRAIN_STREAM: Stream = Stream::Custom(3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingAblation {
    pub rates: Vec<f64>,
    pub selectors: Vec<Selector>,
    /// Old-class accuracy, over all old data, that counts as recovered.
    pub threshold: f64,
    /// Fixed length of every retrain.
    pub epochs: usize,
    /// Old-class accuracy is measured after every `eval_every` steps.
    pub eval_every: usize,
}

impl Default for SamplingAblation {
    fn default() -> Self {
        Self {
            rates: vec![0.005, 0.01, 0.02, 0.05],
            selectors: vec![Selector::Fisher, Selector::Random],
            threshold: 0.95,
            epochs: 10,
            eval_every: 1,
        }
    }
}

/// One (seed, rate, selector) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingCell {
    pub seed: u64,
    pub rate: f64,
    pub selector: Selector,
    pub exemplars: usize,
    pub steps_per_epoch: usize,
    /// Epochs, in steps over steps per epoch, until old accuracy stays at or
    /// above the threshold for the rest of the run. `None` when it is still
    /// below at the end.
    pub epochs_to_threshold: Option<f64>,
    pub min_old_accuracy: f64,
    pub final_old_accuracy: f64,
    /// (steps done, old accuracy) at every evaluation.
    #[serde(skip)]
    pub curve: Vec<(usize, f64)>,
}

pub const SAMPLING_COLUMNS: [&str; 8] = [
    "seed",
    "rate",
    "selector",
    "exemplars",
    "steps_per_epoch",
    "epochs_to_threshold",
    "min_old_accuracy",
    "final_old_accuracy",
];

/// Mean over seeds for one (rate, selector); capped runs count as the full
/// epoch budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub rate: f64,
    pub selector: Selector,
    pub mean_epochs: f64,
    pub mean_min_old_accuracy: f64,
    pub capped_runs: usize,
    pub seeds: usize,
}

pub const SAMPLING_SUMMARY_COLUMNS: [&str; 6] = [
    "rate",
    "selector",
    "mean_epochs",
    "mean_min_old_accuracy",
    "capped_runs",
    "seeds",
];

fn incremental_ids(spec: &ProtocolSpec) -> Vec<ClassId> {
    spec.increment_ids().into_iter().flatten().collect()
}

fn accuracy(head: &ccfi_core::Head, examples: &[&Example]) -> Result<f64> {
    let (correct, total) = head.correct_count(examples.iter().copied())?;
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Steps until the curve stays at or above `threshold`, or `None` when its
/// last point is below.
pub fn settle_step(curve: &[(usize, f64)], threshold: f64) -> Option<usize> {
    match curve.iter().rposition(|&(_, a)| a < threshold) {
        None => curve.first().map(|&(s, _)| s),
        Some(i) => curve.get(i + 1).map(|&(s, _)| s),
    }
}

fn sampling_seed(spec: &ProtocolSpec, ab: &SamplingAblation, seed: u64) -> Result<Vec<SamplingCell>> {
    let data = prepare_data(spec, seed)?;
    let (state, _) = run_initial(spec, &data, seed)?;
    let old_ids = spec.initial_ids();
    let new_ids = incremental_ids(spec);
    let initial_train: Vec<Example> = data.train_of(&old_ids).cloned().collect();
    let new_data: Vec<Example> = data.train_of(&new_ids).cloned().collect();
    let old_all: Vec<&Example> = data.all_of(&old_ids).collect();
    let mut cells = Vec::new();
    for &rate in &ab.rates {
        for &selector in &ab.selectors {
            let selection = SelectionConfig {
                rate,
                min_one_per_class: spec.min_one_per_class,
            };
            let store = select(
                selector,
                &initial_train,
                &state.head,
                &selection,
                &mut Rng::for_stream(seed, EXEMPLAR_STREAM),
            )?;
            let mut head = state.head.clone();
            let mut adam = state.adam.clone();
            ccfi_core::extend_classes(
                &mut head,
                &mut adam,
                new_ids.iter().cloned(),
                spec.new_column_std,
                &mut Rng::for_stream(seed, NEW_COLUMN_STREAM),
            )?;
            let anchor = AnchorWeights::from_head(&head);
            let (h, k) = head.weights().shape();
            let table = ParameterInfoTable::zeros(h, k);
            let config = RetrainConfig {
                batch_size: spec.batch_size,
                penalty: None,
                normalization: spec.normalization,
                trainable: None,
            };
            let mut session = RetrainSession::new(&anchor, &table, &new_data, store.examples().collect(), config)?;
            let mut rng = Rng::for_stream(seed, RETRAIN_STREAM);
            let mut curve = Vec::new();
            let mut done = 0usize;
            let mut steps_per_epoch = 0;
            for _ in 0..ab.epochs {
                let steps = session.run_epoch_observed(&mut head, &mut adam, &mut rng, |h, _| {
                    done += 1;
                    if done.is_multiple_of(ab.eval_every) {
                        let (correct, total) = h.correct_count(old_all.iter().copied())?;
                        curve.push((done, correct as f64 / total.max(1) as f64));
                    }
                    Ok(())
                })?;
                steps_per_epoch = steps.len();
            }
            if curve.last().map(|&(s, _)| s) != Some(done) {
                curve.push((done, accuracy(&head, &old_all)?));
            }
            cells.push(SamplingCell {
                seed,
                rate,
                selector,
                exemplars: store.len(),
                steps_per_epoch,
                epochs_to_threshold: settle_step(&curve, ab.threshold).map(|s| s as f64 / steps_per_epoch as f64),
                min_old_accuracy: curve.iter().map(|&(_, a)| a).fold(f64::INFINITY, f64::min),
                final_old_accuracy: curve.last().map_or(0.0, |&(_, a)| a),
                curve,
            });
        }
    }
    Ok(cells)
}

/// Cells ordered by seed, then rate, then selector.
pub fn run_sampling_ablation(spec: &ProtocolSpec, ab: &SamplingAblation) -> Result<Vec<SamplingCell>> {
    spec.validate()?;
    if ab.rates.is_empty() || ab.selectors.is_empty() {
        return Err(HarnessError::Config(
            "sampling ablation needs rates and selectors".into(),
        ));
    }
    if ab.rates.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(HarnessError::Config("sampling rates must lie in (0, 1]".into()));
    }
    if ab.epochs == 0 || ab.eval_every == 0 {
        return Err(HarnessError::Config(
            "sampling ablation needs epochs and eval_every above zero".into(),
        ));
    }
    let per_seed: Vec<Vec<SamplingCell>> = spec
        .seeds
        .par_iter()
        .map(|&seed| sampling_seed(spec, ab, seed))
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn summarize_sampling(cells: &[SamplingCell], ab: &SamplingAblation) -> Vec<SamplingSummary> {
    let mut out = Vec::new();
    for &rate in &ab.rates {
        for &selector in &ab.selectors {
            let group: Vec<&SamplingCell> = cells
                .iter()
                .filter(|c| c.rate == rate && c.selector == selector)
                .collect();
            let n = group.len().max(1) as f64;
            out.push(SamplingSummary {
                rate,
                selector,
                mean_epochs: group
                    .iter()
                    .map(|c| c.epochs_to_threshold.unwrap_or(ab.epochs as f64))
                    .sum::<f64>()
                    / n,
                mean_min_old_accuracy: group.iter().map(|c| c.min_old_accuracy).sum::<f64>() / n,
                capped_runs: group.iter().filter(|c| c.epochs_to_threshold.is_none()).count(),
                seeds: group.len(),
            });
        }
    }
    out
}

/// One lambda policy in the lambda ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaArm {
    pub label: String,
    pub mode: LambdaMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaAblation {
    pub arms: Vec<LambdaArm>,
    /// Fixed length of every retrain, so traces align step for step.
    pub epochs: usize,
}

impl Default for LambdaAblation {
    fn default() -> Self {
        Self {
            arms: vec![
                LambdaArm {
                    label: "fixed-1e25".into(),
                    mode: LambdaMode::Fixed(1e25),
                },
                LambdaArm {
                    label: "fixed-100".into(),
                    mode: LambdaMode::Fixed(100.0),
                },
                LambdaArm {
                    label: "dynamic".into(),
                    mode: LambdaMode::Dynamic,
                },
            ],
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTrace {
    pub seed: u64,
    pub label: String,
    pub steps: Vec<StepDiagnostics>,
    pub final_old_accuracy: f64,
    pub final_new_accuracy: f64,
}

impl LambdaTrace {
    /// The unweighted consolidation term at every step.
    pub fn consolidation(&self) -> Vec<f64> {
        self.steps.iter().map(|d| d.consolidation).collect()
    }

    /// `lambda/2` times the consolidation term at every step.
    pub fn penalties(&self) -> Vec<f64> {
        self.steps.iter().map(|d| d.penalty).collect()
    }

    pub fn stats(&self) -> TraceStats {
        let c = self.consolidation();
        let p = self.penalties();
        TraceStats {
            seed: self.seed,
            label: self.label.clone(),
            steps: c.len(),
            cv_final_half: coefficient_of_variation(tail(&c, 0.5)),
            cv_final_tenth: coefficient_of_variation(tail(&c, 0.1)),
            increase_first: increases_first(&c),
            penalty_cv_final_half: coefficient_of_variation(tail(&p, 0.5)),
            penalty_cv_final_tenth: coefficient_of_variation(tail(&p, 0.1)),
            final_consolidation: c.last().copied().unwrap_or(0.0),
            final_lambda: self.steps.last().map_or(0.0, |d| d.lambda),
            final_old_accuracy: self.final_old_accuracy,
            final_new_accuracy: self.final_new_accuracy,
        }
    }
}

/// Summary of one trace. The plain fields describe the consolidation term,
/// the `penalty_` fields the same term times `lambda/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub seed: u64,
    pub label: String,
    pub steps: usize,
    pub cv_final_half: f64,
    pub cv_final_tenth: f64,
    pub increase_first: bool,
    pub penalty_cv_final_half: f64,
    pub penalty_cv_final_tenth: f64,
    pub final_consolidation: f64,
    pub final_lambda: f64,
    pub final_old_accuracy: f64,
    pub final_new_accuracy: f64,
}

pub const TRACE_STATS_COLUMNS: [&str; 12] = [
    "seed",
    "label",
    "steps",
    "cv_final_half",
    "cv_final_tenth",
    "increase_first",
    "penalty_cv_final_half",
    "penalty_cv_final_tenth",
    "final_consolidation",
    "final_lambda",
    "final_old_accuracy",
    "final_new_accuracy",
];

/// The last `ceil(n * fraction)` values.
pub fn tail(values: &[f64], fraction: f64) -> &[f64] {
    let n = ((values.len() as f64 * fraction).ceil() as usize).min(values.len());
    &values[values.len() - n..]
}

/// Population standard deviation over mean. Zero for an empty or all-zero
/// slice, infinite when the mean is zero but the values are not.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if mean == 0.0 {
        return if var == 0.0 { 0.0 } else { f64::INFINITY };
    }
    var.sqrt() / mean.abs()
}

/// The maximum over the first half exceeds the value at the 5% mark.
pub fn increases_first(values: &[f64]) -> bool {
    let mark = values.len() / 20;
    let half = values.len() / 2;
    if half <= mark {
        return false;
    }
    values[..half].iter().any(|&v| v > values[mark])
}

fn lambda_seed(spec: &ProtocolSpec, ab: &LambdaAblation, seed: u64, data: &PreparedData) -> Result<Vec<LambdaTrace>> {
    let (mut state, _) = run_initial(spec, data, seed)?;
    let old_ids = spec.initial_ids();
    let new_ids = incremental_ids(spec);
    state.extend_classes(
        new_ids.iter().cloned(),
        spec.new_column_std,
        &mut Rng::for_stream(seed, NEW_COLUMN_STREAM),
    )?;
    let new_data: Vec<Example> = data.train_of(&new_ids).cloned().collect();
    let old_test: Vec<&Example> = data.test.iter().filter(|e| old_ids.contains(&e.label)).collect();
    let new_test: Vec<&Example> = data.test.iter().filter(|e| new_ids.contains(&e.label)).collect();
    let mut out = Vec::new();
    for arm in &ab.arms {
        let policy = LambdaPolicy {
            mode: arm.mode,
            floor: spec.lambda.floor,
            ceiling: spec.lambda.ceiling,
            initial: spec.lambda.initial,
            cadence: spec.lambda.cadence,
        };
        let config = RetrainConfig {
            batch_size: spec.batch_size,
            penalty: Some(policy),
            normalization: spec.normalization,
            trainable: None,
        };
        let mut head = state.head.clone();
        let mut adam = state.adam.clone();
        let mut session = RetrainSession::new(
            &state.anchor,
            &state.table,
            &new_data,
            state.exemplars.examples().collect(),
            config,
        )?;
        let mut rng = Rng::for_stream(seed, RETRAIN_STREAM);
        let mut steps = Vec::new();
        for _ in 0..ab.epochs {
            steps.extend(session.run_epoch(&mut head, &mut adam, &mut rng)?);
        }
        out.push(LambdaTrace {
            seed,
            label: arm.label.clone(),
            steps,
            final_old_accuracy: accuracy(&head, &old_test)?,
            final_new_accuracy: accuracy(&head, &new_test)?,
        });
    }
    Ok(out)
}

/// Traces ordered by seed, then arm.
pub fn run_lambda_ablation(spec: &ProtocolSpec, ab: &LambdaAblation) -> Result<Vec<LambdaTrace>> {
    spec.validate()?;
    if ab.arms.is_empty() || ab.epochs == 0 {
        return Err(HarnessError::Config("lambda ablation needs arms and epochs".into()));
    }
    let per_seed: Vec<Vec<LambdaTrace>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = prepare_data(spec, seed)?;
            lambda_seed(spec, ab, seed, &data)
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct CurvePoint {
    seed: u64,
    rate: f64,
    selector: Selector,
    step: usize,
    epoch: f64,
    old_accuracy: f64,
}

pub const SAMPLING_CURVE_COLUMNS: [&str; 6] = ["seed", "rate", "selector", "step", "epoch", "old_accuracy"];

/// Writes `sampling.csv`, `sampling_summary.csv` and `sampling_curves.csv`.
pub fn write_sampling(dir: &Path, cells: &[SamplingCell], ab: &SamplingAblation) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(&dir.join("sampling.csv"), &SAMPLING_COLUMNS, cells)?;
    write_table(
        &dir.join("sampling_summary.csv"),
        &SAMPLING_SUMMARY_COLUMNS,
        &summarize_sampling(cells, ab),
    )?;
    let points: Vec<CurvePoint> = cells
        .iter()
        .flat_map(|c| {
            c.curve.iter().map(move |&(step, acc)| CurvePoint {
                seed: c.seed,
                rate: c.rate,
                selector: c.selector,
                step,
                epoch: step as f64 / c.steps_per_epoch.max(1) as f64,
                old_accuracy: acc,
            })
        })
        .collect();
    write_table(&dir.join("sampling_curves.csv"), &SAMPLING_CURVE_COLUMNS, &points)
}

/// Writes `lambda/seed-{seed}/{label}.csv` per trace and `lambda_stats.csv`.
pub fn write_lambda(dir: &Path, traces: &[LambdaTrace]) -> Result<()> {
    for t in traces {
        let sub = dir.join("lambda").join(format!("seed-{}", t.seed));
        std::fs::create_dir_all(&sub)?;
        write_trace(&sub.join(format!("{}.csv", t.label)), &t.steps)?;
    }
    let stats: Vec<TraceStats> = traces.iter().map(LambdaTrace::stats).collect();
    write_table(&dir.join("lambda_stats.csv"), &TRACE_STATS_COLUMNS, &stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cv_oracle() {
        assert_eq!(coefficient_of_variation(&[]), 0.0);
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]), 0.0);
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
        // mean 2, population sd 1
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
        assert!(coefficient_of_variation(&[-1.0, 1.0]).is_infinite());
    }

    #[test]
    fn tails_and_increase() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(tail(&v, 0.1).len(), 10);
        assert_eq!(tail(&v, 0.1)[0], 90.0);
        assert_eq!(tail(&v, 0.5).len(), 50);
        assert!(increases_first(&v));
        assert!(!increases_first(&[1.0; 100]));
        // rises from zero to a peak at step 2, then decays
        let hump: Vec<f64> = (0..100).map(|i| f64::from(i) * (-f64::from(i) / 2.0).exp()).collect();
        assert!(increases_first(&hump));
        let mut flat_then_rise = vec![1.0; 100];
        flat_then_rise[60] = 2.0;
        assert!(!increases_first(&flat_then_rise));
        assert!(!increases_first(&[]));
    }

    #[test]
    fn settle_oracle() {
        assert_eq!(settle_step(&[], 0.9), None);
        assert_eq!(settle_step(&[(1, 0.95), (2, 0.99)], 0.9), Some(1));
        assert_eq!(settle_step(&[(1, 0.95), (2, 0.5), (3, 0.91), (4, 0.92)], 0.9), Some(3));
        assert_eq!(settle_step(&[(2, 0.5), (4, 0.95), (6, 0.8)], 0.9), None);
        // equality counts as recovered
        assert_eq!(settle_step(&[(5, 0.2), (10, 0.9)], 0.9), Some(10));
    }

    #[test]
    fn summary_counts_capped_runs() {
        let ab = SamplingAblation {
            rates: vec![0.01],
            selectors: vec![Selector::Fisher],
            epochs: 9,
            ..SamplingAblation::default()
        };
        let cell = |seed, e, min| SamplingCell {
            seed,
            rate: 0.01,
            selector: Selector::Fisher,
            exemplars: 6,
            steps_per_epoch: 4,
            epochs_to_threshold: e,
            min_old_accuracy: min,
            final_old_accuracy: 1.0,
            curve: vec![],
        };
        let s = summarize_sampling(&[cell(0, Some(2.5), 0.5), cell(1, None, 0.25)], &ab);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_epochs, 5.75);
        assert_eq!(s[0].mean_min_old_accuracy, 0.375);
        assert_eq!(s[0].capped_runs, 1);
        assert_eq!(s[0].seeds, 2);
    }

    #[test]
    fn stats_columns_match_schema() {
        for (value, columns) in [
            (
                serde_json::to_value(TraceStats {
                    seed: 0,
                    label: "x".into(),
                    steps: 0,
                    cv_final_half: 0.0,
                    cv_final_tenth: 0.0,
                    increase_first: false,
                    penalty_cv_final_half: 0.0,
                    penalty_cv_final_tenth: 0.0,
                    final_consolidation: 0.0,
                    final_lambda: 1.0,
                    final_old_accuracy: 0.0,
                    final_new_accuracy: 0.0,
                })
                .unwrap(),
                TRACE_STATS_COLUMNS.to_vec(),
            ),
            (
                serde_json::to_value(SamplingSummary {
                    rate: 0.01,
                    selector: Selector::Random,
                    mean_epochs: 1.0,
                    mean_min_old_accuracy: 1.0,
                    capped_runs: 0,
                    seeds: 1,
                })
                .unwrap(),
                SAMPLING_SUMMARY_COLUMNS.to_vec(),
            ),
        ] {
            let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
            let mut columns = columns;
            keys.sort_unstable();
            columns.sort_unstable();
            assert_eq!(keys, columns);
        }
    }
}
