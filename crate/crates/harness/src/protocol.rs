//! Initial training, class-incremental rounds and the multi-seed protocol.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use ccfi_core::data::append_bias_feature;
use ccfi_core::{
    derive_seed, gen_synthetic, refresh_anchor_and_table, split, train_epoch, AdamState, ClassId, ContinualState,
    EmbeddingFormat, Example, FrozenExtractor, Head, RetrainConfig, RetrainSession, Rng, State, StepDiagnostics,
    Stream,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExtractorSpec, ProtocolSpec};
use crate::error::{HarnessError, Result};
use crate::metrics::{self, MetricsFormat, Timing};

/// Extracted, split features for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub feature_dim: usize,
    pub extractor_fingerprint: u64,
}

impl PreparedData {
    pub fn train_of<'a>(&'a self, classes: &'a [ClassId]) -> impl Iterator<Item = &'a Example> + 'a {
        self.train.iter().filter(move |e| classes.contains(&e.label))
    }

    /// Train, validation and test examples of `classes`.
    pub fn all_of<'a>(&'a self, classes: &'a [ClassId]) -> impl Iterator<Item = &'a Example> + 'a {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .filter(move |e| classes.contains(&e.label))
    }
}

pub fn build_extractor(spec: &ProtocolSpec, input_dim: usize, seed: u64) -> Result<FrozenExtractor> {
    Ok(match spec.extractor {
        ExtractorSpec::Identity => FrozenExtractor::Identity,
        ExtractorSpec::Passthrough => FrozenExtractor::Passthrough,
        ExtractorSpec::Dense { hidden } => FrozenExtractor::random_dense(input_dim, hidden, seed)?,
    })
}

/// Generates or loads the data, extracts features and splits them.
pub fn prepare_data(spec: &ProtocolSpec, seed: u64) -> Result<PreparedData> {
    let raw = match &spec.data {
        DataSource::Synthetic {
            classes,
            per_class,
            dim,
            separation,
        } => gen_synthetic(
            *classes,
            *per_class,
            *dim,
            *separation,
            &mut Rng::for_stream(seed, Stream::DataGen),
        )?,
        DataSource::Embeddings { path, format } => {
            let format = match format {
                Some(f) => *f,
                None => EmbeddingFormat::from_path(path)
                    .ok_or_else(|| HarnessError::Config(format!("cannot infer the format of {}", path.display())))?,
            };
            ccfi_core::data::load_embeddings(path, format)?
        }
    };
    let input_dim = raw.first().map_or(0, |r| r.input.len());
    let extractor = build_extractor(spec, input_dim, seed)?;
    let mut features = extractor.extract_all(&raw)?;
    if spec.append_bias {
        append_bias_feature(&mut features);
    }
    let (train, validation, test) = split(&features, &spec.split_spec(seed)?)?;
    Ok(PreparedData {
        train,
        validation,
        test,
        feature_dim: extractor.output_dim(input_dim) + usize::from(spec.append_bias),
        extractor_fingerprint: extractor.fingerprint(),
    })
}

/// One row of the metrics file. The column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub seed: u64,
    pub method: String,
    pub round: usize,
    /// Classes introduced this round, `;`-separated.
    pub new_classes: String,
    pub classes_seen: usize,
    pub n_test: usize,
    pub n_test_old: usize,
    pub n_test_new: usize,
    pub overall_accuracy: f64,
    pub new_accuracy: f64,
    /// Empty in round 0, which has no old classes.
    pub old_accuracy: Option<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_lambda: Option<f64>,
    pub exemplars: usize,
    /// First epoch after which old-class test accuracy reached the threshold.
    pub epochs_to_threshold: Option<usize>,
}

/// Result of one round, including what does not belong in the metrics file.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub epoch_losses: Vec<f64>,
    pub trace: Vec<StepDiagnostics>,
    pub elapsed: Duration,
}

fn count_correct<'a>(head: &Head, examples: impl IntoIterator<Item = &'a Example>) -> Result<(usize, usize)> {
    Ok(head.correct_count(examples)?)
}

fn ratio((correct, total): (usize, usize)) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn evaluate(
    head: &Head,
    test: &[Example],
    old: &[ClassId],
    new: &[ClassId],
) -> Result<(usize, usize, f64, f64, Option<f64>)> {
    let new_counts = count_correct(head, test.iter().filter(|e| new.contains(&e.label)))?;
    let old_counts = count_correct(head, test.iter().filter(|e| old.contains(&e.label)))?;
    let overall = ratio((new_counts.0 + old_counts.0, new_counts.1 + old_counts.1));
    let old_acc = (!old.is_empty()).then(|| ratio(old_counts));
    Ok((old_counts.1, new_counts.1, overall, ratio(new_counts), old_acc))
}

fn joined(ids: &[ClassId]) -> String {
    ids.iter().map(ClassId::as_str).collect::<Vec<_>>().join(";")
}

fn check_has_data(data: &PreparedData, classes: &[ClassId]) -> Result<()> {
    for c in classes {
        if !data.train.iter().any(|e| &e.label == c) {
            return Err(HarnessError::NoTrainingData(c.to_string()));
        }
    }
    Ok(())
}

/// Trains a fresh head on the initial classes and builds the round-0 state.
pub fn run_initial(spec: &ProtocolSpec, data: &PreparedData, seed: u64) -> Result<(State, RoundOutcome)> {
    let start = Instant::now();
    let ids = spec.initial_ids();
    check_has_data(data, &ids)?;
    let train: Vec<Example> = data.train_of(&ids).cloned().collect();
    let mut head = Head::random(
        data.feature_dim,
        ids.clone(),
        spec.init_std,
        &mut Rng::for_stream(seed, Stream::WeightInit),
    )?;
    let mut adam = AdamState::new(spec.optimizer.into(), &head);
    let mut shuffle = Rng::for_stream(seed, Stream::Shuffle);
    let mut losses = Vec::new();
    let mut steps = 0;
    while !spec.initial_training.should_stop(&losses) {
        losses.push(train_epoch(
            &mut head,
            &mut adam,
            &train,
            spec.batch_size,
            true,
            &mut shuffle,
        )?);
        steps += train.len().div_ceil(spec.batch_size);
    }
    let state = ContinualState::after_initial_training(
        head,
        adam,
        &train,
        spec.method.selector(),
        &spec.selection(),
        &mut Rng::for_stream(seed, Stream::Exemplars),
    )?;
    let (n_old, n_new, overall, new_acc, old_acc) = evaluate(&state.head, &data.test, &[], &ids)?;
    let metrics = RoundMetrics {
        seed,
        method: spec.method.to_string(),
        round: 0,
        new_classes: joined(&ids),
        classes_seen: ids.len(),
        n_test: n_old + n_new,
        n_test_old: n_old,
        n_test_new: n_new,
        overall_accuracy: overall,
        new_accuracy: new_acc,
        old_accuracy: old_acc,
        epochs: losses.len(),
        steps,
        final_train_loss: losses.last().copied().unwrap_or(0.0),
        final_lambda: None,
        exemplars: state.exemplars.len(),
        epochs_to_threshold: None,
    };
    Ok((
        state,
        RoundOutcome {
            metrics,
            epoch_losses: losses,
            trace: Vec::new(),
            elapsed: start.elapsed(),
        },
    ))
}

/// Adds `classes`, retrains and refreshes. `state` is left untouched; on
/// error nothing is returned.
pub fn run_increment(
    state: &State,
    spec: &ProtocolSpec,
    data: &PreparedData,
    classes: &[ClassId],
    seed: u64,
) -> Result<(State, RoundOutcome)> {
    let start = Instant::now();
    if classes.is_empty() {
        return Err(HarnessError::Config("increment has no classes".into()));
    }
    let mut unique = HashSet::new();
    for c in classes {
        if state.head.classes().contains(c) || !unique.insert(c) {
            return Err(ccfi_core::Error::DuplicateClass(c.to_string()).into());
        }
    }
    check_has_data(data, classes)?;
    let round = state.round + 1;
    let round_seed = derive_seed(seed, round as u64);
    let old_ids: Vec<ClassId> = state.head.class_ids().to_vec();
    let new_data: Vec<Example> = data.train_of(classes).cloned().collect();
    let old_test: Vec<&Example> = data.test.iter().filter(|e| old_ids.contains(&e.label)).collect();

    let mut next = state.clone();
    let range = next.extend_classes(
        classes.iter().cloned(),
        spec.new_column_std,
        &mut Rng::for_stream(round_seed, Stream::WeightInit),
    )?;
    let config = RetrainConfig {
        batch_size: spec.batch_size,
        penalty: spec.method.penalty(&spec.lambda),
        normalization: spec.normalization,
        trainable: spec.method.freezes_old_columns().then_some(range),
    };
    let mut shuffle = Rng::for_stream(round_seed, Stream::Shuffle);
    let mut losses = Vec::new();
    let mut trace = Vec::new();
    let mut epochs_to_threshold = None;
    let final_lambda;
    {
        let ContinualState {
            head,
            adam,
            table,
            anchor,
            exemplars,
            ..
        } = &mut next;
        let rehearsal: Vec<&Example> = if spec.method.uses_exemplars() {
            exemplars.examples().collect()
        } else {
            Vec::new()
        };
        let mut session = RetrainSession::new(anchor, table, &new_data, rehearsal, config.clone())?;
        while !spec.retraining.should_stop(&losses) {
            let steps = session.run_epoch(head, adam, &mut shuffle)?;
            losses.push(steps.iter().map(|d| d.ce_new + d.ce_exemplar).sum());
            trace.extend(steps);
            if epochs_to_threshold.is_none() && !old_test.is_empty() {
                let acc = ratio(head.correct_count(old_test.iter().copied())?);
                if acc >= spec.threshold {
                    epochs_to_threshold = Some(losses.len());
                }
            }
        }
        final_lambda = config.penalty.map(|_| session.lambda());
    }
    refresh_anchor_and_table(
        &mut next,
        &new_data,
        spec.method.selector(),
        &spec.selection(),
        spec.lifecycle,
        &mut Rng::for_stream(round_seed, Stream::Exemplars),
    )?;
    next.round = round;

    let (n_old, n_new, overall, new_acc, old_acc) = evaluate(&next.head, &data.test, &old_ids, classes)?;
    let metrics = RoundMetrics {
        seed,
        method: spec.method.to_string(),
        round,
        new_classes: joined(classes),
        classes_seen: next.head.num_classes(),
        n_test: n_old + n_new,
        n_test_old: n_old,
        n_test_new: n_new,
        overall_accuracy: overall,
        new_accuracy: new_acc,
        old_accuracy: old_acc,
        epochs: losses.len(),
        steps: trace.len(),
        final_train_loss: losses.last().copied().unwrap_or(0.0),
        final_lambda,
        exemplars: next.exemplars.len(),
        epochs_to_threshold,
    };
    Ok((
        next,
        RoundOutcome {
            metrics,
            epoch_losses: losses,
            trace,
            elapsed: start.elapsed(),
        },
    ))
}

/// Runs the whole schedule for one seed, calling `observe` after each round.
pub fn run_seed<F>(spec: &ProtocolSpec, seed: u64, mut observe: F) -> Result<Vec<RoundOutcome>>
where
    F: FnMut(&State, &RoundOutcome) -> Result<()>,
{
    let data = prepare_data(spec, seed)?;
    let (mut state, outcome) = run_initial(spec, &data, seed)?;
    observe(&state, &outcome)?;
    let mut out = vec![outcome];
    for group in spec.increment_ids() {
        let (next, outcome) = run_increment(&state, spec, &data, &group, seed)?;
        observe(&next, &outcome)?;
        out.push(outcome);
        state = next;
    }
    Ok(out)
}

/// All seeds, in seed order.
#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub rounds: Vec<RoundOutcome>,
}

impl ProtocolResult {
    pub fn metrics(&self) -> Vec<RoundMetrics> {
        self.rounds.iter().map(|r| r.metrics.clone()).collect()
    }

    pub fn timings(&self) -> Vec<Timing> {
        self.rounds
            .iter()
            .map(|r| Timing {
                seed: r.metrics.seed,
                round: r.metrics.round,
                seconds: r.elapsed.as_secs_f64(),
            })
            .collect()
    }

    /// Per-round means over seeds of (overall, new, old) accuracy.
    pub fn mean_by_round(&self) -> Vec<(usize, f64, f64, Option<f64>)> {
        let rounds = self.rounds.iter().map(|r| r.metrics.round).max().map_or(0, |m| m + 1);
        (0..rounds)
            .map(|round| {
                let rows: Vec<&RoundMetrics> = self
                    .rounds
                    .iter()
                    .map(|r| &r.metrics)
                    .filter(|m| m.round == round)
                    .collect();
                let n = rows.len() as f64;
                let overall = rows.iter().map(|m| m.overall_accuracy).sum::<f64>() / n;
                let new = rows.iter().map(|m| m.new_accuracy).sum::<f64>() / n;
                let old = rows.iter().map(|m| m.old_accuracy).sum::<Option<f64>>().map(|s| s / n);
                (round, overall, new, old)
            })
            .collect()
    }
}

/// Runs every seed in parallel. With `run_dir`, writes the config snapshot,
/// per-round checkpoints and traces, `metrics.csv` and `timings.csv`.
pub fn run_protocol(spec: &ProtocolSpec, run_dir: Option<&Path>) -> Result<ProtocolResult> {
    spec.validate()?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), spec.to_toml()?)?;
    }
    let per_seed: Vec<Vec<RoundOutcome>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            run_seed(spec, seed, |state, outcome| match run_dir {
                Some(dir) => write_round_artifacts(dir, state, outcome),
                None => Ok(()),
            })
        })
        .collect::<Result<_>>()?;
    let result = ProtocolResult {
        rounds: per_seed.into_iter().flatten().collect(),
    };
    if let Some(dir) = run_dir {
        metrics::write_metrics(&dir.join("metrics.csv"), &result.metrics(), MetricsFormat::Csv)?;
        metrics::write_timings(&dir.join("timings.csv"), &result.timings())?;
    }
    Ok(result)
}

pub fn round_dir(run_dir: &Path, seed: u64, round: usize) -> std::path::PathBuf {
    run_dir.join(format!("seed-{seed}")).join(format!("round-{round}"))
}

fn write_round_artifacts(run_dir: &Path, state: &State, outcome: &RoundOutcome) -> Result<()> {
    let dir = round_dir(run_dir, outcome.metrics.seed, outcome.metrics.round);
    std::fs::create_dir_all(&dir)?;
    ccfi_core::checkpoint::save_state(&dir.join("state.ckpt"), state)?;
    metrics::write_trace(&dir.join("trace.csv"), &outcome.trace)?;
    let file = std::io::BufWriter::new(std::fs::File::create(dir.join("exemplars.csv"))?);
    state.exemplars.write_scores_csv(file)?;
    Ok(())
}
