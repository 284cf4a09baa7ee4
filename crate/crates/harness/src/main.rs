use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ccfi_core::checkpoint::{load_state, save_state};
use ccfi_core::data::write_embeddings;
use ccfi_core::{gen_synthetic, ClassId, EmbeddingFormat, Lifecycle, Rng, Stream};
use ccfi_harness::ablation::{
    run_lambda_ablation, run_sampling_ablation, summarize_sampling, write_lambda, write_sampling, LambdaAblation,
    SamplingAblation,
};
use ccfi_harness::config::{DataSource, ExtractorSpec};
use ccfi_harness::metrics;
use ccfi_harness::protocol::{prepare_data, round_dir, run_increment, run_initial, run_protocol, RoundMetrics};
use ccfi_harness::{Method, ProtocolSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ccfi", version, about = "Class-incremental retraining with Fisher exemplars")]
struct Cli {
    /// Directory for checkpoints, metrics and traces.
    #[arg(long, env = "CCFI_RUN_DIR", global = true)]
    run_dir: Option<PathBuf>,
    /// Worker threads; seeds run in parallel.
    #[arg(long, env = "CCFI_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset of one seed as an embedding file.
    GenData {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// `.csv` or `.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the head on the initial classes and save the round-0 state.
    TrainInitial {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add classes to a saved state, retrain and save the next state.
    Increment {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full schedule for every seed.
    RunProtocol {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Exemplar rate and selector against recovery time, without the penalty.
    AblateSampling {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Length of every retrain.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Consolidation traces under fixed and dynamic lambda.
    AblateLambda {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Convert a metrics file between CSV and JSON lines.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LifecycleArg {
    Refresh,
    Frozen,
}

/// Overrides for the config file; flags win.
#[derive(Args)]
struct SpecArgs {
    /// TOML file with any subset of the settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// ccfi, random-exemplar, fine-tune, frozen-head or fixed-lambda:<value>.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    lifecycle: Option<LifecycleArg>,
    #[arg(long, value_delimiter = ',')]
    initial_classes: Option<Vec<String>>,
    /// One round's classes, comma separated; repeat for more rounds.
    #[arg(long = "increment")]
    increments: Vec<String>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    initial_epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Use an embedding file instead of synthetic data; implies the
    /// passthrough extractor.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    append_bias: bool,
}

impl SpecArgs {
    fn resolve(&self) -> anyhow::Result<ProtocolSpec> {
        let mut spec = match &self.config {
            Some(path) => ProtocolSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ProtocolSpec::default(),
        };
        if let Some(v) = &self.seeds {
            spec.seeds = v.clone();
        }
        if let Some(v) = self.method {
            spec.method = v;
        }
        if let Some(v) = self.lifecycle {
            spec.lifecycle = match v {
                LifecycleArg::Refresh => Lifecycle::Refresh,
                LifecycleArg::Frozen => Lifecycle::Frozen,
            };
        }
        if let Some(v) = &self.initial_classes {
            spec.initial_classes = v.clone();
        }
        if !self.increments.is_empty() {
            spec.increments = self
                .increments
                .iter()
                .map(|g| {
                    g.split(',')
                        .map(|c| c.trim().to_string())
                        .filter(|c| !c.is_empty())
                        .collect()
                })
                .collect();
        }
        if let Some(v) = self.sample_rate {
            spec.sample_rate = v;
        }
        if let Some(v) = self.batch_size {
            spec.batch_size = v;
        }
        if let Some(v) = self.step_size {
            spec.optimizer.step_size = v;
        }
        if let Some(v) = self.threshold {
            spec.threshold = v;
        }
        if let Some(v) = self.initial_epochs {
            spec.initial_training.max_epochs = v;
        }
        if let Some(v) = self.retrain_epochs {
            spec.retraining.max_epochs = v;
        }
        if let Some(path) = &self.embeddings {
            spec.data = DataSource::Embeddings {
                path: path.clone(),
                format: None,
            };
            spec.extractor = ExtractorSpec::Passthrough;
        }
        if self.append_bias {
            spec.append_bias = true;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn first_seed(spec: &ProtocolSpec, seed: Option<u64>) -> u64 {
    seed.unwrap_or(spec.seeds[0])
}

fn run_dir(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone().unwrap_or_else(|| PathBuf::from("ccfi-run"))
}

fn print_row(m: &RoundMetrics) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(m)?);
    Ok(())
}

fn snapshot(dir: &Path, spec: &ProtocolSpec) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), spec.to_toml()?)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::GenData { spec, seed, out } => {
            let spec = spec.resolve()?;
            let DataSource::Synthetic {
                classes,
                per_class,
                dim,
                separation,
            } = spec.data
            else {
                bail!("gen-data needs a synthetic data source");
            };
            let seed = first_seed(&spec, *seed);
            let format = EmbeddingFormat::from_path(out)
                .with_context(|| format!("cannot infer a format from {}", out.display()))?;
            let data = gen_synthetic(
                classes,
                per_class,
                dim,
                separation,
                &mut Rng::for_stream(seed, Stream::DataGen),
            )?;
            write_embeddings(out, &data, format)?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::TrainInitial { spec, seed, out } => {
            let spec = spec.resolve()?;
            let seed = first_seed(&spec, *seed);
            let data = prepare_data(&spec, seed)?;
            let (state, outcome) = run_initial(&spec, &data, seed)?;
            let path = match out {
                Some(p) => p.clone(),
                None => {
                    let dir = run_dir(&cli.run_dir);
                    snapshot(&dir, &spec)?;
                    round_dir(&dir, seed, 0).join("state.ckpt")
                }
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            save_state(&path, &state)?;
            print_row(&outcome.metrics)?;
            eprintln!("saved {}", path.display());
        }
        Command::Increment {
            spec,
            seed,
            state,
            classes,
            out,
        } => {
            let spec = spec.resolve()?;
            let seed = first_seed(&spec, *seed);
            let data = prepare_data(&spec, seed)?;
            let current = load_state(state).with_context(|| format!("loading {}", state.display()))?;
            let ids: Vec<ClassId> = classes.iter().map(|c| ClassId::new(c.clone())).collect();
            let (next, outcome) = run_increment(&current, &spec, &data, &ids, seed)?;
            let path = match out {
                Some(p) => p.clone(),
                None => round_dir(&run_dir(&cli.run_dir), seed, next.round).join("state.ckpt"),
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
                metrics::write_trace(&parent.join("trace.csv"), &outcome.trace)?;
            }
            save_state(&path, &next)?;
            print_row(&outcome.metrics)?;
            eprintln!("saved {}", path.display());
        }
        Command::RunProtocol { spec } => {
            let spec = spec.resolve()?;
            let dir = run_dir(&cli.run_dir);
            let result = run_protocol(&spec, Some(&dir))?;
            println!("round  overall  new      old");
            for (round, overall, new, old) in result.mean_by_round() {
                let old = old.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("{round:<6} {overall:.4}   {new:.4}   {old}");
            }
            eprintln!("wrote {}", dir.join("metrics.csv").display());
        }
        Command::AblateSampling {
            spec,
            rates,
            epochs,
            eval_every,
        } => {
            let spec = spec.resolve()?;
            let mut ab = SamplingAblation {
                threshold: spec.threshold,
                ..SamplingAblation::default()
            };
            if let Some(v) = rates {
                ab.rates = v.clone();
            }
            if let Some(v) = epochs {
                ab.epochs = *v;
            }
            if let Some(v) = eval_every {
                ab.eval_every = *v;
            }
            let dir = run_dir(&cli.run_dir);
            snapshot(&dir, &spec)?;
            let cells = run_sampling_ablation(&spec, &ab)?;
            write_sampling(&dir, &cells, &ab)?;
            println!("rate     selector  mean_epochs  capped");
            for s in summarize_sampling(&cells, &ab) {
                println!(
                    "{:<8} {:<9} {:<12.3} {}/{}",
                    s.rate,
                    format!("{:?}", s.selector).to_lowercase(),
                    s.mean_epochs,
                    s.capped_runs,
                    s.seeds
                );
            }
        }
        Command::AblateLambda { spec, epochs } => {
            let spec = spec.resolve()?;
            let mut ab = LambdaAblation::default();
            if let Some(v) = epochs {
                ab.epochs = *v;
            }
            let dir = run_dir(&cli.run_dir);
            snapshot(&dir, &spec)?;
            let traces = run_lambda_ablation(&spec, &ab)?;
            write_lambda(&dir, &traces)?;
            println!("seed  arm         cv_half   cv_tenth  increase_first");
            for t in &traces {
                let s = t.stats();
                println!(
                    "{:<5} {:<11} {:<9.4} {:<9.4} {}",
                    s.seed, s.label, s.cv_final_half, s.cv_final_tenth, s.increase_first
                );
            }
        }
        Command::Export { input, output } => {
            let n = metrics::export(input, output)?;
            println!("exported {n} rows to {}", output.display());
        }
    }
    Ok(())
}
