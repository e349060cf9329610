//! Batch experimentation front end.
//!
//! `run` executes one experiment and writes its artifacts (per-round
//! metrics CSV, summary JSON, config echo, model checkpoint, and the
//! perturbed uploads when enabled) into an output directory. `sweep` runs
//! one experiment per value of a chosen hyperparameter under per-value
//! subdirectories and prints a final-round metrics table. `gen-data`
//! writes a synthetic dataset to disk for offline experiments.
//!
//! Command line flags override values from the config file.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedrec_core::config::ExperimentConfig;
use fedrec_core::data::{generate_dataset_files, SynthConfig};
use fedrec_core::model::save_checkpoint;
use fedrec_core::output::{write_config_echo, write_metrics_csv, write_summary_json, RunSummary};
use fedrec_core::privacy::write_contribution_dump;
use fedrec_core::protocol::{load_inputs, run_experiment, NoopObserver, RunResult};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "fedrec", version, about = "Federated recommender simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Run one experiment per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset on disk.
    GenData(GenDataArgs),
}

/// Flag-level overrides applied on top of the config file.
#[derive(Args)]
struct Overrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Privacy budget of the upload mechanism.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Augmented positives per client per round.
    #[arg(long)]
    alpha: Option<usize>,
    /// Weight of the server-side item contrastive term.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the client-side user contrastive term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Disable data augmentation.
    #[arg(long)]
    no_aug: bool,
    /// Disable the server-side item contrastive update.
    #[arg(long)]
    no_item_cl: bool,
    /// Disable the client-side user contrastive term.
    #[arg(long)]
    no_user_cl: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Directory for metrics.csv, summary.json, config.json, model.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (JSON) shared by every run of the sweep.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter to vary.
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values, one experiment each.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
    /// Directory receiving one subdirectory per value plus sweep.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of users (default 400).
    #[arg(long)]
    users: Option<usize>,
    /// Number of items (default 120).
    #[arg(long)]
    items: Option<usize>,
    /// Number of planted item clusters (default 6).
    #[arg(long)]
    clusters: Option<usize>,
    /// Generator seed (default 7).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for ratings.dat, movies.dat, vectors.txt.
    #[arg(long, default_value = "synthetic-data")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepParam {
    Epsilon,
    Alpha,
    Beta,
    Lambda,
    Tau,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::GenData(args) => cmd_gen_data(args),
    }
}

fn load_base_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p)
            .with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_overrides(config: &mut ExperimentConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(epsilon) = o.epsilon {
        config.privacy.epsilon = epsilon;
    }
    if let Some(alpha) = o.alpha {
        config.augment.top_alpha = alpha;
    }
    if let Some(beta) = o.beta {
        config.contrastive.beta = beta;
    }
    if let Some(lambda) = o.lambda {
        config.contrastive.lambda = lambda;
    }
    if let Some(tau) = o.tau {
        config.contrastive.tau = tau;
    }
    if o.no_aug {
        config.features.augmentation = false;
    }
    if o.no_item_cl {
        config.features.item_cl = false;
    }
    if o.no_user_cl {
        config.features.user_cl = false;
    }
}

/// Execute one experiment and write every artifact under `out`.
fn execute_run(config: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    config.validate()?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let inputs = load_inputs(config)?;
    let started = Instant::now();
    let result = run_experiment(config, &inputs, &mut NoopObserver)?;
    let total_wall_ms = started.elapsed().as_millis() as u64;

    write_metrics_csv(&out.join("metrics.csv"), config.eval.k, &result.rounds)?;
    let summary = RunSummary {
        label: config.label(),
        seed: config.seed,
        rounds: config.train.rounds,
        users_evaluated: result.final_metrics.users,
        final_recall: result.final_metrics.recall,
        final_ndcg: result.final_metrics.ndcg,
        eval_k: config.eval.k,
        total_wall_ms,
        round_wall_ms: result.rounds.iter().map(|r| r.wall_ms).collect(),
        config,
    };
    write_summary_json(&out.join("summary.json"), &summary)?;
    write_config_echo(&out.join("config.json"), config)?;
    save_checkpoint(&out.join("model.json"), &result.model)?;
    if config.dump_contributions && !result.contributions.is_empty() {
        write_contribution_dump(
            &out.join("contributions.tsv"),
            &result.contributions,
            &inputs.dataset.user_ids,
            &inputs.dataset.item_ids,
        )?;
    }
    Ok(result)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = load_base_config(args.config.as_deref())?;
    apply_overrides(&mut config, &args.overrides);
    let result = execute_run(&config, &args.out)?;
    let k = config.eval.k;
    println!(
        "{} seed={} recall@{k}={:.6} ndcg@{k}={:.6} ({} users, artifacts in {})",
        config.label(),
        config.seed,
        result.final_metrics.recall,
        result.final_metrics.ndcg,
        result.final_metrics.users,
        args.out.display()
    );
    Ok(())
}

fn apply_sweep_value(config: &mut ExperimentConfig, param: SweepParam, raw: &str) -> Result<()> {
    let bad = |kind: &str| format!("sweep value {raw:?} is not {kind}");
    match param {
        SweepParam::Epsilon => {
            config.privacy.epsilon = raw.parse().with_context(|| bad("a number"))?
        }
        SweepParam::Alpha => {
            config.augment.top_alpha = raw.parse().with_context(|| bad("a count"))?
        }
        SweepParam::Beta => config.contrastive.beta = raw.parse().with_context(|| bad("a number"))?,
        SweepParam::Lambda => {
            config.contrastive.lambda = raw.parse().with_context(|| bad("a number"))?
        }
        SweepParam::Tau => config.contrastive.tau = raw.parse().with_context(|| bad("a number"))?,
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut base = load_base_config(args.config.as_deref())?;
    apply_overrides(&mut base, &args.overrides);

    // Fail on malformed values before any experiment starts.
    let mut configs = Vec::with_capacity(args.values.len());
    for (i, raw) in args.values.iter().enumerate() {
        let mut config = base.clone();
        apply_sweep_value(&mut config, args.param, raw)?;
        config.seed = base.seed.wrapping_add(i as u64);
        configs.push(config);
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let key = args.param.key();
    let k = base.eval.k;

    let mut rows: Vec<(String, Option<(f64, f64)>)> = Vec::with_capacity(configs.len());
    for (raw, config) in args.values.iter().zip(&configs) {
        let dir = args.out.join(format!("{key}-{raw}"));
        match execute_run(config, &dir) {
            Ok(result) => rows.push((
                raw.clone(),
                Some((result.final_metrics.recall, result.final_metrics.ndcg)),
            )),
            Err(err) => {
                eprintln!("{key}={raw} failed: {err:#}");
                rows.push((raw.clone(), None));
            }
        }
    }

    let recall_col = format!("recall@{k}");
    let ndcg_col = format!("ndcg@{k}");
    println!("{key:<12} {recall_col:>14} {ndcg_col:>14}");
    let mut csv = format!("{key},{recall_col},{ndcg_col}\n");
    for (value, metrics) in &rows {
        match metrics {
            Some((recall, ndcg)) => {
                println!("{value:<12} {recall:>14.6} {ndcg:>14.6}");
                csv.push_str(&format!("{value},{recall},{ndcg}\n"));
            }
            None => {
                println!("{value:<12} {:>14} {:>14}", "failed", "failed");
                csv.push_str(&format!("{value},,\n"));
            }
        }
    }
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;

    let failures = rows.iter().filter(|(_, m)| m.is_none()).count();
    if failures > 0 {
        bail!("{failures} of {} sweep runs failed", rows.len());
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(users) = args.users {
        cfg.users = users;
    }
    if let Some(items) = args.items {
        cfg.items = items;
    }
    if let Some(clusters) = args.clusters {
        cfg.clusters = clusters;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let files = generate_dataset_files(&cfg, &args.out)?;
    println!("ratings: {}", files.ratings.display());
    println!("titles: {}", files.titles.display());
    println!("word vectors: {}", files.word_vectors.display());
    Ok(())
}
