use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use midpg::experiment::{self, ExperimentConfig, PreparedData};
use midpg::model::checkpoint;
use midpg::{load_csv, write_csv, Error};

const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Parser)]
#[command(name = "midpg", version, about = "Multi-scenario CVR models with scenario-conditioned weighting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). The bundled default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override: `train.seed` for training commands, the synthetic
    /// data seed for `gen-data`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel training runs for `sweep` and `compare`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// `dotted.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate once; writes report.json, metrics.csv, model.ckpt.
    Run,
    /// Grid over variants, d_k and factor-size fractions; writes sweep.csv.
    Sweep,
    /// Multi-seed comparison of model settings with paired t-tests.
    Compare,
    /// Similarity and projection exports for a trained checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV. Defaults to the eval split of the config's data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as CSV plus a config that
    /// loads it.
    GenData,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common, seed_target: SeedTarget) -> CliResult<ExperimentConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        let key = match seed_target {
            SeedTarget::Train => "train.seed",
            SeedTarget::Data => "data.synthetic.seed",
        };
        overrides.push(format!("{key}={seed}"));
    }
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", path.display())));
            }
            ExperimentConfig::load(path, &overrides)?
        }
        None => ExperimentConfig::parse(DEFAULT_CONFIG, &overrides)?,
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

#[derive(Clone, Copy)]
enum SeedTarget {
    Train,
    Data,
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn prepare(cfg: &ExperimentConfig) -> CliResult<PreparedData> {
    let data = experiment::prepare_data(&cfg.data)?;
    experiment::create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    Ok(data)
}

fn cmd_run(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, SeedTarget::Train)?;
    experiment::create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    let report = experiment::run(&cfg, &cfg.output_dir)?;
    println!(
        "auc {:.6} logloss {:.6} ({} params, {:.1}s) -> {}",
        report.final_auc,
        report.final_logloss,
        report.param_counts.total(),
        report.wall_time_secs,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_sweep(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, SeedTarget::Train)?;
    if cfg.sweep.is_none() {
        return Err(Failure::Usage("config has no [sweep] section".into()));
    }
    let data = prepare(&cfg)?;
    let rows = experiment::sweep(&cfg, &data, common.jobs)?;
    let path = cfg.output_dir.join("sweep.csv");
    write(&path, &experiment::sweep_csv(&rows))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} rows ({failed} failed) -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_compare(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, SeedTarget::Train)?;
    if cfg.compare.is_none() {
        return Err(Failure::Usage("config has no [compare] section".into()));
    }
    let data = prepare(&cfg)?;
    let cmp = experiment::compare(&cfg, &data, common.jobs)?;
    write(&cfg.output_dir.join("compare.csv"), &cmp.summary_csv())?;
    write(&cfg.output_dir.join("compare_tests.csv"), &cmp.tests_csv())?;
    write(&cfg.output_dir.join("compare_runs.csv"), &cmp.runs_csv())?;
    for s in &cmp.summaries {
        println!(
            "{:<12} auc {:.4} ± {:.4}  logloss {:.4} ± {:.4}",
            s.setting, s.auc_mean, s.auc_std, s.logloss_mean, s.logloss_std
        );
    }
    Ok(())
}

fn cmd_analyze(common: &Common, ckpt: &Path, data: Option<&Path>) -> CliResult<()> {
    let (model, vocab) = checkpoint::load(ckpt)?;
    let (dataset, out_dir) = match data {
        Some(path) => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            (load_csv(path, model.schema(), Some(&vocab))?, out)
        }
        None => {
            let cfg = load_config(common, SeedTarget::Train)?;
            let out = cfg.output_dir.clone();
            (experiment::prepare_data(&cfg.data)?.eval, out)
        }
    };
    let (sim, proj) = experiment::analyze(&model, &dataset, &out_dir)?;
    let sil = midpg::analysis::silhouette(&proj.coords, &proj.scenarios)
        .map_or_else(|_| "n/a".to_string(), |s| format!("{s:.4}"));
    println!(
        "mean off-diagonal similarity {:.6}, silhouette {sil} -> {}",
        midpg::analysis::mean_off_diagonal(&sim),
        out_dir.display()
    );
    Ok(())
}

fn cmd_gen_data(common: &Common) -> CliResult<()> {
    let mut cfg = load_config(common, SeedTarget::Data)?;
    let spec = cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Failure::Usage("gen-data needs a [data.synthetic] section".into()))?;
    let generated = midpg::generate_synthetic(&spec)?;
    experiment::create_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("data.csv");
    write_csv(&generated.dataset, &csv_path)?;
    let schema = generated.dataset.schema.clone();
    cfg.data.synthetic = None;
    cfg.data.csv = Some(experiment::CsvSource {
        path: PathBuf::from("data.csv"),
        num_scenarios: schema.num_scenarios(),
        fields: schema.fields()[1..].to_vec(),
    });
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    println!(
        "{} samples, positive rate {:.3} -> {}",
        generated.dataset.len(),
        generated.dataset.positive_rate(),
        csv_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let common = &cli.common;
    if common.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Run => cmd_run(common),
        Command::Sweep => cmd_sweep(common),
        Command::Compare => cmd_compare(common),
        Command::Analyze { checkpoint, data } => cmd_analyze(common, checkpoint, data.as_deref()),
        Command::GenData => cmd_gen_data(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
