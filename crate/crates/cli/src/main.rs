//! `csa`: train, verify, evaluate and summarise conformally certified policies.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and I/O problems,
//! 3 when training or simulation diverges numerically.

mod report;
mod svg;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csa_core::checkpoint;
use csa_core::config::ExperimentConfig;
use csa_core::conformal::CalibrationMode;
use csa_core::envs::EnvKind;
use csa_core::trainer::{run_epoch, AgentBundle, EpochReport};
use csa_core::verify::{empirical_eval, verify_policy, EvalStats, VerificationReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] csa_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "csa", version, about = "Safe policy training with conformal safety certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the dynamics model and run the training epochs.
    Train(TrainArgs),
    /// Calibrate and report safety lower bounds for a checkpoint.
    Verify(VerifyArgs),
    /// Monte-Carlo statistics of trained policies on the true environment.
    Eval(EvalArgs),
    /// Merge CSV outputs of several seeds into mean/std tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment used when no configuration file is given.
    #[arg(long)]
    env: Option<EnvKind>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default_for(self.env.unwrap_or(EnvKind::Cartpole)),
        };
        if let (Some(env), Some(_)) = (self.env, &self.config) {
            if env != config.train.env {
                return Err(CliError::Usage(format!(
                    "--env {env} conflicts with the configuration's {}",
                    config.train.env
                )));
            }
        }
        config.validate()?;
        config.train.seed = 0;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Train only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Union,
    Ts,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<CalibrationMode> {
        match self {
            ModeArg::Union => vec![CalibrationMode::Union],
            ModeArg::Ts => vec![CalibrationMode::Ts],
            ModeArg::Both => vec![CalibrationMode::Union, CalibrationMode::Ts],
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the calibration and verification streams (default: training seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directories; one output row each plus an aggregate row.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// CSV files with identical headers, typically one per seed.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Grouping columns (default: k and mode, or epoch).
    #[arg(long, value_delimiter = ',')]
    key: Option<Vec<String>>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Also chart this column's mean against the first key column.
    #[arg(long)]
    plot: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_train(args: &TrainArgs) -> CliResult {
    let config = args.config.load()?;
    let out = args.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let seeds = match (args.seed, &args.checkpoint) {
        (Some(s), _) => vec![s],
        (None, Some(_)) => vec![],
        (None, None) => config.seeds.clone(),
    };
    if let Some(path) = &args.checkpoint {
        let bundle = checkpoint::load(path)?;
        if let Some(seed) = args.seed {
            if seed != bundle.config.seed {
                return Err(CliError::Usage(format!(
                    "--seed {seed} does not match the checkpoint's seed {}",
                    bundle.config.seed
                )));
            }
        }
        if args.config.config.is_some()
            && checkpoint::config_hash(&config.train_config(bundle.config.seed))? != checkpoint::config_hash(&bundle.config)?
        {
            return Err(CliError::Usage("configuration does not match the checkpoint (hash differs)".into()));
        }
        let dir = out.join(format!("seed-{}", bundle.config.seed));
        return train_seed(bundle, &dir, args.epochs, true);
    }
    for seed in seeds {
        let dir = out.join(format!("seed-{seed}"));
        ensure_dir(&dir)?;
        let (bundle, pretrain) = AgentBundle::initialize(config.train_config(seed))?;
        fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&pretrain)? + "\n")?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        train_seed(bundle, &dir, args.epochs, false)?;
    }
    Ok(())
}

fn train_seed(mut bundle: AgentBundle, dir: &Path, max_epochs: Option<usize>, resume: bool) -> CliResult {
    ensure_dir(dir)?;
    let log_path = dir.join("train_log.csv");
    let ckpt = dir.join("checkpoint");
    let fresh = !resume || !log_path.exists();
    let mut log = if fresh {
        let mut f = File::create(&log_path)?;
        writeln!(f, "{}", EpochReport::csv_header())?;
        f
    } else {
        OpenOptions::new().append(true).open(&log_path)?
    };
    let env = bundle.env()?;
    let mut ran = 0;
    while !bundle.finished() && max_epochs.is_none_or(|m| ran < m) {
        let report = match run_epoch(&mut bundle, &env) {
            Ok(r) => r,
            Err(e) => {
                checkpoint::save(&bundle, &ckpt)?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", report.csv_row())?;
        log.flush()?;
        checkpoint::save(&bundle, &ckpt)?;
        ran += 1;
        eprintln!(
            "seed {} epoch {} K={} coverage={:.3} return={:.1}",
            bundle.config.seed, report.epoch, report.horizon, report.coverage, report.mean_return
        );
    }
    checkpoint::save(&bundle, &ckpt)?;
    Ok(())
}

fn bound_chart(report: &VerificationReport) -> String {
    let mut series = Vec::new();
    for mode in [CalibrationMode::Union, CalibrationMode::Ts] {
        let points: Vec<(f64, f64)> = report
            .rows
            .iter()
            .filter(|r| r.mode == mode && r.feasible)
            .map(|r| (r.k as f64, r.lower_bound))
            .collect();
        if !points.is_empty() {
            series.push(svg::Series {
                name: mode.name().to_string(),
                points,
            });
        }
    }
    svg::line_chart("Safety lower bound", "horizon K", "lower bound", &series)
}

fn cmd_verify(args: &VerifyArgs) -> CliResult {
    let config = args.config.load()?;
    let bundle = checkpoint::load(&args.checkpoint)?;
    let mut vc = config.verify_config(args.seed.unwrap_or(bundle.config.seed));
    vc.alpha = args.alpha.unwrap_or(bundle.config.alpha);
    if let Some(m) = args.mode {
        vc.modes = m.modes();
    }
    if let Some(k) = args.k_max {
        vc.k_max = k;
    }
    if let Some(d) = args.delta {
        vc.delta = d;
    }
    let env = bundle.env()?;
    let mut report = verify_policy(&env, &bundle.policy, &bundle.dynamics, &vc)?;
    report.checkpoint = Some(args.checkpoint.display().to_string());
    ensure_dir(&args.out)?;
    fs::write(args.out.join("verification.csv"), report.to_csv())?;
    fs::write(
        args.out.join("verification.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(args.out.join("verification.svg"), bound_chart(&report))?;
    for r in report.rows.iter().filter(|r| !r.feasible) {
        eprintln!("K={} {}: calibration set too small, bound reported as -1", r.k, r.mode.name());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let config = args.config.load()?;
    let episodes = args.episodes.unwrap_or(config.eval.episodes);
    let horizon = args.horizon.unwrap_or(config.eval.horizon);
    let mut rows: Vec<(String, EvalStats)> = Vec::new();
    for path in &args.checkpoint {
        let bundle = checkpoint::load(path)?;
        let env = bundle.env()?;
        let stats = empirical_eval(&env, &bundle.policy, episodes, horizon, bundle.config.seed)?;
        rows.push((format!("seed-{}", bundle.config.seed), stats));
    }
    let mut w = csv::Writer::from_path(&args.out)?;
    let mut header = vec!["label"];
    header.extend(EvalStats::COLUMNS);
    w.write_record(&header)?;
    for (label, s) in &rows {
        let mut rec = vec![label.clone()];
        rec.extend(s.csv_row().split(',').map(str::to_string));
        w.write_record(&rec)?;
    }
    if rows.len() > 1 {
        w.write_record(aggregate_row(&rows))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over seeds, with the standard error across seeds in the stderr columns.
fn aggregate_row(rows: &[(String, EvalStats)]) -> Vec<String> {
    let n = rows.len() as f64;
    let stat = |f: fn(&EvalStats) -> f64| {
        let v: Vec<f64> = rows.iter().map(|(_, s)| f(s)).collect();
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (r, rs) = stat(|s| s.mean_reward);
    let (c, cs) = stat(|s| s.mean_cost_rate);
    let (v, vs) = stat(|s| s.violation_free_fraction);
    let first = &rows[0].1;
    [
        "aggregate".to_string(),
        rows.iter().map(|(_, s)| s.episodes).sum::<usize>().to_string(),
        first.horizon.to_string(),
        r.to_string(),
        rs.to_string(),
        c.to_string(),
        cs.to_string(),
        v.to_string(),
        vs.to_string(),
    ]
    .to_vec()
}

fn cmd_report(args: &ReportArgs) -> CliResult {
    let tables = args
        .inputs
        .iter()
        .map(|p| report::Table::read(p))
        .collect::<CliResult<Vec<_>>>()?;
    let keys = match &args.key {
        Some(k) => k.clone(),
        None => report::default_keys(&tables[0].header),
    };
    let merged = report::merge(&tables, &keys)?;
    report::write(&merged, &args.out)?;
    if let Some(col) = &args.plot {
        let x = keys
            .first()
            .ok_or_else(|| CliError::Usage("--plot needs at least one key column".into()))?;
        let mean_col = merged
            .column(&format!("{col}_mean"))
            .ok_or_else(|| CliError::Usage(format!("no numeric column named {col}")))?;
        let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for row in &merged.rows {
            let label = row[1..keys.len()].join(" ");
            let (Ok(xv), Ok(yv)) = (row[0].parse::<f64>(), row[mean_col].parse::<f64>()) else {
                continue;
            };
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, pts)) => pts.push((xv, yv)),
                None => groups.push((label, vec![(xv, yv)])),
            }
        }
        let series: Vec<svg::Series> = groups
            .into_iter()
            .map(|(name, points)| svg::Series {
                name: if name.is_empty() { col.clone() } else { name },
                points,
            })
            .collect();
        fs::write(args.out.with_extension("svg"), svg::line_chart(col, x, col, &series))?;
    }
    Ok(())
}
