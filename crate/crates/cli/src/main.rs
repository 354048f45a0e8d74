//! `oneflow` command-line tool.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oneflow::checkpoint::Checkpoint;
use oneflow::harness::ablation::{self, AblationKind};
use oneflow::harness::eval::{self, EvalOptions};
use oneflow::harness::{io, report_dir, run_sweep, svg, ExperimentConfig};
use oneflow::masking::Mask;
use oneflow::metrics::Metric;
use oneflow::numerics::Rng;
use oneflow::sampler::{self, Block, Query, Solver, SolverConfig};
use oneflow::tasks::{simulate_joint, Task};
use oneflow::trainer::{LogRow, StopReason, Trainer};
use oneflow::{exec, Error, Result};

#[derive(Parser)]
#[command(name = "oneflow", version, about = "Masked joint flow matching for simulation-based inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of (theta, y) pairs from a task's prior and simulator.
    Simulate {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training-log CSV (defaults to `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint; its config hash must match.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many further optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Sample a conditional distribution selected by a mask.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// One character per joint coordinate: 1 = observed, 0 = generated.
        #[arg(long)]
        mask: String,
        /// CSV with a header naming the observed coordinates and one row of values.
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Returned block: generated, theta, y, or all.
        #[arg(long, default_value = "generated")]
        block: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Score posterior samples against the task's reference posterior.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated list of c2st, mmd, ks, mse.
        #[arg(long, default_value = "c2st")]
        metric: String,
        #[arg(long, default_value_t = 10)]
        obs: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Append rows to an existing CSV instead of overwriting it.
        #[arg(long)]
        append: bool,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Sweep observation noise, missing observations, or ODE step count.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Comma-separated sweep levels (defaults to the standard grid).
        #[arg(long)]
        levels: Option<String>,
        #[arg(long, default_value_t = 10)]
        obs: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Aggregate evaluation CSVs into mean and std per (task, budget, metric).
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every (budget, run) cell of a configuration.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "c2st")]
        metric: String,
    },
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// euler, heun, rk4, or rk45 (default: heun for infer, rk45 for eval and ablate).
    #[arg(long)]
    solver: Option<String>,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    atol: f64,
}

impl SolverArgs {
    fn config(&self, fallback: SolverConfig) -> Result<SolverConfig> {
        let method = match &self.solver {
            Some(s) => Solver::parse(s)?,
            None => fallback.method,
        };
        let cfg = SolverConfig { method, steps: self.steps, rtol: self.rtol, atol: self.atol };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    s.split(',').map(Metric::parse).collect()
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

fn cmd_train(config: &Path, out: &Path, log: Option<PathBuf>, resume: Option<PathBuf>, max_steps: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let log = log_path(out, log);
    let (mut trainer, append) = match &resume {
        Some(p) => (Trainer::resume(cfg.train.clone(), &Checkpoint::load(p)?)?, true),
        None => (Trainer::new(cfg.train.clone())?, false),
    };
    let mut file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&log)?;
    if !append || file.metadata()?.len() == 0 {
        writeln!(file, "{}", LogRow::HEADER)?;
    }
    let mut write_err = None;
    let why = trainer.run(max_steps, |row| {
        if let Err(e) = writeln!(file, "{}", row.csv()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ckpt = trainer.checkpoint();
    ckpt.save(out)?;
    let how = match why {
        StopReason::Completed => "completed",
        StopReason::EarlyStopped => "early stop",
        StopReason::Paused => "paused",
    };
    eprintln!(
        "{}: step {} ({how}), best EMA validation loss {:.6} at step {}",
        out.display(),
        ckpt.iterations,
        ckpt.best_val_loss,
        ckpt.best_step
    );
    Ok(())
}

fn read_conditioning(path: &Path, task: Task, mask: &Mask) -> Result<Vec<f64>> {
    let (header, data) = io::read_matrix(path)?;
    if data.nrows() != 1 {
        return Err(Error::InvalidQuery(format!("{} must hold exactly one row of values", path.display())));
    }
    let names = task.coordinate_names();
    let mut values = Vec::new();
    for i in mask.observed_indices() {
        let col = header
            .iter()
            .position(|h| *h == names[i])
            .ok_or_else(|| Error::InvalidQuery(format!("observed coordinate {} has no value in {}", names[i], path.display())))?;
        values.push(data[[0, col]]);
    }
    if header.len() != values.len() {
        let extra: Vec<&String> = header.iter().filter(|h| !mask.observed_indices().iter().any(|&i| names[i] == **h)).collect();
        return Err(Error::InvalidQuery(format!("values given for coordinates that are not observed: {extra:?}")));
    }
    Ok(values)
}

fn cmd_infer(ckpt: &Path, mask: &str, cond: Option<&Path>, n: usize, out: &Path, block: &str, seed: u64, solver: SolverConfig) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let task = ckpt.task;
    let mask = Mask::parse(mask, task.d_theta(), task.d_y()).map_err(|e| match e {
        Error::Shape(m) => Error::InvalidQuery(m),
        other => other,
    })?;
    let observed = match cond {
        Some(p) => read_conditioning(p, task, &mask)?,
        None => Vec::new(),
    };
    let query = Query::from_observed(mask, &observed, Block::parse(block)?, n)?;
    let samples = sampler::sample(&ckpt, &query, &solver, &Rng::new(seed))?;
    let names = task.coordinate_names();
    let header: Vec<String> = query.columns().into_iter().map(|j| names[j].clone()).collect();
    io::write_matrix(out, &header, &samples)
}

fn cmd_ablate(kind: &str, ckpt: &Path, out: &Path, svg_path: Option<&Path>, levels: Option<&str>, opts: EvalOptions) -> Result<()> {
    let kind = AblationKind::parse(kind)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let levels = match levels {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidParameter(format!("bad level {v:?}"))))
            .collect::<Result<Vec<_>>>()?,
        None => kind.default_levels(),
    };
    let points = ablation::ablate(&ckpt, kind, &levels, &opts)?;
    ablation::write_ablation_csv(out, ckpt.task.name(), kind, &points)?;
    if let Some(p) = svg_path {
        let series = ablation::read_ablation_means(out)?;
        let title = format!("{} {} sweep", ckpt.task.name(), kind.name());
        std::fs::write(p, svg::line_plot(&title, kind.axis_label(), kind.metric().name(), &series))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    exec::configure_from_env()?;
    match cli.command {
        Command::Simulate { task, n, seed, out } => {
            let task = Task::parse(&task)?;
            if n == 0 {
                return Err(Error::InvalidParameter("n must be at least 1".into()));
            }
            let data = simulate_joint(task, n, &Rng::new(seed));
            io::write_dataset(&out, task, seed, &data)
        }
        Command::Train { config, out, log, resume, max_steps } => cmd_train(&config, &out, log, resume, max_steps),
        Command::Infer { ckpt, mask, cond, n, out, block, seed, solver } => {
            cmd_infer(&ckpt, &mask, cond.as_deref(), n, &out, &block, seed, solver.config(SolverConfig::default())?)
        }
        Command::Eval { ckpt, metric, obs, samples, seed, out, append, solver } => {
            let metrics = parse_metrics(&metric)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let opts = EvalOptions { observations: obs, samples, solver: solver.config(SolverConfig::evaluation())?, seed };
            let rows = eval::evaluate(&ckpt, &metrics, &opts)?;
            eval::write_eval_csv(&out, &rows, append)
        }
        Command::Ablate { kind, ckpt, out, svg, levels, obs, samples, seed, solver } => {
            let opts = EvalOptions { observations: obs, samples, solver: solver.config(SolverConfig::evaluation())?, seed };
            cmd_ablate(&kind, &ckpt, &out, svg.as_deref(), levels.as_deref(), opts)
        }
        Command::Report { input, out } => report_dir(&input, &out).map(|_| ()),
        Command::Sweep { config, out, metric } => {
            let cfg = ExperimentConfig::load(&config)?;
            run_sweep(&cfg, &parse_metrics(&metric)?, &out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
