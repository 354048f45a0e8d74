//! Sectioned `key = value` experiment configuration.
//!
//! ```text
//! seed = 1
//!
//! [task]
//! name = gaussian_linear
//!
//! [train]
//! budget = 10000
//! total_iters = 30000
//!
//! [experiment]
//! budgets = 10000, 20000, 30000
//! runs = 5
//! ```
//!
//! Keys outside `[task]`, `[train]` and `seed` are optional; architecture and
//! optimizer settings default to the per-task table. Unknown sections or keys,
//! duplicates and missing required keys are errors carrying a line number.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flowcore::TimeSchedule;
use crate::sampler::{Solver, SolverConfig};
use crate::tasks::Task;
use crate::trainer::TrainConfig;

const SECTIONS: [&str; 6] = ["", "task", "train", "mask", "experiment", "solver"];

const KEYS: &[(&str, &str)] = &[
    ("", "seed"),
    ("task", "name"),
    ("train", "budget"),
    ("train", "hidden"),
    ("train", "blocks"),
    ("train", "time_embed_dim"),
    ("train", "ff_mult"),
    ("train", "batch_size"),
    ("train", "peak_lr"),
    ("train", "warmup_steps"),
    ("train", "total_iters"),
    ("train", "adam_beta1"),
    ("train", "adam_beta2"),
    ("train", "adam_eps"),
    ("train", "clip_norm"),
    ("train", "ema_decay"),
    ("train", "val_every"),
    ("train", "patience"),
    ("train", "time_schedule"),
    ("train", "lambda_theta"),
    ("mask", "alpha"),
    ("mask", "beta"),
    ("mask", "rate_a"),
    ("mask", "rate_b"),
    ("experiment", "budgets"),
    ("experiment", "runs"),
    ("experiment", "observations"),
    ("experiment", "samples"),
    ("experiment", "seeds"),
    ("solver", "method"),
    ("solver", "steps"),
    ("solver", "rtol"),
    ("solver", "atol"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Training settings; `train.budget` is the budget used by `train`.
    pub train: TrainConfig,
    pub budgets: Vec<usize>,
    pub runs: usize,
    pub observations: usize,
    pub samples: usize,
    /// One seed per run.
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
}

struct Entry {
    value: String,
    line: usize,
}

struct Parsed {
    entries: HashMap<(String, String), Entry>,
    section_lines: HashMap<String, usize>,
    last_line: usize,
}

impl Parsed {
    fn take<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.entries.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| Error::Config {
                line: e.line,
                msg: format!("cannot parse {:?} for {}", e.value, qualified(section, key)),
            }),
        }
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.entries.get(&(section.to_string(), key.to_string())).map_or(0, |e| e.line)
    }

    fn require<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T> {
        let line = self.section_lines.get(section).copied().unwrap_or(self.last_line + 1);
        self.take(section, key)?.ok_or_else(|| Error::Config {
            line,
            msg: format!("missing required key {}", qualified(section, key)),
        })
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        let line = self.line_of(section, key);
        let Some(raw) = self.take::<String>(section, key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| Error::Config { line, msg: format!("cannot parse list {raw:?} for {}", qualified(section, key)) })
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn tokenize(text: &str) -> Result<Parsed> {
    let mut entries = HashMap::new();
    let mut section_lines = HashMap::new();
    let mut section = String::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !SECTIONS.contains(&name.as_str()) || name.is_empty() {
                return Err(Error::Config { line, msg: format!("unknown section [{name}]") });
            }
            if section_lines.insert(name.clone(), line).is_some() {
                return Err(Error::Config { line, msg: format!("section [{name}] appears twice") });
            }
            section = name;
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config { line, msg: format!("expected key = value, got {content:?}") });
        };
        let key = key.trim().to_string();
        if !KEYS.contains(&(section.as_str(), key.as_str())) {
            return Err(Error::Config { line, msg: format!("unknown key {}", qualified(&section, &key)) });
        }
        let slot = (section.clone(), key.clone());
        if entries.contains_key(&slot) {
            return Err(Error::Config { line, msg: format!("duplicate key {}", qualified(&section, &key)) });
        }
        entries.insert(slot, Entry { value: value.trim().to_string(), line });
    }
    Ok(Parsed { entries, section_lines, last_line })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = tokenize(text)?;
        let seed: u64 = p.require("", "seed")?;
        let name_line = p.line_of("task", "name");
        let name: String = p.require("task", "name")?;
        let task = Task::parse(&name).map_err(|e| Error::Config { line: name_line, msg: e.to_string() })?;
        let budget: usize = p.require("train", "budget")?;

        let mut t = TrainConfig::for_task(task, budget, seed);
        macro_rules! opt {
            ($field:expr, $section:literal, $key:literal) => {
                if let Some(v) = p.take($section, $key)? {
                    $field = v;
                }
            };
        }
        opt!(t.hidden, "train", "hidden");
        opt!(t.blocks, "train", "blocks");
        opt!(t.time_embed_dim, "train", "time_embed_dim");
        opt!(t.ff_mult, "train", "ff_mult");
        opt!(t.batch_size, "train", "batch_size");
        opt!(t.peak_lr, "train", "peak_lr");
        opt!(t.warmup_steps, "train", "warmup_steps");
        opt!(t.total_iters, "train", "total_iters");
        opt!(t.adam.beta1, "train", "adam_beta1");
        opt!(t.adam.beta2, "train", "adam_beta2");
        opt!(t.adam.eps, "train", "adam_eps");
        opt!(t.clip_norm, "train", "clip_norm");
        opt!(t.ema_decay, "train", "ema_decay");
        opt!(t.val_every, "train", "val_every");
        opt!(t.patience, "train", "patience");
        opt!(t.mask.alpha, "mask", "alpha");
        opt!(t.mask.beta, "mask", "beta");
        opt!(t.mask.beta_shape.0, "mask", "rate_a");
        opt!(t.mask.beta_shape.1, "mask", "rate_b");
        let line = p.line_of("train", "time_schedule");
        if let Some(s) = p.take::<String>("train", "time_schedule")? {
            t.time_schedule = TimeSchedule::parse(&s).map_err(|e| Error::Config { line, msg: e.to_string() })?;
        }
        let line = p.line_of("train", "lambda_theta");
        if let Some(s) = p.take::<String>("train", "lambda_theta")? {
            t.lambda_theta = match s.as_str() {
                "auto" => None,
                v => Some(v.parse().map_err(|_| Error::Config { line, msg: format!("cannot parse {v:?} for train.lambda_theta") })?),
            };
        }

        let mut solver = SolverConfig::evaluation();
        let line = p.line_of("solver", "method");
        if let Some(s) = p.take::<String>("solver", "method")? {
            solver.method = Solver::parse(&s).map_err(|e| Error::Config { line, msg: e.to_string() })?;
        }
        opt!(solver.steps, "solver", "steps");
        opt!(solver.rtol, "solver", "rtol");
        opt!(solver.atol, "solver", "atol");

        let budgets = p.list("experiment", "budgets")?.unwrap_or_else(|| vec![10_000, 20_000, 30_000]);
        let runs = p.take("experiment", "runs")?.unwrap_or(5);
        let observations = p.take("experiment", "observations")?.unwrap_or(10);
        let samples = p.take("experiment", "samples")?.unwrap_or(10_000);
        let seeds_line = p.line_of("experiment", "seeds");
        let seeds = p.list("experiment", "seeds")?.unwrap_or_else(|| (0..runs as u64).map(|r| seed + r).collect());
        debug_assert!(p.entries.is_empty(), "every known key is consumed");

        if seeds.len() != runs {
            return Err(Error::Config { line: seeds_line, msg: format!("{} seeds for {runs} runs", seeds.len()) });
        }
        let cfg = Self { train: t, budgets, runs, observations, samples, seeds, solver };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Config { line: 0, msg };
        self.train.validate().map_err(|e| err(e.to_string()))?;
        self.solver.validate().map_err(|e| err(e.to_string()))?;
        if self.budgets.contains(&0) || self.budgets.is_empty() {
            return Err(err("experiment.budgets must be positive".into()));
        }
        if self.runs == 0 || self.observations == 0 || self.samples == 0 {
            return Err(err("runs, observations and samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Training config for one `(budget, run)` cell of the sweep.
    pub fn cell(&self, budget: usize, run: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.budget = budget;
        t.seed = self.seeds[run];
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3\n[task]\nname = two_moons\n[train]\nbudget = 500\n";

    fn line_of(err: Error) -> usize {
        match err {
            Error::Config { line, .. } => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_task_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::for_task(Task::TwoMoons, 500, 3));
        assert_eq!(c.budgets, vec![10_000, 20_000, 30_000]);
        assert_eq!(c.seeds, vec![3, 4, 5, 6, 7]);
        assert_eq!(c.solver, SolverConfig::evaluation());
    }

    #[test]
    fn overrides_and_comments() {
        let text = format!(
            "{MINIMAL}hidden = 32 # narrow\ntime_schedule = ushaped\nlambda_theta = 2.5\n[solver]\nmethod = rk4\nsteps = 5\n[experiment]\nruns = 2\nseeds = 10, 20\nbudgets = 100\n[mask]\nalpha = 0.2\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.train.hidden, 32);
        assert_eq!(c.train.time_schedule, TimeSchedule::UShaped);
        assert_eq!(c.train.lambda_theta, Some(2.5));
        assert_eq!(c.solver, SolverConfig::fixed(Solver::Rk4, 5));
        assert_eq!(c.seeds, vec![10, 20]);
        assert_eq!(c.cell(100, 1).seed, 20);
        assert_eq!(c.train.mask.alpha, 0.2);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = format!("{MINIMAL}learning_rate = 0.1\n");
        assert_eq!(line_of(ExperimentConfig::parse(&text).unwrap_err()), 6);
        assert_eq!(line_of(ExperimentConfig::parse("seed = 1\n[model]\n").unwrap_err()), 2);
    }

    #[test]
    fn missing_required_key_reports_section_line() {
        let text = "seed = 3\n[task]\nname = two_moons\n[train]\nhidden = 10\n";
        assert_eq!(line_of(ExperimentConfig::parse(text).unwrap_err()), 4);
        // absent section: one past the last line
        let text = "seed = 3\n[task]\nname = two_moons\n";
        assert_eq!(line_of(ExperimentConfig::parse(text).unwrap_err()), 4);
        let text = "[task]\nname = two_moons\n[train]\nbudget = 5\n";
        assert_eq!(line_of(ExperimentConfig::parse(text).unwrap_err()), 5);
    }

    #[test]
    fn bad_values_are_rejected() {
        let text = format!("{MINIMAL}peak_lr = NaN\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { .. })));
        let text = format!("{MINIMAL}blocks = three\n");
        assert_eq!(line_of(ExperimentConfig::parse(&text).unwrap_err()), 6);
        let text = format!("{MINIMAL}budget = 7\n");
        assert_eq!(line_of(ExperimentConfig::parse(&text).unwrap_err()), 6);
        let text = "seed = 1\n[task]\nname = slcp\n[train]\nbudget = 5\n";
        assert_eq!(line_of(ExperimentConfig::parse(text).unwrap_err()), 3);
    }
}
