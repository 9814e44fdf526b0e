//! `cliplab` command line: `train`, `bias-check`, `landscape`, `sweep`.
//!
//! Exit codes: 0 success, 1 invalid input or I/O failure, 2 some training
//! run collapsed, 3 a bias-check relation failed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::bias_lab::suite::{run_suite, SuiteConfig};
use crate::coefficients::{landscape_grid, write_landscape_csv, AdvantageSign, StrategyConfig};
use crate::config::ExperimentConfig;
use crate::environment::{build_task, Task};
use crate::error::{Error, Result};
use crate::metrics::{write_jsonl, write_steps_csv, Manifest, ManifestEntry};
use crate::trainer::{train_run, TrainConfig, TrainOutcome};

/// Overrides `run.output_dir`; `--output` overrides both.
pub const OUTPUT_ROOT_ENV: &str = "CLIPLAB_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_COLLAPSE: i32 = 2;
pub const EXIT_BIAS_FAIL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "cliplab",
    version,
    about = "Clipped importance-sampling policy-gradient lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignArg {
    /// Negative advantage below the trust region, positive above it.
    Auto,
    Pos,
    Neg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (strategy, seed) pair on the synthetic task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces `strategy.kinds`; repeatable or comma-separated.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        /// Replaces `run.seeds`; repeatable or comma-separated.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Check the bias orderings, closed forms and limits.
    BiasCheck {
        #[arg(long, default_value_t = 100.0)]
        gamma: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tabulate `F` and `W` over a ratio grid, one CSV per strategy.
    Landscape {
        #[arg(long, value_delimiter = ',', default_value = "grpo,gppo,dgpo")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        old_prob: f64,
        #[arg(long, value_enum, default_value_t = SignArg::Auto)]
        sign: SignArg,
        #[arg(long, default_value_t = 401)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        min: f64,
        #[arg(long, default_value_t = 2.0)]
        max: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train DGPO for every (n, m) in {1, 2}^2.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            config,
            strategy,
            seed,
            output,
            iterations,
            lr,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if !strategy.is_empty() {
                cfg.strategy.kinds = strategy;
            }
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if let Some(it) = iterations {
                cfg.train.total_iterations = it;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            cfg.output_dir = output_root(output, &cfg);
            cfg.validate()?;
            let jobs: Vec<(String, StrategyConfig)> = cfg
                .strategy
                .kinds
                .iter()
                .map(|k| Ok((k.trim().to_ascii_lowercase(), cfg.strategy.build(k)?)))
                .collect::<Result<_>>()?;
            run_jobs(&cfg, &jobs)
        }
        Command::Sweep {
            config,
            seed,
            output,
            iterations,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if let Some(it) = iterations {
                cfg.train.total_iterations = it;
            }
            cfg.output_dir = output_root(output, &cfg);
            cfg.strategy.kinds = vec!["dgpo".into()];
            cfg.validate()?;
            let mut jobs = Vec::new();
            for n in 1..=2 {
                for m in 1..=2 {
                    let s = StrategyConfig::Dgpo {
                        clip: cfg.strategy.clip,
                        n,
                        m,
                    };
                    jobs.push((format!("dgpo-n{n}-m{m}"), s));
                }
            }
            run_jobs(&cfg, &jobs)
        }
        Command::BiasCheck {
            gamma,
            seed,
            output,
        } => {
            let cfg = SuiteConfig {
                gamma,
                seed,
                ..SuiteConfig::default()
            };
            let out = run_suite(&cfg)?;
            print!("{}", out.summary(gamma));
            let dir = output.unwrap_or_else(|| env_root().join("bias-check"));
            out.write(&dir, gamma)?;
            eprintln!("wrote {}", dir.display());
            Ok(if out.passed() {
                EXIT_OK
            } else {
                EXIT_BIAS_FAIL
            })
        }
        Command::Landscape {
            strategies,
            old_prob,
            sign,
            points,
            min,
            max,
            output,
        } => {
            let grid = ratio_grid(min, max, points)?;
            let dir = output.unwrap_or_else(|| env_root().join("landscape"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for name in &strategies {
                let s = StrategyConfig::from_name(name)?;
                let rows = match sign {
                    SignArg::Pos => landscape_grid(&[s], &grid, AdvantageSign::Positive, old_prob)?,
                    SignArg::Neg => landscape_grid(&[s], &grid, AdvantageSign::Negative, old_prob)?,
                    SignArg::Auto => {
                        let neg = landscape_grid(&[s], &grid, AdvantageSign::Negative, old_prob)?;
                        let pos = landscape_grid(&[s], &grid, AdvantageSign::Positive, old_prob)?;
                        neg.into_iter()
                            .zip(pos)
                            .map(|(n, p)| if n.ratio < 1.0 { n } else { p })
                            .collect()
                    }
                };
                let path = dir.join(format!("landscape_{}.csv", s.name()));
                write_landscape_csv(&rows, &path)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(EXIT_OK)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn env_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn output_root(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

/// Evenly spaced ratios on `[min, max]` with the default trust-region
/// boundaries 0.8 and 1.2 inserted when they fall inside.
pub fn ratio_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && max.is_finite()) || points < 2 {
        return Err(Error::invalid(format!(
            "need 0 < min < max and points >= 2, got [{min}, {max}] with {points}"
        )));
    }
    let step = (max - min) / (points - 1) as f64;
    let mut g: Vec<f64> = (0..points).map(|i| min + step * i as f64).collect();
    g.extend([0.8, 1.2].into_iter().filter(|&b| b > min && b < max));
    g.sort_by(f64::total_cmp);
    g.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(g)
}

/// Writes the task once, then trains each (label, strategy, seed) in
/// parallel. Returns [`EXIT_COLLAPSE`] when any run collapsed.
fn run_jobs(cfg: &ExperimentConfig, jobs: &[(String, StrategyConfig)]) -> Result<i32> {
    let task = build_task(&cfg.task)?;
    let root = &cfg.output_dir;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    task.save(&root.join("task.json"))?;
    let work: Vec<(&String, StrategyConfig, u64)> = jobs
        .iter()
        .flat_map(|(label, s)| cfg.seeds.iter().map(move |&seed| (label, *s, seed)))
        .collect();
    let results: Vec<Result<(String, TrainOutcome)>> = work
        .par_iter()
        .map(|&(label, strategy, seed)| {
            let dir = root.join(label).join(format!("seed-{seed}"));
            let train = TrainConfig {
                strategy,
                seed,
                ..cfg.train.clone()
            };
            let out = train_run(&task, &train)?;
            let resolved = ExperimentConfig {
                train: train.clone(),
                strategy: cfg.strategy.pinned_to(&strategy),
                seeds: vec![seed],
                ..cfg.clone()
            };
            write_run(&dir, &task, &resolved, &out)?;
            Ok((format!("{label} seed {seed}"), out))
        })
        .collect();
    let mut collapsed = false;
    for r in results {
        let (name, out) = r?;
        let last = out.iterations.last();
        match &out.collapse {
            Some(why) => {
                collapsed = true;
                println!("{name}: collapsed ({why})");
            }
            None => println!(
                "{name}: expected_acc {:.4} entropy {:.4}",
                last.map_or(f64::NAN, |s| s.expected_acc),
                last.map_or(f64::NAN, |s| s.entropy)
            ),
        }
    }
    Ok(if collapsed { EXIT_COLLAPSE } else { EXIT_OK })
}

fn write_run(dir: &Path, task: &Task, cfg: &ExperimentConfig, out: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&out.steps, &dir.join("steps.jsonl"))?;
    write_steps_csv(&out.steps, &dir.join("steps.csv"))?;
    write_jsonl(&out.iterations, &dir.join("iterations.jsonl"))?;
    task.check_policy(&out.policy)?;
    out.policy.save(&dir.join("policy.json"))?;
    let resolved = dir.join("resolved.cfg");
    std::fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    let entry = |path: &str, kind: &str| ManifestEntry {
        path: path.into(),
        kind: kind.into(),
    };
    Manifest::new(vec![
        entry("steps.jsonl", "steps"),
        entry("steps.csv", "steps"),
        entry("iterations.jsonl", "iterations"),
        entry("policy.json", "checkpoint"),
        entry("resolved.cfg", "config"),
        entry("../../task.json", "task"),
    ])
    .write(&dir.join("manifest.json"))
}
