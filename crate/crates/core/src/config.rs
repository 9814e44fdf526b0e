//! Experiment config files: flat `key = value` lines with dotted section
//! prefixes.
//!
//! ```text
//! # comments and blank lines are ignored
//! task.num_queries = 16
//! train.learning_rate = 0.15
//! strategy.kinds = dgpo, grpo
//! strategy.n = 1
//! run.seeds = 42, 43
//! ```
//!
//! Every key is optional and defaults to [`ExperimentConfig::default`].
//! Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::coefficients::{
    StrategyConfig, DEFAULT_ASPO_EPS_HIGH_PRIME, DEFAULT_ASPO_EPS_LOW_PRIME, DEFAULT_CE_BETA1,
    DEFAULT_CE_BETA2,
};
use crate::environment::TaskSpec;
use crate::error::{Error, Result};
use crate::regions::ClipConfig;
use crate::trainer::{Optimizer, TokenNormalization, TrainConfig};

/// Hyperparameters shared by every strategy listed in `strategy.kinds`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub kinds: Vec<String>,
    pub clip: ClipConfig,
    pub n: u32,
    pub m: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_low_prime: f64,
    pub eps_high_prime: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            kinds: vec!["dgpo".into()],
            clip: ClipConfig::default(),
            n: 1,
            m: 2,
            beta1: DEFAULT_CE_BETA1,
            beta2: DEFAULT_CE_BETA2,
            eps_low_prime: DEFAULT_ASPO_EPS_LOW_PRIME,
            eps_high_prime: DEFAULT_ASPO_EPS_HIGH_PRIME,
        }
    }
}

impl StrategyParams {
    /// Builds the configured strategy `kind` from the shared parameters.
    pub fn build(&self, kind: &str) -> Result<StrategyConfig> {
        let clip = self.clip;
        let s = match kind.trim().to_ascii_lowercase().as_str() {
            "truepg" | "true-pg" | "pg" => StrategyConfig::TruePg,
            "grpo" => StrategyConfig::Grpo { clip },
            "cispo" => StrategyConfig::Cispo { clip },
            "gppo" => StrategyConfig::Gppo { clip },
            "ce-gppo" | "cegppo" | "ce" => StrategyConfig::CeGppo {
                clip,
                beta1: self.beta1,
                beta2: self.beta2,
            },
            "aspo" => StrategyConfig::Aspo {
                clip,
                eps_low_prime: self.eps_low_prime,
                eps_high_prime: self.eps_high_prime,
            },
            "dgpo" => StrategyConfig::Dgpo {
                clip,
                n: self.n,
                m: self.m,
            },
            other => return Err(Error::invalid(format!("unknown strategy `{other}`"))),
        };
        s.validate()?;
        Ok(s)
    }

    /// Parameters that rebuild exactly `s`; fields `s` does not use are
    /// taken from `self`.
    pub fn pinned_to(&self, s: &StrategyConfig) -> Self {
        let mut out = Self {
            kinds: vec![s.name().to_string()],
            clip: s.clip().unwrap_or(self.clip),
            ..self.clone()
        };
        match *s {
            StrategyConfig::CeGppo { beta1, beta2, .. } => {
                out.beta1 = beta1;
                out.beta2 = beta2;
            }
            StrategyConfig::Aspo {
                eps_low_prime,
                eps_high_prime,
                ..
            } => {
                out.eps_low_prime = eps_low_prime;
                out.eps_high_prime = eps_high_prime;
            }
            StrategyConfig::Dgpo { n, m, .. } => {
                out.n = n;
                out.m = m;
            }
            _ => {}
        }
        out
    }

    pub fn build_all(&self) -> Result<Vec<StrategyConfig>> {
        self.kinds.iter().map(|k| self.build(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Training settings; `train.strategy` is replaced per run.
    pub train: TrainConfig,
    pub strategy: StrategyParams,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            strategy: StrategyParams::default(),
            seeds: vec![42],
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}`: cannot parse `{v}`"),
    })
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config {
            line,
            msg: format!("`{key}` needs at least one value"),
        });
    }
    Ok(items)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let (mut beta1, mut beta2, mut eps) = (0.9, 0.95, 1e-8);
        let mut optimizer = "adam".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            let t = &mut cfg.train;
            let s = &mut cfg.strategy;
            match key {
                "task.num_queries" => cfg.task.num_queries = parse_value(line, key, v)?,
                "task.vocab_size" => cfg.task.vocab_size = parse_value(line, key, v)?,
                "task.horizon" => cfg.task.horizon = parse_value(line, key, v)?,
                "task.answers_per_query" => cfg.task.answers_per_query = parse_value(line, key, v)?,
                "task.seed" => cfg.task.seed = parse_value(line, key, v)?,
                "train.group_size" => t.group_size = parse_value(line, key, v)?,
                "train.rollout_batch" => t.rollout_batch = parse_value(line, key, v)?,
                "train.mini_batch" => t.mini_batch = parse_value(line, key, v)?,
                "train.updates_per_sync" => t.updates_per_sync = parse_value(line, key, v)?,
                "train.learning_rate" => t.learning_rate = parse_value(line, key, v)?,
                "train.total_iterations" => t.total_iterations = parse_value(line, key, v)?,
                "train.grad_clip_norm" => t.grad_clip_norm = parse_value(line, key, v)?,
                "train.optimizer" => optimizer = v.to_ascii_lowercase(),
                "train.adam_beta1" => beta1 = parse_value(line, key, v)?,
                "train.adam_beta2" => beta2 = parse_value(line, key, v)?,
                "train.adam_eps" => eps = parse_value(line, key, v)?,
                "train.shuffle_responses" => t.shuffle_responses = parse_value(line, key, v)?,
                "train.token_normalization" => {
                    t.token_normalization = match v {
                        "mini-batch" | "minibatch" => TokenNormalization::MiniBatch,
                        "rollout" => TokenNormalization::Rollout,
                        _ => {
                            return Err(Error::Config {
                                line,
                                msg: format!("`{key}` must be mini-batch or rollout, got `{v}`"),
                            })
                        }
                    }
                }
                "train.degenerate_eps" => t.degenerate_eps = parse_value(line, key, v)?,
                "strategy.kinds" => s.kinds = parse_list(line, key, v)?,
                "strategy.eps_low" => s.clip.eps_low = parse_value(line, key, v)?,
                "strategy.eps_high" => s.clip.eps_high = parse_value(line, key, v)?,
                "strategy.n" => s.n = parse_value(line, key, v)?,
                "strategy.m" => s.m = parse_value(line, key, v)?,
                "strategy.beta1" => s.beta1 = parse_value(line, key, v)?,
                "strategy.beta2" => s.beta2 = parse_value(line, key, v)?,
                "strategy.eps_low_prime" => s.eps_low_prime = parse_value(line, key, v)?,
                "strategy.eps_high_prime" => s.eps_high_prime = parse_value(line, key, v)?,
                "run.seeds" => cfg.seeds = parse_list(line, key, v)?,
                "run.output_dir" => cfg.output_dir = PathBuf::from(v),
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        cfg.train.optimizer = match optimizer.as_str() {
            "adam" => Optimizer::Adam { beta1, beta2, eps },
            "sgd" => Optimizer::Sgd,
            other => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("train.optimizer must be adam or sgd, got `{other}`"),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks every strategy and the training settings with each of them.
    pub fn validate(&self) -> Result<()> {
        for s in self.strategy.build_all()? {
            TrainConfig {
                strategy: s,
                ..self.train.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    /// Canonical text listing every key, suitable for [`Self::parse`].
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let t = &self.task;
        let _ = writeln!(o, "task.num_queries = {}", t.num_queries);
        let _ = writeln!(o, "task.vocab_size = {}", t.vocab_size);
        let _ = writeln!(o, "task.horizon = {}", t.horizon);
        let _ = writeln!(o, "task.answers_per_query = {}", t.answers_per_query);
        let _ = writeln!(o, "task.seed = {}", t.seed);
        let r = &self.train;
        let _ = writeln!(o, "train.group_size = {}", r.group_size);
        let _ = writeln!(o, "train.rollout_batch = {}", r.rollout_batch);
        let _ = writeln!(o, "train.mini_batch = {}", r.mini_batch);
        let _ = writeln!(o, "train.updates_per_sync = {}", r.updates_per_sync);
        let _ = writeln!(o, "train.learning_rate = {}", r.learning_rate);
        let _ = writeln!(o, "train.total_iterations = {}", r.total_iterations);
        let _ = writeln!(o, "train.grad_clip_norm = {}", r.grad_clip_norm);
        match r.optimizer {
            Optimizer::Sgd => {
                let _ = writeln!(o, "train.optimizer = sgd");
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let _ = writeln!(o, "train.optimizer = adam");
                let _ = writeln!(o, "train.adam_beta1 = {beta1}");
                let _ = writeln!(o, "train.adam_beta2 = {beta2}");
                let _ = writeln!(o, "train.adam_eps = {eps:e}");
            }
        }
        let _ = writeln!(o, "train.shuffle_responses = {}", r.shuffle_responses);
        let norm = match r.token_normalization {
            TokenNormalization::MiniBatch => "mini-batch",
            TokenNormalization::Rollout => "rollout",
        };
        let _ = writeln!(o, "train.token_normalization = {norm}");
        let _ = writeln!(o, "train.degenerate_eps = {:e}", r.degenerate_eps);
        let s = &self.strategy;
        let _ = writeln!(o, "strategy.kinds = {}", s.kinds.join(", "));
        let _ = writeln!(o, "strategy.eps_low = {}", s.clip.eps_low);
        let _ = writeln!(o, "strategy.eps_high = {}", s.clip.eps_high);
        let _ = writeln!(o, "strategy.n = {}", s.n);
        let _ = writeln!(o, "strategy.m = {}", s.m);
        let _ = writeln!(o, "strategy.beta1 = {}", s.beta1);
        let _ = writeln!(o, "strategy.beta2 = {}", s.beta2);
        let _ = writeln!(o, "strategy.eps_low_prime = {}", s.eps_low_prime);
        let _ = writeln!(o, "strategy.eps_high_prime = {}", s.eps_high_prime);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(o, "run.seeds = {}", seeds.join(", "));
        let _ = writeln!(o, "run.output_dir = {}", self.output_dir.display());
        o
    }
}
