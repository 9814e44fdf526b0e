//! Group-rollout off-policy training loop.
//!
//! Each iteration freezes a snapshot of the policy, samples `group_size`
//! responses per selected query, normalizes rewards within each group, and
//! then applies `updates_per_sync` mini-batch updates. Within an iteration
//! the current policy drifts away from the snapshot, so importance ratios
//! leave 1 and the strategy's clipping branches come into play.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{self, DEFAULT_DEGENERATE_EPS};
use crate::coefficients::{branch_coefficient, StrategyConfig};
use crate::environment::Task;
use crate::error::{Error, Result};
use crate::metrics::{self, IterationSummary, StepDiagnostics, StepRecord};
use crate::policy::{softmax_into, TabularPolicy};
use crate::regions::{classify, Region};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Token count that divides each mini-batch gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenNormalization {
    /// Tokens in the mini-batch being applied.
    #[default]
    MiniBatch,
    /// Tokens in the whole rollout.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    /// Queries per iteration.
    pub rollout_batch: usize,
    /// Queries' worth of responses per update.
    pub mini_batch: usize,
    pub updates_per_sync: usize,
    pub learning_rate: f64,
    pub total_iterations: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub strategy: StrategyConfig,
    /// Shuffle all rollout responses across queries before cutting
    /// mini-batches. Without it, a one-query mini-batch only ever touches
    /// parameters no earlier update in the iteration has moved.
    pub shuffle_responses: bool,
    pub token_normalization: TokenNormalization,
    pub degenerate_eps: f64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.15;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            rollout_batch: 16,
            mini_batch: 1,
            updates_per_sync: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            total_iterations: 300,
            grad_clip_norm: 1.0,
            optimizer: Optimizer::default(),
            seed: 42,
            strategy: StrategyConfig::dgpo(1, 2),
            shuffle_responses: true,
            token_normalization: TokenNormalization::MiniBatch,
            degenerate_eps: DEFAULT_DEGENERATE_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if self.rollout_batch == 0 || self.mini_batch == 0 {
            return Err(Error::invalid(
                "rollout_batch and mini_batch must be positive",
            ));
        }
        if !self.rollout_batch.is_multiple_of(self.mini_batch) {
            return Err(Error::invalid(format!(
                "rollout_batch {} is not divisible by mini_batch {}",
                self.rollout_batch, self.mini_batch
            )));
        }
        if self.updates_per_sync == 0 {
            return Err(Error::invalid("updates_per_sync must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::invalid("grad_clip_norm must be non-negative"));
        }
        if !(self.degenerate_eps >= 0.0) {
            return Err(Error::invalid("degenerate_eps must be non-negative"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(eps > 0.0) {
                return Err(Error::invalid(format!(
                    "bad adam parameters ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        self.strategy.validate()
    }

    /// Number of distinct mini-batches one rollout is cut into.
    pub fn num_minibatches(&self) -> usize {
        self.rollout_batch / self.mini_batch
    }
}

/// Parameters of the inverse-square-root learning-rate transfer rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrScaleParams {
    pub eta_base: f64,
    pub n_base: f64,
    pub n_target: f64,
}

/// `eta_base * sqrt(n_base / n_target)`.
pub fn scale_learning_rate(p: &LrScaleParams) -> Result<f64> {
    for (name, v) in [
        ("eta_base", p.eta_base),
        ("n_base", p.n_base),
        ("n_target", p.n_target),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(p.eta_base * (p.n_base / p.n_target).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub query: usize,
    pub tokens: Vec<usize>,
    /// Snapshot log-probabilities, frozen at sampling time.
    pub old_log_probs: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query: usize,
    pub responses: Vec<ResponseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub groups: Vec<Group>,
}

impl Rollout {
    pub fn num_responses(&self) -> usize {
        self.groups.iter().map(|g| g.responses.len()).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.responses)
            .map(|r| r.tokens.len())
            .sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.num_responses();
        if n == 0 {
            return 0.0;
        }
        let correct = self
            .groups
            .iter()
            .flat_map(|g| &g.responses)
            .filter(|r| r.reward > 0.0)
            .count();
        correct as f64 / n as f64
    }

    /// Distinct `(query, position)` contexts, in query order.
    pub fn contexts(&self, horizon: usize) -> Vec<(usize, usize)> {
        let mut queries: Vec<usize> = self.groups.iter().map(|g| g.query).collect();
        queries.sort_unstable();
        queries.dedup();
        queries
            .into_iter()
            .flat_map(|q| (0..horizon).map(move |t| (q, t)))
            .collect()
    }

    /// All responses in group order.
    pub fn responses(&self) -> Vec<&ResponseRecord> {
        self.groups.iter().flat_map(|g| &g.responses).collect()
    }
}

/// Seed for one iteration, derived from the run seed on its own stream.
pub fn iteration_seed(run_seed: u64, iteration: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(iteration as u64);
    rng.random()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Queries for one rollout: a seeded permutation of all queries, cycled if
/// `rollout_batch` exceeds the query count.
fn select_queries(num_queries: usize, rollout_batch: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..num_queries).collect();
    perm.shuffle(&mut stream_rng(seed, 0));
    (0..rollout_batch).map(|i| perm[i % num_queries]).collect()
}

/// Samples `group_size` responses for each selected query from the frozen
/// snapshot. Each response draws from its own seeded stream, so the result
/// does not depend on thread scheduling.
pub fn rollout(
    snapshot: &TabularPolicy,
    task: &Task,
    cfg: &TrainConfig,
    iteration_seed: u64,
) -> Result<Rollout> {
    cfg.validate()?;
    task.check_policy(snapshot)?;
    let queries = select_queries(task.num_queries(), cfg.rollout_batch, iteration_seed);
    let g = cfg.group_size;
    let groups = queries
        .par_iter()
        .enumerate()
        .map(|(slot, &q)| {
            let mut responses = Vec::with_capacity(g);
            let mut rewards = Vec::with_capacity(g);
            for i in 0..g {
                let stream = 1 + (slot * g + i) as u64;
                let s =
                    snapshot.sample_response_with(q, &mut stream_rng(iteration_seed, stream))?;
                let reward = task.reward(q, &s.tokens)?;
                rewards.push(reward);
                responses.push(ResponseRecord {
                    query: q,
                    tokens: s.tokens,
                    old_log_probs: s.old_log_probs,
                    reward,
                    advantage: 0.0,
                });
            }
            let adv = advantage::normalize(&rewards, cfg.degenerate_eps)?;
            for (r, a) in responses.iter_mut().zip(adv) {
                r.advantage = a;
            }
            Ok(Group {
                query: q,
                responses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout { groups })
}

/// Cuts a rollout into `num_minibatches` slices of `mini_batch * group_size`
/// responses, optionally after a seeded shuffle.
pub fn minibatches<'a>(
    rollout: &'a Rollout,
    cfg: &TrainConfig,
    iteration_seed: u64,
) -> Vec<Vec<&'a ResponseRecord>> {
    let mut all = rollout.responses();
    if cfg.shuffle_responses {
        all.shuffle(&mut stream_rng(iteration_seed, u64::MAX));
    }
    let size = cfg.mini_batch * cfg.group_size;
    all.chunks(size).map(<[_]>::to_vec).collect()
}

/// Strategy-weighted gradient of one mini-batch:
/// `(1/norm_tokens) * sum F * A * grad log pi`, with each ratio recomputed as
/// `exp(log pi - log pi_old)` against the frozen log-probability.
pub fn minibatch_gradient(
    policy: &TabularPolicy,
    batch: &[&ResponseRecord],
    strategy: &StrategyConfig,
    norm_tokens: usize,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    strategy.validate()?;
    if norm_tokens == 0 {
        return Err(Error::invalid("token normalizer must be positive"));
    }
    let clip = strategy.region_clip();
    let vocab = policy.vocab_size();
    let mut grad = vec![0.0; policy.num_params()];
    let mut probs = vec![0.0; vocab];
    let mut counts = [0usize; 5];
    let mut ratios = Vec::new();
    let (mut wmin, mut wmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let scale = 1.0 / norm_tokens as f64;
    for r in batch {
        if r.tokens.len() != policy.horizon() || r.old_log_probs.len() != r.tokens.len() {
            return Err(Error::invalid("response does not match policy horizon"));
        }
        for (t, (&v, &old_lp)) in r.tokens.iter().zip(&r.old_log_probs).enumerate() {
            let off = policy.row_offset(r.query, t)?;
            let row = &policy.logits()[off..off + vocab];
            softmax_into(row, &mut probs);
            let cur_lp = policy.log_prob(r.query, t, v)?;
            let w = (cur_lp - old_lp).exp();
            ratios.push(w);
            let region = if w > 0.0 && w.is_finite() {
                classify(w, r.advantage, &clip)?
            } else {
                Region::InBoundary
            };
            counts[region.index()] += 1;
            if r.advantage == 0.0 {
                continue;
            }
            let f = branch_coefficient(strategy, region, w);
            let pw = f / cur_lp.exp();
            wmin = wmin.min(pw);
            wmax = wmax.max(pw);
            let c = f * r.advantage * scale;
            let g = &mut grad[off..off + vocab];
            for (gu, pu) in g.iter_mut().zip(&probs) {
                *gu -= c * pu;
            }
            g[v] += c;
        }
    }
    if wmin > wmax {
        wmin = 0.0;
        wmax = 0.0;
    }
    let grad_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((
        grad,
        StepDiagnostics {
            region_counts: counts,
            ratios,
            wmin,
            wmax,
            grad_norm,
        },
    ))
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Optimizer moments, persistent across the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: Optimizer,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, num_params: usize) -> Self {
        let len = if matches!(kind, Optimizer::Adam { .. }) {
            num_params
        } else {
            0
        };
        Self {
            kind,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One ascent step on `params` along `grad`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powf(self.step as f64);
                let bc2 = 1.0 - beta2.powf(self.step as f64);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] += lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Computes, clips and applies one mini-batch update.
pub fn update_minibatch(
    policy: &mut TabularPolicy,
    batch: &[&ResponseRecord],
    norm_tokens: usize,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepDiagnostics> {
    let (mut grad, diag) = minibatch_gradient(policy, batch, &cfg.strategy, norm_tokens)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            iteration: 0,
            update: 0,
            detail: format!("component {i} is {}", grad[i]),
        });
    }
    clip_grad_norm(&mut grad, cfg.grad_clip_norm);
    state.apply(policy.logits_mut(), &grad, cfg.learning_rate);
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub steps: Vec<StepRecord>,
    pub iterations: Vec<IterationSummary>,
    /// The non-finite event that stopped the run, if any.
    pub collapse: Option<String>,
}

/// Trains from the uniform policy.
pub fn train_run(task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let policy = TabularPolicy::uniform(task.num_queries(), task.horizon(), task.vocab_size())?;
    train_run_from(task, cfg, policy)
}

pub fn train_run_from(
    task: &Task,
    cfg: &TrainConfig,
    mut policy: TabularPolicy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.check_policy(&policy)?;
    let mut state = OptimizerState::new(cfg.optimizer, policy.num_params());
    let mut steps = Vec::with_capacity(cfg.total_iterations * cfg.updates_per_sync);
    let mut iterations = Vec::with_capacity(cfg.total_iterations);
    for iter in 0..cfg.total_iterations {
        let seed = iteration_seed(cfg.seed, iter);
        let snapshot = policy.clone();
        let ro = rollout(&snapshot, task, cfg, seed)?;
        let contexts = ro.contexts(task.horizon());
        let acc = ro.accuracy();
        let batches = minibatches(&ro, cfg, seed);
        let rollout_tokens = ro.num_tokens();
        for update in 0..cfg.updates_per_sync {
            let batch = &batches[update % batches.len()];
            let entropy = policy.entropy(&contexts)?;
            let norm_tokens = match cfg.token_normalization {
                TokenNormalization::MiniBatch => batch.iter().map(|r| r.tokens.len()).sum(),
                TokenNormalization::Rollout => rollout_tokens,
            };
            let outcome = if entropy.is_nan() {
                Err(Error::NonFiniteGradient {
                    iteration: iter,
                    update,
                    detail: "entropy is NaN".into(),
                })
            } else {
                update_minibatch(&mut policy, batch, norm_tokens, &mut state, cfg)
            };
            match outcome {
                Ok(diag) => steps.push(metrics::record_step(iter, update, entropy, acc, &diag)),
                Err(Error::NonFiniteGradient { detail, .. }) => {
                    steps.push(metrics::collapse_record(iter, update, entropy, acc));
                    iterations.push(IterationSummary {
                        iter,
                        entropy,
                        rollout_acc: acc,
                        expected_acc: task.expected_accuracy(&policy)?,
                        collapse: true,
                    });
                    let msg = Error::NonFiniteGradient {
                        iteration: iter,
                        update,
                        detail,
                    }
                    .to_string();
                    return Ok(TrainOutcome {
                        policy,
                        steps,
                        iterations,
                        collapse: Some(msg),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        iterations.push(IterationSummary {
            iter,
            entropy: policy.entropy(&contexts)?,
            rollout_acc: acc,
            expected_acc: task.expected_accuracy(&policy)?,
            collapse: false,
        });
    }
    Ok(TrainOutcome {
        policy,
        steps,
        iterations,
        collapse: None,
    })
}
