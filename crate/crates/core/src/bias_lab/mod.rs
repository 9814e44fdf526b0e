//! Exact bias oracles.
//!
//! [`EnumInstance`] holds a behaviour policy, a current policy and an
//! advantage for every possible response. Region gradients are computed by
//! enumerating all responses, weighting each by its behaviour probability;
//! no sampling is involved. Bias is the L2 distance of a strategy's region
//! gradient from the unclipped importance-sampled gradient on that region.

pub mod analytic;
pub mod expert;
pub mod suite;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{branch_coefficient, StrategyConfig};
use crate::environment::{decode_sequence, response_space};
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::regions::{classify, ClipConfig, Region};

pub use analytic::{
    analytic_bias, limit_ratio, quadrature_bias, AnalyticBiasParams, AnalyticStrategy, LimitPair,
};
pub use expert::{expert_equivalence_check, ExpertSequence};

/// Largest response space an instance may enumerate.
pub const MAX_RESPONSES: u128 = 100_000;

/// Exact tolerance for equality and zero cells.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EnumInstance {
    old: TabularPolicy,
    cur: TabularPolicy,
    /// `advantages[q][code]`, with responses indexed by their base-vocab code.
    advantages: Vec<Vec<f64>>,
    clip: ClipConfig,
}

impl EnumInstance {
    /// Responses in `positive[q]` get advantage `pos_value`; all others
    /// `neg_value`.
    pub fn with_positive_sets(
        old: TabularPolicy,
        cur: TabularPolicy,
        positive: &[Vec<Vec<usize>>],
        pos_value: f64,
        neg_value: f64,
        clip: ClipConfig,
    ) -> Result<Self> {
        let space = Self::check_shapes(&old, &cur, &clip)?;
        if positive.len() != old.num_queries() {
            return Err(Error::invalid(format!(
                "{} positive sets for {} queries",
                positive.len(),
                old.num_queries()
            )));
        }
        let (v, h) = (old.vocab_size(), old.horizon());
        let advantages = positive
            .iter()
            .map(|set| {
                (0..space)
                    .map(|code| {
                        let seq = decode_sequence(code as u128, v, h);
                        if set.contains(&seq) {
                            pos_value
                        } else {
                            neg_value
                        }
                    })
                    .collect()
            })
            .collect();
        Self::with_advantages(old, cur, advantages, clip)
    }

    /// Explicit per-response advantages, `advantages[q][code]`.
    pub fn with_advantages(
        old: TabularPolicy,
        cur: TabularPolicy,
        advantages: Vec<Vec<f64>>,
        clip: ClipConfig,
    ) -> Result<Self> {
        let space = Self::check_shapes(&old, &cur, &clip)?;
        if advantages.len() != old.num_queries() || advantages.iter().any(|a| a.len() != space) {
            return Err(Error::invalid(format!(
                "advantages must be {} x {space}",
                old.num_queries()
            )));
        }
        if advantages.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::invalid("advantages must be finite"));
        }
        Ok(Self {
            old,
            cur,
            advantages,
            clip,
        })
    }

    fn check_shapes(old: &TabularPolicy, cur: &TabularPolicy, clip: &ClipConfig) -> Result<usize> {
        clip.validate()?;
        if (old.num_queries(), old.horizon(), old.vocab_size())
            != (cur.num_queries(), cur.horizon(), cur.vocab_size())
        {
            return Err(Error::invalid(
                "behaviour and current policies differ in shape",
            ));
        }
        match response_space(old.vocab_size(), old.horizon()) {
            Some(s) if s <= MAX_RESPONSES => Ok(s as usize),
            _ => Err(Error::Capacity(format!(
                "vocab {} ^ horizon {} exceeds {MAX_RESPONSES} responses",
                old.vocab_size(),
                old.horizon()
            ))),
        }
    }

    /// Random instance: behaviour logits in `[-1, 1]`, current logits
    /// perturbed by up to `±spread`, and a random half of the responses of
    /// each query marked positive (advantage `+1`, others `-1`). Seeds are
    /// advanced until all five regions hold at least one token.
    pub fn random(
        num_queries: usize,
        horizon: usize,
        vocab_size: usize,
        spread: f64,
        clip: ClipConfig,
        seed: u64,
    ) -> Result<Self> {
        for attempt in 0..1000u64 {
            let s = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
            let old = TabularPolicy::random(num_queries, horizon, vocab_size, 1.0, s)?;
            let noise =
                TabularPolicy::random(num_queries, horizon, vocab_size, spread, s ^ 0xA5A5)?;
            let logits = old
                .logits()
                .iter()
                .zip(noise.logits())
                .map(|(a, b)| a + b)
                .collect();
            let cur = TabularPolicy::from_logits(num_queries, horizon, vocab_size, logits)?;
            let space = match response_space(vocab_size, horizon) {
                Some(x) if x <= MAX_RESPONSES => x as usize,
                _ => return Err(Error::Capacity("random instance too large".into())),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let positive: Vec<Vec<Vec<usize>>> = (0..num_queries)
                .map(|_| {
                    index::sample(&mut rng, space, space / 2)
                        .into_iter()
                        .map(|c| decode_sequence(c as u128, vocab_size, horizon))
                        .collect()
                })
                .collect();
            let inst = Self::with_positive_sets(old, cur, &positive, 1.0, -1.0, clip)?;
            if inst.region_token_counts().iter().all(|&c| c > 0) {
                return Ok(inst);
            }
        }
        Err(Error::invalid("no seed populated all five regions"))
    }

    pub fn old(&self) -> &TabularPolicy {
        &self.old
    }

    pub fn cur(&self) -> &TabularPolicy {
        &self.cur
    }

    pub fn clip(&self) -> ClipConfig {
        self.clip
    }

    pub fn num_responses(&self) -> usize {
        self.advantages.first().map_or(0, Vec::len)
    }

    /// Tokens in each region, summed over every enumerated response.
    pub fn region_token_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        self.for_each_token(|_, _, _, _, _, region| counts[region.index()] += 1);
        counts
    }

    /// Calls `f(query, position, token, weight, advantage, region)` for every
    /// token of every response, where `weight` is the behaviour probability
    /// of the whole response.
    fn for_each_token(&self, mut f: impl FnMut(usize, usize, usize, f64, f64, Region)) {
        let (v, h) = (self.old.vocab_size(), self.old.horizon());
        let cache = self.ratio_cache();
        for q in 0..self.old.num_queries() {
            for (code, &adv) in self.advantages[q].iter().enumerate() {
                let seq = decode_sequence(code as u128, v, h);
                let log_w: f64 = seq
                    .iter()
                    .enumerate()
                    .map(|(t, &tok)| cache.old_lp[(q * h + t) * v + tok])
                    .sum();
                let weight = log_w.exp();
                for (t, &tok) in seq.iter().enumerate() {
                    let w = cache.ratio[(q * h + t) * v + tok];
                    let region = classify(w, adv, &self.clip).unwrap_or(Region::InBoundary);
                    f(q, t, tok, weight, adv, region);
                }
            }
        }
    }

    fn ratio_cache(&self) -> RatioCache {
        let (v, h) = (self.old.vocab_size(), self.old.horizon());
        let mut old_lp = Vec::with_capacity(self.old.num_params());
        let mut ratio = Vec::with_capacity(self.old.num_params());
        for q in 0..self.old.num_queries() {
            for t in 0..h {
                for tok in 0..v {
                    let o = self.old.log_prob(q, t, tok).expect("in range");
                    let c = self.cur.log_prob(q, t, tok).expect("in range");
                    old_lp.push(o);
                    ratio.push((c - o).exp());
                }
            }
        }
        RatioCache { old_lp, ratio }
    }

    fn check_strategy(&self, strategy: &StrategyConfig) -> Result<()> {
        strategy.validate()?;
        match strategy.clip() {
            Some(c) if c != self.clip => Err(Error::invalid(format!(
                "strategy {strategy} clips at ({}, {}) but the instance uses ({}, {})",
                c.eps_low, c.eps_high, self.clip.eps_low, self.clip.eps_high
            ))),
            _ => Ok(()),
        }
    }
}

struct RatioCache {
    old_lp: Vec<f64>,
    ratio: Vec<f64>,
}

/// Exact expectation, over queries (uniform) and behaviour-sampled
/// responses, of `[token in region] * F * A * grad log pi`.
pub fn exact_region_gradient(
    inst: &EnumInstance,
    strategy: &StrategyConfig,
    region: Region,
) -> Result<Vec<f64>> {
    inst.check_strategy(strategy)?;
    Ok(accumulate(inst, |r, w| {
        (r == region).then(|| branch_coefficient(strategy, r, w))
    }))
}

/// Exact unclipped importance-sampled gradient over all tokens.
pub fn full_is_gradient(inst: &EnumInstance) -> Vec<f64> {
    accumulate(inst, |_, w| Some(w))
}

fn accumulate(inst: &EnumInstance, coeff: impl Fn(Region, f64) -> Option<f64>) -> Vec<f64> {
    let pol = &inst.cur;
    let (v, h) = (pol.vocab_size(), pol.horizon());
    let cache = inst.ratio_cache();
    let mut grad = vec![0.0; pol.num_params()];
    let probs: Vec<Vec<f64>> = pol
        .all_contexts()
        .into_iter()
        .map(|(q, t)| pol.token_probs(q, t).expect("in range"))
        .collect();
    inst.for_each_token(|q, t, tok, weight, adv, region| {
        let w = cache.ratio[(q * h + t) * v + tok];
        let Some(f) = coeff(region, w) else { return };
        let c = weight * f * adv;
        let row = q * h + t;
        let g = &mut grad[row * v..(row + 1) * v];
        for (gu, pu) in g.iter_mut().zip(&probs[row]) {
            *gu -= c * pu;
        }
        g[tok] += c;
    });
    let nq = pol.num_queries() as f64;
    for g in grad.iter_mut() {
        *g /= nq;
    }
    grad
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn region_bias(inst: &EnumInstance, strategy: &StrategyConfig, region: Region) -> Result<f64> {
    let g = exact_region_gradient(inst, strategy, region)?;
    let truth = exact_region_gradient(inst, &StrategyConfig::TruePg, region)?;
    Ok(l2_diff(&g, &truth))
}

/// Checks that, within `region`, the per-token base directions
/// `A * grad log pi` (aggregated by `(query, position, token)`) have pairwise
/// non-negative inner products. Returns the smallest inner product found.
pub fn alignment(inst: &EnumInstance, region: Region) -> f64 {
    let pol = &inst.cur;
    let h = pol.horizon();
    let mut classes: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    inst.for_each_token(|q, t, tok, weight, adv, r| {
        if r == region {
            *classes.entry((q, t, tok)).or_default() += weight * adv;
        }
    });
    let dirs: Vec<(usize, Vec<f64>)> = classes
        .iter()
        .filter(|(_, &mass)| mass != 0.0)
        .map(|(&(q, t, tok), &mass)| {
            let mut d = pol.grad_log_prob(q, t, tok).expect("in range");
            for x in d.iter_mut() {
                *x *= mass.signum();
            }
            (q * h + t, d)
        })
        .collect();
    // Directions on different rows touch disjoint parameters.
    let mut min = f64::INFINITY;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let dot = if dirs[i].0 == dirs[j].0 {
                dirs[i].1.iter().zip(&dirs[j].1).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };
            min = min.min(dot);
        }
    }
    min
}

/// Hyperparameters of the strategies compared in an ordering report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingConfig {
    pub n: u32,
    pub m: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_low_prime: f64,
    pub eps_high_prime: f64,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        Self {
            n: 1,
            m: 2,
            beta1: crate::coefficients::DEFAULT_CE_BETA1,
            beta2: crate::coefficients::DEFAULT_CE_BETA2,
            eps_low_prime: crate::coefficients::DEFAULT_ASPO_EPS_LOW_PRIME,
            eps_high_prime: crate::coefficients::DEFAULT_ASPO_EPS_HIGH_PRIME,
        }
    }
}

impl OrderingConfig {
    /// The six clipped strategies, all at `clip`.
    pub fn strategies(&self, clip: ClipConfig) -> Vec<StrategyConfig> {
        vec![
            StrategyConfig::Grpo { clip },
            StrategyConfig::Cispo { clip },
            StrategyConfig::Gppo { clip },
            StrategyConfig::CeGppo {
                clip,
                beta1: self.beta1,
                beta2: self.beta2,
            },
            StrategyConfig::Aspo {
                clip,
                eps_low_prime: self.eps_low_prime,
                eps_high_prime: self.eps_high_prime,
            },
            StrategyConfig::Dgpo {
                clip,
                n: self.n,
                m: self.m,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    /// `lhs <= 1e-12`.
    Zero,
    /// `lhs > 0`.
    Positive,
    /// `|lhs - rhs| <= 1e-12`.
    Equal,
    /// `lhs < rhs`.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub region: Region,
    pub kind: RelationKind,
    pub lhs: String,
    pub rhs: Option<String>,
    pub lhs_value: f64,
    pub rhs_value: Option<f64>,
    /// Distance from failure: positive slack for `Less`/`Positive`,
    /// `1e-12 - |gap|` for `Zero`/`Equal`.
    pub margin: f64,
    pub pass: bool,
}

impl Relation {
    pub fn describe(&self) -> String {
        let rhs = self.rhs.as_deref().unwrap_or("0");
        let op = match self.kind {
            RelationKind::Zero | RelationKind::Equal => "=",
            RelationKind::Positive => ">",
            RelationKind::Less => "<",
        };
        let (l, r) = match self.kind {
            RelationKind::Positive => (self.lhs.as_str(), "0"),
            _ => (self.lhs.as_str(), rhs),
        };
        format!(
            "{:<3} {l} {op} {r}: {} (margin {:e})",
            self.region.abbrev(),
            if self.pass { "pass" } else { "FAIL" },
            self.margin
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCell {
    pub strategy: String,
    pub region: Region,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub cells: Vec<BiasCell>,
    pub relations: Vec<Relation>,
}

impl BiasReport {
    pub fn passed(&self) -> bool {
        self.relations.iter().all(|r| r.pass)
    }

    pub fn bias(&self, strategy: &str, region: Region) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.region == region)
            .map(|c| c.bias)
    }

    /// One line per relation plus an overall verdict.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.relations {
            let _ = writeln!(s, "{}", r.describe());
        }
        let _ = writeln!(
            s,
            "overall: {}",
            if self.passed() { "pass" } else { "FAIL" }
        );
        s
    }

    /// CSV with header `strategy,region,bias,margin,pass`. A cell takes the
    /// margin and verdict of the first relation it appears in as `lhs`, else
    /// as `rhs`; cells in no relation leave both fields empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "region", "bias", "margin", "pass"])?;
        for c in &self.cells {
            let rel = self
                .relations
                .iter()
                .find(|r| r.region == c.region && r.lhs == c.strategy)
                .or_else(|| {
                    self.relations
                        .iter()
                        .find(|r| r.region == c.region && r.rhs.as_deref() == Some(&c.strategy))
                });
            let (margin, pass) = match rel {
                Some(r) => (r.margin.to_string(), r.pass.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                c.strategy.clone(),
                c.region.abbrev().to_string(),
                c.bias.to_string(),
                margin,
                pass,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn relation(
    region: Region,
    kind: RelationKind,
    cells: &BTreeMap<(&str, Region), f64>,
    lhs: &str,
    rhs: Option<&str>,
) -> Relation {
    let a = cells[&(lhs, region)];
    let b = rhs.map(|r| cells[&(r, region)]);
    let (margin, pass) = match kind {
        RelationKind::Zero => (EXACT_TOL - a.abs(), a.abs() <= EXACT_TOL),
        RelationKind::Positive => (a, a > 0.0),
        RelationKind::Equal => {
            let gap = (a - b.unwrap()).abs();
            (EXACT_TOL - gap, gap <= EXACT_TOL)
        }
        RelationKind::Less => {
            let d = b.unwrap() - a;
            (d, d > 0.0)
        }
    };
    Relation {
        region,
        kind,
        lhs: lhs.to_string(),
        rhs: rhs.map(str::to_string),
        lhs_value: a,
        rhs_value: b,
        margin,
        pass,
    }
}

/// Bias of every clipped strategy in every region, with the zero, equality
/// and strict-ordering relations checked per region.
///
/// LN and HP orderings only follow from pointwise coefficient orderings when
/// the per-token gradient directions in that region are aligned, so the
/// instance must pass [`alignment`] there.
pub fn ordering_report(inst: &EnumInstance, cfg: &OrderingConfig) -> Result<BiasReport> {
    for region in [Region::LowNegative, Region::HighPositive] {
        let min_dot = alignment(inst, region);
        if min_dot < 0.0 {
            return Err(Error::Misaligned(format!(
                "{region} token directions have inner product {min_dot:e} < 0"
            )));
        }
    }
    full_report(inst, cfg, |_| true)
}

/// The zero and positivity relations of the M, LP and HN regions. These hold
/// on any instance, aligned or not.
pub fn zero_cell_report(inst: &EnumInstance, cfg: &OrderingConfig) -> Result<BiasReport> {
    full_report(inst, cfg, |r| {
        matches!(r.kind, RelationKind::Zero | RelationKind::Positive)
            && !matches!(r.region, Region::LowNegative | Region::HighPositive)
    })
}

fn full_report(
    inst: &EnumInstance,
    cfg: &OrderingConfig,
    keep: impl Fn(&Relation) -> bool,
) -> Result<BiasReport> {
    let strategies = cfg.strategies(inst.clip);
    let mut cells = Vec::new();
    let mut table = BTreeMap::new();
    for s in &strategies {
        for region in Region::ALL {
            let bias = region_bias(inst, s, region)?;
            table.insert((s.name(), region), bias);
            cells.push(BiasCell {
                strategy: s.name().to_string(),
                region,
                bias,
            });
        }
    }
    let relations = TABLE_RELATIONS
        .iter()
        .map(|&(region, kind, lhs, rhs)| relation(region, kind, &table, lhs, rhs))
        .filter(|r| keep(r))
        .collect();
    Ok(BiasReport { cells, relations })
}

/// Per-region relations checked by [`ordering_report`].
const TABLE_RELATIONS: &[(Region, RelationKind, &str, Option<&str>)] = {
    use Region::*;
    use RelationKind::*;
    &[
        (InBoundary, Zero, "grpo", None),
        (InBoundary, Zero, "cispo", None),
        (InBoundary, Zero, "gppo", None),
        (InBoundary, Zero, "ce-gppo", None),
        (InBoundary, Zero, "dgpo", None),
        (InBoundary, Positive, "aspo", None),
        (LowNegative, Positive, "dgpo", None),
        (LowNegative, Less, "dgpo", Some("cispo")),
        (LowNegative, Equal, "cispo", Some("gppo")),
        (LowNegative, Less, "gppo", Some("grpo")),
        (LowNegative, Equal, "grpo", Some("aspo")),
        (HighPositive, Positive, "dgpo", None),
        (HighPositive, Less, "dgpo", Some("cispo")),
        (HighPositive, Equal, "cispo", Some("gppo")),
        (HighPositive, Equal, "gppo", Some("ce-gppo")),
        (HighPositive, Less, "ce-gppo", Some("grpo")),
        (HighPositive, Equal, "grpo", Some("aspo")),
        (LowPositive, Zero, "dgpo", None),
        (LowPositive, Zero, "grpo", None),
        (LowPositive, Zero, "gppo", None),
        (LowPositive, Zero, "ce-gppo", None),
        (LowPositive, Positive, "cispo", None),
        (LowPositive, Positive, "aspo", None),
        (HighNegative, Zero, "dgpo", None),
        (HighNegative, Zero, "grpo", None),
        (HighNegative, Zero, "gppo", None),
        (HighNegative, Zero, "ce-gppo", None),
        (HighNegative, Positive, "cispo", None),
        (HighNegative, Positive, "aspo", None),
    ]
};

/// Two-query, single-position instance on which each boundary region holds
/// exactly one token, so every region gradient lies along one direction.
///
/// Behaviour is uniform over 5 tokens. In both queries the current policy
/// scales token 0 by `0.6` and token 1 by `1.7` before renormalizing, giving
/// ratios of about 0.566 and 1.604; tokens 2-4 stay in-boundary. Query 0
/// gives token 0 a negative advantage (LN) and token 1 a positive one (HP);
/// query 1 flips both signs (LP, HN).
pub fn aligned_instance(clip: ClipConfig) -> Result<EnumInstance> {
    let old = TabularPolicy::uniform(2, 1, 5)?;
    let row = [0.6f64.ln(), 1.7f64.ln(), 0.0, 0.0, 0.0];
    let cur = TabularPolicy::from_logits(2, 1, 5, row.iter().chain(&row).copied().collect())?;
    let positive = vec![vec![vec![1], vec![2]], vec![vec![0], vec![2]]];
    EnumInstance::with_positive_sets(old, cur, &positive, 1.0, -1.0, clip)
}
