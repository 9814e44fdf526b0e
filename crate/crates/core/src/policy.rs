//! Tabular softmax policies.
//!
//! Logits are indexed by `(query, position, token)` and stored flat in that
//! order. Each `(query, position)` row is an independent softmax, so a
//! response's probability is the product of its per-position token
//! probabilities.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_queries: usize,
    horizon: usize,
    vocab_size: usize,
    logits: Vec<f64>,
}

/// Tokens sampled for one query, with the sampling-time probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub tokens: Vec<usize>,
    pub old_probs: Vec<f64>,
    pub old_log_probs: Vec<f64>,
}

/// Numerically stable softmax of `row` into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_at(row: &[f64], token: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[token] - lse
}

impl TabularPolicy {
    /// All-zero logits: uniform over the vocabulary at every position.
    pub fn uniform(num_queries: usize, horizon: usize, vocab_size: usize) -> Result<Self> {
        let len = Self::checked_len(num_queries, horizon, vocab_size)?;
        Ok(Self {
            num_queries,
            horizon,
            vocab_size,
            logits: vec![0.0; len],
        })
    }

    pub fn from_logits(
        num_queries: usize,
        horizon: usize,
        vocab_size: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let len = Self::checked_len(num_queries, horizon, vocab_size)?;
        if logits.len() != len {
            return Err(Error::invalid(format!(
                "expected {len} logits for shape ({num_queries}, {horizon}, {vocab_size}), got {}",
                logits.len()
            )));
        }
        if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit {x}")));
        }
        Ok(Self {
            num_queries,
            horizon,
            vocab_size,
            logits,
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(
        num_queries: usize,
        horizon: usize,
        vocab_size: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let len = Self::checked_len(num_queries, horizon, vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..len).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::from_logits(num_queries, horizon, vocab_size, logits)
    }

    fn checked_len(num_queries: usize, horizon: usize, vocab_size: usize) -> Result<usize> {
        if num_queries == 0 || horizon == 0 || vocab_size < 2 {
            return Err(Error::invalid(format!(
                "policy shape must be positive with vocab >= 2, got ({num_queries}, {horizon}, {vocab_size})"
            )));
        }
        num_queries
            .checked_mul(horizon)
            .and_then(|x| x.checked_mul(vocab_size))
            .ok_or_else(|| Error::invalid("policy shape overflows"))
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Offset of the `(query, position)` row in the flat logit vector.
    pub fn row_offset(&self, query: usize, position: usize) -> Result<usize> {
        if query >= self.num_queries || position >= self.horizon {
            return Err(Error::invalid(format!(
                "context ({query}, {position}) out of range for ({}, {})",
                self.num_queries, self.horizon
            )));
        }
        Ok((query * self.horizon + position) * self.vocab_size)
    }

    pub fn row(&self, query: usize, position: usize) -> Result<&[f64]> {
        let off = self.row_offset(query, position)?;
        Ok(&self.logits[off..off + self.vocab_size])
    }

    pub fn token_probs(&self, query: usize, position: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.vocab_size];
        self.probs_into(query, position, &mut out)?;
        Ok(out)
    }

    pub fn probs_into(&self, query: usize, position: usize, out: &mut [f64]) -> Result<()> {
        let row = self.row(query, position)?;
        softmax_into(row, out);
        Ok(())
    }

    pub fn log_prob(&self, query: usize, position: usize, token: usize) -> Result<f64> {
        self.check_token(token)?;
        Ok(log_softmax_at(self.row(query, position)?, token))
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::invalid(format!(
                "token {token} out of range for vocab {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Probability of a whole response under this policy.
    pub fn sequence_prob(&self, query: usize, tokens: &[usize]) -> Result<f64> {
        self.sequence_log_prob(query, tokens).map(f64::exp)
    }

    pub fn sequence_log_prob(&self, query: usize, tokens: &[usize]) -> Result<f64> {
        if tokens.len() != self.horizon {
            return Err(Error::invalid(format!(
                "response length {} != horizon {}",
                tokens.len(),
                self.horizon
            )));
        }
        tokens
            .iter()
            .enumerate()
            .map(|(t, &v)| self.log_prob(query, t, v))
            .sum()
    }

    /// Samples one response; identical seeds give identical responses.
    pub fn sample_response(&self, query: usize, rng_seed: u64) -> Result<SampledResponse> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_response_with(query, &mut rng)
    }

    pub fn sample_response_with<R: Rng + ?Sized>(
        &self,
        query: usize,
        rng: &mut R,
    ) -> Result<SampledResponse> {
        let mut probs = vec![0.0; self.vocab_size];
        let mut out = SampledResponse {
            tokens: Vec::with_capacity(self.horizon),
            old_probs: Vec::with_capacity(self.horizon),
            old_log_probs: Vec::with_capacity(self.horizon),
        };
        for t in 0..self.horizon {
            self.probs_into(query, t, &mut probs)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut token = self.vocab_size - 1;
            for (v, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    token = v;
                    break;
                }
            }
            out.tokens.push(token);
            out.old_probs.push(probs[token]);
            out.old_log_probs.push(self.log_prob(query, t, token)?);
        }
        Ok(out)
    }

    /// Score function over the `(query, position)` logit row:
    /// `onehot(token) - probs`.
    pub fn grad_log_prob(&self, query: usize, position: usize, token: usize) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let mut g = self.token_probs(query, position)?;
        for x in g.iter_mut() {
            *x = -*x;
        }
        g[token] += 1.0;
        Ok(g)
    }

    /// Gradient of `pi(token)` over the logit row, from the softmax Jacobian
    /// `d pi_v / d z_u = pi_v (delta_uv - pi_u)`.
    pub fn grad_prob(&self, query: usize, position: usize, token: usize) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let probs = self.token_probs(query, position)?;
        let pv = probs[token];
        Ok(probs
            .iter()
            .enumerate()
            .map(|(u, &pu)| pv * (f64::from(u8::from(u == token)) - pu))
            .collect())
    }

    /// Mean Shannon entropy (nats) over the given contexts.
    pub fn entropy(&self, contexts: &[(usize, usize)]) -> Result<f64> {
        if contexts.is_empty() {
            return Err(Error::invalid("entropy needs at least one context"));
        }
        let mut probs = vec![0.0; self.vocab_size];
        let mut total = 0.0;
        for &(q, t) in contexts {
            self.probs_into(q, t, &mut probs)?;
            total -= probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>();
        }
        Ok(total / contexts.len() as f64)
    }

    /// Every `(query, position)` context.
    pub fn all_contexts(&self) -> Vec<(usize, usize)> {
        (0..self.num_queries)
            .flat_map(|q| (0..self.horizon).map(move |t| (q, t)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            num_queries: self.num_queries,
            horizon: self.horizon,
            vocab_size: self.vocab_size,
            logits: self.logits.clone(),
        }
    }

    pub fn from_checkpoint(ck: PolicyCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "not a policy checkpoint: `{}`",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Self::from_logits(ck.num_queries, ck.horizon, ck.vocab_size, ck.logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cliplab.policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON container: shape header plus flat logits in
/// `(query, position, token)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub num_queries: usize,
    pub horizon: usize,
    pub vocab_size: usize,
    pub logits: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn token_probs_examples() {
        let p = TabularPolicy::uniform(1, 1, 8).unwrap();
        for x in p.token_probs(0, 0).unwrap() {
            assert_relative_eq!(x, 0.125);
        }
        let p = TabularPolicy::from_logits(1, 1, 2, vec![2f64.ln(), 0.0]).unwrap();
        let probs = p.token_probs(0, 0).unwrap();
        assert_relative_eq!(probs[0], 2.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(probs[1], 1.0 / 3.0, max_relative = 1e-15);
        let p = TabularPolicy::from_logits(1, 1, 4, vec![30.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(p.token_probs(0, 0).unwrap()[0] > 1.0 - 1e-12);
        assert!(p.token_probs(1, 0).is_err());
        assert!(p.token_probs(0, 1).is_err());
    }

    #[test]
    fn sampling_examples() {
        let p = TabularPolicy::random(3, 4, 8, 1.0, 7).unwrap();
        assert_eq!(
            p.sample_response(1, 99).unwrap(),
            p.sample_response(1, 99).unwrap()
        );

        let mut logits = vec![0.0; 4 * 8];
        for t in 0..4 {
            logits[t * 8 + (t + 3) % 8] = 40.0;
        }
        let p = TabularPolicy::from_logits(1, 4, 8, logits).unwrap();
        let dominant = vec![3, 4, 5, 6];
        assert!(p.sequence_prob(0, &dominant).unwrap() > 1.0 - 1e-9);
        for seed in 0..20 {
            assert_eq!(p.sample_response(0, seed).unwrap().tokens, dominant);
        }

        let p = TabularPolicy::uniform(2, 4, 8).unwrap();
        let s = p.sample_response(0, 5).unwrap();
        let prod: f64 = s.old_probs.iter().product();
        assert_relative_eq!(prod, 0.125f64.powi(4), max_relative = 1e-12);
        for (t, (&v, &lp)) in s.tokens.iter().zip(&s.old_log_probs).enumerate() {
            assert_relative_eq!(lp, p.log_prob(0, t, v).unwrap());
        }
    }

    #[test]
    fn grad_log_prob_examples() {
        let p = TabularPolicy::uniform(1, 1, 2).unwrap();
        assert_eq!(p.grad_log_prob(0, 0, 0).unwrap(), vec![0.5, -0.5]);
        let p = TabularPolicy::from_logits(1, 1, 4, vec![30.0, 0.0, 0.0, 0.0]).unwrap();
        let g = p.grad_log_prob(0, 0, 0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9));
    }

    /// Central differences of `log pi(token)` in each logit of its row.
    fn fd_grad_log_prob(p: &TabularPolicy, q: usize, t: usize, token: usize, h: f64) -> Vec<f64> {
        let off = p.row_offset(q, t).unwrap();
        (0..p.vocab_size())
            .map(|u| {
                let mut plus = p.clone();
                plus.logits_mut()[off + u] += h;
                let mut minus = p.clone();
                minus.logits_mut()[off + u] -= h;
                (plus.log_prob(q, t, token).unwrap() - minus.log_prob(q, t, token).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        for seed in 0..10 {
            let p = TabularPolicy::random(2, 3, 5, 2.0, seed).unwrap();
            let g = p.grad_log_prob(1, 2, 3).unwrap();
            let fd = fd_grad_log_prob(&p, 1, 2, 3, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() / a.abs().max(1e-3) < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let p = TabularPolicy::uniform(1, 1, 8).unwrap();
        assert_relative_eq!(
            p.entropy(&[(0, 0)]).unwrap(),
            8f64.ln(),
            max_relative = 1e-14
        );
        assert!((8f64.ln() - 2.07944).abs() < 1e-5);
        let p = TabularPolicy::from_logits(1, 1, 4, vec![30.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(p.entropy(&[(0, 0)]).unwrap() < 1e-6);
        let p = TabularPolicy::from_logits(1, 1, 4, vec![0.0, 0.0, -800.0, -800.0]).unwrap();
        assert_relative_eq!(
            p.entropy(&[(0, 0)]).unwrap(),
            2f64.ln(),
            max_relative = 1e-14
        );
        assert!(p.entropy(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let p = TabularPolicy::random(3, 2, 5, 3.0, 11).unwrap();
        p.save(&path).unwrap();
        assert_eq!(TabularPolicy::load(&path).unwrap(), p);
        let mut ck = p.to_checkpoint();
        ck.version = 99;
        assert!(TabularPolicy::from_checkpoint(ck).is_err());
        let mut ck = p.to_checkpoint();
        ck.logits.pop();
        assert!(TabularPolicy::from_checkpoint(ck).is_err());
    }

    proptest! {
        #[test]
        fn normalized_and_positive(seed in 0u64..1000, scale in 0.0f64..20.0) {
            let p = TabularPolicy::random(2, 2, 6, scale, seed).unwrap();
            for (q, t) in p.all_contexts() {
                let probs = p.token_probs(q, t).unwrap();
                prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(probs.iter().all(|&x| x > 0.0));
            }
        }

        #[test]
        fn prob_gradient_identity(seed in 0u64..1000, token in 0usize..6) {
            let p = TabularPolicy::random(1, 2, 6, 3.0, seed).unwrap();
            let pi = p.token_probs(0, 1).unwrap()[token];
            let gl = p.grad_log_prob(0, 1, token).unwrap();
            let gp = p.grad_prob(0, 1, token).unwrap();
            for (a, b) in gp.iter().zip(&gl) {
                prop_assert!((a - pi * b).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_bounds(seed in 0u64..1000, scale in 0.0f64..30.0) {
            let p = TabularPolicy::random(2, 3, 7, scale, seed).unwrap();
            let h = p.entropy(&p.all_contexts()).unwrap();
            prop_assert!(h >= 0.0 && h <= 7f64.ln() + 1e-12);
        }
    }
}
