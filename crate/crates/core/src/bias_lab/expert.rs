//! Imitation of expert sequences written three ways.
//!
//! With a one-hot sampler that always emits the expert token (`pi_old = 1`)
//! and unit advantage, the importance ratio equals `pi` itself, so the
//! importance-sampled estimator `w * A * grad log pi` is exactly the gradient
//! of the mean expert-token probability. The log-likelihood (SFT) gradient
//! drops the factor `pi`.

use serde::{Deserialize, Serialize};

use crate::coefficients::{coefficient, StrategyConfig};
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::regions::TokenRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSequence {
    pub query: usize,
    pub tokens: Vec<usize>,
}

fn token_count(policy: &TabularPolicy, experts: &[ExpertSequence]) -> Result<f64> {
    if experts.is_empty() {
        return Err(Error::invalid("need at least one expert sequence"));
    }
    let mut total = 0;
    for e in experts {
        if e.tokens.is_empty() || e.tokens.len() > policy.horizon() {
            return Err(Error::invalid(format!(
                "expert sequence length {} outside 1..={}",
                e.tokens.len(),
                policy.horizon()
            )));
        }
        total += e.tokens.len();
    }
    Ok(total as f64)
}

fn accumulate(
    policy: &TabularPolicy,
    experts: &[ExpertSequence],
    mut row_grad: impl FnMut(usize, usize, usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let n = token_count(policy, experts)?;
    let v = policy.vocab_size();
    let mut grad = vec![0.0; policy.num_params()];
    for e in experts {
        for (t, &tok) in e.tokens.iter().enumerate() {
            let off = policy.row_offset(e.query, t)?;
            let g = row_grad(e.query, t, tok)?;
            for (acc, x) in grad[off..off + v].iter_mut().zip(g) {
                *acc += x / n;
            }
        }
    }
    Ok(grad)
}

/// Gradient of the mean expert-token probability, from the softmax Jacobian.
pub fn probability_gradient(
    policy: &TabularPolicy,
    experts: &[ExpertSequence],
) -> Result<Vec<f64>> {
    accumulate(policy, experts, |q, t, tok| policy.grad_prob(q, t, tok))
}

/// Importance-sampled estimator with a one-hot expert sampler and `A = 1`.
pub fn is_form_gradient(policy: &TabularPolicy, experts: &[ExpertSequence]) -> Result<Vec<f64>> {
    accumulate(policy, experts, |q, t, tok| {
        let pi = policy.log_prob(q, t, tok)?.exp();
        let rec = TokenRecord::new(1.0, pi, 1.0)?;
        let f = coefficient(&StrategyConfig::TruePg, &rec)?.coefficient;
        let mut g = policy.grad_log_prob(q, t, tok)?;
        for x in g.iter_mut() {
            *x *= f * rec.advantage;
        }
        Ok(g)
    })
}

/// Gradient of the mean expert-token log-probability.
pub fn sft_gradient(policy: &TabularPolicy, experts: &[ExpertSequence]) -> Result<Vec<f64>> {
    accumulate(policy, experts, |q, t, tok| policy.grad_log_prob(q, t, tok))
}

/// Largest componentwise gap between [`probability_gradient`] and
/// [`is_form_gradient`].
pub fn expert_equivalence_check(policy: &TabularPolicy, experts: &[ExpertSequence]) -> Result<f64> {
    let a = probability_gradient(policy, experts)?;
    let b = is_form_gradient(policy, experts)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_token_identity() {
        let p = TabularPolicy::random(2, 3, 4, 2.0, 1).unwrap();
        let e = [ExpertSequence {
            query: 1,
            tokens: vec![2],
        }];
        assert!(expert_equivalence_check(&p, &e).unwrap() <= 1e-12);
    }

    #[test]
    fn uniform_binary_closed_form() {
        let p = TabularPolicy::uniform(1, 1, 2).unwrap();
        let e = [ExpertSequence {
            query: 0,
            tokens: vec![0],
        }];
        let g = probability_gradient(&p, &e).unwrap();
        assert_relative_eq!(g[0], 0.25);
        assert_relative_eq!(g[1], -0.25);
    }

    #[test]
    fn sft_differs_by_pi() {
        let p = TabularPolicy::random(1, 1, 5, 1.5, 2).unwrap();
        let e = [ExpertSequence {
            query: 0,
            tokens: vec![3],
        }];
        let pi = p.token_probs(0, 0).unwrap()[3];
        let rl = is_form_gradient(&p, &e).unwrap();
        let sft = sft_gradient(&p, &e).unwrap();
        for (a, b) in rl.iter().zip(&sft) {
            assert!((a - pi * b).abs() <= 1e-15);
        }
    }

    #[test]
    fn rejects_bad_experts() {
        let p = TabularPolicy::uniform(1, 2, 3).unwrap();
        assert!(expert_equivalence_check(&p, &[]).is_err());
        let long = ExpertSequence {
            query: 0,
            tokens: vec![0, 1, 2],
        };
        assert!(expert_equivalence_check(&p, &[long]).is_err());
        let bad = ExpertSequence {
            query: 0,
            tokens: vec![7],
        };
        assert!(expert_equivalence_check(&p, &[bad]).is_err());
    }
}
