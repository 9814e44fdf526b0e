//! Synthetic verifiable-reward tasks.
//!
//! Each query has a small set of correct token sequences. A response earns
//! `+1` if it is exactly one of them and `-1` otherwise.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

pub const TASK_FORMAT: &str = "cliplab.task";
pub const TASK_VERSION: u32 = 1;

/// Parameters for [`build_task`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_queries: usize,
    pub vocab_size: usize,
    pub horizon: usize,
    pub answers_per_query: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_queries: 16,
            vocab_size: 8,
            horizon: 4,
            answers_per_query: 2,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    format: String,
    version: u32,
    num_queries: usize,
    vocab_size: usize,
    horizon: usize,
    answers: Vec<Vec<Vec<usize>>>,
}

/// Number of distinct responses, or `None` if it does not fit in a `u128`.
pub fn response_space(vocab_size: usize, horizon: usize) -> Option<u128> {
    (vocab_size as u128).checked_pow(u32::try_from(horizon).ok()?)
}

/// Base-`vocab_size` digits of `code`, most significant first.
pub(crate) fn decode_sequence(mut code: u128, vocab_size: usize, horizon: usize) -> Vec<usize> {
    let mut out = vec![0; horizon];
    for slot in out.iter_mut().rev() {
        *slot = (code % vocab_size as u128) as usize;
        code /= vocab_size as u128;
    }
    out
}

/// Samples distinct answer sets for every query, deterministically from
/// `spec.seed`.
pub fn build_task(spec: &TaskSpec) -> Result<Task> {
    if spec.num_queries == 0 || spec.horizon == 0 || spec.vocab_size < 2 {
        return Err(Error::invalid(format!(
            "task needs queries >= 1, horizon >= 1, vocab >= 2; got {spec:?}"
        )));
    }
    if spec.answers_per_query == 0 {
        return Err(Error::invalid("answers_per_query must be at least 1"));
    }
    let space = response_space(spec.vocab_size, spec.horizon);
    if let Some(space) = space {
        if space < spec.answers_per_query as u128 {
            return Err(Error::invalid(format!(
                "only {space} distinct responses exist, cannot pick {} answers",
                spec.answers_per_query
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut answers = Vec::with_capacity(spec.num_queries);
    for _ in 0..spec.num_queries {
        let set = match space.and_then(|s| usize::try_from(s).ok()) {
            Some(space) => index::sample(&mut rng, space, spec.answers_per_query)
                .into_iter()
                .map(|code| decode_sequence(code as u128, spec.vocab_size, spec.horizon))
                .collect(),
            None => {
                let mut seen = HashSet::new();
                let mut set = Vec::with_capacity(spec.answers_per_query);
                while set.len() < spec.answers_per_query {
                    let seq: Vec<usize> = (0..spec.horizon)
                        .map(|_| rng.random_range(0..spec.vocab_size))
                        .collect();
                    if seen.insert(seq.clone()) {
                        set.push(seq);
                    }
                }
                set
            }
        };
        answers.push(set);
    }
    Task::new(spec.num_queries, spec.vocab_size, spec.horizon, answers)
}

impl Task {
    pub fn new(
        num_queries: usize,
        vocab_size: usize,
        horizon: usize,
        answers: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let task = Self {
            format: TASK_FORMAT.to_string(),
            version: TASK_VERSION,
            num_queries,
            vocab_size,
            horizon,
            answers,
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        if self.format != TASK_FORMAT || self.version != TASK_VERSION {
            return Err(Error::invalid(format!(
                "unsupported task document `{}` v{}",
                self.format, self.version
            )));
        }
        if self.num_queries == 0 || self.horizon == 0 || self.vocab_size < 2 {
            return Err(Error::invalid(
                "task shape must be positive with vocab >= 2",
            ));
        }
        if self.answers.len() != self.num_queries {
            return Err(Error::invalid(format!(
                "{} answer sets for {} queries",
                self.answers.len(),
                self.num_queries
            )));
        }
        for (q, set) in self.answers.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid(format!("query {q} has no answers")));
            }
            let mut seen = HashSet::new();
            for seq in set {
                if seq.len() != self.horizon || seq.iter().any(|&v| v >= self.vocab_size) {
                    return Err(Error::invalid(format!(
                        "query {q}: malformed answer {seq:?}"
                    )));
                }
                if !seen.insert(seq) {
                    return Err(Error::invalid(format!(
                        "query {q}: duplicate answer {seq:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn answers(&self, query: usize) -> Result<&[Vec<usize>]> {
        self.answers
            .get(query)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("query {query} out of range")))
    }

    pub fn is_correct(&self, query: usize, response: &[usize]) -> Result<bool> {
        if response.len() != self.horizon {
            return Err(Error::invalid(format!(
                "response length {} != horizon {}",
                response.len(),
                self.horizon
            )));
        }
        Ok(self.answers(query)?.iter().any(|a| a == response))
    }

    /// Binary verifier reward.
    pub fn reward(&self, query: usize, response: &[usize]) -> Result<f64> {
        Ok(if self.is_correct(query, response)? {
            1.0
        } else {
            -1.0
        })
    }

    /// Exact probability, averaged over queries, that `policy` emits a
    /// correct response.
    pub fn expected_accuracy(&self, policy: &TabularPolicy) -> Result<f64> {
        self.check_policy(policy)?;
        let mut total = 0.0;
        for q in 0..self.num_queries {
            for a in &self.answers[q] {
                total += policy.sequence_prob(q, a)?;
            }
        }
        Ok(total / self.num_queries as f64)
    }

    pub fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_queries() != self.num_queries
            || policy.horizon() != self.horizon
            || policy.vocab_size() != self.vocab_size
        {
            return Err(Error::invalid(format!(
                "policy shape ({}, {}, {}) does not match task ({}, {}, {})",
                policy.num_queries(),
                policy.horizon(),
                policy.vocab_size(),
                self.num_queries,
                self.horizon,
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: Task = serde_json::from_str(text)?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn smallest_instance() {
        let spec = TaskSpec {
            num_queries: 1,
            vocab_size: 2,
            horizon: 1,
            answers_per_query: 1,
            seed: 42,
        };
        let task = build_task(&spec).unwrap();
        let ans = task.answers(0).unwrap();
        assert_eq!(ans.len(), 1);
        assert_eq!(ans[0].len(), 1);
        let uniform = TabularPolicy::uniform(1, 1, 2).unwrap();
        let expected_reward = 2.0 * task.expected_accuracy(&uniform).unwrap() - 1.0;
        assert!(expected_reward.abs() < 1e-15);
    }

    #[test]
    fn default_task_shape() {
        let task = build_task(&TaskSpec::default()).unwrap();
        assert_eq!(task.num_queries(), 16);
        for q in 0..16 {
            let ans = task.answers(q).unwrap();
            assert_eq!(ans.len(), 2);
            assert_ne!(ans[0], ans[1]);
            assert!(ans.iter().all(|a| a.len() == 4 && a.iter().all(|&v| v < 8)));
        }
        assert_eq!(task, build_task(&TaskSpec::default()).unwrap());
        let uniform = TabularPolicy::uniform(16, 4, 8).unwrap();
        assert_relative_eq!(
            task.expected_accuracy(&uniform).unwrap(),
            2.0 / 4096.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn reward_membership() {
        let task = build_task(&TaskSpec::default()).unwrap();
        let mut seq = task.answers(3).unwrap()[0].clone();
        assert_eq!(task.reward(3, &seq).unwrap(), 1.0);
        let other = task.answers(3).unwrap()[1].clone();
        seq[2] = (seq[2] + 1) % 8;
        if seq != other {
            assert_eq!(task.reward(3, &seq).unwrap(), -1.0);
        }
        assert!(task.reward(3, &[0, 1]).is_err());
        assert!(task.reward(99, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = TaskSpec {
            num_queries: 1,
            vocab_size: 2,
            horizon: 1,
            answers_per_query: 3,
            seed: 1,
        };
        assert!(build_task(&spec).is_err());
        spec.answers_per_query = 0;
        assert!(build_task(&spec).is_err());
        spec.answers_per_query = 2;
        let task = build_task(&spec).unwrap();
        let mut got = task.answers(0).unwrap().to_vec();
        got.sort();
        assert_eq!(got, vec![vec![0], vec![1]]);
    }

    #[test]
    fn huge_space_uses_rejection_sampling() {
        let spec = TaskSpec {
            num_queries: 2,
            vocab_size: 50,
            horizon: 30,
            answers_per_query: 3,
            seed: 9,
        };
        let task = build_task(&spec).unwrap();
        assert_eq!(task.answers(1).unwrap().len(), 3);
    }

    #[test]
    fn json_round_trip() {
        let task = build_task(&TaskSpec::default()).unwrap();
        let back = Task::from_json(&task.to_json().unwrap()).unwrap();
        assert_eq!(back, task);
        let broken = task.to_json().unwrap().replace("cliplab.task", "other");
        assert!(Task::from_json(&broken).is_err());
    }

    #[test]
    fn decode_is_base_vocab() {
        assert_eq!(decode_sequence(0, 8, 4), vec![0, 0, 0, 0]);
        assert_eq!(decode_sequence(8 * 8 * 3 + 5, 8, 4), vec![0, 3, 0, 5]);
    }
}
