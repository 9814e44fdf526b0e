//! Group-relative advantages: per-query z-scores of rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Groups whose population standard deviation is at or below this are
/// treated as carrying no signal.
pub const DEFAULT_DEGENERATE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub size: usize,
}

impl GroupStats {
    pub fn of(rewards: &[f64]) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::invalid(format!(
                "a group needs at least 2 rewards, got {}",
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("non-finite reward {r}")));
        }
        let size = rewards.len();
        let mean = rewards.iter().sum::<f64>() / size as f64;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / size as f64;
        Ok(Self {
            mean,
            std: var.sqrt(),
            size,
        })
    }
}

/// `(r_i - mean) / std` with the population standard deviation. Degenerate
/// groups (std <= `degenerate_eps`) get all-zero advantages.
pub fn normalize(rewards: &[f64], degenerate_eps: f64) -> Result<Vec<f64>> {
    if !(degenerate_eps >= 0.0) {
        return Err(Error::invalid(format!(
            "degenerate_eps must be non-negative, got {degenerate_eps}"
        )));
    }
    let stats = GroupStats::of(rewards)?;
    if stats.std <= degenerate_eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards
        .iter()
        .map(|r| (r - stats.mean) / stats.std)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(
            normalize(&[1.0, 1.0, -1.0, -1.0], DEFAULT_DEGENERATE_EPS).unwrap(),
            vec![1.0, 1.0, -1.0, -1.0]
        );
        assert_eq!(
            normalize(&[1.0; 4], DEFAULT_DEGENERATE_EPS).unwrap(),
            vec![0.0; 4]
        );
        let a = normalize(&[1.0, -1.0, -1.0, -1.0], DEFAULT_DEGENERATE_EPS).unwrap();
        let expected = [1.7321, -0.5774, -0.5774, -0.5774];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-4, "{x} vs {e}");
        }
    }

    #[test]
    fn short_groups_rejected() {
        assert!(normalize(&[1.0], DEFAULT_DEGENERATE_EPS).is_err());
        assert!(normalize(&[], DEFAULT_DEGENERATE_EPS).is_err());
        assert!(normalize(&[1.0, 2.0], -1.0).is_err());
    }

    fn non_degenerate() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 2..32)
            .prop_filter("spread", |v| GroupStats::of(v).unwrap().std > 1e-3)
    }

    proptest! {
        #[test]
        fn standardized(r in non_degenerate()) {
            let a = normalize(&r, DEFAULT_DEGENERATE_EPS).unwrap();
            let s = GroupStats::of(&a).unwrap();
            prop_assert!(s.mean.abs() < 1e-10);
            prop_assert!((s.std - 1.0).abs() < 1e-10);
        }

        #[test]
        fn shift_scale_invariant(r in non_degenerate(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let a = normalize(&r, DEFAULT_DEGENERATE_EPS).unwrap();
            let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let b = normalize(&moved, DEFAULT_DEGENERATE_EPS).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn sign_preserved(r in non_degenerate()) {
            let mean = GroupStats::of(&r).unwrap().mean;
            let a = normalize(&r, DEFAULT_DEGENERATE_EPS).unwrap();
            for (x, adv) in r.iter().zip(&a) {
                prop_assert_eq!(*adv > 0.0, *x > mean);
            }
        }
    }
}
