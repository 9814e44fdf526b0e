//! Clipping regions over (importance ratio, advantage sign).
//!
//! Every token falls into exactly one of five regions. The four boundary
//! regions require a strict ratio excursion and a strict advantage sign;
//! everything else, including boundary-equal ratios and zero advantages,
//! is in-boundary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trust-region margins around a ratio of one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
        }
    }
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        let cfg = Self { eps_low, eps_high };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(Error::invalid(format!(
                "eps_low must lie in (0, 1), got {}",
                self.eps_low
            )));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(Error::invalid(format!(
                "eps_high must be positive and finite, got {}",
                self.eps_high
            )));
        }
        Ok(())
    }

    /// Left ratio boundary, `1 - eps_low`.
    pub fn left(&self) -> f64 {
        1.0 - self.eps_low
    }

    /// Right ratio boundary, `1 + eps_high`.
    pub fn right(&self) -> f64 {
        1.0 + self.eps_high
    }
}

/// The five ratio x advantage regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Ratio below the left boundary with negative advantage (LN).
    #[serde(rename = "LN")]
    LowNegative,
    /// Ratio above the right boundary with positive advantage (HP).
    #[serde(rename = "HP")]
    HighPositive,
    /// Ratio below the left boundary with positive advantage (LP).
    #[serde(rename = "LP")]
    LowPositive,
    /// Ratio above the right boundary with negative advantage (HN).
    #[serde(rename = "HN")]
    HighNegative,
    /// Everything else (M).
    #[serde(rename = "M")]
    InBoundary,
}

impl Region {
    /// Canonical order used for counts, fractions and exports.
    pub const ALL: [Region; 5] = [
        Region::LowNegative,
        Region::HighPositive,
        Region::LowPositive,
        Region::HighNegative,
        Region::InBoundary,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            Region::LowNegative => "LN",
            Region::HighPositive => "HP",
            Region::LowPositive => "LP",
            Region::HighNegative => "HN",
            Region::InBoundary => "M",
        }
    }

    /// Position of this region in [`Region::ALL`].
    pub fn index(self) -> usize {
        match self {
            Region::LowNegative => 0,
            Region::HighPositive => 1,
            Region::LowPositive => 2,
            Region::HighNegative => 3,
            Region::InBoundary => 4,
        }
    }

    pub fn from_abbrev(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.abbrev().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown region `{s}`")))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

/// One sampled token: frozen behaviour probability, current probability,
/// their ratio, and the response advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub old_prob: f64,
    pub cur_prob: f64,
    pub is_ratio: f64,
    pub advantage: f64,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must lie in (0, 1], got {p}"
        )))
    }
}

impl TokenRecord {
    pub fn new(old_prob: f64, cur_prob: f64, advantage: f64) -> Result<Self> {
        check_prob("old_prob", old_prob)?;
        check_prob("cur_prob", cur_prob)?;
        if !advantage.is_finite() {
            return Err(Error::invalid(format!(
                "advantage must be finite, got {advantage}"
            )));
        }
        Ok(Self {
            old_prob,
            cur_prob,
            is_ratio: cur_prob / old_prob,
            advantage,
        })
    }

    /// Builds a record from log-probabilities; the ratio is taken as
    /// `exp(cur - old)` rather than a quotient of exponentials.
    pub fn from_log_probs(old_log_prob: f64, cur_log_prob: f64, advantage: f64) -> Result<Self> {
        let old_prob = old_log_prob.exp();
        let cur_prob = cur_log_prob.exp();
        check_prob("old_prob", old_prob)?;
        check_prob("cur_prob", cur_prob)?;
        if !advantage.is_finite() {
            return Err(Error::invalid(format!(
                "advantage must be finite, got {advantage}"
            )));
        }
        Ok(Self {
            old_prob,
            cur_prob,
            is_ratio: (cur_log_prob - old_log_prob).exp(),
            advantage,
        })
    }

    pub fn region(&self, clip: &ClipConfig) -> Result<Region> {
        classify(self.is_ratio, self.advantage, clip)
    }
}

/// Assigns a (ratio, advantage) pair to its clipping region.
pub fn classify(ratio: f64, advantage: f64, clip: &ClipConfig) -> Result<Region> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::invalid(format!(
            "importance ratio must be positive and finite, got {ratio}"
        )));
    }
    clip.validate()?;
    let low = ratio < clip.left();
    let high = ratio > clip.right();
    let region = if advantage < 0.0 {
        if low {
            Region::LowNegative
        } else if high {
            Region::HighNegative
        } else {
            Region::InBoundary
        }
    } else if advantage > 0.0 {
        if high {
            Region::HighPositive
        } else if low {
            Region::LowPositive
        } else {
            Region::InBoundary
        }
    } else {
        Region::InBoundary
    };
    Ok(region)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: ClipConfig = ClipConfig {
        eps_low: 0.2,
        eps_high: 0.2,
    };

    #[test]
    fn classify_examples() {
        assert_eq!(classify(0.5, -1.0, &EPS).unwrap(), Region::LowNegative);
        assert_eq!(classify(1.5, 1.0, &EPS).unwrap(), Region::HighPositive);
        assert_eq!(classify(1.0, -1.0, &EPS).unwrap(), Region::InBoundary);
        assert_eq!(classify(0.5, 1.0, &EPS).unwrap(), Region::LowPositive);
        assert_eq!(classify(1.5, -1.0, &EPS).unwrap(), Region::HighNegative);
    }

    #[test]
    fn boundary_ties_are_in_boundary() {
        assert_eq!(
            classify(EPS.left(), -1.0, &EPS).unwrap(),
            Region::InBoundary
        );
        assert_eq!(classify(EPS.left(), 1.0, &EPS).unwrap(), Region::InBoundary);
        assert_eq!(
            classify(EPS.right(), 1.0, &EPS).unwrap(),
            Region::InBoundary
        );
        assert_eq!(
            classify(EPS.right(), -1.0, &EPS).unwrap(),
            Region::InBoundary
        );
    }

    #[test]
    fn rejects_bad_ratio_and_config() {
        assert!(classify(0.0, 1.0, &EPS).is_err());
        assert!(classify(-0.3, 1.0, &EPS).is_err());
        assert!(classify(f64::NAN, 1.0, &EPS).is_err());
        assert!(ClipConfig::new(1.0, 0.2).is_err());
        assert!(ClipConfig::new(0.2, 0.0).is_err());
    }

    #[test]
    fn token_record_ratio() {
        let t = TokenRecord::new(0.5, 0.4, -1.0).unwrap();
        assert!((t.is_ratio - 0.8).abs() < 1e-15);
        let l = TokenRecord::from_log_probs(0.5f64.ln(), 0.4f64.ln(), -1.0).unwrap();
        assert!(((l.is_ratio - l.cur_prob / l.old_prob) / l.is_ratio).abs() < 1e-12);
        assert!(TokenRecord::new(0.0, 0.4, 1.0).is_err());
        assert!(TokenRecord::new(0.5, 1.2, 1.0).is_err());
    }

    #[test]
    fn abbrev_round_trip() {
        for r in Region::ALL {
            assert_eq!(Region::from_abbrev(r.abbrev()).unwrap(), r);
            assert_eq!(Region::ALL[r.index()], r);
        }
    }

    proptest! {
        #[test]
        fn partition_is_consistent(
            ratio in 1e-6f64..10.0,
            adv in -3.0f64..3.0,
            lo in 0.01f64..0.99,
            hi in 0.01f64..5.0,
        ) {
            let clip = ClipConfig::new(lo, hi).unwrap();
            let r = classify(ratio, adv, &clip).unwrap();
            let ln = ratio < clip.left() && adv < 0.0;
            let hp = ratio > clip.right() && adv > 0.0;
            let lp = ratio < clip.left() && adv > 0.0;
            let hn = ratio > clip.right() && adv < 0.0;
            let flags = [ln, hp, lp, hn];
            prop_assert!(flags.iter().filter(|f| **f).count() <= 1);
            let expected = match flags.iter().position(|f| *f) {
                Some(i) => Region::ALL[i],
                None => Region::InBoundary,
            };
            prop_assert_eq!(r, expected);
        }

        #[test]
        fn zero_advantage_is_in_boundary(ratio in 1e-6f64..100.0) {
            prop_assert_eq!(classify(ratio, 0.0, &EPS).unwrap(), Region::InBoundary);
        }
    }
}
