//! Per-token weighting strategies.
//!
//! Each strategy maps a token's importance ratio `w` (and its region) to the
//! scalar `F` multiplying `A * grad log pi`. The probability-gradient weight
//! is `W = F / pi`, the factor multiplying `A * grad pi`.
//!
//! Coefficients are plain detached scalars: nothing differentiates through
//! them, which is exactly the stop-gradient semantics the estimators need.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::{classify, ClipConfig, Region, TokenRecord};

/// Which weighting strategy to apply, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategyConfig {
    /// Unclipped importance-sampled policy gradient: `F = w` everywhere.
    TruePg,
    /// Hard clipping: LN and HP tokens are dropped.
    Grpo { clip: ClipConfig },
    /// Constant weights on both sides of the trust region, reverse regions included.
    Cispo { clip: ClipConfig },
    /// Constant weights on LN and HP only.
    Gppo { clip: ClipConfig },
    /// GPPO with the boundary weights scaled by `beta1` (LN) and `beta2` (HP).
    CeGppo {
        clip: ClipConfig,
        beta1: f64,
        beta2: f64,
    },
    /// Reversed ratio `1/w`, dual-clipped to `[1 - eps_low_prime, 1 + eps_high_prime]`.
    Aspo {
        clip: ClipConfig,
        eps_low_prime: f64,
        eps_high_prime: f64,
    },
    /// Decoupled decay: polynomial in `pi` on LN, reciprocal radical on HP.
    Dgpo { clip: ClipConfig, n: u32, m: u32 },
}

pub const DEFAULT_CE_BETA1: f64 = 0.75;
pub const DEFAULT_CE_BETA2: f64 = 1.0;
pub const DEFAULT_ASPO_EPS_LOW_PRIME: f64 = 0.33;
pub const DEFAULT_ASPO_EPS_HIGH_PRIME: f64 = 3.0;

impl StrategyConfig {
    pub fn grpo() -> Self {
        StrategyConfig::Grpo {
            clip: ClipConfig::default(),
        }
    }

    pub fn cispo() -> Self {
        StrategyConfig::Cispo {
            clip: ClipConfig::default(),
        }
    }

    pub fn gppo() -> Self {
        StrategyConfig::Gppo {
            clip: ClipConfig::default(),
        }
    }

    pub fn ce_gppo(beta1: f64, beta2: f64) -> Self {
        StrategyConfig::CeGppo {
            clip: ClipConfig::default(),
            beta1,
            beta2,
        }
    }

    pub fn aspo() -> Self {
        StrategyConfig::Aspo {
            clip: ClipConfig::default(),
            eps_low_prime: DEFAULT_ASPO_EPS_LOW_PRIME,
            eps_high_prime: DEFAULT_ASPO_EPS_HIGH_PRIME,
        }
    }

    pub fn dgpo(n: u32, m: u32) -> Self {
        StrategyConfig::Dgpo {
            clip: ClipConfig::default(),
            n,
            m,
        }
    }

    /// The seven strategies with their default hyperparameters
    /// (DGPO with `n = 1`, `m = 2`).
    pub fn all_defaults() -> Vec<Self> {
        vec![
            StrategyConfig::TruePg,
            Self::grpo(),
            Self::cispo(),
            Self::gppo(),
            Self::ce_gppo(DEFAULT_CE_BETA1, DEFAULT_CE_BETA2),
            Self::aspo(),
            Self::dgpo(1, 2),
        ]
    }

    /// Parses a bare strategy name into its default configuration.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "truepg" | "true-pg" | "pg" => Ok(StrategyConfig::TruePg),
            "grpo" => Ok(Self::grpo()),
            "cispo" => Ok(Self::cispo()),
            "gppo" => Ok(Self::gppo()),
            "ce-gppo" | "cegppo" | "ce" => Ok(Self::ce_gppo(DEFAULT_CE_BETA1, DEFAULT_CE_BETA2)),
            "aspo" => Ok(Self::aspo()),
            "dgpo" => Ok(Self::dgpo(1, 2)),
            other => Err(Error::invalid(format!("unknown strategy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::TruePg => "truepg",
            StrategyConfig::Grpo { .. } => "grpo",
            StrategyConfig::Cispo { .. } => "cispo",
            StrategyConfig::Gppo { .. } => "gppo",
            StrategyConfig::CeGppo { .. } => "ce-gppo",
            StrategyConfig::Aspo { .. } => "aspo",
            StrategyConfig::Dgpo { .. } => "dgpo",
        }
    }

    pub fn clip(&self) -> Option<ClipConfig> {
        match *self {
            StrategyConfig::TruePg => None,
            StrategyConfig::Grpo { clip }
            | StrategyConfig::Cispo { clip }
            | StrategyConfig::Gppo { clip }
            | StrategyConfig::CeGppo { clip, .. }
            | StrategyConfig::Aspo { clip, .. }
            | StrategyConfig::Dgpo { clip, .. } => Some(clip),
        }
    }

    /// Clip config used to classify tokens. `TruePg` has none of its own and
    /// reports regions against the default margins.
    pub fn region_clip(&self) -> ClipConfig {
        self.clip().unwrap_or_default()
    }

    pub fn with_clip(mut self, new_clip: ClipConfig) -> Self {
        match &mut self {
            StrategyConfig::TruePg => {}
            StrategyConfig::Grpo { clip }
            | StrategyConfig::Cispo { clip }
            | StrategyConfig::Gppo { clip }
            | StrategyConfig::CeGppo { clip, .. }
            | StrategyConfig::Aspo { clip, .. }
            | StrategyConfig::Dgpo { clip, .. } => *clip = new_clip,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(clip) = self.clip() {
            clip.validate()?;
        }
        match *self {
            StrategyConfig::CeGppo { beta1, beta2, .. } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(b > 0.0 && b <= 1.0) {
                        return Err(Error::invalid(format!(
                            "{name} must lie in (0, 1], got {b}"
                        )));
                    }
                }
            }
            StrategyConfig::Aspo {
                eps_low_prime,
                eps_high_prime,
                ..
            } => {
                if !(eps_low_prime > 0.0 && eps_low_prime < 1.0) {
                    return Err(Error::invalid(format!(
                        "eps_low_prime must lie in (0, 1), got {eps_low_prime}"
                    )));
                }
                if !(eps_high_prime > 0.0 && eps_high_prime.is_finite()) {
                    return Err(Error::invalid(format!(
                        "eps_high_prime must be positive, got {eps_high_prime}"
                    )));
                }
            }
            StrategyConfig::Dgpo { n, m, .. } if n == 0 || m == 0 => {
                return Err(Error::invalid(format!(
                    "dgpo exponents must be >= 1, got n={n}, m={m}"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StrategyConfig::CeGppo { beta1, beta2, .. } => {
                write!(f, "ce-gppo(b1={beta1},b2={beta2})")
            }
            StrategyConfig::Aspo {
                eps_low_prime,
                eps_high_prime,
                ..
            } => write!(f, "aspo(el'={eps_low_prime},eh'={eps_high_prime})"),
            StrategyConfig::Dgpo { n, m, .. } => write!(f, "dgpo(n={n},m={m})"),
            other => f.write_str(other.name()),
        }
    }
}

/// `F`, `W` and the region a token was classified into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientResult {
    pub coefficient: f64,
    pub prob_weight: f64,
    pub region: Region,
}

/// The branch formula a strategy uses inside `region`, evaluated at ratio
/// `w` whether or not `w` actually lies in that region. Used directly for
/// one-sided boundary limits.
pub fn branch_coefficient(strategy: &StrategyConfig, region: Region, w: f64) -> f64 {
    use Region::*;
    match *strategy {
        StrategyConfig::TruePg => w,
        StrategyConfig::Grpo { .. } => match region {
            LowNegative | HighPositive => 0.0,
            _ => w,
        },
        StrategyConfig::Cispo { clip } => match region {
            LowNegative | LowPositive => clip.left(),
            HighPositive | HighNegative => clip.right(),
            InBoundary => w,
        },
        StrategyConfig::Gppo { clip } => match region {
            LowNegative => clip.left(),
            HighPositive => clip.right(),
            _ => w,
        },
        StrategyConfig::CeGppo { clip, beta1, beta2 } => match region {
            LowNegative => beta1 * clip.left(),
            HighPositive => beta2 * clip.right(),
            _ => w,
        },
        StrategyConfig::Aspo {
            eps_low_prime,
            eps_high_prime,
            ..
        } => match region {
            LowNegative | HighPositive => 0.0,
            _ => (1.0 / w).clamp(1.0 - eps_low_prime, 1.0 + eps_high_prime),
        },
        StrategyConfig::Dgpo { clip, n, m } => match region {
            LowNegative => w.powi(n as i32 + 1) / clip.left().powi(n as i32),
            HighPositive => {
                let inv_m = 1.0 / f64::from(m);
                clip.right().powf(inv_m) * w.powf(1.0 - inv_m)
            }
            _ => w,
        },
    }
}

/// Log-probability-gradient coefficient `F` and probability-gradient weight
/// `W = F / pi` for one token.
pub fn coefficient(strategy: &StrategyConfig, token: &TokenRecord) -> Result<CoefficientResult> {
    strategy.validate()?;
    if !(token.old_prob > 0.0 && token.cur_prob > 0.0) {
        return Err(Error::invalid(format!(
            "probabilities must be positive, got old={} cur={}",
            token.old_prob, token.cur_prob
        )));
    }
    let region = classify(token.is_ratio, token.advantage, &strategy.region_clip())?;
    let coefficient = branch_coefficient(strategy, region, token.is_ratio);
    Ok(CoefficientResult {
        coefficient,
        prob_weight: coefficient / token.cur_prob,
        region,
    })
}

/// Continuity constants `(C_left, C_right)` of the DGPO probability weight:
/// `W = C_left * pi^n` on LN and `W = C_right * pi^(-1/m)` on HP.
pub fn dgpo_constants(clip: &ClipConfig, n: u32, m: u32, old_prob: f64) -> (f64, f64) {
    let c_left = clip.left().powi(-(n as i32)) * old_prob.powi(-(n as i32 + 1));
    let inv_m = 1.0 / f64::from(m);
    let c_right = clip.right().powf(inv_m) * old_prob.powf(inv_m - 1.0);
    (c_left, c_right)
}

/// Probability-gradient weight of a region's branch at `cur_prob`. DGPO is
/// evaluated through its explicit continuity constants; every other strategy
/// as its branch coefficient divided by `cur_prob`.
pub fn branch_prob_weight(
    strategy: &StrategyConfig,
    region: Region,
    cur_prob: f64,
    old_prob: f64,
) -> f64 {
    match *strategy {
        StrategyConfig::Dgpo { clip, n, m } => {
            let (c_left, c_right) = dgpo_constants(&clip, n, m, old_prob);
            match region {
                Region::LowNegative => c_left * cur_prob.powi(n as i32),
                Region::HighPositive => c_right * cur_prob.powf(-1.0 / f64::from(m)),
                _ => 1.0 / old_prob,
            }
        }
        _ => branch_coefficient(strategy, region, cur_prob / old_prob) / cur_prob,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundarySide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvantageSign {
    Positive,
    Negative,
}

impl AdvantageSign {
    pub fn value(self) -> f64 {
        match self {
            AdvantageSign::Positive => 1.0,
            AdvantageSign::Negative => -1.0,
        }
    }
}

/// Jump in `F` across a trust-region boundary: the outer-region limit versus
/// the in-boundary value at `w = 1 - eps_low` (LN side) or `w = 1 + eps_high`
/// (HP side). The strategy is evaluated with `clip` substituted for its own
/// margins.
pub fn continuity_gap(
    strategy: &StrategyConfig,
    side: BoundarySide,
    old_prob: f64,
    clip: &ClipConfig,
) -> Result<f64> {
    if !(old_prob > 0.0 && old_prob <= 1.0) {
        return Err(Error::invalid(format!(
            "old_prob must lie in (0, 1], got {old_prob}"
        )));
    }
    clip.validate()?;
    let strategy = strategy.with_clip(*clip);
    strategy.validate()?;
    let (w, outer) = match side {
        BoundarySide::Left => (clip.left(), Region::LowNegative),
        BoundarySide::Right => (clip.right(), Region::HighPositive),
    };
    let cur_prob = w * old_prob;
    let outer_w = branch_prob_weight(&strategy, outer, cur_prob, old_prob);
    let inner_w = branch_prob_weight(&strategy, Region::InBoundary, cur_prob, old_prob);
    Ok(((outer_w - inner_w) * cur_prob).abs())
}

/// One row of a weight-landscape table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub strategy: String,
    pub ratio: f64,
    pub coefficient: f64,
    pub prob_weight: f64,
}

/// Dense evaluation of `F` and `W` on a ratio grid at fixed `old_prob`.
/// Rows are ordered by strategy (input order), then ratio.
pub fn landscape_grid(
    strategies: &[StrategyConfig],
    ratio_grid: &[f64],
    sign: AdvantageSign,
    old_prob: f64,
) -> Result<Vec<LandscapeRow>> {
    if ratio_grid.is_empty() {
        return Err(Error::invalid("ratio grid is empty"));
    }
    if ratio_grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::invalid("ratio grid must be strictly increasing"));
    }
    let mut rows = Vec::with_capacity(strategies.len() * ratio_grid.len());
    for strategy in strategies {
        for &ratio in ratio_grid {
            if !(ratio > 0.0) {
                return Err(Error::invalid(format!(
                    "ratio must be positive, got {ratio}"
                )));
            }
            let token = TokenRecord::new(old_prob, ratio * old_prob, sign.value())?;
            let c = coefficient(strategy, &token)?;
            rows.push(LandscapeRow {
                strategy: strategy.to_string(),
                ratio,
                coefficient: c.coefficient,
                prob_weight: c.prob_weight,
            });
        }
    }
    Ok(rows)
}

pub const LANDSCAPE_HEADER: [&str; 4] = ["strategy", "ratio", "coefficient", "prob_weight"];

pub fn write_landscape_csv(rows: &[LandscapeRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(LANDSCAPE_HEADER)?;
    for row in rows {
        w.write_record([
            row.strategy.clone(),
            row.ratio.to_string(),
            row.coefficient.to_string(),
            row.prob_weight.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_landscape_csv(path: &Path) -> Result<Vec<LandscapeRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn f(strategy: &StrategyConfig, w: f64, adv: f64) -> CoefficientResult {
        // old_prob 0.25 keeps cur_prob <= 1 for w up to 4.
        let token = TokenRecord::new(0.25, w * 0.25, adv).unwrap();
        coefficient(strategy, &token).unwrap()
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(f(&StrategyConfig::grpo(), 0.5, -1.0).coefficient, 0.0);
        assert_relative_eq!(f(&StrategyConfig::dgpo(1, 2), 0.8, -1.0).coefficient, 0.8);
        assert_relative_eq!(
            f(&StrategyConfig::dgpo(1, 2), 0.4, -1.0).coefficient,
            0.2,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            f(&StrategyConfig::dgpo(1, 2), 2.4, 1.0).coefficient,
            2.88f64.sqrt(),
            max_relative = 1e-14
        );
        assert!((f(&StrategyConfig::dgpo(1, 2), 2.4, 1.0).coefficient - 1.697056).abs() < 1e-6);
        assert_relative_eq!(f(&StrategyConfig::cispo(), 0.5, 1.0).coefficient, 0.8);
        assert_relative_eq!(
            f(&StrategyConfig::ce_gppo(0.75, 1.0), 0.5, -1.0).coefficient,
            0.6,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            f(&StrategyConfig::aspo(), 0.9, 1.0).coefficient,
            1.0 / 0.9,
            max_relative = 1e-14
        );
    }

    #[test]
    fn dgpo_in_boundary_prob_weight_is_inverse_old_prob() {
        let token = TokenRecord::new(0.5, 0.4, -1.0).unwrap();
        let c = coefficient(&StrategyConfig::dgpo(1, 1), &token).unwrap();
        assert_eq!(c.region, Region::InBoundary);
        assert_relative_eq!(c.prob_weight, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn aspo_dual_clip_band() {
        let s = StrategyConfig::aspo();
        // LP with tiny ratio: 1/w clamped to 1 + 3.
        assert_relative_eq!(f(&s, 0.1, 1.0).coefficient, 4.0);
        // HN with large ratio: 1/w clamped to 1 - 0.33.
        assert_relative_eq!(f(&s, 2.0, -1.0).coefficient, 0.67);
        assert_eq!(f(&s, 2.0, 1.0).coefficient, 0.0);
    }

    #[test]
    fn continuity_gap_examples() {
        let clip = ClipConfig::default();
        for (n, m) in [(1, 1), (1, 2), (2, 2), (3, 4)] {
            let s = StrategyConfig::dgpo(n, m);
            for side in [BoundarySide::Left, BoundarySide::Right] {
                assert!(continuity_gap(&s, side, 0.37, &clip).unwrap() < 1e-12);
            }
        }
        let g = continuity_gap(&StrategyConfig::grpo(), BoundarySide::Left, 0.5, &clip).unwrap();
        assert_relative_eq!(g, 0.8, max_relative = 1e-12);
        let g = continuity_gap(
            &StrategyConfig::ce_gppo(0.75, 1.0),
            BoundarySide::Left,
            0.5,
            &clip,
        )
        .unwrap();
        assert_relative_eq!(g, 0.2, max_relative = 1e-12);
        assert!(continuity_gap(&StrategyConfig::grpo(), BoundarySide::Left, 0.0, &clip).is_err());
    }

    #[test]
    fn dgpo_constants_match_coefficients() {
        let clip = ClipConfig::default();
        let old = 0.5;
        let (cl, cr) = dgpo_constants(&clip, 1, 2, old);
        assert_relative_eq!(cl, 5.0, max_relative = 1e-14);
        // LN token: W from constants equals F / pi.
        let t = TokenRecord::new(old, 0.2, -1.0).unwrap();
        let c = coefficient(&StrategyConfig::dgpo(1, 2), &t).unwrap();
        assert_relative_eq!(c.prob_weight, cl * 0.2, max_relative = 1e-12);
        let t = TokenRecord::new(0.3, 0.6, 1.0).unwrap();
        let (_, cr3) = dgpo_constants(&clip, 1, 2, 0.3);
        let c = coefficient(&StrategyConfig::dgpo(1, 2), &t).unwrap();
        assert_relative_eq!(c.prob_weight, cr3 * 0.6f64.powf(-0.5), max_relative = 1e-12);
        assert!(cr > 0.0);
    }

    #[test]
    fn landscape_examples() {
        let rows = landscape_grid(
            &[StrategyConfig::TruePg],
            &[0.5, 1.0, 1.5],
            AdvantageSign::Positive,
            0.5,
        )
        .unwrap();
        let fs: Vec<f64> = rows.iter().map(|r| r.coefficient).collect();
        assert_eq!(fs, vec![0.5, 1.0, 1.5]);

        let grid: Vec<f64> = (1..80).map(|i| i as f64 * 0.01).collect();
        let rows = landscape_grid(
            &[StrategyConfig::dgpo(1, 2)],
            &grid,
            AdvantageSign::Negative,
            0.5,
        )
        .unwrap();
        assert!(rows.windows(2).all(|p| p[1].coefficient > p[0].coefficient));

        let rows = landscape_grid(
            &[StrategyConfig::gppo()],
            &grid,
            AdvantageSign::Negative,
            0.5,
        )
        .unwrap();
        for r in &rows {
            // W = 0.8 / pi = 1.6 / w at old_prob = 0.5.
            assert_relative_eq!(r.prob_weight, 1.6 / r.ratio, max_relative = 1e-12);
        }
        assert!(rows.windows(2).all(|p| p[1].prob_weight < p[0].prob_weight));

        assert!(
            landscape_grid(&[StrategyConfig::TruePg], &[], AdvantageSign::Positive, 0.5).is_err()
        );
        assert!(landscape_grid(
            &[StrategyConfig::TruePg],
            &[1.0, 0.5],
            AdvantageSign::Positive,
            0.5
        )
        .is_err());
    }

    #[test]
    fn landscape_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let rows = landscape_grid(
            &StrategyConfig::all_defaults(),
            &[0.3, 0.8, 1.0, 1.2, 1.9],
            AdvantageSign::Negative,
            0.5,
        )
        .unwrap();
        write_landscape_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("strategy,ratio,coefficient,prob_weight\n"));
        assert_eq!(read_landscape_csv(&path).unwrap(), rows);
    }

    #[test]
    fn invalid_strategies_rejected() {
        let t = TokenRecord::new(0.5, 0.5, 1.0).unwrap();
        assert!(coefficient(&StrategyConfig::dgpo(0, 1), &t).is_err());
        assert!(coefficient(&StrategyConfig::ce_gppo(0.0, 1.0), &t).is_err());
        assert!(StrategyConfig::from_name("ppo2").is_err());
        for s in StrategyConfig::all_defaults() {
            assert_eq!(
                StrategyConfig::from_name(s.name()).unwrap().name(),
                s.name()
            );
        }
    }

    fn strategies() -> impl Strategy<Value = StrategyConfig> {
        (
            0.05f64..0.5,
            0.05f64..0.5,
            1u32..5,
            1u32..5,
            0.1f64..1.0,
            0.1f64..1.0,
            0usize..7,
        )
            .prop_map(|(lo, hi, n, m, b1, b2, k)| {
                let clip = ClipConfig::new(lo, hi).unwrap();
                let s = match k {
                    0 => StrategyConfig::TruePg,
                    1 => StrategyConfig::grpo(),
                    2 => StrategyConfig::cispo(),
                    3 => StrategyConfig::gppo(),
                    4 => StrategyConfig::ce_gppo(b1, b2),
                    5 => StrategyConfig::aspo(),
                    _ => StrategyConfig::dgpo(n, m),
                };
                s.with_clip(clip)
            })
    }

    proptest! {
        #[test]
        fn identity_at_sync(s in strategies(), p in 1e-6f64..1.0, adv in -3.0f64..3.0) {
            let t = TokenRecord::new(p, p, adv).unwrap();
            prop_assert_eq!(coefficient(&s, &t).unwrap().coefficient, 1.0);
        }

        #[test]
        fn prob_weight_times_prob_is_coefficient(
            s in strategies(), old in 1e-4f64..1.0, frac in 1e-4f64..1.0, adv in -3.0f64..3.0,
        ) {
            let t = TokenRecord::new(old, frac, adv).unwrap();
            let c = coefficient(&s, &t).unwrap();
            let back = c.prob_weight * t.cur_prob;
            prop_assert!((back - c.coefficient).abs() <= 1e-12 * c.coefficient.abs().max(1e-300));
        }

        #[test]
        fn dgpo_continuity_holds(
            lo in 0.05f64..0.5, hi in 0.05f64..0.5, n in 1u32..5, m in 1u32..5, old in 1e-3f64..1.0,
        ) {
            let clip = ClipConfig::new(lo, hi).unwrap();
            let s = StrategyConfig::dgpo(n, m);
            prop_assert!(continuity_gap(&s, BoundarySide::Left, old, &clip).unwrap() <= 1e-12);
            prop_assert!(continuity_gap(&s, BoundarySide::Right, old, &clip).unwrap() <= 1e-12);
        }

        #[test]
        fn dgpo_left_increasing_and_right_weight_decreasing(
            a in 1e-4f64..0.79, b in 1e-4f64..0.79, n in 1u32..4,
            c in 1.21f64..3.9, d in 1.21f64..3.9, m in 1u32..4,
        ) {
            prop_assume!(a != b && c != d);
            let s = StrategyConfig::dgpo(n, m);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(f(&s, lo, -1.0).coefficient < f(&s, hi, -1.0).coefficient);
            let (lo, hi) = if c < d { (c, d) } else { (d, c) };
            // Same old_prob, so larger ratio means larger pi.
            prop_assert!(f(&s, lo, 1.0).prob_weight > f(&s, hi, 1.0).prob_weight);
        }

        #[test]
        fn right_boundary_pointwise_chain(w in 1.2000001f64..4.0) {
            let dgpo2 = (w - f(&StrategyConfig::dgpo(1, 2), w, 1.0).coefficient).abs();
            let cispo = (w - f(&StrategyConfig::cispo(), w, 1.0).coefficient).abs();
            let grpo = (w - f(&StrategyConfig::grpo(), w, 1.0).coefficient).abs();
            prop_assert!(dgpo2 < cispo);
            prop_assert!(cispo < grpo);
            prop_assert_eq!(
                f(&StrategyConfig::dgpo(1, 1), w, 1.0).coefficient,
                f(&StrategyConfig::cispo(), w, 1.0).coefficient
            );
        }
    }

    #[test]
    fn left_boundary_pointwise_facts() {
        // On LN, DGPO(n=1) is always closer to w than the constant soft clip.
        // The constant soft clip beats hard clipping only above r0 / 2, and
        // CE(beta1) sits between GPPO and GRPO only above (1 + beta1) r0 / 2.
        let r0 = 0.8;
        for i in 1..800 {
            let w = i as f64 * 0.001;
            let d = (w - f(&StrategyConfig::dgpo(1, 2), w, -1.0).coefficient).abs();
            let c = (w - f(&StrategyConfig::cispo(), w, -1.0).coefficient).abs();
            let g = (w - f(&StrategyConfig::grpo(), w, -1.0).coefficient).abs();
            let ce = (w - f(&StrategyConfig::ce_gppo(0.75, 1.0), w, -1.0).coefficient).abs();
            assert!(d < c, "w={w}");
            assert_eq!(c < g, w > r0 / 2.0, "w={w}");
            if w > 0.701 {
                assert!(c < ce && ce < g, "w={w}");
            }
            if w < 0.699 {
                assert!(!(c < ce && ce < g), "w={w}");
            }
        }
    }

    #[test]
    fn left_weight_divergence_vs_decay() {
        let old = 0.5;
        let t = TokenRecord::new(old, 1e-6, -1.0).unwrap();
        let gppo = coefficient(&StrategyConfig::gppo(), &t).unwrap();
        let dgpo = coefficient(&StrategyConfig::dgpo(1, 2), &t).unwrap();
        assert_relative_eq!(gppo.prob_weight, 8e5, max_relative = 1e-9);
        assert_relative_eq!(dgpo.prob_weight, 5e-6, max_relative = 1e-9);
    }
}
