//! Left-boundary bias under the decoupling model.
//!
//! The density of ratios on `(0, r0)` is `k * r^gamma` and the mean gradient
//! magnitude is `delta`, so a strategy's bias is the integral of
//! `(F(r) - r) * delta * k * r^gamma` over `(0, r0)`, taken in absolute value.
//! Every closed form factors as `k * delta * r0^(gamma+2) * shape`, which is
//! why ratios are computed from the shape factors alone: `r0^(gamma+2)`
//! underflows for large `gamma`.

use serde::{Deserialize, Serialize};

use crate::coefficients::{branch_coefficient, StrategyConfig};
use crate::error::{Error, Result};
use crate::regions::{ClipConfig, Region};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticBiasParams {
    pub k: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Left ratio boundary `1 - eps_low`.
    pub r0: f64,
    pub n: u32,
    pub beta1: f64,
}

impl Default for AnalyticBiasParams {
    fn default() -> Self {
        Self {
            k: 1.0,
            gamma: 0.0,
            delta: 1.0,
            r0: 0.8,
            n: 1,
            beta1: 0.75,
        }
    }
}

impl AnalyticBiasParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.delta > 0.0 && self.k.is_finite() && self.delta.is_finite()) {
            return Err(Error::invalid("k and delta must be positive and finite"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.r0 > 0.0 && self.r0 < 1.0) {
            return Err(Error::invalid(format!(
                "r0 must lie in (0, 1), got {}",
                self.r0
            )));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(self.beta1 > 0.0 && self.beta1 <= 1.0) {
            return Err(Error::invalid(format!(
                "beta1 must lie in (0, 1], got {}",
                self.beta1
            )));
        }
        Ok(())
    }

    /// The strategy whose left-boundary branch this parameter set describes.
    pub fn strategy(&self, which: AnalyticStrategy) -> StrategyConfig {
        let clip = ClipConfig {
            eps_low: 1.0 - self.r0,
            eps_high: 0.2,
        };
        let s = match which {
            AnalyticStrategy::Grpo => StrategyConfig::grpo(),
            AnalyticStrategy::Aspo => StrategyConfig::aspo(),
            AnalyticStrategy::Cispo => StrategyConfig::cispo(),
            AnalyticStrategy::Gppo => StrategyConfig::gppo(),
            AnalyticStrategy::Ce => StrategyConfig::ce_gppo(self.beta1, 1.0),
            AnalyticStrategy::Dgpo => StrategyConfig::dgpo(self.n, 1),
        };
        s.with_clip(clip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyticStrategy {
    Grpo,
    Aspo,
    Cispo,
    Gppo,
    Ce,
    Dgpo,
}

impl AnalyticStrategy {
    pub const ALL: [AnalyticStrategy; 6] = [
        AnalyticStrategy::Grpo,
        AnalyticStrategy::Aspo,
        AnalyticStrategy::Cispo,
        AnalyticStrategy::Gppo,
        AnalyticStrategy::Ce,
        AnalyticStrategy::Dgpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalyticStrategy::Grpo => "grpo",
            AnalyticStrategy::Aspo => "aspo",
            AnalyticStrategy::Cispo => "cispo",
            AnalyticStrategy::Gppo => "gppo",
            AnalyticStrategy::Ce => "ce-gppo",
            AnalyticStrategy::Dgpo => "dgpo",
        }
    }
}

/// Closed-form bias divided by `k * delta * r0^(gamma+2)`.
pub fn shape_factor(p: &AnalyticBiasParams, which: AnalyticStrategy) -> Result<f64> {
    p.validate()?;
    let g = p.gamma;
    Ok(match which {
        AnalyticStrategy::Grpo | AnalyticStrategy::Aspo => 1.0 / (g + 2.0),
        AnalyticStrategy::Cispo | AnalyticStrategy::Gppo => 1.0 / (g + 1.0) - 1.0 / (g + 2.0),
        AnalyticStrategy::Ce => (p.beta1 / (g + 1.0) - 1.0 / (g + 2.0)).abs(),
        AnalyticStrategy::Dgpo => 1.0 / (g + 2.0) - 1.0 / (f64::from(p.n) + g + 2.0),
    })
}

pub fn analytic_bias(p: &AnalyticBiasParams, which: AnalyticStrategy) -> Result<f64> {
    Ok(p.k * p.delta * p.r0.powf(p.gamma + 2.0) * shape_factor(p, which)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitPair {
    DgpoOverCispo,
    DgpoOverCe,
    CispoOverCe,
    GrpoOverCe,
}

impl LimitPair {
    pub const ALL: [LimitPair; 4] = [
        LimitPair::DgpoOverCispo,
        LimitPair::DgpoOverCe,
        LimitPair::CispoOverCe,
        LimitPair::GrpoOverCe,
    ];

    fn parts(self) -> (AnalyticStrategy, AnalyticStrategy) {
        use AnalyticStrategy::*;
        match self {
            LimitPair::DgpoOverCispo => (Dgpo, Cispo),
            LimitPair::DgpoOverCe => (Dgpo, Ce),
            LimitPair::CispoOverCe => (Cispo, Ce),
            LimitPair::GrpoOverCe => (Grpo, Ce),
        }
    }

    /// The `gamma -> infinity` value of the ratio.
    pub fn limit(self, p: &AnalyticBiasParams) -> f64 {
        match self {
            LimitPair::DgpoOverCispo => f64::from(p.n),
            LimitPair::DgpoOverCe | LimitPair::CispoOverCe => 0.0,
            LimitPair::GrpoOverCe => 1.0 / (1.0 - p.beta1).abs(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LimitPair::DgpoOverCispo => "dgpo/cispo",
            LimitPair::DgpoOverCe => "dgpo/ce-gppo",
            LimitPair::CispoOverCe => "cispo/ce-gppo",
            LimitPair::GrpoOverCe => "grpo/ce-gppo",
        }
    }
}

/// Finite-`gamma` ratio of two closed forms.
pub fn limit_ratio(p: &AnalyticBiasParams, pair: LimitPair, gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0) {
        return Err(Error::invalid(format!("gamma must be >= 1, got {gamma}")));
    }
    let q = AnalyticBiasParams { gamma, ..*p };
    let (num, den) = pair.parts();
    let d = shape_factor(&q, den)?;
    if d == 0.0 {
        return Err(Error::invalid(format!(
            "{} bias vanishes at gamma = {gamma}",
            den.name()
        )));
    }
    Ok(shape_factor(&q, num)? / d)
}

/// Result of the adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error_estimate: f64,
    pub evaluations: u64,
}

/// Double-exponential quadrature on `[a, b]`, bisecting any piece whose
/// error estimate exceeds its share of `tol`.
pub fn adaptive_integrate<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> Integral {
    fn rec<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64, depth: u32) -> Integral {
        let out = quadrature::double_exponential::integrate(f, a, b, tol);
        let here = Integral {
            value: out.integral,
            error_estimate: out.error_estimate,
            evaluations: u64::from(out.num_function_evaluations),
        };
        if out.error_estimate <= tol || depth == 0 {
            return here;
        }
        let mid = 0.5 * (a + b);
        let l = rec(f, a, mid, 0.5 * tol, depth - 1);
        let r = rec(f, mid, b, 0.5 * tol, depth - 1);
        Integral {
            value: l.value + r.value,
            error_estimate: l.error_estimate + r.error_estimate,
            evaluations: here.evaluations + l.evaluations + r.evaluations,
        }
    }
    rec(f, a, b, tol, 24)
}

/// Bias by numerical quadrature of the coefficient difference, using the
/// library's own left-boundary coefficient for `F`. The signed difference is
/// integrated first and the absolute value taken afterwards.
pub fn quadrature_bias(p: &AnalyticBiasParams, which: AnalyticStrategy) -> Result<Integral> {
    p.validate()?;
    let s = p.strategy(which);
    s.validate()?;
    let (r0, g) = (p.r0, p.gamma);
    // r = r0 * s maps the interval to (0, 1); the Jacobian and density
    // contribute r0^(gamma+1), pulled out of the integral.
    let integrand = |u: f64| {
        let r = r0 * u;
        (branch_coefficient(&s, Region::LowNegative, r) - r) * u.powf(g)
    };
    let inner = adaptive_integrate(integrand, 0.0, 1.0, 1e-14);
    let scale = p.k * p.delta * r0.powf(g + 1.0);
    Ok(Integral {
        value: (scale * inner.value).abs(),
        error_estimate: scale * inner.error_estimate,
        evaluations: inner.evaluations,
    })
}

/// Quadrature of `|F(r) - r|` with the absolute value inside the integral.
/// Differs from [`quadrature_bias`] only where `F - r` changes sign on
/// `(0, r0)`, which happens for CE-GPPO at `r = beta1 * r0`.
pub fn quadrature_abs_bias(p: &AnalyticBiasParams, which: AnalyticStrategy) -> Result<Integral> {
    p.validate()?;
    let s = p.strategy(which);
    let (r0, g) = (p.r0, p.gamma);
    let integrand = |u: f64| {
        let r = r0 * u;
        (branch_coefficient(&s, Region::LowNegative, r) - r).abs() * u.powf(g)
    };
    let kink = if which == AnalyticStrategy::Ce {
        p.beta1
    } else {
        1.0
    };
    let mut inner = adaptive_integrate(integrand, 0.0, kink, 1e-14);
    if kink < 1.0 {
        let right = adaptive_integrate(integrand, kink, 1.0, 1e-14);
        inner.value += right.value;
        inner.error_estimate += right.error_estimate;
        inner.evaluations += right.evaluations;
    }
    let scale = p.k * p.delta * r0.powf(g + 1.0);
    Ok(Integral {
        value: scale * inner.value,
        error_estimate: scale * inner.error_estimate,
        evaluations: inner.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base() -> AnalyticBiasParams {
        AnalyticBiasParams::default()
    }

    #[test]
    fn closed_form_examples() {
        let p = base();
        assert_relative_eq!(
            analytic_bias(&p, AnalyticStrategy::Grpo).unwrap(),
            0.32,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            analytic_bias(&p, AnalyticStrategy::Dgpo).unwrap(),
            0.64 / 6.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            analytic_bias(&p, AnalyticStrategy::Ce).unwrap(),
            0.16,
            max_relative = 1e-14
        );
        assert_eq!(
            analytic_bias(&p, AnalyticStrategy::Cispo).unwrap(),
            analytic_bias(&p, AnalyticStrategy::Gppo).unwrap()
        );
    }

    #[test]
    fn quadrature_examples() {
        let p = base();
        let grpo = quadrature_bias(&p, AnalyticStrategy::Grpo).unwrap();
        assert_relative_eq!(grpo.value, 0.32, max_relative = 1e-10);
        let dgpo = quadrature_bias(&p, AnalyticStrategy::Dgpo).unwrap();
        assert_relative_eq!(dgpo.value, 0.64 / 6.0, max_relative = 1e-10);
        let ce = quadrature_bias(&p, AnalyticStrategy::Ce).unwrap();
        assert_relative_eq!(ce.value, 0.16, max_relative = 1e-10);
    }

    #[test]
    fn abs_inside_differs_for_ce_only() {
        let p = base();
        let ce = quadrature_abs_bias(&p, AnalyticStrategy::Ce).unwrap();
        // 0.6^2 / 2 + 0.2^2 / 2 with the sign change at r = 0.6.
        assert_relative_eq!(ce.value, 0.2, max_relative = 1e-10);
        for s in [
            AnalyticStrategy::Grpo,
            AnalyticStrategy::Cispo,
            AnalyticStrategy::Dgpo,
        ] {
            let a = quadrature_abs_bias(&p, s).unwrap().value;
            let b = quadrature_bias(&p, s).unwrap().value;
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
    }

    #[test]
    fn limit_examples() {
        let p = AnalyticBiasParams { n: 2, ..base() };
        let r = limit_ratio(&p, LimitPair::DgpoOverCispo, 1e4).unwrap();
        assert!((r - 2.0).abs() / 2.0 < 1e-3);
        let r = limit_ratio(&base(), LimitPair::GrpoOverCe, 1e4).unwrap();
        assert!((r - 4.0).abs() / 4.0 < 1e-2);
        assert!(limit_ratio(&base(), LimitPair::DgpoOverCe, 1e4).unwrap() < 0.01);
        assert!(limit_ratio(&base(), LimitPair::CispoOverCe, 1e4).unwrap() < 0.01);
        assert!(limit_ratio(&base(), LimitPair::GrpoOverCe, 0.5).is_err());
    }

    #[test]
    fn ce_zero_crossing_is_reported() {
        // beta1/(g+1) = 1/(g+2) at g = (2 beta1 - 1)/(1 - beta1) = 2.
        let p = base();
        assert!(limit_ratio(&p, LimitPair::GrpoOverCe, 2.0).is_err());
    }

    #[test]
    fn validation() {
        assert!(analytic_bias(
            &AnalyticBiasParams { r0: 1.0, ..base() },
            AnalyticStrategy::Grpo
        )
        .is_err());
        assert!(analytic_bias(
            &AnalyticBiasParams { k: 0.0, ..base() },
            AnalyticStrategy::Grpo
        )
        .is_err());
        assert!(analytic_bias(
            &AnalyticBiasParams { n: 0, ..base() },
            AnalyticStrategy::Dgpo
        )
        .is_err());
    }
}
