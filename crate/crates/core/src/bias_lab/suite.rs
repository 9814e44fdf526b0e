//! The complete bias check: exact enumeration on an aligned and a random
//! instance, the analytic left-boundary chain at a chosen `gamma`, closed
//! forms against quadrature, and large-`gamma` limit ratios.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analytic::{
    analytic_bias, limit_ratio, quadrature_bias, AnalyticBiasParams, AnalyticStrategy, LimitPair,
};
use super::{
    aligned_instance, ordering_report, relation, zero_cell_report, BiasReport, EnumInstance,
    OrderingConfig, Relation, RelationKind,
};
use crate::error::{Error, Result};
use crate::regions::{ClipConfig, Region};

/// Relative tolerance between closed forms and quadrature.
pub const QUADRATURE_RTOL: f64 = 1e-8;
/// Relative tolerance for non-zero limits.
pub const LIMIT_RTOL: f64 = 0.01;
/// Upper bound for limits whose target is zero.
pub const LIMIT_ZERO_BOUND: f64 = 0.01;
pub const LIMIT_GAMMA: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub gamma: f64,
    pub seed: u64,
    pub ordering: OrderingConfig,
    pub clip: ClipConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            gamma: 100.0,
            seed: 42,
            ordering: OrderingConfig::default(),
            clip: ClipConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRow {
    pub strategy: AnalyticStrategy,
    pub bias: f64,
    /// Bias divided by `r0^(gamma+2)`.
    pub shape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRow {
    pub params: AnalyticBiasParams,
    pub strategy: AnalyticStrategy,
    pub closed_form: f64,
    pub quadrature: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub pair: LimitPair,
    pub n: u32,
    pub beta1: f64,
    pub gamma: f64,
    pub value: f64,
    pub target: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub aligned: BiasReport,
    pub zero_cells: BiasReport,
    pub analytic: Vec<AnalyticRow>,
    pub analytic_relations: Vec<Relation>,
    pub quadrature: Vec<QuadratureRow>,
    pub limits: Vec<LimitRow>,
}

/// `(gamma, r0, n, beta1)` points for the closed-form check. `gamma` avoids
/// the CE zero crossings at `(2 beta1 - 1)/(1 - beta1)` (2 and 0.5 here).
pub fn quadrature_grid() -> Vec<AnalyticBiasParams> {
    let mut out = Vec::with_capacity(50);
    for gamma in [0.0, 1.0, 4.5, 10.0, 100.0] {
        for r0 in [0.5, 0.6, 0.7, 0.8, 0.95] {
            for (n, beta1) in [(1, 0.75), (2, 0.6)] {
                out.push(AnalyticBiasParams {
                    k: 1.0,
                    gamma,
                    delta: 1.0,
                    r0,
                    n,
                    beta1,
                });
            }
        }
    }
    out
}

pub fn quadrature_rows(grid: &[AnalyticBiasParams]) -> Result<Vec<QuadratureRow>> {
    let mut rows = Vec::new();
    for p in grid {
        for s in AnalyticStrategy::ALL {
            let closed = analytic_bias(p, s)?;
            let quad = quadrature_bias(p, s)?.value;
            let rel_err = ((quad - closed) / closed).abs();
            rows.push(QuadratureRow {
                params: *p,
                strategy: s,
                closed_form: closed,
                quadrature: quad,
                rel_err,
                pass: rel_err <= QUADRATURE_RTOL,
            });
        }
    }
    Ok(rows)
}

pub fn limit_rows(gamma: f64) -> Result<Vec<LimitRow>> {
    let mut rows = Vec::new();
    for (n, beta1) in [(1, 0.75), (2, 0.75), (2, 0.6)] {
        let p = AnalyticBiasParams {
            n,
            beta1,
            ..AnalyticBiasParams::default()
        };
        for pair in LimitPair::ALL {
            let value = limit_ratio(&p, pair, gamma)?;
            let target = pair.limit(&p);
            let pass = if target == 0.0 {
                value.abs() < LIMIT_ZERO_BOUND
            } else {
                ((value - target) / target).abs() <= LIMIT_RTOL
            };
            rows.push(LimitRow {
                pair,
                n,
                beta1,
                gamma,
                value,
                target,
                pass,
            });
        }
    }
    Ok(rows)
}

/// Closed-form left-boundary biases at `gamma` with `k = delta = 1`,
/// `r0 = 1 - eps_low`, and the ordering `DGPO < CISPO = GPPO < CE < GRPO = ASPO`.
pub fn analytic_chain(
    gamma: f64,
    ordering: &OrderingConfig,
    clip: &ClipConfig,
) -> Result<(Vec<AnalyticRow>, Vec<Relation>)> {
    let p = AnalyticBiasParams {
        k: 1.0,
        gamma,
        delta: 1.0,
        r0: clip.left(),
        n: ordering.n,
        beta1: ordering.beta1,
    };
    let mut rows = Vec::new();
    let mut table = BTreeMap::new();
    for s in AnalyticStrategy::ALL {
        let shape = super::analytic::shape_factor(&p, s)?;
        let bias = analytic_bias(&p, s)?;
        // Compare on the shape factor; the common r0^(gamma+2) only rescales.
        table.insert((s.name(), Region::LowNegative), shape);
        rows.push(AnalyticRow {
            strategy: s,
            bias,
            shape,
        });
    }
    use RelationKind::*;
    let ln = Region::LowNegative;
    let rels = vec![
        relation(ln, Positive, &table, "dgpo", None),
        relation(ln, Less, &table, "dgpo", Some("cispo")),
        relation(ln, Equal, &table, "cispo", Some("gppo")),
        relation(ln, Less, &table, "gppo", Some("ce-gppo")),
        relation(ln, Less, &table, "ce-gppo", Some("grpo")),
        relation(ln, Equal, &table, "grpo", Some("aspo")),
    ];
    Ok((rows, rels))
}

/// Random vocab-5, horizon-2 instance with all five regions populated.
pub fn random_instance(clip: ClipConfig, seed: u64) -> Result<EnumInstance> {
    EnumInstance::random(1, 2, 5, 1.5, clip, seed)
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    if !(cfg.gamma >= 0.0 && cfg.gamma.is_finite()) {
        return Err(Error::invalid(format!(
            "gamma must be >= 0, got {}",
            cfg.gamma
        )));
    }
    let aligned = ordering_report(&aligned_instance(cfg.clip)?, &cfg.ordering)?;
    let zero_cells = zero_cell_report(&random_instance(cfg.clip, cfg.seed)?, &cfg.ordering)?;
    let (analytic, analytic_relations) = analytic_chain(cfg.gamma, &cfg.ordering, &cfg.clip)?;
    Ok(SuiteOutcome {
        aligned,
        zero_cells,
        analytic,
        analytic_relations,
        quadrature: quadrature_rows(&quadrature_grid())?,
        limits: limit_rows(LIMIT_GAMMA)?,
    })
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.aligned.passed()
            && self.zero_cells.passed()
            && self.analytic_relations.iter().all(|r| r.pass)
            && self.quadrature.iter().all(|r| r.pass)
            && self.limits.iter().all(|r| r.pass)
    }

    pub fn summary(&self, gamma: f64) -> String {
        let mut s = String::new();
        let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
        let _ = writeln!(s, "== aligned instance: exact enumeration ==");
        s.push_str(&self.aligned.summary());
        let _ = writeln!(s, "\n== random instance: zero and positive cells ==");
        s.push_str(&self.zero_cells.summary());
        let _ = writeln!(
            s,
            "\n== analytic left boundary at gamma = {gamma} (shape factors) =="
        );
        for r in &self.analytic {
            let _ = writeln!(
                s,
                "{:<8} shape {:.7e}  bias {:e}",
                r.strategy.name(),
                r.shape,
                r.bias
            );
        }
        for r in &self.analytic_relations {
            let _ = writeln!(s, "{}", r.describe());
        }
        let worst = self
            .quadrature
            .iter()
            .map(|r| r.rel_err)
            .fold(0.0, f64::max);
        let _ = writeln!(
            s,
            "\n== closed form vs quadrature: {} checks, max rel err {worst:e}: {} ==",
            self.quadrature.len(),
            verdict(self.quadrature.iter().all(|r| r.pass))
        );
        let _ = writeln!(s, "\n== limit ratios ==");
        for r in &self.limits {
            let _ = writeln!(
                s,
                "{:<14} n={} b1={} gamma={:e}: {:.6} (target {:.6}) {}",
                r.pair.label(),
                r.n,
                r.beta1,
                r.gamma,
                r.value,
                r.target,
                verdict(r.pass)
            );
        }
        let _ = writeln!(s, "\noverall: {}", verdict(self.passed()));
        s
    }

    /// Writes `bias_report.csv` (aligned instance), `zero_cells.csv`,
    /// `analytic.csv`, `quadrature.csv`, `limits.csv` and `summary.txt`.
    pub fn write(&self, dir: &Path, gamma: f64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.aligned.write_csv(&dir.join("bias_report.csv"))?;
        self.zero_cells.write_csv(&dir.join("zero_cells.csv"))?;

        let path = dir.join("analytic.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["strategy", "gamma", "bias", "shape"])?;
        for r in &self.analytic {
            w.write_record([
                r.strategy.name().to_string(),
                gamma.to_string(),
                r.bias.to_string(),
                r.shape.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("quadrature.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "strategy",
            "gamma",
            "r0",
            "n",
            "beta1",
            "closed_form",
            "quadrature",
            "rel_err",
            "pass",
        ])?;
        for r in &self.quadrature {
            w.write_record([
                r.strategy.name().to_string(),
                r.params.gamma.to_string(),
                r.params.r0.to_string(),
                r.params.n.to_string(),
                r.params.beta1.to_string(),
                r.closed_form.to_string(),
                r.quadrature.to_string(),
                r.rel_err.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("limits.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["pair", "n", "beta1", "gamma", "value", "target", "pass"])?;
        for r in &self.limits {
            w.write_record([
                r.pair.label().to_string(),
                r.n.to_string(),
                r.beta1.to_string(),
                r.gamma.to_string(),
                r.value.to_string(),
                r.target.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("summary.txt");
        std::fs::write(&path, self.summary(gamma)).map_err(|e| Error::io(&path, e))
    }
}
