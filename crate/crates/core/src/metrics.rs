//! Training diagnostics: per-update step records, per-iteration summaries,
//! ratio histograms, Avg@K/Pass@K, and JSONL/CSV export.
//!
//! Floats are written with Rust's shortest round-trip formatting, so export
//! followed by parse reproduces every finite `f64` bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::Region;

/// Version of the JSONL/CSV record layouts, recorded in run manifests.
pub const SCHEMA_VERSION: u32 = 1;

pub const HIST_BINS: usize = 64;
pub const HIST_LEN: usize = HIST_BINS + 2;
pub const HIST_MIN: f64 = 1e-4;
pub const HIST_MAX: f64 = 1e4;

/// Histogram slot for an importance ratio: slot 0 collects `w < 1e-4`,
/// slot 65 collects `w >= 1e4` (and non-finite values), and slots 1..=64
/// split `[1e-4, 1e4)` evenly in `log10`.
pub fn hist_bin(w: f64) -> usize {
    if w.is_nan() || w >= HIST_MAX {
        return HIST_LEN - 1;
    }
    if w < HIST_MIN {
        return 0;
    }
    let span = HIST_MAX.log10() - HIST_MIN.log10();
    let pos = (w.log10() - HIST_MIN.log10()) / span * HIST_BINS as f64;
    1 + (pos.floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Lower edge of histogram slot `bin` (slot 0 has lower edge 0).
pub fn hist_lower_edge(bin: usize) -> f64 {
    match bin {
        0 => 0.0,
        b if b >= HIST_LEN - 1 => HIST_MAX,
        b => {
            let span = HIST_MAX.log10() - HIST_MIN.log10();
            10f64.powf(HIST_MIN.log10() + span * (b - 1) as f64 / HIST_BINS as f64)
        }
    }
}

pub fn ratio_histogram(ratios: &[f64]) -> Vec<u64> {
    let mut hist = vec![0; HIST_LEN];
    for &w in ratios {
        hist[hist_bin(w)] += 1;
    }
    hist
}

/// Token fractions per region, keyed by the region abbreviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct RegionFractions {
    pub LN: f64,
    pub HP: f64,
    pub LP: f64,
    pub HN: f64,
    pub M: f64,
}

impl RegionFractions {
    /// All tokens in-boundary; also used when there are no tokens.
    pub fn all_in_boundary() -> Self {
        Self::from_array([0.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn from_counts(counts: &[usize; 5]) -> Self {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Self::all_in_boundary();
        }
        let t = total as f64;
        Self::from_array(counts.map(|c| c as f64 / t))
    }

    /// Values in [`Region::ALL`] order.
    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            LN: v[0],
            HP: v[1],
            LP: v[2],
            HN: v[3],
            M: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.LN, self.HP, self.LP, self.HN, self.M]
    }

    pub fn get(&self, region: Region) -> f64 {
        self.to_array()[region.index()]
    }
}

/// Raw per-update output of the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub region_counts: [usize; 5],
    pub ratios: Vec<f64>,
    /// Extremes of `W = F / pi` over tokens with non-zero advantage; zero
    /// when there are none.
    pub wmin: f64,
    pub wmax: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One line of the per-update metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub update: usize,
    pub entropy: f64,
    pub acc: f64,
    pub frac: RegionFractions,
    pub w_hist: Vec<u64>,
    pub wmin: f64,
    pub wmax: f64,
    pub collapse: bool,
}

pub fn record_step(
    iter: usize,
    update: usize,
    entropy: f64,
    acc: f64,
    diag: &StepDiagnostics,
) -> StepRecord {
    StepRecord {
        iter,
        update,
        entropy,
        acc,
        frac: RegionFractions::from_counts(&diag.region_counts),
        w_hist: ratio_histogram(&diag.ratios),
        wmin: diag.wmin,
        wmax: diag.wmax,
        collapse: false,
    }
}

/// Marker record for a run stopped by a non-finite gradient or entropy.
pub fn collapse_record(iter: usize, update: usize, entropy: f64, acc: f64) -> StepRecord {
    StepRecord {
        iter,
        update,
        entropy,
        acc,
        frac: RegionFractions::all_in_boundary(),
        w_hist: vec![0; HIST_LEN],
        wmin: 0.0,
        wmax: 0.0,
        collapse: true,
    }
}

/// Per-iteration summary after all updates of that iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iter: usize,
    /// Mean entropy of the updated policy over the rollout's contexts.
    pub entropy: f64,
    /// Fraction of correct responses in the rollout.
    pub rollout_acc: f64,
    /// Exact probability of a correct response under the updated policy,
    /// averaged over all queries.
    pub expected_acc: f64,
    pub collapse: bool,
}

/// Mean per-query success rate over the sampled responses.
pub fn avg_at_k(successes: &[Vec<bool>]) -> Result<f64> {
    if successes.is_empty() {
        return Err(Error::invalid("avg@k needs at least one query"));
    }
    let mut total = 0.0;
    for s in successes {
        if s.is_empty() {
            return Err(Error::invalid("every query needs at least one sample"));
        }
        total += s.iter().filter(|&&x| x).count() as f64 / s.len() as f64;
    }
    Ok(total / successes.len() as f64)
}

/// Unbiased Pass@k, `1 - C(K-c, k) / C(K, k)` per query, averaged.
pub fn pass_at_k(successes: &[Vec<bool>], k: usize) -> Result<f64> {
    if successes.is_empty() {
        return Err(Error::invalid("pass@k needs at least one query"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut total = 0.0;
    for s in successes {
        let big_k = s.len();
        if k > big_k {
            return Err(Error::invalid(format!("k = {k} exceeds {big_k} samples")));
        }
        let c = s.iter().filter(|&&x| x).count();
        // C(K-c, k) / C(K, k) as a telescoping product; zero once k > K-c.
        let miss = if k > big_k - c {
            0.0
        } else {
            (0..k)
                .map(|i| (big_k - c - i) as f64 / (big_k - i) as f64)
                .product()
        };
        total += 1.0 - miss;
    }
    Ok(total / successes.len() as f64)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Flattened CSV header for [`StepRecord`].
pub fn step_csv_header() -> Vec<String> {
    let mut h: Vec<String> = ["iter", "update", "entropy", "acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(Region::ALL.iter().map(|r| format!("frac_{}", r.abbrev())));
    h.extend((0..HIST_LEN).map(|i| format!("w_hist_{i}")));
    h.extend(["wmin", "wmax", "collapse"].iter().map(|s| s.to_string()));
    h
}

pub fn write_steps_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(step_csv_header())?;
    for r in records {
        if r.w_hist.len() != HIST_LEN {
            return Err(Error::invalid(format!(
                "histogram has {} slots, expected {HIST_LEN}",
                r.w_hist.len()
            )));
        }
        let mut row = vec![
            r.iter.to_string(),
            r.update.to_string(),
            r.entropy.to_string(),
            r.acc.to_string(),
        ];
        row.extend(r.frac.to_array().iter().map(f64::to_string));
        row.extend(r.w_hist.iter().map(u64::to_string));
        row.extend([
            r.wmin.to_string(),
            r.wmax.to_string(),
            r.collapse.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid(format!("csv record {line}: bad field {i}")))
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != step_csv_header() {
        return Err(Error::invalid(format!(
            "{}: unexpected step CSV header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut frac = [0.0; 5];
        for (k, f) in frac.iter_mut().enumerate() {
            *f = field(&rec, 4 + k, line)?;
        }
        let w_hist = (0..HIST_LEN)
            .map(|k| field(&rec, 9 + k, line))
            .collect::<Result<Vec<u64>>>()?;
        let tail = 9 + HIST_LEN;
        out.push(StepRecord {
            iter: field(&rec, 0, line)?,
            update: field(&rec, 1, line)?,
            entropy: field(&rec, 2, line)?,
            acc: field(&rec, 3, line)?,
            frac: RegionFractions::from_array(frac),
            w_hist,
            wmin: field(&rec, tail, line)?,
            wmax: field(&rec, tail + 1, line)?,
            collapse: field(&rec, tail + 2, line)?,
        });
    }
    Ok(out)
}

/// Sidecar describing the files in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
}

impl Manifest {
    pub fn new(files: Vec<ManifestEntry>) -> Self {
        Self {
            format: "cliplab.metrics".to_string(),
            schema_version: SCHEMA_VERSION,
            files,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample_record(i: usize) -> StepRecord {
        let diag = StepDiagnostics {
            region_counts: [1, 2, 3, 4, 90],
            ratios: (0..100).map(|k| 0.5 + k as f64 / 97.0).collect(),
            wmin: 0.1 / 3.0,
            wmax: 1e5 + 1.0 / 7.0,
            grad_norm: 0.3,
        };
        record_step(i, i % 16, 2.0794415416798357, 0.1 + 1.0 / 3.0, &diag)
    }

    #[test]
    fn histogram_conserves_count() {
        let rec = sample_record(0);
        assert_eq!(rec.w_hist.iter().sum::<u64>(), 100);
        assert_relative_eq!(rec.frac.to_array().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(hist_bin(1e-5), 0);
        assert_eq!(hist_bin(1e-4), 1);
        assert_eq!(hist_bin(1.0), 33);
        assert_eq!(hist_bin(9_999.0), 64);
        assert_eq!(hist_bin(1e4), 65);
        assert_eq!(hist_bin(f64::INFINITY), 65);
        assert_relative_eq!(hist_lower_edge(33), 1.0, max_relative = 1e-12);
        for b in 1..HIST_LEN - 1 {
            let mid = (hist_lower_edge(b) * hist_lower_edge(b + 1)).sqrt();
            assert_eq!(hist_bin(mid), b);
        }
    }

    #[test]
    fn fractions_without_tokens() {
        let f = RegionFractions::from_counts(&[0; 5]);
        assert_eq!(f.M, 1.0);
        assert_eq!(f.get(Region::LowNegative), 0.0);
    }

    #[test]
    fn pass_at_k_examples() {
        let all = vec![vec![true; 4]; 3];
        let none = vec![vec![false; 4]; 3];
        for k in 1..=4 {
            assert_eq!(pass_at_k(&all, k).unwrap(), 1.0);
            assert_eq!(pass_at_k(&none, k).unwrap(), 0.0);
        }
        let half = vec![vec![true, true, false, false]];
        assert_relative_eq!(
            pass_at_k(&half, 2).unwrap(),
            5.0 / 6.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(avg_at_k(&half).unwrap(), 0.5);
        assert_eq!(pass_at_k(&half, 4).unwrap(), 1.0);
        assert!(pass_at_k(&half, 5).is_err());
    }

    #[test]
    fn jsonl_schema_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.jsonl");
        let recs: Vec<_> = (0..5).map(sample_record).collect();
        write_jsonl(&recs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let keys: Vec<&str> = [
            "\"iter\"",
            "\"update\"",
            "\"entropy\"",
            "\"acc\"",
            "\"frac\"",
            "\"w_hist\"",
            "\"wmin\"",
            "\"wmax\"",
            "\"collapse\"",
        ]
        .to_vec();
        let mut last = 0;
        for k in keys {
            let at = first.find(k).unwrap();
            assert!(at >= last, "field order for {k}");
            last = at;
        }
        assert!(first.contains("\"frac\":{\"LN\":"));
        assert_eq!(read_jsonl::<StepRecord>(&path).unwrap(), recs);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.csv");
        let mut recs: Vec<_> = (0..5).map(sample_record).collect();
        recs.push(collapse_record(5, 0, 0.5, 0.25));
        write_steps_csv(&recs, &path).unwrap();
        assert_eq!(read_steps_csv(&path).unwrap(), recs);
    }

    #[test]
    fn empty_exports() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("e.csv");
        write_steps_csv(&[], &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_steps_csv(&csv_path).unwrap().is_empty());
        let jsonl = dir.path().join("e.jsonl");
        write_jsonl::<StepRecord>(&[], &jsonl).unwrap();
        assert_eq!(std::fs::read_to_string(&jsonl).unwrap(), "");
    }

    proptest! {
        #[test]
        fn float_fields_round_trip(entropy in any::<f64>(), wmax in any::<f64>()) {
            prop_assume!(entropy.is_finite() && wmax.is_finite());
            let mut rec = sample_record(1);
            rec.entropy = entropy;
            rec.wmax = wmax;
            let text = serde_json::to_string(&rec).unwrap();
            let back: StepRecord = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
