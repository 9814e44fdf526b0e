use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cliplab::coefficients::{landscape_grid, read_landscape_csv, AdvantageSign, StrategyConfig};
use cliplab::environment::Task;
use cliplab::metrics::{read_jsonl, read_steps_csv, IterationSummary, StepRecord};
use cliplab::policy::TabularPolicy;

fn cliplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cliplab"))
        .args(args)
        .env_remove("CLIPLAB_OUTPUT_ROOT")
        .output()
        .expect("spawn cliplab")
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = cliplab(&[
        "train",
        "--strategy",
        "dgpo",
        "--seed",
        "42",
        "--iterations",
        "5",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let run = out.join("dgpo/seed-42");
    let steps: Vec<StepRecord> = read_jsonl(&run.join("steps.jsonl")).unwrap();
    assert_eq!(steps.len(), 5 * 16);
    assert_eq!(read_steps_csv(&run.join("steps.csv")).unwrap(), steps);
    let iters: Vec<IterationSummary> = read_jsonl(&run.join("iterations.jsonl")).unwrap();
    assert_eq!(iters.len(), 5);
    let task = Task::load(&out.join("task.json")).unwrap();
    let policy = TabularPolicy::load(&run.join("policy.json")).unwrap();
    task.check_policy(&policy).unwrap();
    let resolved = std::fs::read_to_string(run.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("train.total_iterations = 5"));
    assert!(resolved.contains("strategy.kinds = dgpo"));
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"schema_version\": 1"));
}

#[test]
fn identical_config_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let args = [
        "train",
        "--strategy",
        "grpo,cispo",
        "--seed",
        "3,4",
        "--iterations",
        "8",
        "--output",
        out.to_str().unwrap(),
    ];
    assert_eq!(cliplab(&args).status.code(), Some(0));
    let first = snapshot(&out);
    std::fs::remove_dir_all(&out).unwrap();
    assert_eq!(cliplab(&args).status.code(), Some(0));
    let second = snapshot(&out);
    assert_eq!(first.len(), 1 + 2 * 2 * 6);
    assert_eq!(first, second);
}

#[test]
fn config_file_and_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "task.num_queries = 4\ntask.vocab_size = 3\ntask.horizon = 2\n\
         train.rollout_batch = 4\ntrain.updates_per_sync = 4\ntrain.total_iterations = 3\n\
         strategy.kinds = ce-gppo\nrun.seeds = 9\nrun.output_dir = ignored\n",
    )
    .unwrap();
    let root = tmp.path().join("env-root");
    let o = Command::new(env!("CARGO_BIN_EXE_cliplab"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("CLIPLAB_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(root.join("ce-gppo/seed-9/steps.jsonl").exists());
    assert!(!Path::new("ignored").exists());
}

#[test]
fn bad_config_exits_one_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(
        &cfg,
        "train.learning_rate = 0.1\ntrain.lerning_rate = 0.2\n",
    )
    .unwrap();
    let o = cliplab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("line 2") && err.contains("train.lerning_rate"),
        "{err}"
    );
    assert_eq!(cliplab(&["nonsense"]).status.code(), Some(1));
}

#[test]
fn bias_check_passes_at_gamma_100() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cliplab(&[
        "bias-check",
        "--gamma",
        "100",
        "--output",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("overall: pass"), "{summary}");
    for f in [
        "bias_report.csv",
        "zero_cells.csv",
        "analytic.csv",
        "quadrature.csv",
        "limits.csv",
        "summary.txt",
    ] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn bias_check_failure_exits_three() {
    // At gamma = 0 the CE bias drops below GPPO's and the chain breaks.
    let tmp = tempfile::tempdir().unwrap();
    let o = cliplab(&[
        "bias-check",
        "--gamma",
        "0",
        "--output",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn landscape_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cliplab(&[
        "landscape",
        "--strategies",
        "grpo,gppo,dgpo",
        "--old-prob",
        "0.5",
        "--sign",
        "neg",
        "--points",
        "50",
        "--output",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for name in ["grpo", "gppo", "dgpo"] {
        let rows = read_landscape_csv(&tmp.path().join(format!("landscape_{name}.csv"))).unwrap();
        let grid: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        assert!(grid.contains(&0.8) && grid.contains(&1.2));
        let s = StrategyConfig::from_name(name).unwrap();
        let expect = landscape_grid(&[s], &grid, AdvantageSign::Negative, 0.5).unwrap();
        assert_eq!(rows, expect);
    }
}

#[test]
fn sweep_covers_four_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cliplab(&[
        "sweep",
        "--iterations",
        "2",
        "--output",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for (n, m) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let run = tmp.path().join(format!("dgpo-n{n}-m{m}/seed-42"));
        assert!(run.join("steps.jsonl").exists());
        let cfg = std::fs::read_to_string(run.join("resolved.cfg")).unwrap();
        assert!(cfg.contains(&format!("strategy.n = {n}\n")), "{cfg}");
        assert!(cfg.contains(&format!("strategy.m = {m}\n")));
    }
}
