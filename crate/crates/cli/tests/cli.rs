use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rgr::io::{read_run_log, RunLogWriter};
use rgr::sweep::{default_step_cutoff, RunRecord};
use tempfile::TempDir;

fn rgr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgr")).current_dir(dir).args(args).output().expect("spawn rgr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

const ONE_HOT_WIDE: &str = r#"
seed = 3
[construct]
construction = "I"
m = 64
p = 0.25
d_k = 256

[verify]
trials = 5
"#;

#[test]
fn construct_writes_artifacts_and_passes() {
    let t = TempDir::new().unwrap();
    write(t.path(), "c.toml", ONE_HOT_WIDE);
    let o = rgr(t.path(), &["construct", "--config", "c.toml", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["params.bin", "embedding.bin", "graph.json", "permutation.json", "report.json", "manifest-construct.json"] {
        assert!(t.path().join("a").join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["pass"], true);
    assert_eq!(report["construction"], "I");

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("a/manifest-construct.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "construct");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 5);

    let o = rgr(
        t.path(),
        &["verify", "--params", "a/params.bin", "--embedding", "a/embedding.bin", "--graph", "a/graph.json", "--out", "v"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn narrow_construction_exits_with_verification_failure() {
    let t = TempDir::new().unwrap();
    write(t.path(), "c.toml", &ONE_HOT_WIDE.replace("d_k = 256", "d_k = 4"));
    assert_eq!(code(&rgr(t.path(), &["construct", "--config", "c.toml", "--out", "a"])), 1);
    assert_eq!(code(&rgr(t.path(), &["verify", "--config", "c.toml", "--out", "a"])), 1);
    assert!(t.path().join("a/report.json").exists());
}

#[test]
fn monte_carlo_verify_passes_for_wide_signatures() {
    let t = TempDir::new().unwrap();
    write(t.path(), "c.toml", ONE_HOT_WIDE);
    let o = rgr(t.path(), &["verify", "--config", "c.toml", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mc: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("v/monte_carlo.json")).unwrap()).unwrap();
    assert_eq!(mc["failure_rate"], 0.0);
    assert_eq!(mc["trials"].as_array().unwrap().len(), 5);
}

#[test]
fn config_errors_exit_two() {
    let t = TempDir::new().unwrap();
    write(t.path(), "wide.toml", "[construct]\nconstruction = \"II\"\nm = 16\nd_model = 32\nd_k = 8\n");
    let o = rgr(t.path(), &["construct", "--config", "wide.toml", "--out", "a"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_model"));

    write(t.path(), "broken.toml", "[construct]\nconstruction = \"I\"\nm = 64\np = \n");
    let o = rgr(t.path(), &["construct", "--config", "broken.toml", "--out", "a"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&o.stderr));

    write(t.path(), "unknown.toml", "[construct]\nconstruction = \"I\"\nm = 64\np = 0.25\nd_k = 8\nwidth = 3\n");
    assert_eq!(code(&rgr(t.path(), &["construct", "--config", "unknown.toml", "--out", "a"])), 2);

    write(t.path(), "empty.toml", "seed = 1\n");
    assert_eq!(code(&rgr(t.path(), &["construct", "--config", "empty.toml", "--out", "a"])), 2);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let t = TempDir::new().unwrap();
    write(
        t.path(),
        "c.toml",
        "seed = 9\n[construct]\nconstruction = \"II\"\nm = 64\nd_model = 16\nd_k = 12\n\n[embedding]\nkind = \"gaussian-unit-norm\"\nm = 32\nd_model = 8\n\n[graph]\nkind = \"bounded\"\nm = 32\nm_prime = 40\nmax_degree = 3\n",
    );
    for out in ["a", "b"] {
        rgr(t.path(), &["construct", "--config", "c.toml", "--out", out, "--serial"]);
        assert_eq!(code(&rgr(t.path(), &["gen-embed", "--config", "c.toml", "--out", out])), 0);
        assert_eq!(code(&rgr(t.path(), &["gen-graph", "--config", "c.toml", "--out", out])), 0);
    }
    for f in ["params.bin", "embedding.bin", "embedding.csv", "graph.json", "report.json"] {
        let a = fs::read(t.path().join("a").join(f)).unwrap();
        let b = fs::read(t.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let g: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("a/graph.json")).unwrap()).unwrap();
    assert_eq!(g["edges"].as_array().unwrap().len(), 40);
}

const TINY_SWEEP: &str = r#"
[sweep]
ms = [16]
d_models = [8]
heads = [1, 2]
dks = [4, 8]
seeds = 2
cutoffs = [{ m = 16, d_model = 8, steps = 200 }]

[sweep.train]
eval_every = 100
n_val = 20
n_test = 40
ell = 8
"#;

#[test]
fn sweep_is_resumable_and_refuses_foreign_logs() {
    let t = TempDir::new().unwrap();
    write(t.path(), "s.toml", TINY_SWEEP);
    let o = rgr(t.path(), &["sweep", "--config", "s.toml", "--out", "sw", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = t.path().join("sw/sweep.jsonl");
    let full = read_run_log(&log).unwrap();
    // h in {1,2} x D_K in {4,8} x 2 seeds
    assert_eq!(full.len(), 8);
    assert!(full.iter().all(|r| r.steps <= 200 && (0.0..=1.0).contains(&r.test_f1)));

    // drop the last three records, as if interrupted
    let text = fs::read_to_string(&log).unwrap();
    let kept: Vec<&str> = text.lines().take(5).collect();
    fs::write(&log, kept.join("\n") + "\n").unwrap();
    let o = rgr(t.path(), &["sweep", "--config", "s.toml", "--out", "sw", "--serial"]);
    assert_eq!(code(&o), 0);
    let resumed = read_run_log(&log).unwrap();
    assert_eq!(resumed.len(), 8);
    let mut a: Vec<_> = full.iter().map(RunRecord::key).collect();
    let mut b: Vec<_> = resumed.iter().map(RunRecord::key).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
    for r in &resumed {
        let orig = full.iter().find(|f| f.key() == r.key()).unwrap();
        assert_eq!(orig.test_f1, r.test_f1);
    }

    write(t.path(), "s2.toml", &TINY_SWEEP.replace("n_val = 20", "n_val = 30"));
    let o = rgr(t.path(), &["sweep", "--config", "s2.toml", "--out", "sw"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing"));
    assert_eq!(read_run_log(&log).unwrap().len(), 8);

    let o = rgr(t.path(), &["report", "--log", "sw/sweep.jsonl", "--out", "rep"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(t.path().join("rep/records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn narrow_models_get_longer_step_cutoffs() {
    assert_eq!(default_step_cutoff(256, 16), 30_000);
    assert_eq!(default_step_cutoff(512, 16), 80_000);
}

/// Runs whose F1 follows a logistic curve crossing 0.99 at D_K = c * m ln m / d.
fn synthetic_log(path: &Path, c: f64) {
    let mut w = RunLogWriter::open(path).unwrap();
    for m in [64usize, 128, 256, 512] {
        for d in [16usize, 32, 64] {
            let planted = c * m as f64 * (m as f64).ln() / d as f64;
            let width = 0.05 * planted;
            for dk in (1..=2000).filter(|k| *k as f64 > 0.5 * planted && (*k as f64) < 1.5 * planted) {
                for seed in 0..3u64 {
                    let z = (dk as f64 - planted) / width + (99.0f64).ln() + 0.001 * seed as f64;
                    let f1 = 1.0 / (1.0 + (-z).exp());
                    let r = RunRecord {
                        m,
                        d_model: d,
                        h: 1,
                        dk,
                        seed,
                        test_f1: f1,
                        steps: 1,
                        stopped_early: false,
                        config_hash: "synthetic".into(),
                        ell: 16,
                        ell_test: 16,
                    };
                    w.append(&r).unwrap();
                }
            }
        }
    }
}

#[test]
fn analyze_recovers_planted_slope() {
    let t = TempDir::new().unwrap();
    synthetic_log(&t.path().join("log.jsonl"), 1.19);
    let o = rgr(t.path(), &["analyze", "--log", "log.jsonl", "--out", "an"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("an/analysis.json")).unwrap()).unwrap();
    let slope = report["capacity_fit"]["slope"].as_f64().unwrap();
    assert!((slope / 1.19 - 1.0).abs() < 0.05, "slope {slope}");
    assert_eq!(report["points"].as_array().unwrap().len(), 12);
    let csv = fs::read_to_string(t.path().join("an/points.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);

    let o = rgr(t.path(), &["analyze", "--log", "log.jsonl", "--out", "an2", "--exclude-outliers"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("an2/analysis.json")).unwrap()).unwrap();
    let excluded = report["points"].as_array().unwrap().iter().filter(|p| p["excluded"] == true).count();
    assert_eq!(excluded, 3);
    assert_eq!(report["capacity_fit"]["points"], 9);
}

#[test]
fn analyze_without_passing_points_and_empty_logs() {
    let t = TempDir::new().unwrap();
    let log = t.path().join("low.jsonl");
    let mut w = RunLogWriter::open(&log).unwrap();
    for seed in 0..3 {
        w.append(&RunRecord {
            m: 64,
            d_model: 16,
            h: 2,
            dk: 8,
            seed,
            test_f1: 0.5,
            steps: 10,
            stopped_early: false,
            config_hash: "x".into(),
            ell: 16,
            ell_test: 16,
        })
        .unwrap();
    }
    let o = rgr(t.path(), &["analyze", "--log", "low.jsonl", "--out", "an"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("an/analysis.json")).unwrap()).unwrap();
    assert!(report["points"][0]["estimate"]["central"].is_null());
    assert!(report["capacity_fit"].is_null());

    fs::write(t.path().join("empty.jsonl"), "").unwrap();
    let o = rgr(t.path(), &["analyze", "--log", "empty.jsonl", "--out", "an"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn train_writes_params_and_curves() {
    let t = TempDir::new().unwrap();
    write(
        t.path(),
        "t.toml",
        "seed = 4\n[train]\nm = 16\nd_model = 8\nh = 2\nD_K = 8\n\n[train.options]\nmax_steps = 300\neval_every = 100\nn_val = 20\nn_test = 40\nell = 8\n",
    );
    let o = rgr(t.path(), &["train", "--config", "t.toml", "--out", "tr"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("tr/train.json")).unwrap()).unwrap();
    assert_eq!(r["D_K"], 8);
    assert!(r["steps"].as_u64().unwrap() <= 300);
    assert!(!r["loss_curve"].as_array().unwrap().is_empty());
    assert!(t.path().join("tr/params.bin").exists());
}
