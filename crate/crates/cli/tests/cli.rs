use std::path::Path;
use std::process::{Command, Output};

use toflow::config::RunConfig;
use toflow::dynamics::DynamicsNet;
use toflow::metrics::{self, Checkpoint};
use toflow::optim::{AdamConfig, AdamState};
use toflow::temporal::TimePolicy;

const SMALL: [&str; 5] = [
    "schedule.batch_size=32",
    "schedule.eval_every=3",
    "dataset.test_size=200",
    "model.hidden=[8]",
    "schedule.checkpoint_every=3",
];

fn toflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toflow")).args(args).env_remove("TOFLOW_OUT_DIR").output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

fn train_small(dir: &Path, dataset: &str, iterations: &str) -> Output {
    let out = format!("out_dir={}", dir.display());
    let name = format!("dataset.name={dataset}");
    let iters = format!("schedule.iterations={iterations}");
    let mut sets = vec![out.as_str(), name.as_str(), iters.as_str()];
    sets.extend(SMALL);
    toflow(&with_sets(vec!["train"], &sets))
}

fn csv_rows(s: &str) -> Vec<Vec<f64>> {
    s.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn train_reports_summary_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = train_small(&run, "moons", "6");
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    for key in ["final_test_loss:", "average_nfe:", "wall_time:", "iterations: 6/6"] {
        assert!(stdout.contains(key), "missing {key} in {stdout}");
    }
    for f in [metrics::METRICS_FILE, metrics::CHECKPOINT_FILE, metrics::CHECKPOINT_SIDECAR, metrics::RUN_META_FILE] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(metrics::read_rows(&run).unwrap().len(), 6);

    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join(metrics::RUN_META_FILE)).unwrap()).unwrap();
    let echoed = RunConfig::from_value(meta["config"].clone(), &[]).unwrap();
    let ck = Checkpoint::load(&run).unwrap();
    assert_eq!(echoed, RunConfig::from_value(ck.config, &[]).unwrap());
    assert_eq!(echoed.schedule.iterations, 6);
}

#[test]
fn missing_dataset_name_is_a_validation_error() {
    let out = toflow(&["train", "--set", "schedule.iterations=1"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("dataset.name"));
}

#[test]
fn unknown_key_is_rejected_with_its_path() {
    let out = toflow(&["train", "--set", "dataset.name=moons", "--set", "policy.alhpa=0.2"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("alhpa"), "{}", text(&out.stderr));
}

#[test]
fn train_resumes_from_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), "rings", "3").status.success());
    let out = toflow(&["train", "--resume", dir.path().to_str().unwrap(), "--set", "schedule.iterations=6"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rows = metrics::read_rows(dir.path()).unwrap();
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn failed_run_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = toflow(&[
        "train",
        "--set",
        &format!("out_dir={}", dir.path().display()),
        "--set",
        "dataset.name=moons",
        "--set",
        "schedule.iterations=3",
        "--set",
        "solver.max_steps=1",
    ]);
    assert!(!out.status.success());
    assert!(text(&out.stdout).contains("iterations: 0/3"));
    assert!(text(&out.stderr).contains("iteration 1"));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_toflow"))
        .args(with_sets(vec!["train"], &["dataset.name=circles", "schedule.iterations=2"]))
        .args(SMALL.iter().flat_map(|s| ["--set", s]))
        .env("TOFLOW_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].as_ref().unwrap().path().join(metrics::METRICS_FILE).is_file());
}

fn zero_checkpoint(dir: &Path, dim: usize, dataset: &str) {
    let cfg = RunConfig::from_overrides(&[format!("dataset.name={dataset}"), "dataset.test_size=500".into()]).unwrap();
    let net = DynamicsNet::zeros(dim, &[4]);
    let ck = Checkpoint {
        iteration: 0,
        weight_opt: AdamState::for_params(AdamConfig::default(), &net.params()),
        net,
        policy: TimePolicy::fixed(0.0, 0.5).unwrap(),
        nfe_window: vec![],
        config: cfg.to_value(),
    };
    ck.save(dir).unwrap();
}

#[test]
fn eval_of_zero_flow_is_gaussian_nll_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    zero_checkpoint(dir.path(), 2, "pinwheel");
    let ck = dir.path().to_str().unwrap();
    let a = toflow(&["eval", "--checkpoint", ck]);
    assert!(a.status.success(), "{}", text(&a.stderr));
    let b = toflow(&["eval", "--checkpoint", ck]);
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();

    let test = toflow::toydata::DatasetSpec::new(toflow::toydata::Dataset::Pinwheel, 0, 1).test_set(500);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let nll = (0..test.rows())
        .map(|r| 0.5 * (test.get(r, 0).powi(2) + test.get(r, 1).powi(2)) + ln2pi)
        .sum::<f64>()
        / test.rows() as f64;
    assert!((report["test_loss"].as_f64().unwrap() - nll).abs() < 1e-9);
    assert_eq!(report["n_test"], 500);
    assert!(report["bpd"].is_null());
}

#[test]
fn eval_with_mismatched_dimension_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    zero_checkpoint(dir.path(), 3, "moons");
    let out = toflow(&["eval", "--checkpoint", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("expected 2") && err.contains("got 3"), "{err}");
}

#[test]
fn eval_of_missing_checkpoint_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let out = toflow(&["eval", "--checkpoint", dir.path().join("nope").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("not found"), "{}", text(&out.stderr));
}

#[test]
fn sample_writes_csv_and_handles_zero() {
    let dir = tempfile::tempdir().unwrap();
    zero_checkpoint(dir.path(), 2, "moons");
    let ck = dir.path().to_str().unwrap();
    let out_path = dir.path().join("s.csv");
    let out = toflow(&["sample", "--checkpoint", ck, "-n", "4000", "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let body = std::fs::read_to_string(&out_path).unwrap();
    assert!(body.starts_with("x,y\n"));
    let rows = csv_rows(&body);
    assert_eq!(rows.len(), 4000);
    for c in 0..2 {
        let m = rows.iter().map(|r| r[c]).sum::<f64>() / 4000.0;
        let v = rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / 3999.0;
        assert!(m.abs() < 3.0 / 4000f64.sqrt() * 1.5 && (v - 1.0).abs() < 0.1, "coord {c}: mean {m} var {v}");
    }

    let empty = toflow(&["sample", "--checkpoint", ck, "-n", "0"]);
    assert!(empty.status.success());
    assert_eq!(text(&empty.stdout), "x,y\n");
}

#[test]
fn data_dump_is_deterministic_csv() {
    let a = toflow(&["data", "dump", "--dataset", "checkerboard", "-n", "50", "--batches", "2", "--seed", "3"]);
    let b = toflow(&["data", "dump", "--dataset", "checkerboard", "-n", "50", "--batches", "2", "--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let s = text(&a.stdout);
    assert!(s.starts_with("x,y\n"));
    let rows = csv_rows(&s);
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| toflow::toydata::checkerboard_black(r[0], r[1])));
    assert!(!toflow(&["data", "dump", "--dataset", "spiral"]).status.success());
}

#[test]
fn plot_renders_charts_and_rejects_empty_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), "8gaussians", "1").status.success());
    let out = toflow(&["plot", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for f in ["grad_norm.svg", "nfe.svg", "test_loss.svg", "T_trace.svg", "samples.svg"] {
        let svg = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }

    let empty = tempfile::tempdir().unwrap();
    metrics::MetricsWriter::create(empty.path()).unwrap();
    let out = toflow(&["plot", empty.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no metrics rows"));
}

#[test]
fn ablate_runs_each_value_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = format!("out_dir={}", dir.path().display());
    let mut sets = vec![out_dir.as_str(), "dataset.name=2spirals", "schedule.iterations=3"];
    sets.extend(SMALL);
    let out = toflow(&with_sets(vec!["ablate", "--axis", "epsilon", "--values", "0.05,0.25"], &sets));
    assert!(out.status.success(), "{}", text(&out.stderr));
    for v in ["epsilon_0.05", "epsilon_0.25"] {
        assert_eq!(metrics::read_rows(&dir.path().join(v)).unwrap().len(), 3);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    let overlay = std::fs::read_to_string(dir.path().join("overlay/overlay_T_trace.svg")).unwrap();
    assert!(overlay.contains("epsilon=0.05") && overlay.contains("epsilon=0.25"));

    let single = toflow(&with_sets(vec!["ablate", "--axis", "alpha", "--values", "0.1"], &sets));
    assert!(!single.status.success());
    assert!(text(&single.stderr).contains("at least two"));
}
