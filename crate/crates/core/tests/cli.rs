use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use prefix_attn::cli::{self, CliError, RunReport, PROFILE_ENV};
use prefix_attn::cost_model::profile_synthetic;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_prefix-attn-bench");

fn write_spec(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn two_level(dir: &Path) -> PathBuf {
    write_spec(
        dir,
        "two_level.json",
        r#"{"family":"two_level","params":{"shared_len":600,"leaf_len":8,"batch":4},"seed":7,"dims":{"h_q":4,"h_kv":2,"d":8}}"#,
    )
}

fn shared_ratio(dir: &Path) -> PathBuf {
    write_spec(
        dir,
        "shared_ratio.json",
        r#"{"family":"shared_ratio","params":{"total_len":1024,"ratio":0.5,"batch":8},"seed":1,"dims":{"h_q":2,"h_kv":2,"d":8}}"#,
    )
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("prefix-attn-bench").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn reports(stdout: &str) -> Vec<RunReport> {
    stdout
        .lines()
        .map(|l| serde_json::from_str(l).expect("report line parses"))
        .collect()
}

fn schema_check(stdout: &str) {
    let schema: Value = serde_json::from_str(
        &fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/docs/report.schema.json")).unwrap(),
    )
    .unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    for line in stdout.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{line}\n{errors:?}");
    }
}

#[test]
fn validate_passes_in_both_precisions() {
    let dir = TempDir::new().unwrap();
    let spec = two_level(dir.path());
    let spec = spec.to_str().unwrap();
    let (code, out, err) = run(&["validate", "--spec", spec]);
    assert_eq!(code, 0, "{err}");
    schema_check(&out);
    let r = &reports(&out)[0];
    assert_eq!(r.precision, "f64");
    assert!(r.max_rel_err_vs_oracle.unwrap() <= 1e-10);

    let (code, out, _) = run(&["validate", "--spec", spec, "--fp32", "--blocks", "3"]);
    assert_eq!(code, 0);
    schema_check(&out);
    let r = &reports(&out)[0];
    assert_eq!((r.precision.as_str(), r.blocks), ("f32", 3));
    assert!(r.max_rel_err_vs_oracle.unwrap() <= 1e-3);
}

#[test]
fn bench_sweeps_validate_against_schema() {
    let dir = TempDir::new().unwrap();
    let spec = shared_ratio(dir.path());
    let csv = dir.path().join("out.csv");
    let (code, out, err) = run(&[
        "bench",
        "--spec",
        spec.to_str().unwrap(),
        "--sweep",
        "shared_ratio=0.25,0.5,0.75,1",
        "--oracle",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    schema_check(&out);
    let rs = reports(&out);
    assert_eq!(rs.len(), 4);
    for pair in rs.windows(2) {
        assert!(pair[1].traffic.nq_bar > pair[0].traffic.nq_bar);
    }
    assert!(rs
        .iter()
        .all(|r| r.replan.is_some() && r.max_rel_err_vs_oracle.is_some()));

    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "sim_speedup"));
    assert_eq!(reader.records().count(), 4);
}

#[test]
fn every_axis_produces_valid_reports() {
    let dir = TempDir::new().unwrap();
    let full = write_spec(
        dir.path(),
        "full.json",
        r#"{"family":"full_tree","params":{"arity":2,"depth":3,"node_len":64},"seed":2,"dims":{"h_q":2,"h_kv":1,"d":4}}"#,
    );
    let two = two_level(dir.path());
    let cases = [
        (&full, "depth=2,3,4"),
        (&full, "shape=2T,3T,4T,5T,DT"),
        (&full, "seq_len=32,128"),
        (&two, "batch=1,2,16"),
        (&two, "seq_len=512,2048"),
    ];
    for (spec, sweep) in cases {
        let (code, out, err) = run(&["bench", "--spec", spec.to_str().unwrap(), "--sweep", sweep]);
        assert_eq!(code, 0, "{sweep}: {err}");
        schema_check(&out);
        assert_eq!(reports(&out).len(), sweep.split(',').count());
    }
}

#[test]
fn ablations_behave() {
    let dir = TempDir::new().unwrap();
    let spec = two_level(dir.path());
    let spec = spec.to_str().unwrap();
    let bench = |extra: &[&str]| {
        let mut args = vec!["bench", "--spec", spec];
        args.extend_from_slice(extra);
        let (code, out, err) = run(&args);
        assert_eq!(code, 0, "{err}");
        schema_check(&out);
        reports(&out).remove(0)
    };
    let full = bench(&[]);
    let unshared = bench(&["--ablate", "share_tree=off"]);
    assert_eq!(unshared.traffic.kv_rows_codec, unshared.traffic.kv_rows_baseline);
    assert!(!unshared.ablation_flags.share_tree);
    assert!(full.traffic.kv_rows_codec < full.traffic.kv_rows_baseline);

    let unsplit = bench(&["--ablate", "partition=off"]);
    assert_eq!(unsplit.plan_summary.subtasks, unsplit.plan_summary.tasks);
    assert!(full.plan_summary.makespan_ms <= unsplit.plan_summary.makespan_ms);

    let forced = bench(&["--force-bk", "1"]);
    assert_eq!(forced.force_bk, Some(1));
    assert!(full.plan_summary.makespan_ms <= forced.plan_summary.makespan_ms);

    let serial = bench(&["--ablate", "parallel_reduce=off"]);
    assert!(serial.plan_summary.reduction_rounds >= full.plan_summary.reduction_rounds);
}

#[test]
fn usage_and_schema_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let spec = two_level(dir.path());
    let spec = spec.to_str().unwrap();
    let zero_ratio = write_spec(
        dir.path(),
        "zero.json",
        r#"{"family":"shared_ratio","params":{"total_len":64,"ratio":0.0,"batch":4},"seed":1,"dims":{"h_q":1,"h_kv":1,"d":4}}"#,
    );
    let bad_heads = write_spec(
        dir.path(),
        "heads.json",
        r#"{"family":"two_level","params":{"shared_len":8,"leaf_len":1,"batch":2},"seed":1,"dims":{"h_q":3,"h_kv":2,"d":4}}"#,
    );
    let bad_profile = write_spec(dir.path(), "profile.csv", "n_q,n,cost_ms\n1,512,-1\n");
    let cases: Vec<Vec<&str>> = vec![
        vec!["bench"],
        vec!["frobnicate"],
        vec!["validate", "--spec", "/nonexistent/spec.json"],
        vec!["validate", "--spec", zero_ratio.to_str().unwrap()],
        vec!["validate", "--spec", bad_heads.to_str().unwrap()],
        vec!["validate", "--spec", spec, "--workers", "0"],
        vec!["bench", "--spec", spec, "--sweep", "width=1,2"],
        vec!["bench", "--spec", spec, "--sweep", "depth=2"],
        vec!["bench", "--spec", spec, "--ablate", "tiling=off"],
        vec!["bench", "--spec", spec, "--force-bk", "0"],
        vec!["bench", "--spec", spec, "--profile", bad_profile.to_str().unwrap()],
        vec!["profile-fit", bad_profile.to_str().unwrap()],
    ];
    for args in cases {
        let (code, out, err) = run(&args);
        assert_eq!(code, 2, "{args:?}: {err}");
        assert!(out.is_empty(), "{args:?}");
        assert!(!err.is_empty(), "{args:?}");
    }
}

#[test]
fn run_failures_exit_1() {
    let e = CliError::Tolerance {
        err: 1e-2,
        tolerance: 1e-3,
    };
    assert_eq!(e.exit_code(), 1);
    assert_eq!(CliError::Run("worker panicked".into()).exit_code(), 1);
}

#[test]
fn profile_fit_recovers_synthetic_coefficients() {
    let dir = TempDir::new().unwrap();
    let table = profile_synthetic(0.02, 2e-5, 3e-7).unwrap();
    let path = dir.path().join("synthetic.csv");
    fs::write(&path, table.dump()).unwrap();
    let out_path = dir.path().join("fit.json");
    let (code, out, err) = run(&[
        "profile-fit",
        path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.is_empty());
    let fit: Value = serde_json::from_str(&fs::read_to_string(out_path).unwrap()).unwrap();
    for (key, want) in [("alpha", 0.02), ("beta", 2e-5), ("gamma", 3e-7)] {
        let got = fit[key].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{key}: {got}");
    }
}

#[test]
fn binary_reads_profile_from_environment() {
    let dir = TempDir::new().unwrap();
    let spec = two_level(dir.path());
    let table = profile_synthetic(1.0, 0.0, 0.0).unwrap();
    let profile = dir.path().join("flat.csv");
    fs::write(&profile, table.dump()).unwrap();

    let bench = |env: Option<&Path>| {
        let mut cmd = Command::new(BIN);
        cmd.args(["bench", "--spec", spec.to_str().unwrap()]);
        match env {
            Some(p) => cmd.env(PROFILE_ENV, p),
            None => cmd.env_remove(PROFILE_ENV),
        };
        cmd.output().unwrap()
    };
    let bundled = bench(None);
    let flat = bench(Some(&profile));
    assert_eq!(bundled.status.code(), Some(0));
    assert_eq!(flat.status.code(), Some(0));
    let (a, b) = (
        reports(&String::from_utf8_lossy(&bundled.stdout)),
        reports(&String::from_utf8_lossy(&flat.stdout)),
    );
    assert_ne!(a[0].plan_summary.makespan_ms, b[0].plan_summary.makespan_ms);

    let missing = bench(Some(&dir.path().join("missing.csv")));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn output_is_independent_of_worker_count() {
    let dir = TempDir::new().unwrap();
    let spec = two_level(dir.path());
    let spec = spec.to_str().unwrap();
    let outputs: Vec<String> = ["1", "3", "8"]
        .iter()
        .map(|w| run(&["validate", "--spec", spec, "--workers", w]).1)
        .collect();
    assert!(outputs.windows(2).all(|p| p[0] == p[1]));
}
