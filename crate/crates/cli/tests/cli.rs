//! End-to-end tests of the binary: every subcommand, the documented exit
//! codes, and byte-level reproducibility of the written artifacts.

use auditlens_core::audit::{AuditConfig, AuditReport, KindAggregate};
use auditlens_core::corpus::TaskKind;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_auditlens"))
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_small(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen",
        "--size",
        "32",
        "--count",
        "16",
        "--task",
        "classification",
        "--seed",
        "11",
        "--out",
    ];
    let out_str = dir.to_str().unwrap();
    args.push(out_str);
    args.extend_from_slice(extra);
    let out = run(&args, &[]);
    assert_code(&out, 0);
}

#[test]
fn gen_writes_corpus_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_small(&a, &[]);
    gen_small(&b, &[]);
    for name in ["manifest.json", "ground_truth.json", "gen_config.json"] {
        assert!(a.join(name).is_file(), "missing {name}");
    }
    let img = "images/img00000.pgm";
    assert_eq!(fs::read(a.join(img)).unwrap(), fs::read(b.join(img)).unwrap());
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );

    let out = run(
        &["gen", "--size", "32", "--count", "16", "--seed", "12", "--out", c.to_str().unwrap()],
        &[],
    );
    assert_code(&out, 0);
    assert_ne!(fs::read(a.join(img)).unwrap(), fs::read(c.join(img)).unwrap());
}

#[test]
fn gen_rejects_out_of_range_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "gen",
            "--size",
            "32",
            "--count",
            "8",
            "--issue",
            "corner-marker:corr=1.5",
            "--out",
            tmp.path().join("d").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("correlation"), "stderr: {stderr}");
}

#[test]
fn gen_rejects_unknown_issue_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "gen",
            "--issue",
            "speckle:corr=1.0",
            "--out",
            tmp.path().join("d").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown issue kind"), "stderr: {stderr}");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"gen": {"count": 5, "image_size": 32}}"#).unwrap();
    let d = tmp.path().join("d");
    let out = run(
        &[
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "7",
            "--seed",
            "1",
            "--out",
            d.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 7);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("gen_config.json")).unwrap()).unwrap();
    assert_eq!(echo["spec"]["count"], 7);
    assert_eq!(echo["spec"]["image_size"], 32);
}

fn train_small(data: &Path, out: &Path) {
    let run_out = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "3",
            "--batch",
            "8",
            "--seed",
            "5",
        ],
        &[],
    );
    assert_code(&run_out, 0);
}

#[test]
fn train_writes_reproducible_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen_small(&d, &[]);
    let (m1, m2) = (tmp.path().join("m1"), tmp.path().join("m2"));
    train_small(&d, &m1);
    train_small(&d, &m2);
    assert!(m1.join("train_config.json").is_file());
    let a = fs::read(m1.join("model.ckpt")).unwrap();
    let b = fs::read(m2.join("model.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn audit_exits_two_on_flagged_findings_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen_small(&d, &["--issue", "corner-marker:corr=1.0,size=5,value0=200,value1=3000"]);
    let m = tmp.path().join("m");
    train_small(&d, &m);

    // The injected marker occupies rows/cols 1..6 (one-pixel inset).
    let mut bits = vec![false; 32 * 32];
    for r in 1..6 {
        for c in 1..6 {
            bits[r * 32 + c] = true;
        }
    }
    let runs = to_rle_runs(&bits);
    let regions = serde_json::json!([
        {"label": "marker", "region": {"width": 32, "height": 32, "runs": runs}}
    ]);
    let regions_path = tmp.path().join("regions.json");
    fs::write(&regions_path, regions.to_string()).unwrap();

    let a = tmp.path().join("a");
    let out = run(
        &[
            "audit",
            "--data",
            d.to_str().unwrap(),
            "--model",
            m.join("model.ckpt").to_str().unwrap(),
            "--out",
            a.to_str().unwrap(),
            "--extra-regions",
            regions_path.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2);
    let report = AuditReport::from_json(&fs::read_to_string(a.join("report.json")).unwrap())
        .unwrap();
    assert!(report.has_flagged_findings());
    assert_eq!(report.images.len(), 16);
}

fn to_rle_runs(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            runs.push(run);
            current = b;
            run = 1;
        }
    }
    runs.push(run);
    runs
}

#[test]
fn audit_exits_zero_when_nothing_is_flagged() {
    // Zero signal contrast: featureless noise, nothing for any detector
    // or the attribution to latch onto.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"gen": {"signal": {"radius": [2.0, 3.0], "intensity_delta": 0.0, "noise_sigma": 40.0, "background": 1000.0}}}"#,
    )
    .unwrap();
    let d = tmp.path().join("d");
    let out = run(
        &[
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--size",
            "32",
            "--count",
            "12",
            "--seed",
            "2",
            "--out",
            d.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 0);
    let m = tmp.path().join("m");
    train_small(&d, &m);
    let a = tmp.path().join("a");
    let out = run(
        &[
            "audit",
            "--data",
            d.to_str().unwrap(),
            "--model",
            m.join("model.ckpt").to_str().unwrap(),
            "--out",
            a.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 0);
    assert!(a.join("report.json").is_file());
}

#[test]
fn audit_is_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen_small(&d, &["--issue", "table:corr=1.0"]);
    let m = tmp.path().join("m");
    train_small(&d, &m);
    let mut reports = Vec::new();
    for workers in ["1", "3"] {
        let a = tmp.path().join(format!("a{workers}"));
        let out = run(
            &[
                "audit",
                "--data",
                d.to_str().unwrap(),
                "--model",
                m.join("model.ckpt").to_str().unwrap(),
                "--out",
                a.to_str().unwrap(),
                "--workers",
                workers,
            ],
            &[],
        );
        assert!(matches!(out.status.code(), Some(0) | Some(2)));
        reports.push(fs::read(a.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn missing_checkpoint_is_an_execution_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen_small(&d, &[]);
    let out = run(
        &[
            "audit",
            "--data",
            d.to_str().unwrap(),
            "--model",
            tmp.path().join("nope.ckpt").to_str().unwrap(),
            "--out",
            tmp.path().join("a").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 1);
}

#[test]
fn remediate_dry_run_writes_only_the_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen_small(&d, &["--issue", "corner-marker:corr=1.0,size=5,value0=200,value1=3000"]);
    let m = tmp.path().join("m");
    train_small(&d, &m);
    let a = tmp.path().join("a");
    let mut bits = vec![false; 32 * 32];
    for r in 1..6 {
        for c in 1..6 {
            bits[r * 32 + c] = true;
        }
    }
    let regions_path = tmp.path().join("regions.json");
    fs::write(
        &regions_path,
        serde_json::json!([
            {"label": "marker", "region": {"width": 32, "height": 32, "runs": to_rle_runs(&bits)}}
        ])
        .to_string(),
    )
    .unwrap();
    let out = run(
        &[
            "audit",
            "--data",
            d.to_str().unwrap(),
            "--model",
            m.join("model.ckpt").to_str().unwrap(),
            "--out",
            a.to_str().unwrap(),
            "--extra-regions",
            regions_path.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2);

    let r = tmp.path().join("r");
    let out = run(
        &[
            "remediate",
            "--data",
            d.to_str().unwrap(),
            "--report",
            a.join("report.json").to_str().unwrap(),
            "--out",
            r.to_str().unwrap(),
            "--dry-run",
        ],
        &[],
    );
    assert_code(&out, 0);
    assert!(r.join("plan.json").is_file());
    assert!(!r.join("manifest.json").exists());
    assert!(!r.join("provenance.jsonl").exists());

    // Full run is reproducible byte for byte under a pinned timestamp.
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        let out = run(
            &[
                "remediate",
                "--data",
                d.to_str().unwrap(),
                "--report",
                a.join("report.json").to_str().unwrap(),
                "--out",
                r.to_str().unwrap(),
            ],
            &[("SOURCE_DATE_EPOCH", "1700000000")],
        );
        assert_code(&out, 0);
    }
    for name in ["manifest.json", "provenance.jsonl", "plan.json", "images/img00000.pgm"] {
        assert_eq!(
            fs::read(r1.join(name)).unwrap(),
            fs::read(r2.join(name)).unwrap(),
            "{name} differs"
        );
    }
    let log = fs::read_to_string(r1.join("provenance.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"timestamp\":1700000000")));
}

fn report_with_aggregates(images: &[&str], pairs: &[(&str, f64, f64)]) -> AuditReport {
    let mut aggregates = BTreeMap::new();
    for (kind, flagged_fraction, mean_severity) in pairs {
        aggregates.insert(
            kind.to_string(),
            KindAggregate {
                flagged_fraction: *flagged_fraction,
                mean_severity: *mean_severity,
                finding_count: 1,
                flagged_images: (*flagged_fraction * images.len() as f64).round() as usize,
            },
        );
    }
    AuditReport {
        version: 1,
        dataset: "ds".into(),
        model: "ckpt".into(),
        task: TaskKind::Classification,
        images: images.iter().map(|s| s.to_string()).collect(),
        config: AuditConfig::default(),
        findings: vec![],
        aggregates,
        calibration: Default::default(),
        errors: vec![],
    }
}

#[test]
fn verify_exit_codes_follow_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = ["a", "b", "c", "d"];
    let before = report_with_aggregates(&ids, &[("patient_table", 0.5, 0.6)]);
    let improved = report_with_aggregates(&ids, &[("patient_table", 0.25, 0.2)]);
    let regressed = report_with_aggregates(&ids, &[("patient_table", 0.75, 0.8)]);
    let mismatched = report_with_aggregates(&["a", "zz"], &[]);

    let path = |name: &str| tmp.path().join(name);
    fs::write(path("before.json"), before.to_json()).unwrap();
    fs::write(path("improved.json"), improved.to_json()).unwrap();
    fs::write(path("regressed.json"), regressed.to_json()).unwrap();
    fs::write(path("mismatched.json"), mismatched.to_json()).unwrap();

    let verify = |after: &str, expected: i32| {
        let out = run(
            &[
                "verify",
                "--before",
                path("before.json").to_str().unwrap(),
                "--after",
                path(after).to_str().unwrap(),
                "--out",
                path("v").to_str().unwrap(),
            ],
            &[],
        );
        assert_code(&out, expected);
    };
    verify("improved.json", 0);
    verify("regressed.json", 2);
    verify("mismatched.json", 1);
    assert!(path("v").join("verification.json").is_file());
}
