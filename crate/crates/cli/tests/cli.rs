use std::path::Path;
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn result(&self) -> Value {
        let line = self
            .stdout
            .lines()
            .find_map(|l| l.strip_prefix("RESULT "))
            .unwrap_or_else(|| panic!("no RESULT line in {:?} / {:?}", self.stdout, self.stderr));
        serde_json::from_str(line).unwrap()
    }
}

fn audit(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_audit")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn small_world(dir: &Path) {
    std::fs::write(
        dir.join("world.json"),
        r#"{"n_train": 300, "n_test": 100, "class_rule": {"kind": "sign-of-dim", "dim": 0, "margin": 0.5}}"#,
    )
    .unwrap();
    let r = audit(&["world", "--config", &p(dir, "world.json"), "--out-dir", &p(dir, "w"), "--seed", "3"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
}

fn train_small(dir: &Path, kappa: &str) -> Run {
    audit(&[
        "train", "--data", &p(dir, "w/train.csv"), "--eval", &p(dir, "w/test.csv"),
        "--arch", "4,16,16,2", "--epsilon", "1.0", "--dims", "1", "--norm", "linf",
        "--epochs", "30", "--warmup", "3", "--ramp", "15", "--lr", "0.005",
        "--kappa-final", kappa, "--batch", "32", "--seed", "1",
        "--out", &p(dir, "model.json"), "--history", &p(dir, "hist.csv"),
    ])
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(audit(&["--help"]).code, 0);
    assert_eq!(audit(&["frobnicate"]).code, 2);
    assert_eq!(audit(&["verify", "--bogus"]).code, 2);
    let dir = tempfile::tempdir().unwrap();
    let r = audit(&[
        "train", "--data", "x.csv", "--eval", "y.csv", "--epochs", "0",
        "--out", &p(dir.path(), "m.json"), "--history", &p(dir.path(), "h.csv"),
    ]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(!dir.path().join("m.json").exists());
    let r = audit(&["search-eps", "--model", "m.json", "--data", "d.csv", "--dims", "0"]);
    assert_eq!(r.code, 2);
}

#[test]
fn missing_input_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = audit(&[
        "verify", "--model", &p(dir.path(), "none.json"), "--data", "d.csv", "--epsilon", "0.1",
        "--dims", "0", "--out", &p(dir.path(), "r.json"),
    ]);
    assert_eq!(r.code, 3);
}

#[test]
fn world_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_world(a.path());
    small_world(b.path());
    for f in ["decoder.json", "encoder.json", "train.csv", "test.csv", "config.json", "test_pixels.csv"] {
        let x = std::fs::read(a.path().join("w").join(f)).unwrap();
        let y = std::fs::read(b.path().join("w").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_world(dir);

    let r = train_small(dir, "0.5");
    assert_eq!(r.code, 0, "{}", r.stderr);
    let hist = std::fs::read_to_string(dir.join("hist.csv")).unwrap();
    assert!(hist.starts_with("epoch,chi,epsilon,task_loss,spec_loss,total_loss,clean_error,verified_error"));
    assert_eq!(hist.lines().count(), 31);

    // verification: a loose threshold passes, the default strict one may not
    let model = p(dir, "model.json");
    let test_csv = p(dir, "w/test.csv");
    let verify = |eps: &str, out: &str, extra: &[&str]| {
        let mut args = vec![
            "verify", "--model", &model, "--data", &test_csv,
            "--epsilon", eps, "--dims", "1", "--norm", "linf", "--engine", "crown-ibp",
            "--test-id", "nuisance",
        ];
        let out = p(dir, out);
        args.extend(["--out", &out]);
        args.extend(extra);
        audit(&args)
    };
    let r = verify("0.5", "r05.json", &["--max-verified-error", "1"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.result()["verified_error"].is_number());
    let r = verify("50", "r50.json", &[]);
    assert_eq!(r.code, 1, "huge radius should fail: {}", r.stdout);
    assert!(r.result()["verified_error"].as_f64().unwrap() > 0.0);
    let a = verify("1.0", "j1.json", &["--jobs", "1", "--max-verified-error", "1"]);
    let b = verify("1.0", "j4.json", &["--jobs", "4", "--max-verified-error", "1"]);
    assert_eq!((a.code, b.code), (0, 0));
    assert_eq!(std::fs::read(dir.join("j1.json")).unwrap(), std::fs::read(dir.join("j4.json")).unwrap());

    let r = audit(&[
        "search-eps", "--model", &p(dir, "model.json"), "--data", &p(dir, "w/test.csv"),
        "--dims", "1", "--norm", "linf", "--engine", "ibp", "--eps-max", "4", "--tol", "0.01",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.result()["epsilon"].as_f64().unwrap() >= 0.0);

    std::fs::write(
        dir.join("tests.json"),
        r#"{"tests": [{"id": "nuisance", "dims": [1], "norm": "linf", "description": "factor 1"}]}"#,
    )
    .unwrap();
    let sheet = |out: &str| {
        audit(&[
            "spec-sheet", "--model", &p(dir, "model.json"), "--encoder", &p(dir, "w/encoder.json"),
            "--train", &p(dir, "w/train.csv"), "--tests", &p(dir, "tests.json"),
            "--reports", &format!("{},{},{}", p(dir, "r05.json"), p(dir, "j1.json"), p(dir, "r50.json")),
            "--threshold", "1.0", "--out", &p(dir, out), "--deterministic",
        ])
    };
    assert_eq!(sheet("sheet.json").code, 0);
    assert_eq!(sheet("sheet2.json").code, 0);
    let bytes = std::fs::read(dir.join("sheet.json")).unwrap();
    assert_eq!(bytes, std::fs::read(dir.join("sheet2.json")).unwrap());
    let doc: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(doc["created_unix_seconds"], 0);
    let range = &doc["entries"][0]["global_range"][0];
    let (lo, hi) = (range["lower"].as_f64().unwrap(), range["upper"].as_f64().unwrap());

    let sheet_path = p(dir, "sheet.json");
    let gate = |row: String, latent: bool| {
        std::fs::write(dir.join("row.csv"), row).unwrap();
        let mut args = vec![
            "gate", "--spec-sheet", &sheet_path, "--test-id", "nuisance",
        ];
        let input = p(dir, "row.csv");
        let enc = p(dir, "w/encoder.json");
        args.extend(["--input", &input]);
        if latent {
            args.push("--already-latent");
        } else {
            args.extend(["--encoder", &enc]);
        }
        audit(&args)
    };
    let r = gate(format!("z0,z1,z2,z3\n0.0,{},0.0,0.0\n", (lo + hi) / 2.0), true);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.result()["decision"], "accept");
    let r = gate(format!("0.0,{hi},0.0,0.0\n"), true);
    assert_eq!(r.result()["decision"], "accept");
    let r = gate(format!("0.0,{},0.0,0.0\n", hi + 1.0), true);
    assert_eq!(r.code, 1);
    assert_eq!(r.result()["decision"], "reject");
    let pixel_row = std::fs::read_to_string(dir.join("w/test_pixels.csv")).unwrap();
    let mut lines = pixel_row.lines();
    let header = lines.next().unwrap();
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row = format!("{}\n{}\n", header.rsplit_once(',').unwrap().0, first[..first.len() - 1].join(","));
    let r = gate(row, false);
    assert!(r.code == 0 || r.code == 1, "{}", r.stderr);
    let r = audit(&[
        "gate", "--spec-sheet", &p(dir, "sheet.json"), "--test-id", "nope", "--input", &p(dir, "row.csv"),
        "--already-latent",
    ]);
    assert_eq!(r.code, 2);

    let r = audit(&[
        "oracle", "--model", &p(dir, "model.json"), "--data", &p(dir, "w/test.csv"), "--epsilon", "0.5",
        "--dims", "1", "--norm", "linf", "--samples", "200", "--seed", "5",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.result()["contradictions"].as_array().unwrap().len(), 0);

    let grid: Vec<String> = std::iter::once(0.0)
        .chain((0..70).map(|i| 1e-3 * 1.15f64.powi(i)))
        .map(|v| v.to_string())
        .collect();
    let r = audit(&[
        "compare-pixel", "--encoder", &p(dir, "w/encoder.json"), "--model", &p(dir, "model.json"),
        "--data", &p(dir, "w/test_pixels.csv"), "--target-verified-error", "0.5",
        "--eps-grid", &grid.join(","), "--dims", "1",
    ]);
    assert_eq!(r.code, 0, "{} {}", r.stdout, r.stderr);
    let c = r.result();
    assert!(c["latent_fraction"].as_f64().unwrap() > c["induced_fraction"].as_f64().unwrap());
    let r = audit(&[
        "compare-pixel", "--encoder", &p(dir, "w/encoder.json"), "--model", &p(dir, "model.json"),
        "--data", &p(dir, "w/test_pixels.csv"), "--target-verified-error", "0.5", "--eps-grid", "0,0.001",
    ]);
    assert_eq!(r.code, 3, "unreachable target: {}", r.stderr);
    assert!(r.stderr.contains("unreachable"));
}
