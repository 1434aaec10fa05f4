use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use sofair_core::data::read_dataset;
use sofair_core::evaluation::{read_curve_csv, Aggregate, AuditProtocol};
use sofair_core::model::ModelCheckpoint;
use sofair_core::nn::ClassifierConfig;
use sofair_service::{round_sig9, router, uniform_grid, ServeOptions, ServeState};

const AUDIT: [&str; 6] = ["--auditors", "2", "--auditor-steps", "40", "--auditor-hidden", "16"];

fn sofair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sofair")).args(args).env_remove("SOFAIR_DATA_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sofair(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("synth");
        ok(&["data", "prepare", "--source", "synthetic", "--n", "800", "--p", "6", "--d-s", "2", "--seed", "4", "--out", p(&data)]);
        let ckpt = root.join("m.ckpt");
        ok(&[
            "train", "--dataset", p(&data), "--out", p(&ckpt), "--iters", "150", "--latent-dim", "3", "--max-bits", "4",
            "--hidden", "16", "--lr", "0.003", "--rate-warmup", "0", "--seed", "1",
        ]);
        Fixture { _dir: dir, root, data, ckpt }
    })
}

#[test]
fn prepare_writes_splits_and_manifest() {
    let f = fixture();
    for s in ["train", "val", "test"] {
        assert!(f.data.join(format!("{s}.sfds")).exists());
    }
    let m: Value = serde_json::from_slice(&std::fs::read(f.data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["resolved"]["rows"]["train"], 480);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let ck: Value = serde_json::from_slice(&std::fs::read(format!("{}.manifest.json", p(&f.ckpt))).unwrap()).unwrap();
    assert_eq!(ck["resolved"]["config"]["latent_dim"], 3);
    assert!(ck["argv"].as_array().unwrap().iter().any(|a| a == "--latent-dim"));
}

#[test]
fn curve_has_one_row_per_beta_and_matches_the_server() {
    let f = fixture();
    let csv = f.root.join("curve.csv");
    let report = f.root.join("curve.json");
    let mut args = vec!["curve", "--ckpt", p(&f.ckpt), "--dataset", p(&f.data), "--beta-grid", "11", "--out", p(&csv)];
    args.extend(["--report", p(&report)]);
    args.extend(AUDIT);
    ok(&args);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "beta,distortion,mi_lower,mean_bits");
    assert_eq!(text.lines().count(), 12);
    let cli = read_curve_csv(&csv).unwrap();
    assert!(Path::new(&format!("{}.manifest.json", p(&csv))).exists());

    let ck = ModelCheckpoint::load(&f.ckpt).unwrap();
    let ds = read_dataset(&f.data.join("test.sfds")).unwrap();
    let options = ServeOptions {
        grid: uniform_grid(11),
        protocol: AuditProtocol {
            auditors: 2,
            classifier: ClassifierConfig { steps: 40, hidden: 16, ..ClassifierConfig::default() },
            aggregate: Aggregate::Mean,
            ..AuditProtocol::default()
        },
        ..ServeOptions::default()
    };
    let state = std::sync::Arc::new(ServeState::build(ck, ds, options).unwrap());
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let body = rt.block_on(async {
        let resp = router(state).oneshot(Request::get("/curve").body(Body::empty()).unwrap()).await.unwrap();
        resp.into_body().collect().await.unwrap().to_bytes()
    });
    let v: Value = serde_json::from_slice(&body).unwrap();
    let served = v["points"].as_array().unwrap();
    assert_eq!(served.len(), cli.len());
    for (s, c) in served.iter().zip(&cli) {
        for (key, val) in [("beta", c.beta), ("distortion", c.distortion), ("mi_lower", c.mi_lower), ("mean_bits", c.mean_bits)] {
            let got = s[key].as_f64().unwrap();
            assert!((got - round_sig9(val)).abs() <= 1e-9, "{key}: served {got}, cli {val}");
        }
    }

    let out = ok(&["aufdc", "--curve", p(&csv), "--d-max", "2.0", "--i-max", "0.5"]);
    let a: Value = serde_json::from_slice(&out.stdout).unwrap();
    let area = a["curves"][0]["aufdc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&area));
}

#[test]
fn explicit_progression_grid() {
    let f = fixture();
    let csv = f.root.join("prog.csv");
    let mut args = vec!["curve", "--ckpt", p(&f.ckpt), "--dataset", p(&f.data), "--betas", "0,0.25,...,1", "--out", p(&csv)];
    args.extend(AUDIT);
    ok(&args);
    let betas: Vec<f64> = read_curve_csv(&csv).unwrap().iter().map(|c| c.beta).collect();
    assert_eq!(betas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn oracle_sweep_residuals_vanish() {
    let f = fixture();
    let out_path = f.root.join("oracle.csv");
    ok(&["oracle", "sweep", "--samples", "1000", "--seed", "5", "--out", p(&out_path)]);
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "distortion,rate,unfairness,residual");
    let residuals: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(residuals.len(), 1000);
    assert!(residuals.iter().all(|r| *r <= 1e-9));
}

#[test]
fn fixed_beta_training_is_deterministic() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.root.join(name);
        let o = ok(&[
            "train", "--dataset", p(&f.data), "--out", p(&out), "--mode", "msfair", "--beta", "0.3", "--iters", "60",
            "--latent-dim", "2", "--max-bits", "3", "--hidden", "8", "--seed", "9",
        ]);
        String::from_utf8(o.stdout).unwrap().split_whitespace().next().unwrap().to_string()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
}

#[test]
fn interpret_and_pareto_outputs() {
    let f = fixture();
    let corr = f.root.join("corr.csv");
    let disp = f.root.join("disp.csv");
    ok(&["interpret", "--ckpt", p(&f.ckpt), "--dataset", p(&f.data), "--beta-hi", "1", "--beta-lo", "0", "--out", p(&corr), "--disparity", p(&disp)]);
    let header = std::fs::read_to_string(&corr).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 6);
    assert_eq!(std::fs::read_to_string(&disp).unwrap().lines().count(), 1 + 3 * 4);
    let front = f.root.join("front.csv");
    ok(&["pareto", "--ckpt", p(&f.ckpt), "--dataset", p(&f.data), "--betas", "0,1", "--classifier-steps", "30", "--out", p(&front)]);
    let text = std::fs::read_to_string(&front).unwrap();
    assert_eq!(text.lines().next().unwrap(), "model,beta,a_s,a_y");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn exit_codes_and_error_line() {
    let f = fixture();
    let usage = sofair(&["train", "--dataset"]);
    assert_eq!(usage.status.code(), Some(1));
    let missing = sofair(&["curve", "--ckpt", "/nonexistent/m.ckpt", "--dataset", p(&f.data), "--out", "/tmp/x.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    let line = String::from_utf8(missing.stderr).unwrap();
    assert!(line.starts_with("error code=2 kind=data message="), "{line}");
    assert_eq!(line.trim_end().lines().count(), 1);
    let bad_beta = sofair(&["curve", "--ckpt", p(&f.ckpt), "--dataset", p(&f.data), "--betas", "0,1.5", "--out", "/tmp/x.csv"]);
    assert_eq!(bad_beta.status.code(), Some(1));
    let corrupt = f.root.join("corrupt.ckpt");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    assert_eq!(sofair(&["curve", "--ckpt", p(&corrupt), "--dataset", p(&f.data), "--out", "/tmp/x.csv"]).status.code(), Some(2));
}

#[test]
fn data_dir_resolves_relative_inputs() {
    let f = fixture();
    let out = f.root.join("rel.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_sofair"))
        .args(["curve", "--ckpt", "m.ckpt", "--dataset", "synth", "--betas", "0,1", "--out", p(&out)])
        .args(AUDIT)
        .env("SOFAIR_DATA_DIR", &f.root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_flags() {
    let o = sofair(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let top = String::from_utf8(o.stdout).unwrap();
    for cmd in ["data", "train", "curve", "aufdc", "pareto", "interpret", "oracle", "serve"] {
        assert!(top.contains(cmd), "{cmd}");
    }
    let curve = String::from_utf8(sofair(&["curve", "--help"]).stdout).unwrap();
    for flag in ["--ckpt", "--dataset", "--betas", "--beta-grid", "--out", "--auditors", "--aggregate"] {
        assert!(curve.contains(flag), "{flag}");
    }
}
