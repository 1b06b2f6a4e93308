use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[data]
train = 6
val = 2
test = 3
height = 64
width = 64
coils = 2

[featnet.network]
patch_size = 16
stem_kernel = 3
stem_stride = 2
stem_pool = false
widths = [4, 4]
blocks = [1, 1]
dim = 8
residual_gain = 0.5

[featnet.train]
epochs = 1
batch = 8
patches_per_slice = 4
patch_size = 16

[unet]
levels = 2
base = 4

[unroll]
unrolls = 2
cg_steps = 3
epochs = 1
batch = 2

[ufloss]
patch_size = 16
stride = 4

[pics]
iters = 10

[studies]
phantoms = 2
noise_levels = [0.0, 0.05, 0.1]
blur_factors = [1.0, 2.0, 4.0]
deblur_steps = 3
deblur_candidates = [0.01, 0.1]
deblur_probe_steps = 2
retrieve_queries = 2
retrieve_k = 3
correlate_stride = 4
"#;

fn ufloss(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ufloss"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--seed", "7"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, out: &Path, args: &[&str]) {
    let o = ufloss(config, out, args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

#[test]
fn full_desk_style_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    for args in [
        &["gen-data"][..],
        &["mask-gen"],
        &["train-ufnet"],
        &["train-recon", "--loss", "l2"],
        &["train-recon", "--loss", "ufloss", "--mu", "1.5"],
        &["recon-pics"],
    ] {
        ok(&cfg, &out, args);
    }
    for m in ["modl-l2", "modl-ufloss"] {
        let ckpt = out.join(format!("checkpoints/{m}.npz"));
        ok(&cfg, &out, &["reconstruct", "--checkpoint", ckpt.to_str().unwrap()]);
    }
    for args in [
        &["evaluate"][..],
        &["report"],
        &["study-perturb"],
        &["study-deblur"],
        &["retrieve"],
        &["correlate", "--method", "modl-ufloss"],
    ] {
        ok(&cfg, &out, args);
    }

    let summary = csv_rows(&out.join("report/summary.csv"));
    for m in ["zero-filled", "pics", "modl-l2", "modl-ufloss"] {
        assert!(summary.iter().any(|r| r["method"] == m), "report lacks {m}");
    }
    assert!(out.join("studies/correlate_test-000_modl-ufloss.png").exists());
    assert!(out.join("studies/retrieve.png").exists());

    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert!(artifacts.len() > 20);
    for (rel, entry) in artifacts {
        let bytes = fs::read(out.join(rel)).unwrap();
        let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(entry["sha256"].as_str().unwrap(), digest, "{rel}");
        assert_eq!(entry["seed"], 7);
    }
    let metrics = fs::read_to_string(out.join("metrics/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# config_hash=") && metrics.contains("seed=7"));

    // Same seed and config: byte-identical outputs.
    let again = dir.path().join("again");
    ok(&cfg, &again, &["gen-data"]);
    ok(&cfg, &again, &["mask-gen"]);
    for f in ["data/train.npz", "data/test.npz", "kspace/val.npz"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluating_the_reference_gives_metric_identities() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    ok(&cfg, &out, &["gen-data"]);
    ok(&cfg, &out, &["mask-gen"]);
    ok(&cfg, &out, &["train-ufnet"]);
    ok(&cfg, &out, &["evaluate", "--methods", "reference"]);
    let rows = csv_rows(&out.join("metrics/metrics.csv"));
    assert_eq!(rows.len(), 3);
    for r in rows {
        let v = |k: &str| r[k].parse::<f64>().unwrap();
        assert_eq!(v("nrmse"), 0.0);
        assert!((v("ssim") - 1.0).abs() < 1e-9);
        assert!(v("ufloss").abs() < 1e-6);
    }
}

#[test]
fn missing_artifacts_and_bad_config_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("empty");

    let o = ufloss(&cfg, &out, &["evaluate"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing artifact") && err.contains("kspace/test.npz"), "{err}");

    let o = ufloss(&cfg, &out, &["--set", "unroll.epochs=-1", "gen-data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unroll.epochs"));

    let o = ufloss(&cfg, &out, &["--set", "studies.no_such_key=1", "gen-data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("studies.no_such_key"));
}
