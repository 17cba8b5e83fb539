//! End-to-end checks of the `catx` binary on a small synthetic MNIST.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use catx_core::report::read_ledger;

fn write_idx(dir: &Path, prefix: &str, labels: &[u8]) {
    std::fs::create_dir_all(dir).unwrap();
    let mut img = Vec::new();
    for v in [2051u32, labels.len() as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for (i, &l) in labels.iter().enumerate() {
        // class 3 lights the top half, class 8 the bottom half
        for y in 0..28 {
            for x in 0..28 {
                let lit = if l == 3 { y < 14 } else { y >= 14 };
                let jitter = ((i * 31 + y * 7 + x * 13) % 40) as u8;
                img.push(if lit { 200 + jitter / 2 } else { jitter });
            }
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lab = Vec::new();
    for v in [2049u32, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let labels = |n: usize| -> Vec<u8> { (0..n).map(|i| [3u8, 8, 1][i % 3]).collect() };
    write_idx(&data.join("mnist"), "train", &labels(300));
    write_idx(&data.join("mnist"), "t10k", &labels(90));
    let out = tmp.path().join("runs");
    Fixture { _tmp: tmp, data, out }
}

const SMALL: [&str; 8] = ["--dataset", "mnist", "--dim", "16", "--depth", "1", "--epochs", "1"];

fn catx(f: &Fixture, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catx"))
        .arg("--data-root")
        .arg(&f.data)
        .arg("--out-dir")
        .arg(&f.out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sweep_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["sweep"];
    v.extend(SMALL);
    v.extend(["--lambdas", "0.9"]);
    v.extend(extra);
    v
}

#[test]
fn sweep_is_idempotent_and_reports() {
    let f = fixture();
    ok(&catx(&f, &sweep_args(&[])));
    let mnist = f.out.join("mnist");
    let manifests = std::fs::read_dir(&mnist)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(manifests, 4 + 4 + 1);
    let ledger_path = f.out.join("ledger.jsonl");
    let ledger = std::fs::read(&ledger_path).unwrap();
    assert_eq!(read_ledger(&ledger_path).unwrap().len(), 8);

    let again = catx(&f, &sweep_args(&[]));
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stderr).contains("0 trained, 0 ledger rows appended"));
    assert_eq!(std::fs::read(&ledger_path).unwrap(), ledger);

    let md = ok(&catx(&f, &["report", "--format", "both"]));
    let rows = md.lines().filter(|l| l.starts_with("| 0.")).count();
    assert_eq!(rows, 4);
    assert!(md.contains("Black-box model had ACC of"));
    let csv = std::fs::read_to_string(f.out.join("mnist_table.csv")).unwrap();
    assert!(csv.starts_with("frac,posthoc_pa,posthoc_ace,lambda,expvit_pa,expvit_ace,expvit_acc"));

    // a config change for an existing cell is refused rather than silently reused
    let changed = catx(&f, &sweep_args(&["--temperature", "0.7"]));
    assert!(!changed.status.success());
    assert!(String::from_utf8_lossy(&changed.stderr).contains("different configuration"));
}

#[test]
fn report_with_gaps_exits_nonzero() {
    let f = fixture();
    ok(&catx(&f, &sweep_args(&["--fracs", "0.1"])));
    let o = catx(&f, &["report", "--format", "markdown"]);
    assert_eq!(o.status.code(), Some(2));
    let md = String::from_utf8_lossy(&o.stdout);
    assert!(md.contains("| 0.05 | - | - |"));
}

#[test]
fn old_manifest_is_a_migration_error() {
    let f = fixture();
    let mut args = vec!["train", "blackbox"];
    args.extend(SMALL);
    ok(&catx(&f, &args));
    let manifest = f.out.join("mnist").join("mnist_blackbox_seed1.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replace("\"format_version\": 1", "\"format_version\": 0"),
    )
    .unwrap();
    let o = catx(&f, &args);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("format version 0"));
}

#[test]
fn lockfile_blocks_a_second_trainer() {
    let f = fixture();
    let dir = f.out.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("mnist_blackbox_seed1.lock"), "").unwrap();
    let mut args = vec!["train", "blackbox"];
    args.extend(SMALL);
    let o = catx(&f, &args);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("another process"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let f = fixture();
    let cfg = f.out.parent().unwrap().join("catx.toml");
    std::fs::write(
        &cfg,
        "[run]\ndataset = \"mnist\"\ndim = 16\ndepth = 1\nepochs = 3\nheads = 2\n",
    )
    .unwrap();
    let o = ok(&catx(
        &f,
        &[
            "--config",
            cfg.to_str().unwrap(),
            "describe",
            "expvit",
            "--epochs",
            "2",
            "--frac",
            "0.05",
        ],
    ));
    let doc: serde_json::Value = serde_json::from_str(&o).unwrap();
    assert_eq!(doc["config"]["epochs"], 2);
    assert_eq!(doc["config"]["model"]["dim"], 16);
    assert_eq!(doc["config"]["model"]["heads"], 2);
    assert_eq!(doc["config"]["lambda"], 0.9);
    assert_eq!(doc["k"], 2);
}

#[test]
fn describe_reports_reference_size() {
    let f = fixture();
    let o = ok(&catx(
        &f,
        &["describe", "expvit", "--dataset", "mnist", "--frac", "0.1"],
    ));
    let doc: serde_json::Value = serde_json::from_str(&o).unwrap();
    assert_eq!(doc["parameters"], 12_679_731);
    assert_eq!(doc["config"]["model"]["depth"], 6);
}

fn gray(path: &Path) -> Vec<u8> {
    image::open(path).unwrap().to_luma8().into_raw()
}

#[test]
fn explain_writes_overlays_and_sidecar() {
    let f = fixture();
    let mut args = vec!["train", "expvit", "--frac", "0.05", "--lambda", "0.9"];
    args.extend(SMALL);
    ok(&catx(&f, &args));
    let ckpt = f.out.join("mnist").join("mnist_expvit_frac0.05_lambda0.9_seed1.ckpt");

    // source image: a gradient so every pixel value is distinct-ish
    let src = f.out.join("digit.png");
    image::GrayImage::from_fn(28, 28, |x, y| image::Luma([((x * 9 + y) % 256) as u8]))
        .save(&src)
        .unwrap();
    let out = f.out.join("explain");
    ok(&catx(
        &f,
        &[
            "explain",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            src.to_str().unwrap(),
            "--fracs",
            "1.0,0.05",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    let full = out.join("digit_frac1.png");
    assert_eq!(gray(&full), gray(&src));
    let small = gray(&out.join("digit_frac0.05.png"));
    let source = gray(&src);
    let kept = small.iter().zip(&source).filter(|(a, b)| a == b && **b > 3).count();
    let bright_source = source.iter().filter(|&&b| b > 3).count();
    assert!((28..=32).contains(&kept), "{kept} pixels kept of {bright_source}");

    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("digit_selection.json")).unwrap()).unwrap();
    let sum: f64 = sidecar["selection_probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert_eq!(sidecar["selections"][1]["k"], 2);

    let wrong = f.out.join("wrong.png");
    image::GrayImage::new(32, 32).save(&wrong).unwrap();
    let o = catx(
        &f,
        &[
            "explain",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            wrong.to_str().unwrap(),
        ],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("model expects 28x28"));
}
