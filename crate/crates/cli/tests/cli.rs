use std::path::{Path, PathBuf};
use std::process::Command;

use zsar_core::zsar::silhouette;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn zsar(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_zsar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = zsar(args);
    assert_eq!(r.code, 0, "zsar {args:?} failed:\n{}", r.stderr);
    r
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_ARCH: &[&str] = &[
    "--d-model",
    "8",
    "--heads",
    "2",
    "--d-ff",
    "16",
    "--d-emb",
    "8",
    "--batch-size",
    "32",
];

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&[
            "synth",
            "--out-dir",
            s(&root.join("data")),
            "--classes",
            "6",
            "--per-class",
            "8",
            "--d-c",
            "12",
            "--d-s",
            "16",
            "--eval-classes",
            "2",
            "--seed",
            "4",
        ]);
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn mine(&self, manifest: &str, out: &str) -> PathBuf {
        let out = self.path(out);
        ok(&[
            "mine",
            s(&self.path(manifest)),
            "--out",
            s(&out),
            "--tau",
            "0.3",
            "--seed",
            "1",
        ]);
        out
    }

    fn train(&self, manifest: &str, triplets: &Path, ckpt: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(ckpt);
        let manifest = self.path(manifest);
        let mut args = vec!["train", s(&manifest), s(triplets), "--out-ckpt", s(&ckpt)];
        args.extend_from_slice(SMALL_ARCH);
        args.extend_from_slice(extra);
        ok(&args);
        ckpt
    }
}

#[test]
fn ingest_accepts_valid_and_rejects_broken_manifests() {
    let f = Fixture::new();
    let manifest = f.path("data/train.json");
    let r = ok(&["ingest", s(&manifest)]);
    assert!(r.stdout.starts_with("ok:"));
    assert!(
        r.stderr.contains("\"command\""),
        "config echo missing:\n{}",
        r.stderr
    );
    ok(&["ingest", s(&manifest), "--validate-only"]);

    let mut json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    json["videos"][0]["segments"][0]["sentence_id"] = 1_000_000.into();
    let dangling = f.path("data/dangling.json");
    std::fs::write(&dangling, json.to_string()).unwrap();
    assert_eq!(zsar(&["ingest", s(&dangling)]).code, 2);

    let missing = f.path("data/nowhere.json");
    let r = zsar(&["ingest", s(&missing)]);
    assert_eq!(r.code, 2);
    assert!(
        r.stderr.contains("nowhere.json"),
        "path not named:\n{}",
        r.stderr
    );

    assert_eq!(zsar(&["ingest"]).code, 2);
    assert_eq!(zsar(&["frobnicate"]).code, 2);
}

#[test]
fn mining_is_byte_reproducible() {
    let f = Fixture::new();
    let a = f.mine("data/train.json", "a.csv");
    let b = f.mine("data/train.json", "b.csv");
    let bytes = std::fs::read(&a).unwrap();
    assert!(bytes.len() > 100);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("a.csv.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["seed"], 1);
    assert!(report["report"]["records"].as_u64().unwrap() > 0);
}

#[test]
fn one_epoch_gives_a_one_row_trace_and_resume_checks_dimensions() {
    let f = Fixture::new();
    let triplets = f.mine("data/train.json", "t.csv");
    let ckpt = f.train(
        "data/train.json",
        &triplets,
        "m.ckpt",
        &["--epochs", "1", "--patience", "1"],
    );
    let trace = std::fs::read_to_string(f.path("m.ckpt.trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,seconds");
    assert_eq!(lines.len(), 2);
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(f.path("m.ckpt.trace.csv.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["epochs_run"], 1);

    f.train(
        "data/train.json",
        &triplets,
        "resumed.ckpt",
        &["--epochs", "1", "--patience", "1", "--resume", s(&ckpt)],
    );
    let manifest = f.path("data/train.json");
    let mut args = vec!["train", s(&manifest), s(&triplets)];
    let out = f.path("bad.ckpt");
    args.extend_from_slice(&[
        "--out-ckpt",
        s(&out),
        "--resume",
        s(&ckpt),
        "--epochs",
        "1",
        "--patience",
        "1",
    ]);
    args.extend_from_slice(&[
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "16",
        "--d-emb",
        "8",
    ]);
    let r = zsar(&args);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(!out.exists());
}

#[test]
fn diverging_training_exits_with_the_numeric_code() {
    let f = Fixture::new();
    let triplets = f.mine("data/train.json", "t.csv");
    let manifest = f.path("data/train.json");
    let mut args = vec!["train", s(&manifest), s(&triplets)];
    let out = f.path("m.ckpt");
    args.extend_from_slice(&[
        "--out-ckpt",
        s(&out),
        "--epochs",
        "3",
        "--patience",
        "3",
        "--lr",
        "1e30",
    ]);
    args.extend_from_slice(SMALL_ARCH);
    let r = zsar(&args);
    assert_eq!(r.code, 3, "{}", r.stderr);
}

#[test]
fn evaluating_on_all_classes_is_a_single_run() {
    let f = Fixture::new();
    let triplets = f.mine("data/train.json", "t.csv");
    let ckpt = f.train(
        "data/train.json",
        &triplets,
        "m.ckpt",
        &["--epochs", "2", "--patience", "2"],
    );
    let out = f.path("eval");
    ok(&[
        "eval",
        s(&f.path("data/eval.json")),
        s(&ckpt),
        "--out",
        s(&out),
        "--classes",
        "all",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["config"]["fusion"]["alpha"], 0.8);
    let confusion = std::fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert!(confusion.starts_with("truth,"));
    assert!(confusion.lines().next().unwrap().ends_with(",abstain"));
    assert!(out.join("per_class.csv").exists());

    let r = zsar(&[
        "eval",
        s(&f.path("data/eval.json")),
        s(&ckpt),
        "--out",
        s(&out),
        "--classes",
        "9",
    ]);
    assert_eq!(r.code, 2);
    let r = zsar(&[
        "eval",
        s(&f.path("data/eval.json")),
        s(&ckpt),
        "--out",
        s(&out),
        "--classes",
        "two",
    ]);
    assert_eq!(r.code, 2);
}

#[test]
fn projection_separates_trained_classes_and_rejects_an_empty_subset() {
    let f = Fixture::new();
    let triplets = f.mine("data/all.json", "t.csv");
    let ckpt = f.train(
        "data/all.json",
        &triplets,
        "m.ckpt",
        &["--epochs", "15", "--patience", "15", "--lr", "1e-3"],
    );
    let out = f.path("proj.csv");
    let classes = "class_00,class_01,class_02,class_03";
    ok(&[
        "project",
        s(&f.path("data/all.json")),
        s(&ckpt),
        "--classes",
        classes,
        "--out",
        s(&out),
    ]);

    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,label,x,y");
    let (mut points, mut labels, mut prototypes) = (Vec::new(), Vec::new(), 0);
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[0].starts_with("prototype:") {
            prototypes += 1;
            continue;
        }
        points.push([
            cols[2].parse::<f64>().unwrap(),
            cols[3].parse::<f64>().unwrap(),
        ]);
        labels.push(cols[1].to_string());
    }
    assert_eq!(prototypes, 4);
    assert_eq!(points.len(), 4 * 8);
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    let score = silhouette(&points, &labels);
    assert!(score > 0.5, "silhouette {score}");

    let r = zsar(&[
        "project",
        s(&f.path("data/all.json")),
        s(&ckpt),
        "--classes",
        "",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 2);
    let r = zsar(&[
        "project",
        s(&f.path("data/all.json")),
        s(&ckpt),
        "--classes",
        "nope",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 2);
}
