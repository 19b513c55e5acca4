use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branchynet"))
}

fn idx_images(count: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2051u32, count as u32, 28, 28] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&2049u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Digit-like synthetic data: class `k` lights up a horizontal band at row `2k + 3`.
fn write_split(dir: &Path, prefix: &str, count: usize, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.gen_range(0..10u8);
        for y in 0..28 {
            for _ in 0..28 {
                let band = y == 2 * label as usize + 3 || y == 2 * label as usize + 4;
                pixels.push(if band { r.gen_range(180..=255) } else { r.gen_range(0..40) });
            }
        }
        labels.push(label);
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(count, &pixels)).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("mnist");
        fs::create_dir(&data).unwrap();
        write_split(&data, "train", 300, 1);
        write_split(&data, "t10k", 80, 2);
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> String {
        self.path("mnist").display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = bin();
        cmd.args(args).env("RUST_LOG", "warn");
        let needs_data = !args.iter().any(|a| *a == "--data-dir");
        if needs_data {
            cmd.args(["--data-dir", &self.data(), "--validation-size", "60"]);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train_both(&self, epochs: &str) -> (String, String) {
        let base = self.path("base.bnet").display().to_string();
        let branchy = self.path("branchy.bnet").display().to_string();
        self.ok(&["train-baseline", "--epochs", epochs, "--model-out", &base]);
        self.ok(&["train-branchy", "--epochs", epochs, "--init-from", &base, "--model-out", &branchy]);
        (base, branchy)
    }
}

#[test]
fn train_branchy_requires_init_from() {
    let ws = Workspace::new();
    let out = ws.run(&["train-branchy", "--epochs", "1", "--model-out", &ws.path("m.bnet").display().to_string()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--init-from"), "{err}");
    assert!(err.contains("baseline"), "{err}");
    assert!(!ws.path("m.bnet").exists());
}

#[test]
fn closed_gates_reproduce_baseline_accuracy() {
    let ws = Workspace::new();
    let (base, branchy) = ws.train_both("1");
    let accuracy = |line: &str| line.split('|').next().unwrap().trim().to_string();
    let b = ws.ok(&["eval", "--model-in", &base]);
    // Before phase two changes the trunk, the warm-started network is the baseline.
    let warm = ws.path("warm.bnet").display().to_string();
    ws.ok(&["train-branchy", "--epochs", "0", "--init-from", &base, "--model-out", &warm]);
    let w = ws.ok(&["eval", "--model-in", &warm, "--thresholds", "0"]);
    assert_eq!(accuracy(&b), accuracy(&w), "{b} vs {w}");
    assert!(w.contains("exit % [0.00, 100.00]"), "{w}");

    let t = ws.ok(&["eval", "--model-in", &branchy, "--thresholds", "0.05"]);
    assert!(t.contains("T [0.05]"), "{t}");
}

#[test]
fn outputs_are_byte_identical_without_timestamp() {
    let ws = Workspace::new();
    let (_, branchy) = ws.train_both("1");
    let csv = |name: &str, extra: &[&str]| {
        let path = ws.path(name).display().to_string();
        let mut args = vec!["sweep", "--model-in", branchy.as_str(), "--out", path.as_str()];
        args.extend_from_slice(extra);
        ws.ok(&args);
        fs::read(ws.path(name)).unwrap()
    };
    let a = csv("a.csv", &["--no-timestamp"]);
    let b = csv("b.csv", &["--no-timestamp"]);
    assert_eq!(a, b);
    let stamped = String::from_utf8(csv("c.csv", &[])).unwrap();
    assert!(stamped.starts_with("# generated_unix_time="));
    assert_eq!(stamped.split_once('\n').unwrap().1.as_bytes(), a.as_slice());

    let metrics = |name: &str| {
        let out = ws.path(name).display().to_string();
        let model = ws.path(&format!("{name}.bnet")).display().to_string();
        ws.ok(&["train-baseline", "--epochs", "1", "--model-out", &model, "--out", &out, "--no-timestamp"]);
        (fs::read(&out).unwrap(), fs::read(&model).unwrap())
    };
    assert_eq!(metrics("m1.csv"), metrics("m2.csv"));

    let trace = |name: &str| {
        let out = ws.path(name).display().to_string();
        ws.ok(&["eval", "--model-in", &branchy, "--thresholds", "0.1", "--trace", &out, "--no-timestamp"]);
        fs::read_to_string(&out).unwrap()
    };
    let t1 = trace("t1.csv");
    assert_eq!(t1, trace("t2.csv"));
    assert!(t1.starts_with("sample_id,exit_index,entropy,predicted,true,macs\n"));
    assert_eq!(t1.lines().count(), 81);
}

#[test]
fn failures_exit_nonzero_and_leave_no_artifacts() {
    let ws = Workspace::new();
    let (base, branchy) = ws.train_both("1");

    let out = ws.run(&["eval", "--model-in", &ws.path("missing.bnet").display().to_string()]);
    assert!(!out.status.success());

    let out = ws.run(&["eval", "--model-in", &branchy, "--thresholds", "0.1,0.2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold"));

    let model = ws.path("never.bnet");
    let out = ws.run(&[
        "train-baseline",
        "--epochs",
        "1",
        "--model-out",
        &model.display().to_string(),
        "--out",
        &ws.path("no/such/dir/m.csv").display().to_string(),
    ]);
    assert!(!out.status.success());
    assert!(!model.exists());

    let out = ws.run(&["train-baseline", "--data-dir", &ws.path("empty").display().to_string(), "--model-out", "x.bnet"]);
    assert!(!out.status.success());

    // A corrupted payload byte is detected on load.
    let mut bytes = fs::read(&base).unwrap();
    let at = bytes.len() - 10;
    bytes[at] ^= 0x10;
    let corrupt = ws.path("corrupt.bnet");
    fs::write(&corrupt, bytes).unwrap();
    let out = ws.run(&["eval", "--model-in", &corrupt.display().to_string()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    let leftovers: Vec<_> = fs::read_dir(ws.dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn infer_prints_one_decision() {
    let ws = Workspace::new();
    let (_, branchy) = ws.train_both("1");
    let out = ws.ok(&["infer", "--model-in", &branchy, "--sample", "3", "--thresholds", "10"]);
    assert!(out.contains("at exit 1"), "{out}");
    let out = ws.ok(&["infer", "--model-in", &branchy, "--sample", "3"]);
    assert!(out.contains("at exit 2"), "{out}");
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn parses_threshold_and_grid_flags() {
    let t = branchynet_cli::parse_thresholds("0.025, 0.1").unwrap();
    assert_eq!(t.as_slice(), &[0.025, 0.1]);
    assert!(branchynet_cli::parse_thresholds("-1").is_err());
    assert!(branchynet_cli::parse_thresholds("abc").is_err());
    let g = branchynet_cli::parse_grid("0,0.1;0.5").unwrap();
    assert_eq!(g, vec![vec![0.0, 0.1], vec![0.5]]);
}
