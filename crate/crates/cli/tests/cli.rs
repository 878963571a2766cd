use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use slb_core::data::{encode_idx_images, encode_idx_labels};

fn slb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slb")).args(args).output().expect("spawn slb")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Full-size synthetic MNIST whose labels are drawn in the pixel pattern.
fn data_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mnist = dir.path().join("mnist");
        fs::create_dir(&mnist).unwrap();
        for (prefix, n) in [("train", 60_000usize), ("t10k", 10_000)] {
            let labels: Vec<u8> = (0..n).map(|i| ((i * 7 + i / 13) % 10) as u8).collect();
            let mut pixels = Vec::with_capacity(n * 784);
            for (i, &l) in labels.iter().enumerate() {
                for p in 0..784 {
                    let band = (p % 28) / 3 == l as usize;
                    pixels.push(if band { 220 } else { ((p * 31 + i * 17) % 60) as u8 });
                }
            }
            fs::write(mnist.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(28, 28, &pixels)).unwrap();
            fs::write(mnist.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
        }
        dir
    })
    .path()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "arch = mnist_cnn\nweight_mode = slb\nq_w = 1\nq_a = 32\ndata_root = {}\ntrain_subset = 96\neval_subset = 64\n\
         epochs = 3\nbatch_size = 32\neval_batch = 64\nlr_logits = 0.3\nseed = 5\n{extra}",
        data_root().display()
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn csv_row(csv: &str, index: usize) -> Vec<f64> {
    let line = csv.lines().nth(index + 1).expect("row");
    line.split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn schedule_endpoints() {
    let o = slb(&["schedule", "--kind", "exp", "--t-start", "0.01", "--t-end", "10", "--iterations", "100"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("i,T,tau"));
    assert_eq!(csv.lines().count(), 102);
    assert_eq!(csv_row(&csv, 0)[1], 0.01);
    assert_eq!(csv_row(&csv, 100)[1], 10.0);
}

#[test]
fn schedule_linear_midpoint() {
    let o = slb(&["schedule", "--kind", "linear", "--iterations", "100"]);
    let t = csv_row(&stdout(&o), 50)[1];
    assert!((t - 5.005).abs() < 1e-12, "{t}");
}

#[test]
fn schedule_without_iterations_fails() {
    let o = slb(&["schedule", "--iterations", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("iteration"));
}

#[test]
fn unknown_config_key_fails_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "epochs = 2\nlearnig_rate = 0.1\n").unwrap();
    let o = slb(&["train", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("learnig_rate") && err.contains("line 2"), "{err}");
}

#[test]
fn config_prints_canonical_form() {
    let o = slb(&["config", "--config", "../../configs/mnist_slb_1w32a.cfg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("canon.cfg");
    fs::write(&path, &text).unwrap();
    assert_eq!(stdout(&slb(&["config", "--config", path.to_str().unwrap()])), text);
}

#[test]
fn gradcheck_scopes_pass() {
    for scope in ["slb-search", "sbn"] {
        let o = slb(&["gradcheck", "--scope", scope]);
        assert!(o.status.success(), "{scope}: {}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
}

#[test]
fn gradcheck_negative_control_fails() {
    let o = slb(&["gradcheck", "--negative-control"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("corrupted_adjoint") && stdout(&o).contains("FAIL"));
}

#[test]
fn train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "keep_checkpoints = 2\n");
    let o = slb(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.cfg", "report.csv", "model.slbm", "checkpoint-epoch0002.slbc", "checkpoint-epoch0003.slbc"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(!out.join("checkpoint-epoch0001.slbc").exists());
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("epoch,iteration,tau,train_loss,continuous_acc,discrete_acc,fraction_frozen"));
    assert_eq!(report.lines().count(), 4);

    let model = out.join("model.slbm");
    let root = data_root().to_str().unwrap();
    let o = slb(&["eval", "--model", model.to_str().unwrap(), "--data-root", root, "--subset", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let want = csv_row(&report, 2)[5];
    assert_eq!(stdout(&o).trim(), format!("discrete_acc={want:.4} n=64"));

    let o = slb(&["eval", "--model", model.to_str().unwrap(), "--state", "both", "--data-root", root]);
    assert!(!o.status.success());

    let ck = out.join("checkpoint-epoch0003.slbc");
    let o = slb(&["eval", "--checkpoint", ck.to_str().unwrap(), "--state", "both", "--subset", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("continuous_acc=") && text.contains("discrete_acc=") && text.contains("gap_points="), "{text}");

    let exported = dir.path().join("again.slbm");
    let o = slb(&["export", "--checkpoint", ck.to_str().unwrap(), "--output", exported.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&exported).unwrap(), fs::read(&model).unwrap());
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--deterministic", "--quiet", "--output-dir", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = slb(&args);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        out
    };
    let a = run("a", &["--config", cfg]);
    let b = run("b", &["--config", cfg]);
    let report = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(report, fs::read(b.join("report.csv")).unwrap());

    let ck = a.join("checkpoint-epoch0002.slbc");
    let c = run("c", &["--resume", ck.to_str().unwrap()]);
    assert_eq!(fs::read(c.join("report.csv")).unwrap(), report);
    assert_eq!(fs::read(c.join("model.slbm")).unwrap(), fs::read(a.join("model.slbm")).unwrap());

    let o = slb(&["train", "--resume", ck.to_str().unwrap(), "--seed", "99", "--output-dir", dir.path().join("d").to_str().unwrap()]);
    assert!(!o.status.success());
}
