use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Temp directory with the 64-sample fixture under the standard MNIST
/// names, used as both the training and the test split.
fn fixture_data() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for split in ["train", "t10k"] {
        fs::copy(
            fixture_dir().join("mini-images-idx3-ubyte"),
            dir.path().join(format!("{split}-images-idx3-ubyte")),
        )
        .unwrap();
        fs::copy(
            fixture_dir().join("mini-labels-idx1-ubyte"),
            dir.path().join(format!("{split}-labels-idx1-ubyte")),
        )
        .unwrap();
    }
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_digitnet"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_small(data: &Path, out: &Path, seed: &str) -> Output {
    run(&[
        "train",
        "--data-dir",
        s(data),
        "--out",
        s(out),
        "--seed",
        seed,
        "--epochs",
        "2",
        "--limit-train",
        "32",
        "--limit-eval",
        "16",
        "--batch-size",
        "16",
    ])
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let data = fixture_data();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = train_small(data.path(), out, "5");
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["metrics.csv", "checkpoint.bin", "loss.pgm", "accuracy.pgm"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds"
    );
    assert_eq!(lines.len(), 3);

    let c = tmp.path().join("c");
    assert!(train_small(data.path(), &c, "6").status.success());
    assert_ne!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(c.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn resume_continues_to_the_same_result() {
    let data = fixture_data();
    let tmp = tempfile::tempdir().unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    assert!(train_small(data.path(), &full, "2").status.success());
    let o = run(&[
        "train",
        "--data-dir",
        s(data.path()),
        "--out",
        s(&part),
        "--seed",
        "2",
        "--epochs",
        "1",
        "--limit-train",
        "32",
        "--limit-eval",
        "16",
        "--batch-size",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = part.join("checkpoint.bin");
    let o = run(&[
        "train",
        "--data-dir",
        s(data.path()),
        "--out",
        s(&part),
        "--epochs",
        "2",
        "--limit-train",
        "32",
        "--limit-eval",
        "16",
        "--batch-size",
        "16",
        "--resume",
        s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(
            fs::read(full.join(name)).unwrap(),
            fs::read(part.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn inspect_eval_and_analyze() {
    let data = fixture_data();
    let out = tempfile::tempdir().unwrap();
    assert!(train_small(data.path(), out.path(), "1").status.success());

    let o = run(&["inspect", "--out", s(out.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for needle in ["1936", "247936", "268032", "conv2d 3x3, 32 filters"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }

    let o = run(&["eval", "--data-dir", s(data.path()), "--out", s(out.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = fs::read_to_string(out.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("samples,loss,accuracy\n64,"));

    let o = run(&[
        "analyze",
        "--data-dir",
        s(data.path()),
        "--out",
        s(out.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(out.path().join("similarity.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(
        rows[0],
        "layer,kernel,filters,threshold,pair_count,total_pairs,ratio"
    );
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let ratio: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&ratio));
    }
    for name in [
        "filters_layer1.pgm",
        "filters_layer2.pgm",
        "similarity_layer1_t0.5.csv",
        "similarity_layer2_t0.6.csv",
    ] {
        assert!(out.path().join(name).exists(), "{name}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let data = fixture_data();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# small run\nepochs = 3\nlimit_train = 32\nlimit-eval = 16\ndata_dir = {}\n",
            s(data.path())
        ),
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--batch-size",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    fs::write(&cfg, "epochs\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes_and_error_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");

    let o = run(&["train", "--data-dir", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error: user: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint at all").unwrap();
    let o = run(&["inspect", "--checkpoint", s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error: format: "));

    let data = fixture_data();
    let broken = data.path().join("train-images-idx3-ubyte");
    let mut bytes = fs::read(&broken).unwrap();
    bytes.truncate(1000);
    fs::write(&broken, bytes).unwrap();
    let o = run(&[
        "train",
        "--data-dir",
        s(data.path()),
        "--out",
        s(tmp.path()),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(&["analyze", "--thresholds", "1.5", "--checkpoint", s(&bad)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn help_lists_flags_for_every_subcommand() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let top = String::from_utf8(o.stdout).unwrap();
    for cmd in ["train", "eval", "analyze", "ae", "vae", "inspect"] {
        assert!(top.contains(cmd));
        let o = run(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = String::from_utf8(o.stdout).unwrap();
        for flag in [
            "--seed",
            "--out",
            "--data-dir",
            "--config",
            "--deterministic",
        ] {
            assert!(text.contains(flag), "{cmd} help lacks {flag}");
        }
    }
    let o = run(&["analyze", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--thresholds",
        "--abs-similarity",
        "--sweep",
        "--filter-counts",
    ] {
        assert!(text.contains(flag), "analyze help lacks {flag}");
    }
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn autoencoders_on_fixture() {
    let data = fixture_data();
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let out = tmp.path().join(format!("r{run_id}"));
        let o = run(&[
            "ae",
            "--data-dir",
            s(data.path()),
            "--out",
            s(&out),
            "--limit-train",
            "64",
            "--epochs",
            "2",
            "--batch-size",
            "16",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = run(&[
            "vae",
            "--data-dir",
            s(data.path()),
            "--out",
            s(&out),
            "--limit-train",
            "64",
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--hidden",
            "32",
            "--latent",
            "4",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(out);
    }
    for name in [
        "ae_loss.csv",
        "ae_grid.pgm",
        "vae_loss.csv",
        "vae_grid.pgm",
        "vae_recon.pgm",
    ] {
        assert_eq!(
            fs::read(outputs[0].join(name)).unwrap(),
            fs::read(outputs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    let ae = fs::read_to_string(outputs[0].join("ae_loss.csv")).unwrap();
    assert!(ae.starts_with("epoch,mse\n"));
    let vae = fs::read_to_string(outputs[0].join("vae_loss.csv")).unwrap();
    assert!(vae.starts_with("epoch,recon,kl,total\n"));

    let o = run(&[
        "ae",
        "--data-dir",
        s(data.path()),
        "--out",
        s(tmp.path()),
        "--limit-train",
        "100",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
