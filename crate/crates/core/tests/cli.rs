//! Drives the `eks` binary as a user would.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eks"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eks(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, teacher and student in a fresh directory.
fn pipeline(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let (d, t, st) = (dir.join("d.eksd"), dir.join("t.eksc"), dir.join("s.eksc"));
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--samples-per-class",
        "12",
        "--out",
        s(&d),
    ]);
    ok(&[
        "train-teacher",
        "--epochs",
        "1",
        "--data",
        s(&d),
        "--out",
        s(&t),
    ]);
    ok(&[
        "decompose",
        "--epochs",
        "1",
        "--data",
        s(&d),
        "--teacher",
        s(&t),
        "--out",
        s(&st),
    ]);
    (d, t, st)
}

#[test]
fn verify_passes_on_a_healthy_build() {
    let out = ok(&["verify", "--seed", "7"]);
    assert!(out.contains("failed=0"), "{out}");
    assert!(!out.contains(" fail "), "{out}");
}

#[test]
fn injected_fault_fails_only_the_fusion_check() {
    let out = eks(&[
        "verify",
        "--seed",
        "7",
        "--inject-fault",
        "fusion-off-by-one",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    let failed: Vec<&str> = text.lines().filter(|l| l.contains(" fail ")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].starts_with("eks.fusion_forward "));
}

#[test]
fn bench_reports_the_default_example() {
    let out = ok(&[
        "bench", "--T", "11", "--r", "8", "--b", "64", "--l", "49", "--d", "256",
    ]);
    assert!(out.contains("eks_cheaper=true"), "{out}");
    let out = ok(&[
        "bench", "--T", "3", "--r", "1", "--b", "4", "--l", "4", "--d", "8",
    ]);
    assert!(out.contains("eks_cheaper=false"), "{out}");
}

#[test]
fn switch_roundtrip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, st) = pipeline(dir.path());
    let f0 = dir.path().join("m.eks");
    let f2 = dir.path().join("m2.eks");
    let back = dir.path().join("m0.eks");
    ok(&["switch", "--ckpt", s(&st), "--to", "0", "--out", s(&f0)]);
    ok(&[
        "switch",
        "--ckpt",
        s(&f0),
        "--from",
        "0",
        "--to",
        "2",
        "--out",
        s(&f2),
    ]);
    ok(&["switch", "--ckpt", s(&f2), "--to", "0", "--out", s(&back)]);
    assert_ne!(fs::read(&f0).unwrap(), fs::read(&f2).unwrap());
    assert_eq!(fs::read(&f0).unwrap(), fs::read(&back).unwrap());

    let wrong = eks(&[
        "switch",
        "--ckpt",
        s(&f2),
        "--from",
        "1",
        "--to",
        "0",
        "--out",
        s(&back),
    ]);
    assert_eq!(wrong.status.code(), Some(1));
    let range = eks(&["switch", "--ckpt", s(&f0), "--to", "9", "--out", s(&back)]);
    assert_eq!(range.status.code(), Some(1));
}

#[test]
fn commands_never_modify_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (d, t, st) = pipeline(dir.path());
    let snapshot = |p: &Path| fs::read(p).unwrap();
    let before = [snapshot(&d), snapshot(&t), snapshot(&st)];
    let e = dir.path().join("e.eksc");
    ok(&["export", "--ckpt", s(&st), "--task", "1", "--out", s(&e)]);
    ok(&[
        "switch",
        "--ckpt",
        s(&st),
        "--to",
        "1",
        "--out",
        s(&dir.path().join("f.eksc")),
    ]);
    ok(&["eval", "--ckpt", s(&st), "--data", s(&d)]);
    ok(&["eval", "--ckpt", s(&e), "--data", s(&d)]);
    ok(&["mig", "--ckpt", s(&t), "--data", s(&d), "--split", "train"]);
    assert_eq!(before, [snapshot(&d), snapshot(&t), snapshot(&st)]);
}

#[test]
fn command_line_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (d, t, _) = pipeline(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# slower run\nepochs=1\nlr=0.01\nshared-only=true\n").unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "decompose",
            "--data",
            s(&d),
            "--teacher",
            s(&t),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(out).unwrap()
    };
    let from_file = run("a.eksc", &["--config", s(&cfg)]);
    let explicit = run(
        "b.eksc",
        &["--epochs", "1", "--lr", "0.01", "--shared-only"],
    );
    assert_eq!(from_file, explicit);
    let overridden = run("c.eksc", &["--config", s(&cfg), "--lr", "0.05"]);
    let explicit = run(
        "d.eksc",
        &["--epochs", "1", "--lr", "0.05", "--shared-only"],
    );
    assert_eq!(overridden, explicit);
    assert_ne!(overridden, from_file);
}

#[test]
fn usage_and_domain_errors_have_distinct_codes() {
    assert_eq!(eks(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(eks(&["verify", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(eks(&["eval", "--ckpt", "x"]).status.code(), Some(2));
    let missing = eks(&[
        "eval",
        "--ckpt",
        "/nonexistent/x",
        "--data",
        "/nonexistent/y",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "no equals sign\n").unwrap();
    assert_eq!(
        eks(&["verify", "--config", s(&bad_cfg)]).status.code(),
        Some(2)
    );
    let unknown_key = dir.path().join("unknown.cfg");
    fs::write(&unknown_key, "warp=9\n").unwrap();
    assert_eq!(
        eks(&["verify", "--config", s(&unknown_key)]).status.code(),
        Some(2)
    );
}

#[test]
fn help_lists_training_defaults() {
    let help = ok(&["decompose", "--help"]);
    for flag in [
        "--lr",
        "--alpha",
        "--beta",
        "--rank",
        "--epochs",
        "--batch-size",
        "--seed",
    ] {
        assert!(help.contains(flag), "{flag} missing:\n{help}");
    }
    for default in [
        "[default: 0.05]",
        "[default: 10]",
        "[default: 1]",
        "[default: 8]",
    ] {
        assert!(help.contains(default), "{default} missing:\n{help}");
    }
}
