use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample.txt")
}

fn mpq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpq"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mpq(dir, args);
    assert!(
        out.status.success(),
        "mpq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout.lines().last().expect("output line")).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let cfg = format!(
        "# small desk run\ntrain_text={}\nvocab=vocab.txt\nhidden_dim=16\nembed_dim=16\nepochs=2\n\
         max_outer=2\nsteps_per_outer=10\ngamma=1\neta1=0.2\neta2=0.2\nnas_steps=40\nbisect_steps=2\n{extra}",
        sample().display()
    );
    fs::write(dir.join("run.cfg"), cfg).unwrap();
    "run.cfg".into()
}

fn train_and_prototypes(dir: &Path, cfg: &str) -> String {
    ok(dir, &["--config", cfg, "train", "--out", "full.mpc"]);
    for b in ["1", "2", "4", "8"] {
        let out = format!("p{b}.mpq");
        ok(dir, &["--config", cfg, "quantize-uniform", "--checkpoint", "full.mpc", "--bits", b, "--out", &out]);
    }
    "p1.mpq,p2.mpq,p4.mpq,p8.mpq".into()
}

fn assignment_pairs(text: &str) -> Vec<(String, u8)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty() && !l.starts_with("cluster\t"))
        .map(|l| {
            let mut f = l.split('\t');
            (f.next().unwrap().to_string(), f.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn full_pipeline_on_sample_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "seed=3\n");
    let protos = train_and_prototypes(dir, &cfg);
    let c = ["--config", cfg.as_str()];

    ok(dir, &[&c[..], &["sensitivity", "--method", "kl", "--checkpoint", "full.mpc", "--prototypes", &protos, "--out", "kl.tsv"]].concat());
    ok(dir, &[&c[..], &["sensitivity", "--method", "hes", "--batches", "2", "--hutchinson-samples", "4", "--checkpoint", "full.mpc", "--prototypes", &protos, "--out", "hes.tsv"]].concat());
    let a = last_json(&ok(dir, &[&c[..], &["assign", "--report", "kl.tsv", "--checkpoint", "full.mpc", "--budget", "2", "--out", "kl.txt"]].concat()));
    let avg = a["avg_bits"].as_f64().unwrap();
    assert!((avg - 2.0).abs() < 0.25, "kl assignment avg {avg}");
    let capped = last_json(&ok(dir, &[&c[..], &["assign", "--report", "hes.tsv", "--checkpoint", "full.mpc", "--budget-mode", "cap", "--out", "hes.txt"]].concat()));
    assert!(capped["avg_bits"].as_f64().unwrap() <= 2.0 + 1e-12);
    let n = last_json(&ok(dir, &[&c[..], &["nas", "--prototypes", &protos, "--beta-target", "2", "--out", "nas.txt"]].concat()));
    assert!(n["avg_bits"].as_f64().unwrap() <= 2.0 + 1e-12);

    ok(dir, &[&c[..], &["finetune", "--prototypes", &protos, "--assignment", "kl.txt", "--out", "mixed.mpq"]].concat());
    let e = last_json(&ok(dir, &[&c[..], &["eval", "--model", "mixed.mpq", "--text", sample().to_str().unwrap()]].concat()));
    assert!(e["ppl"].as_f64().unwrap() >= 1.0);
    assert!((e["avg_bits"].as_f64().unwrap() - avg).abs() < 1e-12);
    assert!(e["timing_note"].as_str().unwrap().contains("not comparable"));

    let inspected = ok(dir, &["inspect", "--model", "mixed.mpq"]);
    let assigned = fs::read_to_string(dir.join("kl.txt")).unwrap();
    assert_eq!(assignment_pairs(&inspected), assignment_pairs(&assigned));

    let e2 = last_json(&ok(dir, &[&c[..], &["eval", "--model", "p2.mpq", "--text", sample().to_str().unwrap()]].concat()));
    let ratio = e2["compression_ratio"].as_f64().unwrap();
    assert!(ratio > 12.0 && ratio <= 16.0, "2-bit ratio {ratio}");
}

#[test]
fn fixed_seed_reproduces_output_files() {
    let runs: Vec<_> = (0..3)
        .map(|i| {
            let tmp = tempfile::tempdir().unwrap();
            let seed = if i < 2 { "seed=11\n" } else { "seed=12\n" };
            let cfg = write_config(tmp.path(), seed);
            let stdout = ok(tmp.path(), &["--config", &cfg, "train", "--out", "full.mpc"])
                + &ok(tmp.path(), &["--config", &cfg, "quantize-uniform", "--checkpoint", "full.mpc", "--bits", "2", "--out", "q.mpq"]);
            (tmp, stdout)
        })
        .collect();
    let files = ["vocab.txt", "full.mpc", "q.mpq", "q.mpq.theta.mpc", "q.mpq.lambda.mpc"];
    for f in files {
        let a = fs::read(runs[0].0.path().join(f)).unwrap();
        let b = fs::read(runs[1].0.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    assert_eq!(runs[0].1, runs[1].1);
    let a = fs::read(runs[0].0.path().join("full.mpc")).unwrap();
    let c = fs::read(runs[2].0.path().join("full.mpc")).unwrap();
    assert_ne!(a, c, "seed has no effect");
}

#[test]
fn config_precedence_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cases = [
        ("gamma", "0.001", "0.25", "0.5"),
        ("steps_per_outer", "none", "7", "9"),
        ("tokenizer", "word", "char", "word"),
        ("epochs", "10", "3", "4"),
        ("batches", "1", "all", "5"),
        ("out", "none", "a.mpq", "b.mpq"),
    ];
    for (key, default, file_value, flag_value) in cases {
        let flag = format!("--{}", key.replace('_', "-"));
        fs::write(dir.join("c.cfg"), format!("{key}={file_value}\n")).unwrap();
        fs::write(dir.join("empty.cfg"), "# nothing\n").unwrap();
        for (use_file, use_flag, expected) in [
            (false, false, default),
            (true, false, file_value),
            (false, true, flag_value),
            (true, true, flag_value),
        ] {
            let mut args = vec!["--config", if use_file { "c.cfg" } else { "empty.cfg" }];
            if use_flag {
                args.extend([flag.as_str(), flag_value]);
            }
            args.push("config");
            let out = ok(dir, &args);
            let line = out.lines().find(|l| l.starts_with(&format!("{key}="))).unwrap();
            assert_eq!(line, format!("{key}={expected}"), "file={use_file} flag={use_flag}");
        }
    }
    let out = ok(dir, &["config"]);
    assert!(out.contains("gamma=0.001\n") && out.contains("eta1=0.02\n") && out.contains("eta2=0.001\n"));
    assert!(out.contains("max_inner=20\n") && out.contains("hutchinson_samples=50\n") && out.contains("bit_widths=1,2,4,8\n"));
}

fn expect_error(dir: &Path, args: &[&str], code: i32, kind: &str) {
    let out = mpq(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: kind={kind} msg=")), "{err}");
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    expect_error(dir, &["train", "--epochs", "many"], 2, "config");
    expect_error(dir, &["frobnicate"], 2, "config");
    expect_error(dir, &["--bit-widths", "1,2,3", "config"], 2, "config");
    expect_error(dir, &["quantize-uniform", "--method", "sgd"], 2, "config");
    expect_error(dir, &["inspect"], 2, "config");
    expect_error(dir, &["inspect", "--model", "missing.mpq"], 4, "io");

    let cfg = write_config(dir, "");
    ok(dir, &["--config", &cfg, "train", "--out", "full.mpc"]);
    ok(dir, &["--config", &cfg, "quantize-uniform", "--method", "offline", "--checkpoint", "full.mpc", "--bits", "2", "--out", "q.mpq"]);
    let mut bytes = fs::read(dir.join("q.mpq")).unwrap();
    bytes[60] ^= 0x10;
    fs::write(dir.join("bad.mpq"), &bytes).unwrap();
    expect_error(dir, &["inspect", "--model", "bad.mpq"], 4, "crc_mismatch");
    fs::write(dir.join("short.mpq"), &bytes[..10]).unwrap();
    expect_error(dir, &["inspect", "--model", "short.mpq"], 4, "truncated");
    expect_error(
        dir,
        &["--config", &cfg, "quantize-uniform", "--method", "modbp", "--modbp-lr", "1e6", "--checkpoint", "full.mpc", "--bits", "2", "--out", "x.mpq"],
        3,
        "numeric",
    );
    fs::write(dir.join("other.txt"), "<unk>\nfoo\n").unwrap();
    expect_error(dir, &["--vocab", "other.txt", "eval", "--model", "q.mpq", "--text", "other.txt"], 2, "config");
}
