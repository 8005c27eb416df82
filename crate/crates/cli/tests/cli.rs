use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tastas");

fn tastas(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, seed: &str) -> Output {
    tastas(&[
        "synth-data", "--speakers", "3", "--dur", "0.5", "--seed", seed, "--train", "3", "--dev", "2", "--test",
        "2", "--out", p(out),
    ])
}

const TINY: [&str; 8] = [
    "--set", "num_filters=8", "--set", "chunk_len=10", "--set", "hidden_size=8", "--set", "stages=1,1",
];

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_is_reproducible_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(synth(&a, "7").status.success());
    assert!(synth(&b, "7").status.success());
    assert_eq!(files_under(&a), files_under(&b));

    let manifest = fs::read_to_string(a.join("train.tsv")).unwrap();
    for line in manifest.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 6);
        let snr: f64 = f[3].parse().unwrap();
        assert!((0.0..=5.0).contains(&snr));
        assert_ne!(f[4], f[5]);
    }

    let bad = dir.path().join("bad");
    let o = tastas(&["synth-data", "--speakers", "1", "--out", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!bad.exists(), "usage errors touch no files");
    assert_eq!(tastas(&["synth-data"]).status.code(), Some(1));
}

#[test]
fn train_separate_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, "1").status.success());
    let run = dir.path().join("run");
    let (train, dev, test_manifest) = (data.join("train.tsv"), data.join("dev.tsv"), data.join("test.tsv"));
    let mut args = vec![
        "train-sep", "--train", p(&train), "--dev", p(&dev), "--out", p(&run),
        "--epochs", "2", "--seed", "4",
    ];
    args.extend(TINY);
    let o = tastas(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(run.join("report.tsv")).unwrap();
    assert_eq!(
        report.lines().next().unwrap(),
        "epoch\tlr\ttrain_loss\tdev_loss\tdev_si_sdri\trestarts"
    );
    let ckpt = run.join("model.ckpt");

    // Separation writes one input-length file per speaker.
    let test = fs::read_to_string(data.join("test.tsv")).unwrap();
    let mix = data.join(test.lines().next().unwrap().split('\t').next().unwrap());
    let sep = dir.path().join("sep");
    let o = tastas(&["separate", "--ckpt", p(&ckpt), "--in", p(&mix), "--out", p(&sep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mix_len = fs::metadata(&mix).unwrap().len();
    for name in ["est1.wav", "est2.wav"] {
        assert_eq!(fs::metadata(sep.join(name)).unwrap().len(), mix_len);
    }

    // Silence separates into silence-ish output without failing.
    let silent = dir.path().join("silent.wav");
    assert!(write_silence(&silent, 4000));
    let quiet = dir.path().join("quiet");
    let o = tastas(&["separate", "--ckpt", p(&ckpt), "--in", p(&silent), "--out", p(&quiet)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let est = fs::read(quiet.join("est1.wav")).unwrap();
    let peak = est[44..]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]).unsigned_abs())
        .max()
        .unwrap();
    assert!(peak <= 33, "peak {peak}");

    // Evaluation: exact header, IRM row, identical output on repeat and across thread counts.
    let eval = |threads: &str| {
        Command::new(BIN)
            .args(["eval", "--ckpt", &format!("tiny={}", p(&ckpt)), "--test", p(&test_manifest)])
            .env("TASTAS_THREADS", threads)
            .output()
            .unwrap()
    };
    let first = eval("0");
    assert!(first.status.success(), "{}", stderr(&first));
    let table = stdout(&first);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "system\tmean_si_sdri\tmedian_si_sdri\tmean_sdri\tmedian_sdri\tpesq\testoi\tutterances"
    );
    assert!(lines[1].starts_with("tiny\t"));
    assert!(lines[2].starts_with("IRM\t"));
    assert!(lines[1].contains("\tunsupported\tunsupported\t2"));
    assert_eq!(stdout(&eval("0")), table);
    assert_eq!(stdout(&eval("3")), table);

    let out = dir.path().join("eval");
    let o = tastas(&["eval", "--ckpt", p(&ckpt), "--test", p(&test_manifest), "--out", p(&out), "--no-irm"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join("eval_table.tsv")).unwrap(), stdout(&o));
}

/// Writes a 16-bit mono 8 kHz WAV of zeros by hand.
fn write_silence(path: &Path, samples: u32) -> bool {
    let data_len = samples * 2;
    let mut b = Vec::new();
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&8000u32.to_le_bytes());
    b.extend_from_slice(&16000u32.to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    b.resize(b.len() + data_len as usize, 0);
    fs::write(path, b).is_ok()
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    fs::write(&ckpt, b"TSTS\x01\x00\x00\x00garbage").unwrap();
    let wav = dir.path().join("x.wav");
    assert!(write_silence(&wav, 800));
    let o = tastas(&["separate", "--ckpt", p(&ckpt), "--in", p(&wav), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("model.ckpt") && err.contains("checkpoint"), "{err}");
}

#[test]
fn finetune_requires_frozen_idnet() {
    let dir = tempfile::tempdir().unwrap();
    let o = tastas(&["finetune", "--train", "t.tsv", "--dev", "d.tsv", "--init", "m.ckpt", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--idnet"));
    let o = tastas(&["train-sep", "--train", "t.tsv", "--dev", "d.tsv", "--batch-size", "4"]);
    assert_eq!(o.status.code(), Some(1));
    let o = tastas(&["train-sep", "--train", "t.tsv", "--dev", "d.tsv", "--model", "tastas-99"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_passes_by_default_and_reports_tight_tolerance_failures() {
    let a = tastas(&["grad-check", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    let text = stdout(&a);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(text.contains("tastas_end_to_end"));
    assert_eq!(stdout(&tastas(&["grad-check", "--seed", "5"])), text);

    let tight = tastas(&["grad-check", "--tol", "1e-12"]);
    assert_eq!(tight.status.code(), Some(2));
    let text = stdout(&tight);
    assert!(text.lines().any(|l| l.starts_with("FAIL")));
    assert!(text.contains("checks passed"));
}
