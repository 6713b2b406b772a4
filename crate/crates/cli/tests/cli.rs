use std::path::Path;
use std::process::{Command, Output};

use sscaf_core::audio::SOURCE_LABELS;

fn sscaf(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sscaf")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "sscaf {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn metric(csv: &str, name: &str) -> String {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("{name} missing from {csv}"))
        .to_string()
}

/// Manifest of three clips whose audio is never read.
fn fixture_manifest(dir: &Path) -> std::path::PathBuf {
    let mut s = format!("clip_id,path,annoyance,{}\n", SOURCE_LABELS.join(","));
    for (id, ann, on) in [("a", 2.5, [0, 2]), ("b", 7.0, [2, 5]), ("c", 4.25, [5, 7])] {
        let labels: Vec<&str> = (0..SOURCE_LABELS.len())
            .map(|k| if on.contains(&k) { "1" } else { "0" })
            .collect();
        s.push_str(&format!("{id},audio/{id}.wav,{ann},{}\n", labels.join(",")));
    }
    let path = dir.join("test.csv");
    std::fs::write(&path, s).unwrap();
    path
}

#[test]
fn eval_of_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture_manifest(dir.path());
    // identical columns, rows shuffled: matching is by clip id
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<String> = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(1);
            f.join(",")
        })
        .collect();
    lines[1..].reverse();
    let preds = dir.path().join("preds.csv");
    std::fs::write(&preds, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("eval");
    sscaf(&[
        "eval",
        "--predictions",
        p(&preds),
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metric(&csv, "auc"), "1.0000");
    assert_eq!(metric(&csv, "mae"), "0.0000");
    assert_eq!(metric(&csv, "rmse"), "0.0000");
    // four sources occur; the other twenty have no positives and score zero
    assert_eq!(metric(&csv, "f_score"), format!("{:.2}", 400.0 / 24.0));
    assert_eq!(metric(&csv, "acc"), "100.00");
}

#[test]
fn eval_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture_manifest(dir.path());
    let preds = dir.path().join("preds.csv");
    std::fs::write(&preds, "clip_id,annoyance\na,1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sscaf"))
        .args([
            "eval",
            "--predictions",
            p(&preds),
            "--manifest",
            p(&manifest),
            "--out-dir",
            p(dir.path()),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing column"), "{err}");
}

fn val_losses(history: &str) -> Vec<f64> {
    let mut lines = history.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "val_loss").unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn synth_extract_train_eval_mix() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = d.join("synth.conf");
    std::fs::write(
        &conf,
        "clips.train = 24\nclips.val = 8\nclips.test = 8\nnoise_clips_per_source = 1\n\
         archetypes = engine, bird, water_drip\n",
    )
    .unwrap();
    let data = d.join("data");
    sscaf(&["synth", "--config", p(&conf), "--seed", "3", "--out-dir", p(&data)]);
    for split in ["train", "val", "test"] {
        sscaf(&[
            "extract",
            "--manifest",
            p(&data.join(format!("{split}.csv"))),
            "--out-dir",
            p(&data),
        ]);
    }
    assert!(data.join("levels_train.csv").exists());
    let feats = data.join("features");

    let run = d.join("run");
    let out = sscaf(&[
        "train",
        "--train",
        p(&data.join("train.csv")),
        "--val",
        p(&data.join("val.csv")),
        "--tiny",
        "--epochs",
        "15",
        "--batch-size",
        "8",
        "--lr",
        "0.001",
        "--seed",
        "1",
        "--features",
        p(&feats),
        "--out-dir",
        p(&run),
    ]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 15);
    let losses = val_losses(&std::fs::read_to_string(run.join("history.csv")).unwrap());
    let last = *losses.last().unwrap();
    assert!(last <= 0.7 * losses[0], "validation loss {} -> {last}", losses[0]);
    assert!(run.join("run.conf").exists() && run.join("last.ckpt").exists());

    let ckpt = run.join("model.ckpt");
    let test = data.join("test.csv");
    let eval = d.join("eval");
    sscaf(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&test),
        "--features",
        p(&feats),
        "--out-dir",
        p(&eval),
    ]);
    let preds = std::fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 9);

    // scoring the written predictions reproduces the checkpoint metrics
    let again = d.join("again");
    sscaf(&[
        "eval",
        "--predictions",
        p(&eval.join("predictions.csv")),
        "--manifest",
        p(&test),
        "--out-dir",
        p(&again),
    ]);
    assert_eq!(
        std::fs::read_to_string(eval.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(again.join("metrics.csv")).unwrap()
    );

    // an infinite SNR leaves every clip as it was
    let mix = d.join("mix");
    sscaf(&[
        "mix",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&test),
        "--noise-dir",
        p(&data.join("noise")),
        "--snr-db",
        "inf",
        "--out-dir",
        p(&mix),
    ]);
    let summary = std::fs::read_to_string(mix.join("mix_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for row in summary.lines().skip(1) {
        assert!(row.ends_with(",0.0"), "{row}");
    }
    let clean: Vec<&str> = preds.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let mixed = std::fs::read_to_string(mix.join("mix_predictions.csv")).unwrap();
    for (row, want) in mixed.lines().skip(1).take(8).zip(&clean) {
        assert_eq!(row.split(',').nth(2).unwrap(), *want);
    }

    let wav = data.join("audio").join("test_00000.wav");
    let pred = d.join("predict");
    let out = sscaf(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--wav",
        p(&wav),
        "--out-dir",
        p(&pred),
        "--attention",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("annoyance"));
    assert!(pred.join("attention").join("mha1_head1.csv").exists());
}
