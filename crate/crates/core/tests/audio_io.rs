use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscaf_core::audio::synth::synthesize_clip;
use sscaf_core::audio::{
    generate_synthetic_dataset, label_index, load_manifest, load_wav, mix_at_snr, resample, rms, save_manifest,
    write_wav, AudioClip, ClipRecord, DatasetManifest, MixSpec, Split, SynthConfig, N_CLASSES, SOURCE_LABELS,
};
use sscaf_core::eval::spearman_rho;

fn sine(freq: f64, amp: f64, seconds: f64, rate: u32) -> AudioClip {
    let n = (seconds * rate as f64).round() as usize;
    AudioClip::new(
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect(),
        rate,
    )
}

fn write_raw(path: &Path, channels: u16, frames: &[i16]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in frames {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn full_scale_pcm_reads_just_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.wav");
    write_raw(&p, 1, &[32767; 100]);
    let c = load_wav(&p).unwrap();
    assert!(c.samples.iter().all(|&v| v == 32767.0 / 32768.0));
    assert!((c.samples[0] - 0.99997).abs() < 1e-5);
}

#[test]
fn symmetric_stereo_downmixes_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.wav");
    let frames: Vec<i16> = (0..200).map(|i| if i % 2 == 0 { 16384 } else { -16384 }).collect();
    write_raw(&p, 2, &frames);
    let c = load_wav(&p).unwrap();
    assert_eq!(c.len(), 100);
    assert!(c.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn sine_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sine.wav");
    let s = sine(440.0, 0.8, 15.0, 16_000);
    write_wav(&s, &p).unwrap();
    let back = load_wav(&p).unwrap();
    assert_eq!((back.len(), back.sample_rate), (s.len(), 16_000));
    let err = s
        .samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 2f64.powi(-14), "max error {err}");
}

#[test]
fn silence_and_clipping_on_write() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    write_wav(&AudioClip::new(vec![0.0; 64], 16_000), &p).unwrap();
    let mut r = hound::WavReader::open(&p).unwrap();
    assert!(r.samples::<i16>().all(|s| s.unwrap() == 0));
    write_wav(&AudioClip::new(vec![2.0, -2.0], 16_000), &p).unwrap();
    let mut r = hound::WavReader::open(&p).unwrap();
    let v: Vec<i16> = r.samples::<i16>().map(Result::unwrap).collect();
    assert_eq!(v, vec![32767, -32768]);
    assert!(write_wav(&AudioClip::new(vec![f64::NAN], 16_000), &p).is_err());
}

#[test]
fn malformed_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.wav");
    std::fs::write(&p, b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();
    assert!(load_wav(&p).is_err());
    assert!(load_wav(dir.path().join("missing.wav")).is_err());
}

#[test]
fn resampling_identity_constant_and_sine_rms() {
    let s = sine(300.0, 0.3, 1.0, 16_000);
    assert_eq!(resample(&s, 16_000).unwrap().samples, s.samples);
    let k = resample(&AudioClip::new(vec![0.25; 8000], 8_000), 16_000).unwrap();
    assert!(k.samples.iter().all(|&v| v == 0.25));
    let low = sine(100.0, 0.5, 1.0, 8_000);
    let up = resample(&low, 16_000).unwrap();
    let want = 0.5 / 2f64.sqrt();
    assert!((up.rms() - want).abs() / want < 0.01);
}

#[test]
fn mix_scales_noise_to_target_snr() {
    let base = AudioClip::new((0..1000).map(|i| if i % 2 == 0 { 0.1 } else { -0.1 }).collect(), 16_000);
    let noise = AudioClip::new(vec![0.2; 500], 16_000);
    let out = mix_at_snr(
        &base,
        &MixSpec {
            noise_clips: vec![noise.clone()],
            insert_offsets: vec![0.0],
            snr_db: 0.0,
        },
    )
    .unwrap();
    assert!((out.gains[0] - 0.5).abs() < 1e-12);
    assert_eq!(out.clip.samples[0], 0.2);
    assert_eq!(&out.clip.samples[500..], &base.samples[500..]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &snr in &[-10.0, 0.0, 7.5, 20.0] {
        let b = AudioClip::new((0..4000).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16_000);
        let n = AudioClip::new((0..1600).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000);
        let off = 0.05;
        let o = mix_at_snr(
            &b,
            &MixSpec {
                noise_clips: vec![n.clone()],
                insert_offsets: vec![off],
                snr_db: snr,
            },
        )
        .unwrap();
        let s = (off * 16_000.0) as usize;
        let added: Vec<f64> = (s..s + 1600).map(|i| o.clip.samples[i] - b.samples[i]).collect();
        let got = 20.0 * (rms(&b.samples[s..s + 1600]) / rms(&added)).log10();
        assert!((got - snr).abs() < 1e-6, "snr {snr}: {got}");
    }
}

#[test]
fn infinite_snr_returns_base() {
    let b = sine(200.0, 0.4, 0.5, 16_000);
    let n = sine(900.0, 0.4, 0.1, 16_000);
    let o = mix_at_snr(
        &b,
        &MixSpec {
            noise_clips: vec![n],
            insert_offsets: vec![0.2],
            snr_db: f64::INFINITY,
        },
    )
    .unwrap();
    assert_eq!(o.clip, b);
}

#[test]
fn mixed_power_is_additive_for_independent_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let b = AudioClip::new((0..16_000).map(|_| 0.1 * rng.gen_range(-1.0..1.0)).collect(), 16_000);
        let n = AudioClip::new((0..8_000).map(|_| 0.3 * rng.gen_range(-1.0..1.0)).collect(), 16_000);
        let snr = rng.gen_range(-6.0..6.0);
        let o = mix_at_snr(
            &b,
            &MixSpec {
                noise_clips: vec![n.clone()],
                insert_offsets: vec![0.25],
                snr_db: snr,
            },
        )
        .unwrap();
        let r = 4000..12_000;
        let scaled = o.gains[0] * n.rms();
        let want = (rms(&b.samples[r.clone()]).powi(2) + scaled.powi(2)).sqrt();
        let got = rms(&o.clip.samples[r]);
        assert!((got - want).abs() / want < 0.05);
    }
}

#[test]
fn mix_rejects_bad_specs() {
    let b = AudioClip::new(vec![0.1; 100], 16_000);
    let n = AudioClip::new(vec![0.1; 50], 16_000);
    let spec = |clips: Vec<AudioClip>, offs: Vec<f64>, snr| MixSpec {
        noise_clips: clips,
        insert_offsets: offs,
        snr_db: snr,
    };
    assert!(mix_at_snr(&b, &spec(vec![], vec![], 0.0)).is_err());
    assert!(mix_at_snr(&b, &spec(vec![n.clone(); 4], vec![0.0; 4], 0.0)).is_err());
    assert!(mix_at_snr(&b, &spec(vec![n.clone()], vec![0.0], f64::NAN)).is_err());
    assert!(mix_at_snr(&b, &spec(vec![n], vec![0.9], 0.0)).is_err());
}

fn record(id: &str, ann: f64, on: &[&str]) -> ClipRecord {
    let mut labels = [false; N_CLASSES];
    for l in on {
        labels[label_index(l).unwrap()] = true;
    }
    ClipRecord {
        clip_id: id.into(),
        path: format!("audio/{id}.wav").into(),
        labels,
        annoyance: ann,
    }
}

#[test]
fn manifest_round_trip_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("val.csv");
    let empty = DatasetManifest::new(Split::Val, vec![], dir.path());
    save_manifest(&empty, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
    assert_eq!(load_manifest(&p).unwrap(), empty);

    let m = DatasetManifest::new(
        Split::Val,
        vec![record("a", 1.0, &["Siren"]), record("b", 7.25, &["Water", "Speech"])],
        dir.path(),
    );
    save_manifest(&m, &p).unwrap();
    assert_eq!(load_manifest(&p).unwrap(), m);
}

#[test]
fn hand_written_manifest_parses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.csv");
    let mut text = format!("clip_id,path,annoyance,{}\n", SOURCE_LABELS.join(","));
    let row = |id: &str, ann: &str, hot: &[usize]| {
        let l: Vec<&str> = (0..N_CLASSES)
            .map(|k| if hot.contains(&k) { "1" } else { "0" })
            .collect();
        format!("{id},wav/{id}.wav,{ann},{}\n", l.join(","))
    };
    text += &row("r1", "3.5", &[0]);
    text += &row("r2", "10", &[1, 23]);
    text += &row("r3", "1.000001", &[]);
    std::fs::write(&p, text).unwrap();
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.split, Split::Train);
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.records[0].annoyance, 3.5);
    assert!(m.records[0].labels[0] && m.records[0].labels.iter().filter(|&&b| b).count() == 1);
    assert!(m.records[1].labels[1] && m.records[1].labels[23]);
    assert_eq!(m.records[2].annoyance, 1.000001);
    assert_eq!(m.audio_path(&m.records[1]), dir.path().join("wav/r2.wav"));
}

#[test]
fn manifest_validation_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let head = format!("clip_id,path,annoyance,{}\n", SOURCE_LABELS.join(","));
    let zeros = vec!["0"; N_CLASSES].join(",");
    let cases = [
        format!("{head}a,a.wav,11,{zeros}\n"),
        format!("{head}a,a.wav,5,{zeros}\na,b.wav,5,{zeros}\n"),
        format!("{head}a,a.wav,5,{}\n", vec!["2"; N_CLASSES].join(",")),
        format!("{head}a,a.wav,5\n"),
        "clip,path\n".to_string(),
    ];
    for (i, text) in cases.iter().enumerate() {
        let p = dir.path().join(format!("m{i}.csv"));
        std::fs::write(&p, text).unwrap();
        let e = load_manifest(&p).unwrap_err().to_string();
        assert!(e.contains("row"), "{e}");
    }
}

#[test]
fn clip_without_events_follows_base_rule() {
    let cfg = SynthConfig {
        events_min: 0,
        events_max: 0,
        clip_seconds: 2.0,
        ..SynthConfig::default()
    };
    let c = synthesize_clip(&cfg, 1, "quiet");
    assert!(c.labels.iter().all(|&b| !b));
    let norm = ((c.laeq_db + 50.0) / 40.0).clamp(0.0, 1.0);
    assert!((c.annoyance - (2.0 + 1.5 * norm).clamp(1.0, 10.0)).abs() < 1e-6);
}

#[test]
fn engine_label_tracks_annoyance() {
    let cfg = SynthConfig {
        clip_seconds: 3.0,
        event_min_s: 1.0,
        event_max_s: 3.0,
        ..SynthConfig::default()
    };
    let engine = cfg.archetypes.iter().position(|a| a.name == "engine").unwrap();
    let clips: Vec<_> = (0..200).map(|i| synthesize_clip(&cfg, 5, &format!("c{i}"))).collect();
    let x: Vec<f64> = clips
        .iter()
        .map(|c| if c.present.contains(&engine) { 1.0 } else { 0.0 })
        .collect();
    let y: Vec<f64> = clips.iter().map(|c| c.annoyance).collect();
    let rho = spearman_rho(&x, &y).unwrap().unwrap().r;
    assert!(rho > 0.3, "rho = {rho}");
}

#[test]
fn generation_is_byte_deterministic() {
    let cfg = SynthConfig {
        clip_seconds: 1.0,
        event_min_s: 0.3,
        event_max_s: 0.8,
        clips_train: 3,
        clips_val: 2,
        clips_test: 2,
        noise_clips_per_source: 1,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = generate_synthetic_dataset(&cfg, 11, a.path()).unwrap();
    generate_synthetic_dataset(&cfg, 11, b.path()).unwrap();
    assert_eq!(out.train.len(), 3);
    let mut files = vec![
        "train.csv".to_string(),
        "val.csv".into(),
        "test.csv".into(),
        "synth.conf".into(),
    ];
    files.extend(out.test.records.iter().map(|r| r.path.to_string_lossy().into_owned()));
    files.extend(
        out.noise["engine"]
            .iter()
            .map(|p| p.strip_prefix(a.path()).unwrap().to_string_lossy().into_owned()),
    );
    for f in files {
        assert_eq!(
            std::fs::read(a.path().join(&f)).unwrap(),
            std::fs::read(b.path().join(&f)).unwrap(),
            "{f}"
        );
    }
    let loaded = load_manifest(a.path().join("test.csv")).unwrap();
    assert_eq!(loaded.records, out.test.records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn wav_round_trip_error_bounded(samples in prop::collection::vec(-1.0f64..1.0, 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.wav");
        let c = AudioClip::new(samples, 16_000);
        write_wav(&c, &p).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in c.samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 2f64.powi(-15) + 1e-12);
        }
    }

    #[test]
    fn resample_preserves_constants(v in -1.0f64..1.0, from in 4_000u32..48_000, to in 4_000u32..48_000) {
        let r = resample(&AudioClip::new(vec![v; 300], from), to).unwrap();
        prop_assert_eq!(r.sample_rate, to);
        for s in &r.samples {
            prop_assert!((s - v).abs() < 1e-12);
        }
    }
}
