mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sscaf_core::audio::{
    generate_synthetic_dataset, load_manifest, write_wav, AudioClip, DatasetManifest, SynthConfig, SOURCE_LABELS,
};
use sscaf_core::eval::{kendall_tau, laeq_knn, laeq_linear_regression, table5_report, EvalMetrics, Table5Input};
use sscaf_core::features::FeatureExtractor;
use sscaf_core::model::{Model, ModelKind, Prediction};
use sscaf_core::training::{
    clip_features, history_csv, load_canonical, load_checkpoint, load_dataset, mixed_dataset, predict_dataset,
    save_checkpoint, score_predictions, train, CacheOptions, CheckpointInfo, Dataset, Precision, TrainOutcome,
};
use sscaf_core::Scalar;

use config::{read_pairs, RunConfig, TrainFlags};

#[derive(Parser)]
#[command(
    name = "sscaf",
    version,
    about = "Sound source classification and annoyance rating prediction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct FeatureArgs {
    /// Directory of cached `<clip_id>.feat` files written by `extract`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Ignore cached features and recompute them from audio.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic soundscape dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extract and cache log-Mel / RMS features of a manifest.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        no_cache: bool,
    },
    /// Train a model and write the best checkpoint and the history.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// dcnn-caf | mel-only | rms-only | dnn | cnn | cnn-transformer
        #[arg(long)]
        model: Option<ModelKind>,
        /// Divide all layer widths by 16.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// f32 or f64
        #[arg(long)]
        precision: Option<Precision>,
        #[command(flatten)]
        feat: FeatureArgs,
    },
    /// Score a checkpoint (or a predictions CSV) on a manifest.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// CSV with `clip_id`, `annoyance` and one probability column per source.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        feat: FeatureArgs,
    },
    /// Per-source correlation report, level-based baselines and Kendall tau.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Training manifest for the level-based regressors.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        feat: FeatureArgs,
    },
    /// Mix each noise source into the test clips and compare predicted annoyance.
    Mix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// One subdirectory of wav segments per noise source.
        #[arg(long)]
        noise_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// `inf` disables mixing.
        #[arg(long, default_value_t = 0.0)]
        snr_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the mixed clips.
        #[arg(long)]
        write_audio: bool,
    },
    /// Predict one clip.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Dump the cross-attention matrices.
        #[arg(long)]
        attention: bool,
    },
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset(manifest: &Path, feat: &FeatureArgs) -> Result<(DatasetManifest, Dataset)> {
    let m = load_manifest(manifest)?;
    let d = load_dataset(
        &m,
        CacheOptions {
            read: feat.features.as_deref(),
            write: None,
            recompute: feat.no_cache,
        },
    )?;
    Ok((m, d))
}

fn predictions_csv(ids: &[String], preds: &[Prediction]) -> String {
    let mut s = String::from("clip_id,annoyance");
    for l in SOURCE_LABELS {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (id, p) in ids.iter().zip(preds) {
        let _ = write!(s, "{id},{:?}", p.reported_annoyance());
        for v in &p.source_probs {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

fn read_predictions(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name:?}", path.display()))
    };
    let id_col = col("clip_id")?;
    let ann_col = col("annoyance")?;
    let label_cols = SOURCE_LABELS.iter().map(|l| col(l)).collect::<Result<Vec<_>>>()?;
    let mut by_id = BTreeMap::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .trim()
                .parse()
                .with_context(|| format!("{} row {}: bad number {:?}", path.display(), row + 2, &rec[c]))
        };
        let p = Prediction {
            source_probs: label_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            annoyance: num(ann_col)?,
            attention_maps: None,
        };
        by_id.insert(rec[id_col].to_string(), p);
    }
    manifest
        .records
        .iter()
        .map(|rec| {
            by_id
                .remove(&rec.clip_id)
                .with_context(|| format!("no prediction for clip {}", rec.clip_id))
        })
        .collect()
}

fn metrics_table(m: &EvalMetrics) -> (String, String) {
    let auc = m.ssc.auc.map_or_else(|| "NA".to_string(), |a| format!("{a:.4}"));
    let rows = [
        ("auc", auc),
        ("f_score", format!("{:.2}", m.ssc.f_score)),
        ("acc", format!("{:.2}", m.ssc.acc)),
        ("mae", format!("{:.4}", m.arp.mae)),
        ("rmse", format!("{:.4}", m.arp.rmse)),
    ];
    let mut csv = String::from("metric,value\n");
    let mut text = String::new();
    for (k, v) in &rows {
        let _ = writeln!(csv, "{k},{v}");
        let _ = writeln!(text, "{k:<8} {v:>10}");
    }
    if !m.ssc.skipped_classes.is_empty() {
        let names: Vec<&str> = m.ssc.skipped_classes.iter().map(|&k| SOURCE_LABELS[k]).collect();
        let _ = writeln!(text, "AUC skips classes without both outcomes: {}", names.join(", "));
    }
    (csv, text)
}

fn cmd_synth(config: Option<PathBuf>, seed: u64, out_dir: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => SynthConfig::from_file(&p)?,
        None => SynthConfig::default(),
    };
    let out = generate_synthetic_dataset(&cfg, seed, out_dir)?;
    println!(
        "wrote {} / {} / {} clips and {} noise sources to {}",
        out.train.len(),
        out.val.len(),
        out.test.len(),
        out.noise.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_extract(manifest: &Path, out_dir: &Path, no_cache: bool) -> Result<()> {
    let m = load_manifest(manifest)?;
    let dir = out_dir.join("features");
    let d = load_dataset(
        &m,
        CacheOptions {
            read: Some(&dir),
            write: Some(&dir),
            recompute: no_cache,
        },
    )?;
    let mut levels = String::from("clip_id,laeq_db\n");
    for (id, l) in d.clip_ids.iter().zip(&d.laeq_db) {
        let _ = writeln!(levels, "{id},{l:?}");
    }
    write(&out_dir.join(format!("levels_{}.csv", m.split)), &levels)?;
    println!("features for {} clips in {}", d.len(), dir.display());
    Ok(())
}

fn run_training<T: Scalar>(
    run: &RunConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    out_dir: &Path,
) -> Result<()> {
    let mut model = Model::<T>::build(run.model, &run.arch, run.train.seed)?;
    eprintln!(
        "{} with {} parameters, {} training clips",
        run.model,
        model.param_count(),
        train_set.len()
    );
    let TrainOutcome {
        history,
        best_epoch,
        best,
    } = train(&mut model, train_set, val_set, &run.train, |r| {
        let val = r.val.as_ref().map_or_else(String::new, |v| {
            format!(
                " val loss {:.5} mae {:.4} auc {}",
                r.val_loss.unwrap_or(f64::NAN),
                v.arp.mae,
                v.ssc.auc.map_or_else(|| "NA".into(), |a| format!("{a:.4}"))
            )
        });
        eprintln!("epoch {:>3} loss {:.5}{val}", r.epoch, r.train_loss);
    })?;
    write(&out_dir.join("history.csv"), &history_csv(&history))?;
    let best_info = CheckpointInfo::new(best_epoch, history[best_epoch - 1].val.as_ref());
    save_checkpoint(&best, &best_info, out_dir.join("model.ckpt"))?;
    let last = history.len();
    save_checkpoint(
        &model,
        &CheckpointInfo::new(last, history[last - 1].val.as_ref()),
        out_dir.join("last.ckpt"),
    )?;
    println!(
        "best epoch {best_epoch}; checkpoint {}",
        out_dir.join("model.ckpt").display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let (m, _) = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(m)
}

fn cmd_eval(
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    manifest: &Path,
    out_dir: &Path,
    feat: &FeatureArgs,
) -> Result<()> {
    let (preds, data) = match (checkpoint, predictions) {
        (Some(c), _) => {
            let model = load_model(&c)?;
            let (_, data) = dataset(manifest, feat)?;
            (predict_dataset(&model, &data, 32)?, data)
        }
        (None, Some(p)) => {
            let m = load_manifest(manifest)?;
            let preds = read_predictions(&p, &m)?;
            let data = Dataset {
                split: m.split,
                clip_ids: m.records.iter().map(|r| r.clip_id.clone()).collect(),
                features: Vec::new(),
                labels: m.records.iter().map(|r| r.labels.to_vec()).collect(),
                annoyance: m.records.iter().map(|r| r.annoyance).collect(),
                laeq_db: Vec::new(),
            };
            (preds, data)
        }
        (None, None) => bail!("eval needs --checkpoint or --predictions"),
    };
    let metrics = score_predictions(&preds, &data)?;
    let (csv, text) = metrics_table(&metrics);
    write(&out_dir.join("metrics.csv"), &csv)?;
    write(
        &out_dir.join("predictions.csv"),
        &predictions_csv(&data.clip_ids, &preds),
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_analyze(
    checkpoint: &Path,
    manifest: &Path,
    train_manifest: &Path,
    k: usize,
    out_dir: &Path,
    feat: &FeatureArgs,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (_, test) = dataset(manifest, feat)?;
    let (_, train_set) = dataset(train_manifest, feat)?;
    let preds = predict_dataset(&model, &test, 32)?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.source_probs.clone()).collect();
    let ann: Vec<f64> = preds.iter().map(Prediction::reported_annoyance).collect();
    let report = table5_report(&Table5Input {
        names: &SOURCE_LABELS,
        pred_probs: &probs,
        pred_annoyance: &ann,
        labels: &test.labels,
        annoyance: &test.annoyance,
        laeq_db: &test.laeq_db,
    })?;
    write(&out_dir.join("table5.csv"), &report.to_csv())?;
    write(&out_dir.join("table5.txt"), &report.to_text())?;

    let (fit, lin) = laeq_linear_regression(&train_set.laeq_db, &train_set.annoyance, &test.laeq_db, &test.annoyance)?;
    let knn = laeq_knn(
        &train_set.laeq_db,
        &train_set.annoyance,
        &test.laeq_db,
        &test.annoyance,
        k,
    )?;
    let dl = score_predictions(&preds, &test)?;
    let mut base = String::from("method,mae,rmse\n");
    let _ = writeln!(base, "linear_regression,{:?},{:?}", lin.mae, lin.rmse);
    let _ = writeln!(base, "knn_k{k},{:?},{:?}", knn.mae, knn.rmse);
    let _ = writeln!(base, "{},{:?},{:?}", model.kind(), dl.arp.mae, dl.arp.rmse);
    write(&out_dir.join("level_baselines.csv"), &base)?;

    let tau = kendall_tau(&test.laeq_db, &test.annoyance)?;
    let tau_line = tau.map_or_else(
        || "kendall_tau,NA,NA\n".to_string(),
        |t| format!("kendall_tau,{:?},{:?}\n", t.r, t.p),
    );
    write(&out_dir.join("kendall.csv"), &format!("statistic,value,p\n{tau_line}"))?;

    print!("{}", report.to_text());
    println!(
        "\nlevel baselines (fit: annoyance = {:.4}·L_Aeq + {:.4})",
        fit.slope, fit.intercept
    );
    print!("{base}");
    print!("L_Aeq vs annoyance: {tau_line}");
    Ok(())
}

fn noise_pools(dir: &Path) -> Result<Vec<(String, Vec<AudioClip>)>> {
    let mut sources: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    sources.sort();
    let mut pools = Vec::new();
    for s in sources {
        let mut wavs: Vec<PathBuf> = std::fs::read_dir(&s)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            continue;
        }
        let clips = wavs.iter().map(|w| load_canonical(w)).collect::<Result<Vec<_>, _>>()?;
        let name = s.file_name().expect("dir name").to_string_lossy().into_owned();
        pools.push((name, clips));
    }
    if pools.is_empty() {
        bail!("{}: no noise source subdirectories with wav files", dir.display());
    }
    Ok(pools)
}

#[allow(clippy::too_many_arguments)]
fn cmd_mix(
    checkpoint: &Path,
    manifest: &Path,
    noise_dir: &Path,
    out_dir: &Path,
    snr_db: f64,
    seed: u64,
    write_audio: bool,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let m = load_manifest(manifest)?;
    let pools = noise_pools(noise_dir)?;
    let clean = load_dataset(&m, CacheOptions::NONE)?;
    let clean_pred = predict_dataset(&model, &clean, 32)?;
    let mean = |p: &[Prediction]| p.iter().map(Prediction::reported_annoyance).sum::<f64>() / p.len() as f64;
    let clean_mean = mean(&clean_pred);
    let mut summary = String::from("noise_source,snr_db,clips,mean_annoyance,clean_mean_annoyance,delta\n");
    let mut per_clip = String::from("noise_source,clip_id,annoyance\n");
    for (name, pool) in &pools {
        let mixed = mixed_dataset(&m, pool, snr_db, seed)?;
        let preds = predict_dataset(&model, &mixed, 32)?;
        let mm = mean(&preds);
        let _ = writeln!(
            summary,
            "{name},{snr_db:?},{},{mm:?},{clean_mean:?},{:?}",
            preds.len(),
            mm - clean_mean
        );
        for (id, p) in mixed.clip_ids.iter().zip(&preds) {
            let _ = writeln!(per_clip, "{name},{id},{:?}", p.reported_annoyance());
        }
        if write_audio {
            write_mixed_audio(&m, pool, snr_db, seed, &out_dir.join("mixed").join(name))?;
        }
        eprintln!("{name:<16} mean predicted annoyance {mm:.4} ({:+.4})", mm - clean_mean);
    }
    write(&out_dir.join("mix_summary.csv"), &summary)?;
    write(&out_dir.join("mix_predictions.csv"), &per_clip)?;
    print!("{summary}");
    Ok(())
}

fn write_mixed_audio(m: &DatasetManifest, pool: &[AudioClip], snr_db: f64, seed: u64, dir: &Path) -> Result<()> {
    use rand::SeedableRng;
    mkdir(dir)?;
    for r in &m.records {
        let base = load_canonical(&m.audio_path(r))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sscaf_core::audio::synth::clip_seed(seed, &r.clip_id));
        let spec = sscaf_core::audio::random_mix_spec(&mut rng, pool, base.len(), snr_db)?;
        let out = sscaf_core::audio::mix_at_snr(&base, &spec)?;
        if out.clipped > 0 {
            eprintln!("{}: {} samples clipped", r.clip_id, out.clipped);
        }
        write_wav(&out.clip, dir.join(format!("{}.wav", r.clip_id)))?;
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, wav: &Path, out_dir: &Path, attention: bool) -> Result<()> {
    let model = load_model(checkpoint)?;
    if attention && !model.kind().has_cross_attention() {
        bail!(
            "checkpoint holds a {} model, which has no cross-attention to dump",
            model.kind()
        );
    }
    let clip = load_canonical(wav)?;
    let f = clip_features(&clip, &FeatureExtractor::new())?;
    let pred = model
        .predict(&[&f.features], attention, 1)?
        .pop()
        .expect("one prediction");
    let id = wav
        .file_stem()
        .map_or_else(|| "clip".to_string(), |s| s.to_string_lossy().into_owned());
    write(
        &out_dir.join("prediction.csv"),
        &predictions_csv(&[id], std::slice::from_ref(&pred)),
    )?;
    println!("annoyance {:.4}", pred.reported_annoyance());
    let mut ranked: Vec<(usize, f64)> = pred.source_probs.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (k, p) in ranked.iter().take(5) {
        println!("{:<20} {p:.4}", SOURCE_LABELS[*k]);
    }
    if let Some(maps) = &pred.attention_maps {
        let dir = out_dir.join("attention");
        mkdir(&dir)?;
        let heads = model.config().heads;
        let t = model.config().out_frames();
        for (b, map) in maps.iter().enumerate() {
            for h in 0..heads {
                let mut s = String::new();
                for row in map[h * t * t..(h + 1) * t * t].chunks(t) {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                    s.push_str(&cells.join(","));
                    s.push('\n');
                }
                write(&dir.join(format!("mha{}_head{}.csv", b + 1, h + 1)), &s)?;
            }
        }
        println!("attention maps in {}", dir.display());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SSCAF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("SSCAF_THREADS={v:?} is not a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let out = match &cli.cmd {
        Cmd::Synth { out_dir, .. }
        | Cmd::Extract { out_dir, .. }
        | Cmd::Train { out_dir, .. }
        | Cmd::Eval { out_dir, .. }
        | Cmd::Analyze { out_dir, .. }
        | Cmd::Mix { out_dir, .. }
        | Cmd::Predict { out_dir, .. } => out_dir.clone(),
    };
    mkdir(&out)?;
    match cli.cmd {
        Cmd::Synth { config, seed, .. } => cmd_synth(config, seed, &out),
        Cmd::Extract { manifest, no_cache, .. } => cmd_extract(&manifest, &out, no_cache),
        Cmd::Train {
            train: train_path,
            val,
            config,
            model,
            tiny,
            epochs,
            batch_size,
            lr,
            seed,
            precision,
            feat,
            ..
        } => {
            let file = match &config {
                Some(p) => read_pairs(p)?,
                None => BTreeMap::new(),
            };
            let flags = TrainFlags {
                model,
                tiny,
                epochs,
                batch_size,
                lr,
                seed,
                precision,
            };
            let run = RunConfig::resolve(file, &flags)?;
            write(&out.join("run.conf"), &run.to_text())?;
            let (_, train_set) = dataset(&train_path, &feat)?;
            let val_set = val.map(|v| dataset(&v, &feat)).transpose()?.map(|(_, d)| d);
            match run.train.precision {
                Precision::F32 => run_training::<f32>(&run, &train_set, val_set.as_ref(), &out),
                Precision::F64 => run_training::<f64>(&run, &train_set, val_set.as_ref(), &out),
            }
        }
        Cmd::Eval {
            checkpoint,
            predictions,
            manifest,
            feat,
            ..
        } => cmd_eval(checkpoint, predictions, &manifest, &out, &feat),
        Cmd::Analyze {
            checkpoint,
            manifest,
            train,
            k,
            feat,
            ..
        } => cmd_analyze(&checkpoint, &manifest, &train, k, &out, &feat),
        Cmd::Mix {
            checkpoint,
            manifest,
            noise_dir,
            snr_db,
            seed,
            write_audio,
            ..
        } => cmd_mix(&checkpoint, &manifest, &noise_dir, &out, snr_db, seed, write_audio),
        Cmd::Predict {
            checkpoint,
            wav,
            attention,
            ..
        } => cmd_predict(&checkpoint, &wav, &out, attention),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
