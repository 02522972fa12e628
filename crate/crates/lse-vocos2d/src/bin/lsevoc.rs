//! Command-line front end: extract features, train the three model stages,
//! synthesize audio with or without the spectrogram estimator, evaluate
//! realism with regime classifiers, and render spectrogram images.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use lse_vocos2d::config::{describe_keys, GlobalConfig};
use lse_vocos2d::data::{
    self, cache_path, read_feature_record, read_stats, spectral_fingerprint, write_feature_record,
    FeatureKind, IngestOptions, ManifestEntry, Split,
};
use lse_vocos2d::diffusion::SamplerPlan;
use lse_vocos2d::error::{Error, Result};
use lse_vocos2d::evalkit::{
    evaluate_regimes, render_spectrogram_image, standard_regimes, MethodClips, TrainOptions,
};
use lse_vocos2d::pipeline::{
    load_lse_for_synth, load_vocoder_for_synth, synthesize_baseline, synthesize_with_lse,
    VocoderBundle,
};
use lse_vocos2d::spectral::SpectralAnalyzer;
use lse_vocos2d::training::{
    find_latest_checkpoint, segment_clips, train_lse, train_vocoder, FeaturePair, VocoderStage,
};
use lse_vocos2d::toygen;

#[derive(Parser)]
#[command(
    name = "lsevoc",
    version,
    about = "Two-stage singing-voice synthesis: mel -> linear spectrogram estimation -> vocoding",
    after_help = describe_keys()
)]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    /// Mel -> linear spectrogram diffusion estimator.
    Lse,
    /// Linear spectrogram -> waveform 2-D vocoder.
    Vocos2d,
    /// Mel -> waveform 1-D baseline vocoder.
    VocosBaseline,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest a directory of WAV files: resample to the reference rate,
    /// write the manifest, normalization statistics, and feature caches.
    Extract {
        /// Directory scanned recursively for .wav files.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one stage; checkpoints land under the checkpoints root.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Override the configured step budget (toy/desk runs).
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the latest checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize a waveform from a mel source (a WAV file to analyze, or a
    /// cached .lsf mel record).
    Synth {
        /// Input WAV or .lsf mel record.
        #[arg(long)]
        mel: PathBuf,
        /// Route through the linear-spectrogram estimator and the 2-D
        /// vocoder instead of the baseline vocoder.
        #[arg(long)]
        use_lse: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Sampling-ladder length override for the estimator.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out.wav")]
        out: PathBuf,
        /// Also write the estimated linear spectrogram as a .lsf record
        /// (requires --use-lse).
        #[arg(long)]
        dump_linear: Option<PathBuf>,
    },
    /// Train the regime classifiers and tabulate mean realism scores.
    Eval {
        /// Directory with one subdirectory per method (`gt` required), each
        /// holding train/ and test/ WAV folders.
        #[arg(long)]
        methods: PathBuf,
        /// Output directory for scores.csv and scores.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a spectrogram PNG for every WAV in a directory.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic singing-like WAV corpus for desk-scale runs.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => GlobalConfig::load(path)?,
        None => GlobalConfig::standard(),
    };
    match cli.cmd {
        Cmd::Extract { input } => cmd_extract(&cfg, &input),
        Cmd::Train { stage, steps, resume } => cmd_train(&cfg, stage, steps, resume),
        Cmd::Synth { mel, use_lse, seed, steps, out, dump_linear } => {
            cmd_synth(&cfg, &mel, use_lse, seed, steps, &out, dump_linear.as_deref())
        }
        Cmd::Eval { methods, out } => cmd_eval(&cfg, &methods, &out),
        Cmd::Render { input, out } => cmd_render(&cfg, &input, &out),
        Cmd::MakeToy { out, clips, seconds, seed } => {
            cmd_make_toy(&cfg, &out, clips, seconds, seed)
        }
    }
}

fn manifest_path(cfg: &GlobalConfig) -> PathBuf {
    cfg.paths.data_root.join("manifest.jsonl")
}

fn stats_path(cfg: &GlobalConfig) -> PathBuf {
    cfg.paths.data_root.join("stats.json")
}

fn cache_dir(cfg: &GlobalConfig) -> PathBuf {
    cfg.paths.data_root.join("cache")
}

fn audio_dir(cfg: &GlobalConfig) -> PathBuf {
    cfg.paths.data_root.join("audio")
}

fn cmd_extract(cfg: &GlobalConfig, input: &Path) -> Result<()> {
    let analyzer = SpectralAnalyzer::new(cfg.spectral_config()?)?;
    let opts = IngestOptions {
        train_ratio: 0.9,
        split_seed: cfg.run.seed,
        target_rate: cfg.spectral.sample_rate,
    };
    let report = data::ingest(input, &cfg.paths.data_root, &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let stats = data::corpus_feature_stats(&report.entries, &report.audio_dir, &analyzer)?;
    data::write_stats(&stats_path(cfg), &stats)?;
    let written = data::cache_features(&report.entries, &report.audio_dir, &cache_dir(cfg), &analyzer)?;
    println!(
        "ingested {} clips ({} skipped), cached {written} feature records under {}",
        report.entries.len(),
        report.warnings.len(),
        cfg.paths.data_root.display()
    );
    println!(
        "feature statistics: mel mean {:.4} std {:.4}, linear mean {:.4} std {:.4}",
        stats.mel.mean, stats.mel.std, stats.linear.mean, stats.linear.std
    );
    Ok(())
}

fn load_train_entries(cfg: &GlobalConfig) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `lsevoc extract` first",
            path.display()
        )));
    }
    let entries = data::load_manifest(&path)?;
    let train: Vec<ManifestEntry> =
        entries.into_iter().filter(|e| e.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Data("manifest holds no train-split clips".into()));
    }
    Ok(train)
}

fn load_feature_stats(cfg: &GlobalConfig) -> Result<data::FeatureStats> {
    let path = stats_path(cfg);
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run `lsevoc extract` first",
            path.display()
        )));
    }
    read_stats(&path)
}

fn cached_record(
    cfg: &GlobalConfig,
    fp: &[u8; 16],
    id: &str,
    kind: FeatureKind,
) -> Result<Array2<f32>> {
    let path = cache_path(&cache_dir(cfg), id, kind);
    if !path.exists() {
        return Err(Error::Data(format!(
            "feature cache {} missing; run `lsevoc extract` first",
            path.display()
        )));
    }
    read_feature_record(&path, Some(fp))
}

fn cmd_train(cfg: &GlobalConfig, stage: StageArg, steps: Option<usize>, resume: bool) -> Result<()> {
    let spectral = cfg.spectral_config()?;
    let stats = load_feature_stats(cfg)?;
    let entries = load_train_entries(cfg)?;
    let fp = spectral_fingerprint(&spectral);

    match stage {
        StageArg::Lse => {
            let lse_cfg = cfg.lse_config()?;
            let mut pairs = Vec::new();
            for e in &entries {
                let mut mel = cached_record(cfg, &fp, &e.id, FeatureKind::Mel)?;
                let mut linear = cached_record(cfg, &fp, &e.id, FeatureKind::Linear)?;
                mel.mapv_inplace(|v| (v - stats.mel.mean) / stats.mel.std);
                linear.mapv_inplace(|v| (v - stats.linear.mean) / stats.linear.std);
                // Whole clips, trimmed to the patch grid.
                let t = mel.dim().1 / lse_cfg.patch_t * lse_cfg.patch_t;
                if t == 0 {
                    eprintln!("warning: clip {} shorter than one patch; skipped", e.id);
                    continue;
                }
                pairs.push(FeaturePair {
                    mel: mel.slice(ndarray::s![.., ..t]).to_owned(),
                    linear: linear.slice(ndarray::s![.., ..t]).to_owned(),
                });
            }
            let out_dir = cfg.paths.checkpoints_root.join("lse");
            let summary = train_lse(
                &out_dir,
                resume,
                &lse_cfg,
                &cfg.optim_lse.to_optim(),
                &cfg.lse_run(steps),
                &pairs,
            )?;
            println!(
                "stage lse reached step {}; latest checkpoint {}",
                summary.final_step,
                summary.final_checkpoint.display()
            );
        }
        StageArg::Vocos2d | StageArg::VocosBaseline => {
            let mut clips = Vec::new();
            for e in &entries {
                let path = audio_dir(cfg).join(format!("{}.wav", e.id));
                if !path.exists() {
                    return Err(Error::Data(format!(
                        "normalized audio {} missing; run `lsevoc extract` first",
                        path.display()
                    )));
                }
                clips.push(data::read_wav(&path)?.0);
            }
            let segments = segment_clips(&clips, cfg.segment_samples()?)?;
            let (vstage, feat_stats, name) = match stage {
                StageArg::Vocos2d => (VocoderStage::Vocos2d, stats.linear, "vocos2d"),
                _ => (VocoderStage::VocosBaseline, stats.mel, "vocos-baseline"),
            };
            let out_dir = cfg.paths.checkpoints_root.join(name);
            let summary = train_vocoder(
                &out_dir,
                resume,
                vstage,
                &cfg.vocos2d_config()?,
                &cfg.baseline_config()?,
                &spectral,
                &feat_stats,
                &cfg.mrd_config(),
                &cfg.da_config(),
                &cfg.loss_weights(),
                &cfg.optim_vocoder.to_optim(),
                &cfg.vocoder_run(steps),
                &segments,
            )?;
            println!(
                "stage {name} reached step {}; latest checkpoint {}",
                summary.final_step,
                summary.final_checkpoint.display()
            );
        }
    }
    Ok(())
}

/// Mel spectrogram from either a WAV file (analyzed at the configured rate)
/// or a cached `.lsf` record.
fn load_mel_source(cfg: &GlobalConfig, analyzer: &SpectralAnalyzer, path: &Path) -> Result<Array2<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    if ext.eq_ignore_ascii_case("lsf") {
        let fp = spectral_fingerprint(analyzer.config());
        let record = read_feature_record(path, Some(&fp))?;
        let n_mel = cfg.spectral.n_mel;
        if record.dim().0 != n_mel {
            return Err(Error::Data(format!(
                "{} has {} rows; expected a {n_mel}-band mel record",
                path.display(),
                record.dim().0
            )));
        }
        Ok(record)
    } else {
        let (wave, sr) = data::read_wav(path)?;
        let target = analyzer.config().sample_rate;
        let wave =
            if sr == target { wave } else { data::resample_to(&wave, sr, target)? };
        Ok(analyzer.mel_spectrogram(&wave)?.values)
    }
}

fn latest_under(root: &Path, stage: &str) -> Result<PathBuf> {
    let dir = root.join(stage);
    find_latest_checkpoint(&dir).ok_or_else(|| {
        Error::Data(format!(
            "no {stage} checkpoint under {}; run `lsevoc train --stage {stage}` first",
            dir.display()
        ))
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    cfg: &GlobalConfig,
    mel_path: &Path,
    use_lse: bool,
    seed: Option<u64>,
    steps: Option<usize>,
    out: &Path,
    dump_linear: Option<&Path>,
) -> Result<()> {
    if dump_linear.is_some() && !use_lse {
        return Err(Error::InvalidInput(
            "--dump-linear requires --use-lse; the baseline path has no linear estimate".into(),
        ));
    }
    let spectral = cfg.spectral_config()?;
    let analyzer = SpectralAnalyzer::new(spectral.clone())?;
    let mel = load_mel_source(cfg, &analyzer, mel_path)?;
    let stats = load_feature_stats(cfg)?;
    let seed = seed.unwrap_or(cfg.run.seed);
    let root = &cfg.paths.checkpoints_root;

    let output = if use_lse {
        let lse_cfg = cfg.lse_config()?;
        let (net, schedule) = load_lse_for_synth(&latest_under(root, "lse")?, &lse_cfg)?;
        let plan = SamplerPlan::new(
            &schedule,
            steps.unwrap_or(cfg.sampler.steps),
            cfg.sampler.rho,
        )?;
        let bundle = load_vocoder_for_synth(
            &latest_under(root, "vocos2d")?,
            VocoderStage::Vocos2d,
            &cfg.vocos2d_config()?,
            &cfg.baseline_config()?,
            &spectral,
            &serde_json::to_value(stats.linear)?,
        )?;
        let VocoderBundle::Vocos2d(vocoder) = bundle else {
            return Err(Error::CheckpointMismatch("expected a 2-D vocoder checkpoint".into()));
        };
        synthesize_with_lse(&analyzer, &lse_cfg, &net, &vocoder, &stats, &mel, &plan, seed)?
    } else {
        let base_cfg = cfg.baseline_config()?;
        let bundle = load_vocoder_for_synth(
            &latest_under(root, "vocos-baseline")?,
            VocoderStage::VocosBaseline,
            &cfg.vocos2d_config()?,
            &base_cfg,
            &spectral,
            &serde_json::to_value(stats.mel)?,
        )?;
        let VocoderBundle::Baseline(vocoder) = bundle else {
            return Err(Error::CheckpointMismatch("expected a baseline vocoder checkpoint".into()));
        };
        synthesize_baseline(&base_cfg, &vocoder, &stats, &mel)?
    };

    data::write_wav(out, &output.wave, spectral.sample_rate)?;
    println!(
        "wrote {} ({} samples, {:.2} s)",
        out.display(),
        output.wave.len(),
        output.wave.len() as f64 / spectral.sample_rate as f64
    );
    if let (Some(path), Some(linear)) = (dump_linear, &output.linear) {
        let fp = spectral_fingerprint(&spectral);
        write_feature_record(path, linear, &fp)?;
        println!("wrote linear spectrogram estimate {} ({}x{})", path.display(), linear.dim().0, linear.dim().1);
    }
    Ok(())
}

fn wavs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("wav"))
            == Some(true)
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_clips(cfg: &GlobalConfig, dir: &Path) -> Result<Vec<Vec<f32>>> {
    let target = cfg.spectral.sample_rate;
    wavs_in(dir)?
        .iter()
        .map(|p| {
            let (wave, sr) = data::read_wav(p)?;
            if sr == target { Ok(wave) } else { data::resample_to(&wave, sr, target) }
        })
        .collect()
}

fn cmd_eval(cfg: &GlobalConfig, methods_dir: &Path, out_dir: &Path) -> Result<()> {
    let analyzer = SpectralAnalyzer::new(cfg.spectral_config()?)?;
    if !methods_dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", methods_dir.display())));
    }
    let mut real: Option<MethodClips> = None;
    let mut methods = Vec::new();
    let mut names: Vec<(String, PathBuf)> = std::fs::read_dir(methods_dir)
        .map_err(|e| Error::io(methods_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    names.sort();
    for (name, path) in names {
        let clips = MethodClips {
            name: name.clone(),
            train: read_clips(cfg, &path.join("train"))?,
            test: read_clips(cfg, &path.join("test"))?,
        };
        if name == "gt" {
            real = Some(clips);
        } else {
            methods.push(clips);
        }
    }
    let real = real.ok_or_else(|| {
        Error::Data(format!("{} has no `gt` subdirectory of real audio", methods_dir.display()))
    })?;

    let fps = cfg.spectral.frames_per_second as f64;
    let opts = TrainOptions {
        steps: cfg.classifier.steps,
        batch: cfg.classifier.batch,
        lr: cfg.classifier.lr,
        weight_decay: cfg.classifier.weight_decay,
        crop_frames: (cfg.classifier.crop_seconds * fps).round().max(1.0) as usize,
        seed: cfg.run.seed,
    };
    let table = evaluate_regimes(&analyzer, &real, &methods, &standard_regimes(), &opts)?;
    for notice in &table.notices {
        eprintln!("notice: {notice}");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("scores.csv");
    table.write_csv(&csv)?;
    table.render_heatmap(&out_dir.join("scores.png"))?;
    println!("wrote {} rows to {} and the score heatmap alongside", table.rows.len(), csv.display());
    Ok(())
}

fn cmd_render(cfg: &GlobalConfig, input: &Path, out_dir: &Path) -> Result<()> {
    let analyzer = SpectralAnalyzer::new(cfg.spectral_config()?)?;
    let wavs = wavs_in(input)?;
    if wavs.is_empty() {
        return Err(Error::Data(format!("no .wav files under {}", input.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for wav in &wavs {
        let (wave, sr) = data::read_wav(wav)?;
        let target = analyzer.config().sample_rate;
        let wave = if sr == target { wave } else { data::resample_to(&wave, sr, target)? };
        let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
        render_spectrogram_image(&analyzer, &wave, &out_dir.join(format!("{stem}.png")))?;
    }
    println!("rendered {} spectrograms into {}", wavs.len(), out_dir.display());
    Ok(())
}

fn cmd_make_toy(
    cfg: &GlobalConfig,
    out: &Path,
    clips: usize,
    seconds: f64,
    seed: Option<u64>,
) -> Result<()> {
    if clips == 0 || seconds <= 0.0 {
        return Err(Error::InvalidInput("need at least one clip of positive duration".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sr = cfg.spectral.sample_rate;
    let corpus = toygen::toy_corpus(clips, seconds, sr, seed.unwrap_or(cfg.run.seed));
    for (i, clip) in corpus.iter().enumerate() {
        data::write_wav(&out.join(format!("clip_{i:03}.wav")), clip, sr)?;
    }
    println!("wrote {clips} synthetic clips at {sr} Hz into {}", out.display());
    Ok(())
}
