//! End-to-end exercises of the `lsevoc` binary at desk scale: ingest a
//! synthetic corpus, train all three stages for a handful of steps, then
//! synthesize, render, and evaluate through the same entry points a user
//! would hit.

use std::path::{Path, PathBuf};
use std::process::Output;

use lse_vocos2d::data::{self, read_feature_record, spectral_fingerprint};
use lse_vocos2d::spectral::SpectralConfig;
use lse_vocos2d::toygen;

fn lsevoc(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_lsevoc"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Miniature configuration: 800 Hz audio, 64-point FFT, 6 mel bands, and
/// models a few thousand parameters wide. Shapes stay faithful to the full
/// system; only sizes shrink.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let data_root = dir.join("data");
    let ckpt_root = dir.join("checkpoints");
    let text = format!(
        r#"
[spectral]
sample_rate = 800
frames_per_second = 50
fft_size = 64
window_size = 64
n_mel = 6
mel_f_max = 300.0
amplitude_floor = 1e-5

[lse]
hidden = 16
n_blocks = 1
n_heads = 2
patch_f = 3
patch_t = 2
ffn_mult = 2

[vocos2d]
hidden = 8
n_blocks = 2
expand_mult = 2
kernel = 3
freq_grid = 3
head_kernel = 17
head_stride = 16

[baseline]
hidden = 8
n_blocks = 2
expand_mult = 2
kernel = 3

[optim_lse]
mixed_fp16 = false

[train_lse]
steps = 3
batch = 2
plateau_window = 50
checkpoint_every = 1000
log_every = 1

[train_vocoder]
steps = 2
segment_seconds = 0.2
decay_interval = 50
checkpoint_every = 1000
log_every = 1

[mrd]
resolutions = [[64, 16], [32, 8]]
channels = 4

[da]
max_shift = 20

[classifier]
widths = [4, 8, 12, 16]
mlp_mult = 2
steps = 6
batch = 2
crop_seconds = 0.64

[sampler]
steps = 3

[paths]
data_root = "{}"
checkpoints_root = "{}"

[run]
seed = 17
"#,
        data_root.display(),
        ckpt_root.display()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn tiny_spectral() -> SpectralConfig {
    SpectralConfig::new(800, 50, 64, 64, 6, 300.0, 1e-5).unwrap()
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    let help = lsevoc(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = stdout(&help);
    assert!(text.contains("spectral.sample_rate"), "help should list config keys");
    assert!(text.contains("train_lse.steps"), "help should list training keys");

    assert_eq!(lsevoc(&["bogus-subcommand"]).status.code(), Some(1));
    assert_eq!(lsevoc(&["train", "--stage", "nonsense"]).status.code(), Some(1));
    // Missing corpus is a data failure, not a usage failure.
    assert_eq!(
        lsevoc(&["extract", "--input", "/nonexistent-dir-for-cli-test"]).status.code(),
        Some(2)
    );
}

#[test]
fn full_desk_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_tiny_config(root);
    let cfg = cfg.to_str().unwrap();
    let raw_dir = root.join("raw");
    let data_root = root.join("data");
    let ckpt_root = root.join("checkpoints");

    // Corpus generation.
    let mk = lsevoc(&[
        "make-toy",
        "--config",
        cfg,
        "--out",
        raw_dir.to_str().unwrap(),
        "--clips",
        "6",
        "--seconds",
        "0.5",
    ]);
    assert_ok(&mk, "make-toy");
    let wavs: Vec<_> = std::fs::read_dir(&raw_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    assert_eq!(wavs.len(), 6);

    // Ingest: manifest + stats + feature caches, idempotent on rerun.
    let ex = lsevoc(&["extract", "--config", cfg, "--input", raw_dir.to_str().unwrap()]);
    assert_ok(&ex, "extract");
    let manifest = data_root.join("manifest.jsonl");
    let stats = data_root.join("stats.json");
    assert!(manifest.exists() && stats.exists());
    let cache_files: Vec<_> = std::fs::read_dir(data_root.join("cache"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(cache_files.len(), 12, "mel + linear record per clip");
    let manifest_bytes = std::fs::read(&manifest).unwrap();

    let ex2 = lsevoc(&["extract", "--config", cfg, "--input", raw_dir.to_str().unwrap()]);
    assert_ok(&ex2, "extract rerun");
    assert_eq!(std::fs::read(&manifest).unwrap(), manifest_bytes, "manifest must be stable");
    assert!(stdout(&ex2).contains("cached 0 feature records"), "cache must be reused");

    // Training before extraction in a fresh root fails with guidance.
    let fresh = root.join("fresh.toml");
    std::fs::write(
        &fresh,
        std::fs::read_to_string(cfg).unwrap().replace(
            data_root.to_str().unwrap(),
            root.join("nothing-here").to_str().unwrap(),
        ),
    )
    .unwrap();
    let missing = lsevoc(&["train", "--config", fresh.to_str().unwrap(), "--stage", "lse"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&missing.stderr).contains("lsevoc extract"),
        "error should point at the extract step"
    );

    // Train all three stages for a few steps each.
    let t1 = lsevoc(&["train", "--config", cfg, "--stage", "lse"]);
    assert_ok(&t1, "train lse");
    assert!(stdout(&t1).contains("reached step 3"));
    let t1b = lsevoc(&["train", "--config", cfg, "--stage", "lse", "--steps", "6", "--resume"]);
    assert_ok(&t1b, "resume lse");
    assert!(stdout(&t1b).contains("reached step 6"));
    assert!(ckpt_root.join("lse").is_dir());

    let t2 = lsevoc(&["train", "--config", cfg, "--stage", "vocos2d"]);
    assert_ok(&t2, "train vocos2d");
    let t3 = lsevoc(&["train", "--config", cfg, "--stage", "vocos-baseline"]);
    assert_ok(&t3, "train vocos-baseline");

    // Synthesis through the estimator: output duration tracks the mel frame
    // count, bytes are seed-deterministic, and the linear estimate dumps as
    // a readable record.
    let input_wav = raw_dir.join("clip_000.wav");
    let out_a = root.join("a.wav");
    let dump = root.join("a.lsf");
    let synth_args = |out: &Path, seed: &str| {
        vec![
            "synth".to_string(),
            "--config".into(),
            cfg.to_string(),
            "--mel".into(),
            input_wav.to_str().unwrap().into(),
            "--use-lse".into(),
            "--seed".into(),
            seed.to_string(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let mut args = synth_args(&out_a, "7");
    args.push("--dump-linear".into());
    args.push(dump.to_str().unwrap().into());
    let s1 = lsevoc(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ok(&s1, "synth with estimator");

    let (wave, sr) = data::read_wav(&out_a).unwrap();
    assert_eq!(sr, 800);
    assert_eq!(wave.len(), 400, "0.5 s in, 0.5 s out (25 frames x 16-sample hop)");

    let fp = spectral_fingerprint(&tiny_spectral());
    let linear = read_feature_record(&dump, Some(&fp)).unwrap();
    assert_eq!(linear.dim(), (9, 25), "full linear rows by mel frame count");

    let out_b = root.join("b.wav");
    let s2_args = synth_args(&out_b, "7");
    let s2 = lsevoc(&s2_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ok(&s2, "synth rerun");
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap(),
        "same seed must reproduce the waveform bit for bit"
    );
    let out_c = root.join("c.wav");
    let s3_args = synth_args(&out_c, "8");
    let s3 = lsevoc(&s3_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ok(&s3, "synth new seed");
    assert_ne!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_c).unwrap(),
        "a different seed should change the sampled spectrogram"
    );

    // Baseline route, fed from a cached mel record instead of a WAV.
    let mel_record = std::fs::read_dir(data_root.join("cache"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_str().unwrap().ends_with(".mel.lsf"))
        .unwrap();
    let out_d = root.join("d.wav");
    let s4 = lsevoc(&[
        "synth",
        "--config",
        cfg,
        "--mel",
        mel_record.to_str().unwrap(),
        "--out",
        out_d.to_str().unwrap(),
    ]);
    assert_ok(&s4, "baseline synth from .lsf");
    let (wave_d, _) = data::read_wav(&out_d).unwrap();
    assert_eq!(wave_d.len() % 16, 0);
    assert!(!wave_d.is_empty());

    // --dump-linear without the estimator is a usage error.
    let bad = lsevoc(&[
        "synth",
        "--config",
        cfg,
        "--mel",
        input_wav.to_str().unwrap(),
        "--dump-linear",
        root.join("x.lsf").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    // Rendering: one PNG per WAV.
    let png_dir = root.join("pngs");
    let r = lsevoc(&[
        "render",
        "--config",
        cfg,
        "--input",
        raw_dir.to_str().unwrap(),
        "--out",
        png_dir.to_str().unwrap(),
    ]);
    assert_ok(&r, "render");
    let pngs: Vec<_> = std::fs::read_dir(&png_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 6);
}

#[test]
fn eval_scores_methods_and_flags_missing_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = write_tiny_config(root);
    let cfg = cfg_path.to_str().unwrap();

    // Method tree: real audio plus two degraded stand-ins; the third method
    // the standard regimes mention is deliberately absent.
    let clips = toygen::toy_corpus(7, 1.0, 800, 99);
    let methods = root.join("methods");
    let write_set = |name: &str, cutoff: Option<f64>| {
        for (split, idx) in [("train", 0..4usize), ("test", 4..7)] {
            let dir = methods.join(name).join(split);
            std::fs::create_dir_all(&dir).unwrap();
            for i in idx {
                let clip = match cutoff {
                    Some(hz) => toygen::brickwall_lowpass(&clips[i], 800, hz).unwrap(),
                    None => clips[i].clone(),
                };
                data::write_wav(&dir.join(format!("c{i}.wav")), &clip, 800).unwrap();
            }
        }
    };
    write_set("gt", None);
    write_set("mdctgan", Some(120.0));
    write_set("vocos", Some(180.0));

    let out_dir = root.join("scores");
    let ev = lsevoc(&[
        "eval",
        "--config",
        cfg,
        "--methods",
        methods.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&ev, "eval");
    assert!(
        String::from_utf8_lossy(&ev.stderr).contains("lse-vocos2d"),
        "missing method must be called out"
    );

    let csv = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,seen,regime,input_kind,mean_score,count");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 18, "3 methods x 3 usable regimes x 2 input kinds");
    for row in &rows {
        let score: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&score), "scores are probabilities: {row}");
    }
    assert!(out_dir.join("scores.png").exists());
}
