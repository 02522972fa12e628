//! Corpus ingestion, manifesting, feature caching, and normalization
//! statistics.
//!
//! Audio enters as WAV, is mixed to mono and resampled to 44.1 kHz with a
//! windowed-sinc polyphase resampler, and is tracked in a JSON-Lines
//! manifest.  Features are cached one record per (clip, kind) in a little-
//! endian binary format stamped with a fingerprint of the DSP configuration,
//! so a configuration change invalidates stale caches instead of silently
//! mixing feature spaces.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rubato::{
    Resampler, SincFixedIn, SincInterpolationParameters, SincInterpolationType, WindowFunction,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spectral::{NormStats, SpectralAnalyzer, SpectralConfig};
use crate::training::write_atomic;

pub const TARGET_SAMPLE_RATE: u32 = 44_100;

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

/// Read a WAV file, mixing channels down to mono; returns the samples and
/// the file's native sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Data(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Int => {
            let denom = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / denom))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    if mono.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Ok((mono, spec.sample_rate))
}

/// Write mono 32-bit-float WAV.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Windowed-sinc polyphase resampling; output length is
/// `round(len · to/from)`, with the resampler's latency compensated.
pub fn resample_to(input: &[f32], from_rate: u32, to_rate: u32) -> Result<Vec<f32>> {
    if input.is_empty() {
        return Err(Error::InvalidInput("cannot resample an empty signal".into()));
    }
    if from_rate == to_rate {
        return Ok(input.to_vec());
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let expected = (input.len() as f64 * ratio).round() as usize;
    let params = SincInterpolationParameters {
        sinc_len: 256,
        f_cutoff: 0.95,
        interpolation: SincInterpolationType::Linear,
        oversampling_factor: 256,
        window: WindowFunction::BlackmanHarris2,
    };
    let chunk = 1024;
    let mut rs = SincFixedIn::<f64>::new(ratio, 1.1, params, chunk, 1)
        .map_err(|e| Error::Data(format!("resampler construction failed: {e}")))?;
    let delay = rs.output_delay();
    let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let mut out: Vec<f64> = Vec::with_capacity(expected + delay + chunk);
    let mut pos = 0;
    while pos + chunk <= x.len() {
        let mut res = rs
            .process(&[&x[pos..pos + chunk]], None)
            .map_err(|e| Error::Numeric(format!("resampler failed: {e}")))?;
        out.append(&mut res[0]);
        pos += chunk;
    }
    if pos < x.len() {
        let mut res = rs
            .process_partial(Some(&[&x[pos..]]), None)
            .map_err(|e| Error::Numeric(format!("resampler failed: {e}")))?;
        out.append(&mut res[0]);
    }
    // Push the filter's tail out of the internal buffers.
    while out.len() < delay + expected {
        let mut res = rs
            .process_partial::<&[f64]>(None, None)
            .map_err(|e| Error::Numeric(format!("resampler flush failed: {e}")))?;
        if res[0].is_empty() {
            break;
        }
        out.append(&mut res[0]);
    }
    out.resize(delay + expected, 0.0);
    Ok(out[delay..].iter().map(|&v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source_path: String,
    pub duration_s: f64,
    pub sample_rate_original: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub train_ratio: f64,
    pub split_seed: u64,
    /// Rate all audio is normalized to.
    pub target_rate: u32,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { train_ratio: 0.9, split_seed: 17, target_rate: TARGET_SAMPLE_RATE }
    }
}

#[derive(Debug)]
pub struct IngestReport {
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
    pub manifest_path: PathBuf,
    pub audio_dir: PathBuf,
}

/// Deterministic id-based split assignment from a seeded hash.
pub fn split_for_id(id: &str, seed: u64, train_ratio: f64) -> Split {
    let mut hasher = Sha256::new();
    hasher.update(id.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let u = u64::from_le_bytes(digest[..8].try_into().unwrap());
    if (u as f64) / (u64::MAX as f64) < train_ratio {
        Split::Train
    } else {
        Split::Test
    }
}

fn clip_id(rel_path: &Path) -> String {
    let stem = rel_path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    let digest = Sha256::digest(rel_path.to_string_lossy().as_bytes());
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{stem}-{tag}")
}

fn collect_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("wav"))
                == Some(true)
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Ingest a directory of WAV files: mono-mix, resample to 44.1 kHz, write
/// the normalized audio and a JSON-Lines manifest under `out_dir`.
/// Unreadable files are skipped with a warning; an empty result is an error.
pub fn ingest(in_dir: &Path, out_dir: &Path, opts: &IngestOptions) -> Result<IngestReport> {
    if !(0.0..=1.0).contains(&opts.train_ratio) {
        return Err(Error::Config(format!("train_ratio {} outside [0,1]", opts.train_ratio)));
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for path in collect_wavs(in_dir)? {
        let rel = path.strip_prefix(in_dir).unwrap_or(&path);
        let (mono, sr) = match read_wav(&path) {
            Ok(x) => x,
            Err(e) => {
                warnings.push(format!("skipping {}: {e}", path.display()));
                continue;
            }
        };
        let resampled = match resample_to(&mono, sr, opts.target_rate) {
            Ok(x) => x,
            Err(e) => {
                warnings.push(format!("skipping {}: {e}", path.display()));
                continue;
            }
        };
        let id = clip_id(rel);
        write_wav(&audio_dir.join(format!("{id}.wav")), &resampled, opts.target_rate)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            source_path: rel.to_string_lossy().into_owned(),
            duration_s: resampled.len() as f64 / opts.target_rate as f64,
            sample_rate_original: sr,
            split: split_for_id(&id, opts.split_seed, opts.train_ratio),
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no audio found under {}", in_dir.display())));
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut body = String::new();
    for e in &entries {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    write_atomic(&manifest_path, body.as_bytes())?;
    Ok(IngestReport { entries, warnings, manifest_path, audio_dir })
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("empty manifest {}", path.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Global scalar statistics for both feature kinds, computed on the train
/// split and persisted alongside the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mel: NormStats,
    pub linear: NormStats,
}

/// Single-pass mean/std over floor-clipped cells.
pub fn compute_norm_stats<'a, I>(specs: I, loudness_floor: f32) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a Array2<f32>>,
{
    let mut n = 0u64;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for spec in specs {
        for &v in spec.iter() {
            let c = v.max(loudness_floor) as f64;
            n += 1;
            sum += c;
            sumsq += c * c;
        }
    }
    if n == 0 {
        return Err(Error::Data("no cells to compute statistics over".into()));
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    if std < 1e-6 {
        return Err(Error::Data(format!(
            "degenerate corpus: feature standard deviation {std:.3e} is effectively zero"
        )));
    }
    Ok(NormStats { mean: mean as f32, std: std as f32 })
}

/// Stream the train split and accumulate statistics for both feature kinds.
pub fn corpus_feature_stats(
    entries: &[ManifestEntry],
    audio_dir: &Path,
    analyzer: &SpectralAnalyzer,
) -> Result<FeatureStats> {
    let train: Vec<&ManifestEntry> =
        entries.iter().filter(|e| e.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let mut mels = Vec::new();
    let mut linears = Vec::new();
    for e in &train {
        let (wave, sr) = read_wav(&audio_dir.join(format!("{}.wav", e.id)))?;
        if sr != analyzer.config().sample_rate {
            return Err(Error::Data(format!(
                "{}: expected {} Hz audio, found {sr}",
                e.id,
                analyzer.config().sample_rate
            )));
        }
        mels.push(analyzer.mel_spectrogram(&wave)?.values);
        linears.push(analyzer.linear_spectrogram(&wave)?.values);
    }
    let floor = analyzer.config().loudness_floor();
    Ok(FeatureStats {
        mel: compute_norm_stats(mels.iter(), floor)?,
        linear: compute_norm_stats(linears.iter(), floor)?,
    })
}

pub fn write_stats(path: &Path, stats: &FeatureStats) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(stats)?)
}

pub fn read_stats(path: &Path) -> Result<FeatureStats> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ---------------------------------------------------------------------------
// Feature cache
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 8] = b"LSEFEAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Mel,
    Linear,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::Linear => "linear",
        }
    }
}

/// 16-byte digest of every field of the DSP configuration that affects
/// feature values; stamped into cache records and checkpoints.
pub fn spectral_fingerprint(cfg: &SpectralConfig) -> [u8; 16] {
    let mut hasher = Sha256::new();
    hasher.update(cfg.sample_rate.to_le_bytes());
    hasher.update(cfg.frames_per_second.to_le_bytes());
    hasher.update((cfg.hop as u64).to_le_bytes());
    hasher.update((cfg.fft_size as u64).to_le_bytes());
    hasher.update((cfg.window_size as u64).to_le_bytes());
    hasher.update((cfg.n_mel as u64).to_le_bytes());
    hasher.update(cfg.mel_f_max.to_le_bytes());
    hasher.update(cfg.delta_f.to_le_bytes());
    hasher.update((cfg.n_linear as u64).to_le_bytes());
    hasher.update(cfg.amplitude_floor.to_le_bytes());
    let digest = hasher.finalize();
    digest[..16].try_into().unwrap()
}

pub fn cache_path(cache_dir: &Path, id: &str, kind: FeatureKind) -> PathBuf {
    cache_dir.join(format!("{id}.{}.lsf", kind.as_str()))
}

/// Serialize one `[bins, frames]` record: magic, dims, fingerprint, payload.
pub fn write_feature_record(path: &Path, values: &Array2<f32>, fp: &[u8; 16]) -> Result<()> {
    let (bins, frames) = values.dim();
    let mut buf = Vec::with_capacity(32 + bins * frames * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(bins as u32).to_le_bytes());
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(fp);
    for &v in values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Read a record, verifying the magic and (when given) the fingerprint.
pub fn read_feature_record(path: &Path, expected_fp: Option<&[u8; 16]>) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Data(format!("{} is not a feature record", path.display())));
    }
    let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let fp: [u8; 16] = bytes[16..32].try_into().unwrap();
    if let Some(expected) = expected_fp {
        if &fp != expected {
            return Err(Error::Data(format!(
                "stale feature cache {}: DSP configuration fingerprint mismatch; re-run extract",
                path.display()
            )));
        }
    }
    let want = 32 + bins * frames * 4;
    if bytes.len() != want {
        return Err(Error::Data(format!(
            "{}: payload length {} does not match {bins}x{frames}",
            path.display(),
            bytes.len() - 32
        )));
    }
    let data: Vec<f32> = bytes[32..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((bins, frames), data)
        .map_err(|e| Error::Data(format!("bad record shape: {e}")))
}

fn record_is_current(path: &Path, fp: &[u8; 16]) -> bool {
    let Ok(bytes) = fs::read(path) else { return false };
    bytes.len() >= 32 && &bytes[..8] == FEATURE_MAGIC && &bytes[16..32] == fp
}

/// Compute and persist mel and linear records for every manifest entry.
/// Existing records with the current fingerprint are left untouched; returns
/// how many records were (re)written.
pub fn cache_features(
    entries: &[ManifestEntry],
    audio_dir: &Path,
    cache_dir: &Path,
    analyzer: &SpectralAnalyzer,
) -> Result<usize> {
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let fp = spectral_fingerprint(analyzer.config());
    let mut written = 0usize;
    for e in entries {
        let mel_path = cache_path(cache_dir, &e.id, FeatureKind::Mel);
        let lin_path = cache_path(cache_dir, &e.id, FeatureKind::Linear);
        if record_is_current(&mel_path, &fp) && record_is_current(&lin_path, &fp) {
            continue;
        }
        let (wave, _sr) = read_wav(&audio_dir.join(format!("{}.wav", e.id)))?;
        write_feature_record(&mel_path, &analyzer.mel_spectrogram(&wave)?.values, &fp)?;
        write_feature_record(&lin_path, &analyzer.linear_spectrogram(&wave)?.values, &fp)?;
        written += 2;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygen;
    use ndarray::array;

    #[test]
    fn wav_round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..500).map(|i| ((i as f32) * 0.01).sin() * 0.8).collect();
        write_wav(&path, &samples, 44100).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 44100);
        assert_eq!(back, samples);
    }

    #[test]
    fn integer_wav_decodes_with_channel_mixdown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 48000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            w.write_sample((i * 100) as i16).unwrap();
            w.write_sample(-(i * 100) as i16).unwrap();
        }
        w.finalize().unwrap();
        let (mono, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 48000);
        assert_eq!(mono.len(), 100);
        // Opposite-sign channels cancel in the mixdown.
        assert!(mono.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn resampling_preserves_duration_and_suppresses_aliases() {
        // 0.5 s of a pure 1 kHz tone at 48 kHz.
        let sr_in = 48_000u32;
        let n = sr_in as usize / 2;
        let tone: Vec<f32> = (0..n)
            .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / sr_in as f64).sin() as f32 * 0.7)
            .collect();
        let out = resample_to(&tone, sr_in, 44_100).unwrap();
        let expected = (n as f64 * 44100.0 / 48000.0).round() as usize;
        assert!((out.len() as i64 - expected as i64).abs() <= 1);

        let analyzer = SpectralAnalyzer::new(SpectralConfig::default()).unwrap();
        let mag = analyzer.stft(&out).unwrap().magnitude();
        let mean: Vec<f32> = mag.rows().into_iter().map(|r| r.mean().unwrap()).collect();
        let peak_bin = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let expected_bin = (1000.0f64 / (44100.0 / 2048.0)).round() as usize;
        assert!(
            (peak_bin as i64 - expected_bin as i64).abs() <= 1,
            "peak at bin {peak_bin}, expected near {expected_bin}"
        );
        // Everything more than ~2 kHz away from the tone must sit below
        // -60 dB relative to the peak.
        let peak = mean[peak_bin];
        let guard = 93; // ~2 kHz in bins
        for (i, &v) in mean.iter().enumerate() {
            if (i as i64 - peak_bin as i64).unsigned_abs() as usize > guard {
                assert!(v < peak * 1e-3, "alias at bin {i}: {v} vs peak {peak}");
            }
        }
    }

    #[test]
    fn split_assignment_is_deterministic_and_roughly_proportional() {
        let mut train = 0;
        for i in 0..1000 {
            let id = format!("clip-{i}");
            let a = split_for_id(&id, 7, 0.9);
            let b = split_for_id(&id, 7, 0.9);
            assert_eq!(a, b);
            if a == Split::Train {
                train += 1;
            }
        }
        assert!((850..=950).contains(&train), "train count {train} far from 90%");
        // A different seed shuffles membership.
        let flips = (0..1000)
            .filter(|i| {
                let id = format!("clip-{i}");
                split_for_id(&id, 7, 0.5) != split_for_id(&id, 8, 0.5)
            })
            .count();
        assert!(flips > 100);
    }

    #[test]
    fn norm_stats_match_a_direct_computation_and_reject_degenerate_input() {
        let a = array![[1.0f32, 2.0], [3.0, 4.0]];
        let b = array![[5.0f32, 6.0], [7.0, 8.0]];
        let stats = compute_norm_stats([&a, &b], f32::NEG_INFINITY).unwrap();
        let mean = 4.5;
        let var: f64 = (1..=8).map(|v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / 8.0;
        assert!((stats.mean as f64 - mean).abs() < 1e-6);
        assert!((stats.std as f64 - var.sqrt()).abs() < 1e-6);

        // Floor clipping raises low cells before accumulation.
        let stats = compute_norm_stats([&a], 2.5).unwrap();
        let cells = [2.5f64, 2.5, 3.0, 4.0];
        let m: f64 = cells.iter().sum::<f64>() / 4.0;
        assert!((stats.mean as f64 - m).abs() < 1e-6);

        let flat = Array2::<f32>::zeros((3, 3));
        match compute_norm_stats([&flat], f32::NEG_INFINITY) {
            Err(Error::Data(msg)) => assert!(msg.contains("degenerate")),
            other => panic!("expected degenerate-corpus error, got {other:?}"),
        }
    }

    #[test]
    fn normalized_features_remeasure_to_zero_mean_unit_variance() {
        let analyzer = SpectralAnalyzer::new(SpectralConfig::default()).unwrap();
        let clips = toygen::toy_corpus(3, 0.4, 44100, 21);
        let mut feats: Vec<Array2<f32>> =
            clips.iter().map(|c| analyzer.linear_spectrogram(c).unwrap().values).collect();
        let stats =
            compute_norm_stats(feats.iter(), analyzer.config().loudness_floor()).unwrap();
        for f in feats.iter_mut() {
            analyzer.normalize(f, stats).unwrap();
        }
        let re = compute_norm_stats(feats.iter(), f32::NEG_INFINITY).unwrap();
        assert!(re.mean.abs() < 0.05, "re-measured mean {}", re.mean);
        assert!((re.std - 1.0).abs() < 0.1, "re-measured std {}", re.std);
    }

    #[test]
    fn feature_records_round_trip_and_reject_stale_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel.lsf");
        let values =
            Array2::from_shape_fn((6, 9), |(i, j)| (i as f32 * 0.7 - j as f32 * 0.3).sin());
        let cfg = SpectralConfig::default();
        let fp = spectral_fingerprint(&cfg);
        write_feature_record(&path, &values, &fp).unwrap();
        let back = read_feature_record(&path, Some(&fp)).unwrap();
        assert_eq!(back, values);

        // A different fft_size must change the fingerprint and invalidate.
        let other = SpectralConfig::new(44100, 50, 4096, 4096, 80, 8000.0, 1e-5).unwrap();
        let fp2 = spectral_fingerprint(&other);
        assert_ne!(fp, fp2);
        match read_feature_record(&path, Some(&fp2)) {
            Err(Error::Data(msg)) => assert!(msg.contains("stale")),
            other => panic!("expected stale-cache error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_and_cache_are_idempotent() {
        let in_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();

        // One 48 kHz stereo integer file, one 44.1 kHz float file, one junk
        // file that must be skipped with a warning.
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 48000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(in_dir.path().join("a.wav"), spec).unwrap();
        for i in 0..9600 {
            let v = ((std::f64::consts::TAU * 440.0 * i as f64 / 48000.0).sin() * 12000.0) as i16;
            w.write_sample(v).unwrap();
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        write_wav(
            &in_dir.path().join("b.wav"),
            &toygen::harmonic_clip(0.25, 44100, 300.0, 8, 5.0, 15.0, 2),
            44100,
        )
        .unwrap();
        fs::write(in_dir.path().join("broken.wav"), b"not really a wav").unwrap();

        let report = ingest(in_dir.path(), out_dir.path(), &IngestOptions::default()).unwrap();
        assert_eq!(report.entries.len(), 2);
        assert_eq!(report.warnings.len(), 1);
        let ids: Vec<_> = report.entries.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), ids.iter().collect::<std::collections::BTreeSet<_>>().len());
        // 0.2 s at 48 kHz resamples to 0.2 s at 44.1 kHz (within one sample).
        let a = report.entries.iter().find(|e| e.source_path.contains('a')).unwrap();
        assert!((a.duration_s - 0.2).abs() < 1e-3);

        let first = fs::read(&report.manifest_path).unwrap();
        let report2 = ingest(in_dir.path(), out_dir.path(), &IngestOptions::default()).unwrap();
        let second = fs::read(&report2.manifest_path).unwrap();
        assert_eq!(first, second, "re-running ingest must reproduce the manifest");

        // Feature caching: first run writes, second run writes nothing.
        let analyzer = SpectralAnalyzer::new(SpectralConfig::default()).unwrap();
        let cache = out_dir.path().join("cache");
        let n1 = cache_features(&report.entries, &report.audio_dir, &cache, &analyzer).unwrap();
        assert_eq!(n1, 4);
        let n2 = cache_features(&report.entries, &report.audio_dir, &cache, &analyzer).unwrap();
        assert_eq!(n2, 0);

        // Cached records equal fresh computation bitwise and carry the frame
        // invariant frames = ceil(duration * fps).
        for e in &report.entries {
            let (wave, _) = read_wav(&report.audio_dir.join(format!("{}.wav", e.id))).unwrap();
            let fresh = analyzer.mel_spectrogram(&wave).unwrap().values;
            let fp = spectral_fingerprint(analyzer.config());
            let cached =
                read_feature_record(&cache_path(&cache, &e.id, FeatureKind::Mel), Some(&fp))
                    .unwrap();
            assert_eq!(cached, fresh);
            let frames = cached.dim().1;
            assert_eq!(frames, (e.duration_s * 50.0).ceil() as usize);
        }

        // Empty input directory fails loudly.
        let empty = tempfile::tempdir().unwrap();
        match ingest(empty.path(), out_dir.path(), &IngestOptions::default()) {
            Err(Error::Data(msg)) => assert!(msg.contains("no audio found")),
            other => panic!("expected no-audio error, got {other:?}"),
        }
    }
}
