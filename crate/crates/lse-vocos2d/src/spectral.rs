//! Signal-processing front end: STFT analysis/synthesis, mel and linear
//! triangular filterbanks on the Slaney-style mel scale, log-amplitude
//! features and their global normalization.
//!
//! All features are natural-log amplitudes clamped at `amplitude_floor`.
//! Frame rate is pinned to an integer number of frames per second so that
//! `hop * frames_per_second == sample_rate` holds exactly; analysis uses a
//! periodic Hann window and center padding of `(window_size - hop) / 2`
//! samples so frame `t` is centered `t * hop + window_size / 2 - pad` into
//! the clip and the inverse transform returns exactly `n_frames * hop`
//! samples.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    (6.4f64).ln() / 27.0
}

/// Hz -> mel, linear below 1 kHz (mel = 3 f / 200) and logarithmic above
/// (mel = 15 + 27 ln(f / 1000) / ln 6.4).
pub fn hz_to_mel(f_hz: f64) -> f64 {
    if f_hz <= MIN_LOG_HZ {
        f_hz / F_SP
    } else {
        MIN_LOG_MEL + (f_hz / MIN_LOG_HZ).ln() / log_step()
    }
}

/// Exact inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    if mel <= MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Frequency step of the linear output filterbank: the width in Hz of one
/// mel-filter slot mapped back to the linear axis,
/// `mel_to_hz(hz_to_mel(mel_f_max) / (n_mel + 1))`.
pub fn linear_hop(mel_f_max: f64, n_mel: usize) -> f64 {
    mel_to_hz(hz_to_mel(mel_f_max) / (n_mel as f64 + 1.0))
}

/// Global scalar statistics used to z-normalize log-amplitude features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.std.is_finite() || self.std <= 0.0 {
            return Err(Error::Config(format!(
                "normalization stats must be finite with positive std, got mean={} std={}",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// Static DSP configuration shared by feature extraction, the vocoder head
/// and the evaluation harness.  Derived fields (`hop`, `delta_f`, `n_linear`)
/// are computed by [`SpectralConfig::new`] and re-checked by `validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub sample_rate: u32,
    pub frames_per_second: u32,
    /// Samples between adjacent frames; `hop * frames_per_second == sample_rate`.
    pub hop: usize,
    pub fft_size: usize,
    pub window_size: usize,
    pub n_mel: usize,
    /// Upper edge of the mel filterbank in Hz.
    pub mel_f_max: f64,
    /// Center spacing of the linear filterbank in Hz.
    pub delta_f: f64,
    /// Number of linear output bands, `floor((sample_rate / 2) / delta_f)`.
    pub n_linear: usize,
    /// Amplitudes are clamped here before the log; the log-domain floor is
    /// `ln(amplitude_floor)`.
    pub amplitude_floor: f32,
}

impl SpectralConfig {
    pub fn new(
        sample_rate: u32,
        frames_per_second: u32,
        fft_size: usize,
        window_size: usize,
        n_mel: usize,
        mel_f_max: f64,
        amplitude_floor: f32,
    ) -> Result<Self> {
        if frames_per_second == 0 || !sample_rate.is_multiple_of(frames_per_second) {
            return Err(Error::Config(format!(
                "frames_per_second {frames_per_second} must divide sample_rate {sample_rate}"
            )));
        }
        let hop = (sample_rate / frames_per_second) as usize;
        let delta_f = linear_hop(mel_f_max, n_mel);
        let n_linear = (sample_rate as f64 / 2.0 / delta_f).floor() as usize;
        let cfg = SpectralConfig {
            sample_rate,
            frames_per_second,
            hop,
            fft_size,
            window_size,
            n_mel,
            mel_f_max,
            delta_f,
            n_linear,
            amplitude_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop as u64 * self.frames_per_second as u64 != self.sample_rate as u64 {
            return Err(Error::Config(format!(
                "hop {} * frames_per_second {} must equal sample_rate {}",
                self.hop, self.frames_per_second, self.sample_rate
            )));
        }
        if self.window_size > self.fft_size {
            return Err(Error::Config(format!(
                "window_size {} exceeds fft_size {}",
                self.window_size, self.fft_size
            )));
        }
        if self.window_size < self.hop {
            return Err(Error::Config(format!(
                "window_size {} smaller than hop {} leaves gaps between frames",
                self.window_size, self.hop
            )));
        }
        if !(self.window_size - self.hop).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window_size {} minus hop {} must be even for symmetric center padding",
                self.window_size, self.hop
            )));
        }
        if self.mel_f_max <= 0.0 || self.mel_f_max > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "mel_f_max {} must lie in (0, nyquist]",
                self.mel_f_max
            )));
        }
        if self.n_mel == 0 {
            return Err(Error::Config("n_mel must be positive".into()));
        }
        let expect_delta = linear_hop(self.mel_f_max, self.n_mel);
        if (self.delta_f - expect_delta).abs() > 1e-9 * expect_delta {
            return Err(Error::Config(format!(
                "delta_f {} inconsistent with mel_f_max/n_mel (expected {})",
                self.delta_f, expect_delta
            )));
        }
        let expect_linear = (self.sample_rate as f64 / 2.0 / expect_delta).floor() as usize;
        if self.n_linear != expect_linear {
            return Err(Error::Config(format!(
                "n_linear {} inconsistent with delta_f (expected {})",
                self.n_linear, expect_linear
            )));
        }
        if self.amplitude_floor.is_nan() || self.amplitude_floor <= 0.0 {
            return Err(Error::Config("amplitude_floor must be positive".into()));
        }
        Ok(())
    }

    /// Number of analysis frames for a clip of `n_samples`: `ceil(n / hop)`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }

    /// Left/right zero padding applied before framing.
    pub fn center_pad(&self) -> usize {
        (self.window_size - self.hop) / 2
    }

    pub fn n_fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Log-domain floor, `ln(amplitude_floor)`.
    pub fn loudness_floor(&self) -> f32 {
        self.amplitude_floor.ln()
    }
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig::new(44_100, 50, 2048, 2048, 80, 8000.0, 1e-5)
            .expect("reference configuration is valid")
    }
}

/// Mono waveform pinned to a sample rate.
#[derive(Debug, Clone)]
pub struct WaveformClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveformClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(WaveformClip { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-amplitude mel spectrogram, `[n_mel, n_frames]`.
#[derive(Debug, Clone)]
pub struct MelSpec {
    pub values: Array2<f32>,
    pub normalized: bool,
}

/// Log-amplitude linear spectrogram, `[n_linear, n_frames]`.
#[derive(Debug, Clone)]
pub struct LinearSpec {
    pub values: Array2<f32>,
    pub normalized: bool,
}

/// Complex STFT coefficients, `[fft_size / 2 + 1, n_frames]`.
#[derive(Debug, Clone)]
pub struct ComplexSpec {
    pub values: Array2<Complex<f32>>,
}

impl ComplexSpec {
    pub fn magnitude(&self) -> Array2<f32> {
        self.values.mapv(|c| c.norm())
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::TAU * i as f64 / n as f64;
            (0.5 * (1.0 - x.cos())) as f32
        })
        .collect()
}

/// Unit-peak triangular rows sampled at the FFT bin frequencies.  Row `k`
/// rises from `points_hz[k]` to 1 at `points_hz[k + 1]` and falls back to 0
/// at `points_hz[k + 2]`.
fn triangular_filterbank(
    points_hz: &[f64],
    n_bins: usize,
    sample_rate: u32,
    fft_size: usize,
) -> Result<Array2<f32>> {
    let n_rows = points_hz.len().saturating_sub(2);
    if n_rows == 0 {
        return Err(Error::Config("filterbank needs at least three edge points".into()));
    }
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut fb = Array2::<f32>::zeros((n_rows, n_bins));
    for k in 0..n_rows {
        let (left, center, right) = (points_hz[k], points_hz[k + 1], points_hz[k + 2]);
        if !(left < center && center < right) {
            return Err(Error::Config(format!(
                "filterbank points must be strictly increasing around row {k}"
            )));
        }
        let mut any = false;
        for (b, w) in fb.row_mut(k).iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            let v = up.min(down).max(0.0);
            if v > 0.0 {
                *w = v as f32;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config(format!(
                "filterbank row {k} (center {center:.2} Hz) covers no FFT bin; \
                 increase fft_size or widen the band spacing"
            )));
        }
    }
    Ok(fb)
}

/// Mel filterbank `[n_mel, n_fft_bins]` with band edges equally spaced on the
/// mel scale between 0 and `mel_f_max`.
pub fn build_mel_filterbank(cfg: &SpectralConfig) -> Result<Array2<f32>> {
    let mel_max = hz_to_mel(cfg.mel_f_max);
    let points: Vec<f64> = (0..=cfg.n_mel + 1)
        .map(|k| mel_to_hz(k as f64 * mel_max / (cfg.n_mel as f64 + 1.0)))
        .collect();
    triangular_filterbank(&points, cfg.n_fft_bins(), cfg.sample_rate, cfg.fft_size)
}

/// Linear filterbank `[n_linear, n_fft_bins]` with centers at `k * delta_f`,
/// `k = 1..=n_linear`, spanning the full band up to Nyquist.
pub fn build_linear_filterbank(cfg: &SpectralConfig) -> Result<Array2<f32>> {
    let points: Vec<f64> = (0..=cfg.n_linear + 1).map(|k| k as f64 * cfg.delta_f).collect();
    triangular_filterbank(&points, cfg.n_fft_bins(), cfg.sample_rate, cfg.fft_size)
}

/// Stateful analyzer bundling the window, filterbanks and FFT plans for one
/// [`SpectralConfig`].
pub struct SpectralAnalyzer {
    cfg: SpectralConfig,
    window: Vec<f32>,
    mel_fb: Array2<f32>,
    lin_fb: Array2<f32>,
    r2c: Arc<dyn RealToComplex<f32>>,
    c2r: Arc<dyn ComplexToReal<f32>>,
}

impl SpectralAnalyzer {
    pub fn new(cfg: SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        let mel_fb = build_mel_filterbank(&cfg)?;
        let lin_fb = build_linear_filterbank(&cfg)?;
        let mut planner = RealFftPlanner::<f32>::new();
        let r2c = planner.plan_fft_forward(cfg.fft_size);
        let c2r = planner.plan_fft_inverse(cfg.fft_size);
        let window = hann_window(cfg.window_size);
        Ok(SpectralAnalyzer { cfg, window, mel_fb, lin_fb, r2c, c2r })
    }

    pub fn config(&self) -> &SpectralConfig {
        &self.cfg
    }

    pub fn mel_filterbank(&self) -> ArrayView2<'_, f32> {
        self.mel_fb.view()
    }

    pub fn linear_filterbank(&self) -> ArrayView2<'_, f32> {
        self.lin_fb.view()
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    /// Center-padded STFT; output is `[fft_size / 2 + 1, ceil(n / hop)]`.
    pub fn stft(&self, samples: &[f32]) -> Result<ComplexSpec> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("stft of empty signal".into()));
        }
        let cfg = &self.cfg;
        let n_frames = cfg.n_frames(samples.len());
        let pad = cfg.center_pad();
        let padded_len = (n_frames - 1) * cfg.hop + cfg.window_size;
        let mut padded = vec![0.0f32; padded_len];
        padded[pad..pad + samples.len()].copy_from_slice(samples);

        let n_bins = cfg.n_fft_bins();
        let mut values = Array2::<Complex<f32>>::zeros((n_bins, n_frames));
        let mut frame = vec![0.0f32; cfg.fft_size];
        let mut spectrum = self.r2c.make_output_vec();
        let mut scratch = self.r2c.make_scratch_vec();
        let fft_pad = (cfg.fft_size - cfg.window_size) / 2;
        for t in 0..n_frames {
            frame.fill(0.0);
            let start = t * cfg.hop;
            for (i, out) in frame[fft_pad..fft_pad + cfg.window_size].iter_mut().enumerate() {
                *out = padded[start + i] * self.window[i];
            }
            self.r2c
                .process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
                .map_err(|e| Error::Numeric(format!("forward fft failed: {e}")))?;
            for (b, v) in spectrum.iter().enumerate() {
                values[(b, t)] = *v;
            }
        }
        Ok(ComplexSpec { values })
    }

    /// Overlap-add inverse STFT; returns exactly `n_frames * hop` samples.
    /// The imaginary parts of the DC and Nyquist bins do not influence a
    /// real inverse transform and are ignored.
    pub fn istft(&self, spec: &ComplexSpec) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let n_bins = cfg.n_fft_bins();
        if spec.values.nrows() != n_bins {
            return Err(Error::InvalidInput(format!(
                "expected {} frequency bins, got {}",
                n_bins,
                spec.values.nrows()
            )));
        }
        let n_frames = spec.n_frames();
        if n_frames == 0 {
            return Err(Error::InvalidInput("istft of empty spectrogram".into()));
        }
        let padded_len = (n_frames - 1) * cfg.hop + cfg.window_size;
        let mut acc = vec![0.0f32; padded_len];
        let mut wsum = vec![0.0f32; padded_len];
        let mut spectrum = self.c2r.make_input_vec();
        let mut frame = vec![0.0f32; cfg.fft_size];
        let mut scratch = self.c2r.make_scratch_vec();
        let fft_pad = (cfg.fft_size - cfg.window_size) / 2;
        let inv_n = 1.0 / cfg.fft_size as f32;
        for t in 0..n_frames {
            for (b, v) in spectrum.iter_mut().enumerate() {
                *v = spec.values[(b, t)];
            }
            spectrum[0].im = 0.0;
            spectrum[n_bins - 1].im = 0.0;
            self.c2r
                .process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
                .map_err(|e| Error::Numeric(format!("inverse fft failed: {e}")))?;
            let start = t * cfg.hop;
            for i in 0..cfg.window_size {
                let w = self.window[i];
                acc[start + i] += frame[fft_pad + i] * inv_n * w;
                wsum[start + i] += w * w;
            }
        }
        let pad = cfg.center_pad();
        let out_len = n_frames * cfg.hop;
        let mut out = vec![0.0f32; out_len];
        for (i, o) in out.iter_mut().enumerate() {
            let ws = wsum[pad + i];
            if ws > 1e-10 {
                *o = acc[pad + i] / ws;
            }
        }
        Ok(out)
    }

    /// Log-amplitude mel spectrogram, unnormalized.
    pub fn mel_spectrogram(&self, samples: &[f32]) -> Result<MelSpec> {
        let mag = self.stft(samples)?.magnitude();
        let values = self.apply_filterbank_log(&self.mel_fb, &mag);
        Ok(MelSpec { values, normalized: false })
    }

    /// Log-amplitude linear spectrogram, unnormalized.
    pub fn linear_spectrogram(&self, samples: &[f32]) -> Result<LinearSpec> {
        let mag = self.stft(samples)?.magnitude();
        let values = self.apply_filterbank_log(&self.lin_fb, &mag);
        Ok(LinearSpec { values, normalized: false })
    }

    /// Raw log STFT magnitude `[n_fft_bins, n_frames]`, floored like the
    /// filterbank features.
    pub fn log_magnitude(&self, samples: &[f32]) -> Result<Array2<f32>> {
        let mag = self.stft(samples)?.magnitude();
        let floor = self.cfg.amplitude_floor;
        Ok(mag.mapv(|v| v.max(floor).ln()))
    }

    fn apply_filterbank_log(&self, fb: &Array2<f32>, mag: &Array2<f32>) -> Array2<f32> {
        let floor = self.cfg.amplitude_floor;
        let mut out = fb.dot(mag);
        out.mapv_inplace(|v| v.max(floor).ln());
        out
    }

    /// Z-normalize log-amplitude features in place, flooring at the
    /// log-domain floor first.
    pub fn normalize(&self, values: &mut Array2<f32>, stats: NormStats) -> Result<()> {
        stats.validate()?;
        let floor = self.cfg.loudness_floor();
        values.mapv_inplace(|v| (v.max(floor) - stats.mean) / stats.std);
        Ok(())
    }

    /// Inverse of [`SpectralAnalyzer::normalize`]; output is floored at the
    /// log-domain floor.
    pub fn denormalize(&self, values: &mut Array2<f32>, stats: NormStats) -> Result<()> {
        stats.validate()?;
        let floor = self.cfg.loudness_floor();
        values.mapv_inplace(|v| (v * stats.std + stats.mean).max(floor));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mel_scale_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
        assert!((hz_to_mel(200.0 / 3.0) - 1.0).abs() < 1e-12);
        // 15 + 27 ln(8) / ln(6.4)
        assert!((hz_to_mel(8000.0) - 45.245_640_471_924_965).abs() < 1e-9);
    }

    #[test]
    fn mel_scale_round_trip() {
        for i in 1..=1000 {
            let f = i as f64 * 22.05;
            let rt = mel_to_hz(hz_to_mel(f));
            assert!(
                (rt - f).abs() <= 1e-9 * f,
                "round trip failed at {f} Hz: {rt}"
            );
        }
    }

    #[test]
    fn mel_scale_monotone_and_continuous() {
        let mut prev = hz_to_mel(0.0);
        for i in 1..4000 {
            let m = hz_to_mel(i as f64 * 5.5125);
            assert!(m > prev);
            prev = m;
        }
        let below = hz_to_mel(1000.0 - 1e-9);
        let above = hz_to_mel(1000.0 + 1e-9);
        assert!((above - below).abs() < 1e-10);
    }

    #[test]
    fn linear_band_layout_matches_reference() {
        let delta = linear_hop(8000.0, 80);
        assert!((delta - 37.239_210_2).abs() < 1e-6, "delta_f = {delta}");
        let cfg = SpectralConfig::default();
        assert_eq!(cfg.n_linear, 592);
        assert_eq!(cfg.hop, 882);
        assert_eq!(cfg.center_pad(), 583);
        assert!((cfg.loudness_floor() - (1e-5f32).ln()).abs() < 1e-12);
    }

    #[test]
    fn filterbank_rows_peak_near_centers() {
        let cfg = SpectralConfig::default();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mel_fb = build_mel_filterbank(&cfg).unwrap();
        assert_eq!(mel_fb.shape(), &[80, 1025]);
        let mel_max = hz_to_mel(cfg.mel_f_max);
        for k in 0..cfg.n_mel {
            let center = mel_to_hz((k as f64 + 1.0) * mel_max / 81.0);
            let row = mel_fb.row(k);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let peak = row[argmax];
            assert!(peak > 0.0 && peak <= 1.0 + 1e-6);
            assert!(
                (argmax as f64 * bin_hz - center).abs() <= bin_hz,
                "mel row {k}: argmax bin {argmax} vs center {center:.2} Hz"
            );
        }
        let lin_fb = build_linear_filterbank(&cfg).unwrap();
        assert_eq!(lin_fb.shape(), &[592, 1025]);
        for k in 0..cfg.n_linear {
            let center = (k as f64 + 1.0) * cfg.delta_f;
            let row = lin_fb.row(k);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(row[argmax] > 0.0 && row[argmax] <= 1.0 + 1e-6);
            assert!(
                (argmax as f64 * bin_hz - center).abs() <= bin_hz,
                "linear row {k}: argmax bin {argmax} vs center {center:.2} Hz"
            );
        }
    }

    #[test]
    fn filterbank_rejects_unresolvable_rows() {
        // 64-point FFT cannot resolve 37 Hz wide triangles.
        let cfg = SpectralConfig::new(44_100, 50, 64, 64, 80, 8000.0, 1e-5);
        let err = match cfg {
            Ok(cfg) => build_linear_filterbank(&cfg).unwrap_err(),
            Err(e) => e,
        };
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn stft_shape_and_real_edge_bins() {
        let cfg = SpectralConfig::default();
        let an = SpectralAnalyzer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3 * cfg.hop + 101;
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = an.stft(&x).unwrap();
        assert_eq!(spec.values.nrows(), 1025);
        assert_eq!(spec.n_frames(), 4);
        for t in 0..spec.n_frames() {
            assert_eq!(spec.values[(0, t)].im, 0.0);
            assert_eq!(spec.values[(1024, t)].im, 0.0);
        }
    }

    #[test]
    fn pure_tone_lands_in_expected_bin() {
        let cfg = SpectralConfig::default();
        let an = SpectralAnalyzer::new(cfg.clone()).unwrap();
        let n = cfg.hop * 20;
        let x: Vec<f32> = (0..n)
            .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 44_100.0).sin() as f32)
            .collect();
        let mag = an.stft(&x).unwrap().magnitude();
        let mid = mag.column(10).to_owned();
        let argmax = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // 1000 Hz / (44100 / 2048) = 46.44
        assert_eq!(argmax, 46);
    }

    #[test]
    fn stft_istft_round_trip_noise() {
        let cfg = SpectralConfig::default();
        let an = SpectralAnalyzer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2 * cfg.sample_rate as usize; // 2 s
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = an.stft(&x).unwrap();
        let y = an.istft(&spec).unwrap();
        assert_eq!(y.len(), spec.n_frames() * cfg.hop);
        let lo = cfg.window_size;
        let hi = n - cfg.window_size;
        let max_err = (lo..hi)
            .map(|i| (x[i] - y[i]).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-4, "interior round-trip error {max_err}");
    }

    #[test]
    fn istft_output_length_is_frames_times_hop() {
        let cfg = SpectralConfig::default();
        let an = SpectralAnalyzer::new(cfg.clone()).unwrap();
        for n in [1usize, cfg.hop - 1, cfg.hop, cfg.hop + 1, 5 * cfg.hop + 17] {
            let x = vec![0.25f32; n];
            let spec = an.stft(&x).unwrap();
            let y = an.istft(&spec).unwrap();
            assert_eq!(y.len(), cfg.n_frames(n) * cfg.hop);
        }
    }

    #[test]
    fn features_have_expected_shapes_and_floor() {
        let cfg = SpectralConfig::default();
        let an = SpectralAnalyzer::new(cfg.clone()).unwrap();
        let x = vec![0.0f32; cfg.hop * 5];
        let mel = an.mel_spectrogram(&x).unwrap();
        let lin = an.linear_spectrogram(&x).unwrap();
        assert_eq!(mel.values.shape(), &[80, 5]);
        assert_eq!(lin.values.shape(), &[592, 5]);
        let floor = cfg.loudness_floor();
        assert!(mel.values.iter().all(|&v| (v - floor).abs() < 1e-6));
        assert!(lin.values.iter().all(|&v| (v - floor).abs() < 1e-6));
    }

    #[test]
    fn normalize_denormalize_identity_above_floor() {
        let cfg = SpectralConfig::default();
        let an = SpectralAnalyzer::new(cfg.clone()).unwrap();
        let stats = NormStats { mean: -3.25, std: 2.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let floor = cfg.loudness_floor();
        let orig = Array2::from_shape_fn((80, 17), |_| rng.gen_range(floor..4.0f32));
        let mut v = orig.clone();
        an.normalize(&mut v, stats).unwrap();
        an.denormalize(&mut v, stats).unwrap();
        let max_err = v
            .iter()
            .zip(orig.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-5, "normalize round trip error {max_err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SpectralConfig::new(44_100, 47, 2048, 2048, 80, 8000.0, 1e-5).is_err());
        assert!(SpectralConfig::new(44_100, 50, 1024, 2048, 80, 8000.0, 1e-5).is_err());
        assert!(SpectralConfig::new(44_100, 50, 2048, 2048, 80, 30_000.0, 1e-5).is_err());
        assert!(SpectralConfig::new(44_100, 50, 2048, 2048, 80, 8000.0, 0.0).is_err());
        assert!(NormStats { mean: 0.0, std: 0.0 }.validate().is_err());
    }
}
