//! Synthetic audio for tests and desk-scale experiments: frequency sweeps,
//! harmonic "singing" tones with vibrato, and a brick-wall low-pass used to
//! manufacture band-limited negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;

use crate::error::{Error, Result};

/// Exponential sweep from `f0` to `f1` Hz at half amplitude.
pub fn sine_sweep(seconds: f64, sample_rate: u32, f0: f64, f1: f64) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let k = (f1 / f0).ln();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            // Phase of an exponential chirp: 2π f0 (e^{kt/T} - 1) T / k.
            let phase = std::f64::consts::TAU * f0 * seconds / k * ((k * t / seconds).exp() - 1.0);
            (0.5 * phase.sin()) as f32
        })
        .collect()
}

/// A sustained harmonic tone with vibrato, a soft envelope, and a faint noise
/// floor — enough structure to stand in for a sung note.
pub fn harmonic_clip(
    seconds: f64,
    sample_rate: u32,
    f0: f64,
    n_harmonics: usize,
    vibrato_hz: f64,
    vibrato_cents: f64,
    seed: u64,
) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> =
        (0..n_harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let depth = 2f64.powf(vibrato_cents / 1200.0) - 1.0;
    let mut out = Vec::with_capacity(n);
    let mut phase_acc = vec![0.0f64; n_harmonics];
    for i in 0..n {
        let t = i as f64 / sr;
        let vib = 1.0 + depth * (std::f64::consts::TAU * vibrato_hz * t).sin();
        let mut s = 0.0f64;
        for (k, acc) in phase_acc.iter_mut().enumerate() {
            let fk = f0 * (k + 1) as f64 * vib;
            if fk >= sr / 2.0 {
                continue;
            }
            *acc += std::f64::consts::TAU * fk / sr;
            s += (*acc + phases[k]).sin() / (k + 1) as f64;
        }
        // 30 ms raised-cosine attack and release.
        let edge = (0.03 * sr).max(1.0);
        let env_in = ((i as f64 / edge).min(1.0) * std::f64::consts::FRAC_PI_2).sin();
        let env_out = (((n - 1 - i) as f64 / edge).min(1.0) * std::f64::consts::FRAC_PI_2).sin();
        let noise: f64 = StandardNormal.sample(&mut rng);
        out.push((0.3 * s * env_in * env_out + 1e-3 * noise) as f32);
    }
    out
}

/// Deterministic corpus of harmonic clips with varied fundamentals.  The
/// fundamental is capped below half the Nyquist frequency so every clip
/// keeps at least two voiced harmonics at low desk-scale sample rates.
pub fn toy_corpus(n_clips: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_clips)
        .map(|i| {
            let f0 = rng.gen_range(120.0f64..600.0).min(sample_rate as f64 / 4.5);
            let vibrato = rng.gen_range(4.0..7.0);
            let cents = rng.gen_range(10.0..40.0);
            harmonic_clip(seconds, sample_rate, f0, 12, vibrato, cents, seed ^ (i as u64) << 17)
        })
        .collect()
}

/// Zero every full-signal FFT bin at or above `cutoff_hz` — an idealized
/// band-limited degradation.
pub fn brickwall_lowpass(samples: &[f32], sample_rate: u32, cutoff_hz: f64) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if cutoff_hz <= 0.0 || cutoff_hz > sample_rate as f64 / 2.0 {
        return Err(Error::InvalidInput(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}]",
            sample_rate as f64 / 2.0
        )));
    }
    let n = samples.len() + samples.len() % 2; // even length for the r2c plan
    let mut planner = RealFftPlanner::<f64>::new();
    let r2c = planner.plan_fft_forward(n);
    let c2r = planner.plan_fft_inverse(n);
    let mut time: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    time.resize(n, 0.0);
    let mut spec = r2c.make_output_vec();
    r2c.process(&mut time, &mut spec)
        .map_err(|e| Error::Numeric(format!("lowpass fft failed: {e}")))?;
    let bin_hz = sample_rate as f64 / n as f64;
    for (k, c) in spec.iter_mut().enumerate() {
        if k as f64 * bin_hz >= cutoff_hz {
            *c = num_complex::Complex::new(0.0, 0.0);
        }
    }
    let mut back = c2r.make_output_vec();
    c2r.process(&mut spec, &mut back)
        .map_err(|e| Error::Numeric(format!("lowpass ifft failed: {e}")))?;
    Ok(back[..samples.len()].iter().map(|&v| (v / n as f64) as f32).collect())
}
