//! End-to-end synthesis paths.
//!
//! The full pipeline samples a normalized linear spectrogram from the
//! diffusion estimator conditioned on a mel spectrogram, then renders audio
//! with the 2-D vocoder.  The baseline path feeds the mel spectrogram to the
//! 1-D vocoder directly.  Checkpoint loaders rebuild models from the stored
//! configuration and refuse to run when the active configuration disagrees
//! with the one the checkpoint was trained under.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::FeatureStats;
use crate::diffusion::{dpmpp_2m_sample, NoiseSchedule, SamplerPlan};
use crate::error::{Error, Result};
use crate::lse::{LseConfig, LseNet};
use crate::nn::{array2_to_tensor, tensor_to_array2, DEVICE};
use crate::spectral::{SpectralAnalyzer, SpectralConfig};
use crate::training::{ensure_config_matches, load_checkpoint, VocoderStage};
use crate::vocoder::{BaselineVocos, BaselineVocosConfig, Vocos2D, Vocos2DConfig};

/// Synthesis result: the waveform plus, for the full pipeline, the estimated
/// linear spectrogram in raw (denormalized) log-amplitude units.
pub struct SynthOutput {
    pub wave: Vec<f32>,
    pub linear: Option<Array2<f32>>,
}

fn noise_like(rows: usize, cols: usize, scale: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * scale as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, (rows, cols), &DEVICE)?)
}

/// Mel -> linear-spectrogram diffusion -> 2-D vocoder.
///
/// `mel` is a raw log-mel spectrogram `[n_mel, T]`.  The conditioning is
/// normalized with the corpus statistics, time is padded up to a multiple of
/// the patch length with the normalized silence floor, and the sampled
/// linear spectrogram is cropped back to `T` before vocoding, so the output
/// holds exactly `T * hop` samples.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_with_lse(
    analyzer: &SpectralAnalyzer,
    lse_cfg: &LseConfig,
    net: &LseNet,
    vocoder: &Vocos2D,
    stats: &FeatureStats,
    mel: &Array2<f32>,
    plan: &SamplerPlan,
    seed: u64,
) -> Result<SynthOutput> {
    let (n_mel, frames) = mel.dim();
    if n_mel != lse_cfg.n_mel {
        return Err(Error::InvalidInput(format!(
            "mel spectrogram has {n_mel} bands, estimator expects {}",
            lse_cfg.n_mel
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidInput("empty mel spectrogram".into()));
    }
    let padded = frames.div_ceil(lse_cfg.patch_t) * lse_cfg.patch_t;
    let floor_norm =
        (analyzer.config().loudness_floor() - stats.mel.mean) / stats.mel.std;
    let mut mel_norm = Array2::from_elem((n_mel, padded), floor_norm);
    {
        let mut view = mel_norm.slice_mut(ndarray::s![.., ..frames]);
        view.assign(mel);
        view.mapv_inplace(|v| (v - stats.mel.mean) / stats.mel.std);
    }
    let cond = array2_to_tensor(&mel_norm)?;

    let sigma_max = plan.sigmas[0];
    let x_init = noise_like(lse_cfg.n_linear, padded, sigma_max, seed)?;
    let sampled = dpmpp_2m_sample(net, plan, &x_init, &cond)?;
    let sampled = sampled.to_dtype(DType::F32)?.narrow(1, 0, frames)?;

    let wave_t = vocoder.forward(&sampled)?;
    let wave = wave_t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;

    let mut linear = tensor_to_array2(&sampled)?;
    linear.mapv_inplace(|v| v * stats.linear.std + stats.linear.mean);
    Ok(SynthOutput { wave, linear: Some(linear) })
}

/// Mel -> 1-D vocoder, the bandwidth-limited reference path.
pub fn synthesize_baseline(
    baseline_cfg: &BaselineVocosConfig,
    vocoder: &BaselineVocos,
    stats: &FeatureStats,
    mel: &Array2<f32>,
) -> Result<SynthOutput> {
    let (n_mel, frames) = mel.dim();
    if n_mel != baseline_cfg.n_bands {
        return Err(Error::InvalidInput(format!(
            "mel spectrogram has {n_mel} bands, vocoder expects {}",
            baseline_cfg.n_bands
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidInput("empty mel spectrogram".into()));
    }
    let mut mel_norm = mel.clone();
    mel_norm.mapv_inplace(|v| (v - stats.mel.mean) / stats.mel.std);
    let wave_t = vocoder.forward(&array2_to_tensor(&mel_norm)?)?;
    let wave = wave_t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(SynthOutput { wave, linear: None })
}

// ---------------------------------------------------------------------------
// Checkpoint loading
// ---------------------------------------------------------------------------

fn stage_of(config: &serde_json::Value) -> String {
    config
        .get("stage")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>")
        .to_string()
}

/// Load the diffusion estimator from a checkpoint directory, refusing when
/// the stored model configuration differs from `expected`.  Synthesis uses
/// the smoothed (EMA) weights.
pub fn load_lse_for_synth(dir: &Path, expected: &LseConfig) -> Result<(LseNet, NoiseSchedule)> {
    let ckpt = load_checkpoint(dir)?;
    let stage = stage_of(&ckpt.config);
    if stage != "lse" {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {stage} checkpoint, expected the spectrogram estimator",
            dir.display()
        )));
    }
    let stored = ckpt.config.get("model").cloned().unwrap_or(serde_json::Value::Null);
    ensure_config_matches(&serde_json::to_value(expected)?, &stored)?;
    let net = LseNet::new(expected, DType::F32, 0)?;
    net.vars().load(&ckpt.ema)?;
    Ok((net, NoiseSchedule::new(NoiseSchedule::DEFAULT_STEPS)?))
}

pub enum VocoderBundle {
    Vocos2d(Vocos2D),
    Baseline(BaselineVocos),
}

/// Load a vocoder generator (EMA weights) from a checkpoint directory,
/// checking stage, generator configuration, and the feature statistics it
/// was normalized with.
pub fn load_vocoder_for_synth(
    dir: &Path,
    stage: VocoderStage,
    v2_cfg: &Vocos2DConfig,
    base_cfg: &BaselineVocosConfig,
    spectral: &SpectralConfig,
    expected_stats: &serde_json::Value,
) -> Result<VocoderBundle> {
    let ckpt = load_checkpoint(dir)?;
    let want = serde_json::to_value(stage)?.as_str().unwrap_or_default().to_string();
    let got = stage_of(&ckpt.config);
    if got != want {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {got} checkpoint, expected {want}",
            dir.display()
        )));
    }
    let stored_gen = ckpt.config.get("generator").cloned().unwrap_or(serde_json::Value::Null);
    let expected_gen = match stage {
        VocoderStage::Vocos2d => serde_json::to_value(v2_cfg)?,
        VocoderStage::VocosBaseline => serde_json::to_value(base_cfg)?,
    };
    ensure_config_matches(&expected_gen, &stored_gen)?;
    let stored_stats = ckpt.config.get("stats").cloned().unwrap_or(serde_json::Value::Null);
    ensure_config_matches(expected_stats, &stored_stats)?;
    let bundle = match stage {
        VocoderStage::Vocos2d => {
            let net = Vocos2D::new(v2_cfg, spectral, 0)?;
            net.vars().load(&ckpt.ema)?;
            VocoderBundle::Vocos2d(net)
        }
        VocoderStage::VocosBaseline => {
            let net = BaselineVocos::new(base_cfg, spectral, 0)?;
            net.vars().load(&ckpt.ema)?;
            VocoderBundle::Baseline(net)
        }
    };
    Ok(bundle)
}
