//! Sectioned TOML configuration for the command-line front end.
//!
//! Every section mirrors one module's free parameters; derived quantities
//! (hop length, linear-bin count, FFT bins) always come from the `[spectral]`
//! section so the pieces cannot drift apart.  Unknown keys anywhere in the
//! document are rejected.  The defaults are the full-scale reference values;
//! desk-scale runs override them on the command line or with a small file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{ClassifierConfig, InputKind};
use crate::lse::LseConfig;
use crate::spectral::SpectralConfig;
use crate::training::{LseRunConfig, OptimConfig, VocoderRunConfig};
use crate::vocoder::{BaselineVocosConfig, DaConfig, LossWeights, MrdConfig, Vocos2DConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralSection {
    pub sample_rate: u32,
    pub frames_per_second: u32,
    pub fft_size: usize,
    pub window_size: usize,
    pub n_mel: usize,
    pub mel_f_max: f64,
    pub amplitude_floor: f32,
}

impl Default for SpectralSection {
    fn default() -> Self {
        SpectralSection {
            sample_rate: 44_100,
            frames_per_second: 50,
            fft_size: 2048,
            window_size: 2048,
            n_mel: 80,
            mel_f_max: 8000.0,
            amplitude_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LseSection {
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch_f: usize,
    pub patch_t: usize,
    pub ffn_mult: usize,
}

impl Default for LseSection {
    fn default() -> Self {
        let d = LseConfig::default();
        LseSection {
            hidden: d.hidden,
            n_blocks: d.n_blocks,
            n_heads: d.n_heads,
            patch_f: d.patch_f,
            patch_t: d.patch_t,
            ffn_mult: d.ffn_mult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vocos2DSection {
    pub hidden: usize,
    pub n_blocks: usize,
    pub expand_mult: usize,
    pub kernel: usize,
    pub freq_grid: usize,
    pub head_kernel: usize,
    pub head_stride: usize,
}

impl Default for Vocos2DSection {
    fn default() -> Self {
        let d = Vocos2DConfig::default();
        Vocos2DSection {
            hidden: d.hidden,
            n_blocks: d.n_blocks,
            expand_mult: d.expand_mult,
            kernel: d.kernel,
            freq_grid: d.freq_grid,
            head_kernel: d.head_kernel,
            head_stride: d.head_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub hidden: usize,
    pub n_blocks: usize,
    pub expand_mult: usize,
    pub kernel: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineVocosConfig::default();
        BaselineSection {
            hidden: d.hidden,
            n_blocks: d.n_blocks,
            expand_mult: d.expand_mult,
            kernel: d.kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub mixed_fp16: bool,
}

impl OptimSection {
    fn from_optim(o: OptimConfig) -> Self {
        OptimSection {
            lr_init: o.lr_init,
            beta1: o.beta1,
            beta2: o.beta2,
            weight_decay: o.weight_decay,
            eps: o.eps,
            mixed_fp16: o.mixed_fp16,
        }
    }

    pub fn to_optim(&self) -> OptimConfig {
        OptimConfig {
            lr_init: self.lr_init,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
            mixed_fp16: self.mixed_fp16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLseSection {
    pub steps: usize,
    pub batch: usize,
    pub plateau_window: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainLseSection {
    fn default() -> Self {
        TrainLseSection {
            steps: 1_200_000,
            batch: 18,
            plateau_window: 150_000,
            checkpoint_every: 10_000,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainVocoderSection {
    pub steps: usize,
    pub segment_seconds: f64,
    pub decay_interval: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainVocoderSection {
    fn default() -> Self {
        TrainVocoderSection {
            steps: 900_000,
            segment_seconds: 2.0,
            decay_interval: 1000,
            checkpoint_every: 10_000,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaSection {
    pub max_gain_db: f64,
    pub max_shift: usize,
}

impl Default for DaSection {
    fn default() -> Self {
        let d = DaConfig::default();
        DaSection { max_gain_db: d.max_gain_db, max_shift: d.max_shift }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrdSection {
    pub resolutions: Vec<(usize, usize)>,
    pub channels: usize,
}

impl Default for MrdSection {
    fn default() -> Self {
        let d = MrdConfig::default();
        MrdSection { resolutions: d.resolutions, channels: d.channels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub mel: f64,
    pub feature_matching: f64,
    pub adversarial: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossWeights::default();
        LossSection { mel: d.mel, feature_matching: d.feature_matching, adversarial: d.adversarial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub blocks_per_stage: [usize; 4],
    pub widths: [usize; 4],
    pub downsampling_ratios: [usize; 4],
    pub dw_kernel: usize,
    pub mlp_mult: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub crop_seconds: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let d = ClassifierConfig::new(InputKind::RawLogMagnitude, 1, 0.0);
        ClassifierSection {
            blocks_per_stage: d.blocks_per_stage,
            widths: d.widths,
            downsampling_ratios: d.downsampling_ratios,
            dw_kernel: d.dw_kernel,
            mlp_mult: d.mlp_mult,
            steps: 500,
            batch: 4,
            lr: 3e-4,
            weight_decay: 1e-4,
            crop_seconds: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Sampling ladder length for synthesis.
    pub steps: usize,
    /// Curvature of the noise-level ladder.
    pub rho: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 32, rho: 7.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Root for manifests, normalized audio, and feature caches.
    pub data_root: PathBuf,
    /// Root for training checkpoints.
    pub checkpoints_root: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { data_root: "data".into(), checkpoints_root: "checkpoints".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub spectral: SpectralSection,
    pub lse: LseSection,
    pub vocos2d: Vocos2DSection,
    pub baseline: BaselineSection,
    pub optim_lse: OptimSection,
    pub optim_vocoder: OptimSection,
    pub train_lse: TrainLseSection,
    pub train_vocoder: TrainVocoderSection,
    pub da: DaSection,
    pub mrd: MrdSection,
    pub loss: LossSection,
    pub classifier: ClassifierSection,
    pub sampler: SamplerSection,
    pub paths: PathsSection,
    pub run: RunSection,
}

impl Default for OptimSection {
    fn default() -> Self {
        // The two stages carry different defaults; the bare default is the
        // LSE one and `GlobalConfig::default` overrides the vocoder section.
        OptimSection::from_optim(OptimConfig::lse_default())
    }
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            spectral: SpectralSection::default(),
            lse: LseSection::default(),
            vocos2d: Vocos2DSection::default(),
            baseline: BaselineSection::default(),
            optim_lse: OptimSection::default(),
            optim_vocoder: OptimSection::from_optim(OptimConfig::vocoder_default()),
            train_lse: TrainLseSection::default(),
            train_vocoder: TrainVocoderSection::default(),
            da: DaSection::default(),
            mrd: MrdSection::default(),
            loss: LossSection::default(),
            classifier: ClassifierSection::default(),
            sampler: SamplerSection::default(),
            paths: PathsSection::default(),
            run: RunSection::default(),
        }
    }
}

impl GlobalConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: GlobalConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn standard() -> Self {
        let mut cfg = GlobalConfig::default();
        cfg.apply_env();
        cfg
    }

    /// Root-path overrides from the environment; flags still win over these.
    fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("LSEVOC_DATA_ROOT") {
            if !v.is_empty() {
                self.paths.data_root = v.into();
            }
        }
        if let Ok(v) = std::env::var("LSEVOC_CHECKPOINTS_ROOT") {
            if !v.is_empty() {
                self.paths.checkpoints_root = v.into();
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spectral_config()?;
        self.lse_config()?.validate()?;
        self.vocos2d_config()?.validate()?;
        self.baseline_config()?.validate()?;
        self.optim_lse.to_optim().validate()?;
        self.optim_vocoder.to_optim().validate()?;
        self.mrd_config().validate()?;
        if self.sampler.steps == 0 || self.sampler.rho <= 0.0 {
            return Err(Error::Config("sampler.steps and sampler.rho must be positive".into()));
        }
        if self.train_vocoder.segment_seconds <= 0.0 {
            return Err(Error::Config("train_vocoder.segment_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn spectral_config(&self) -> Result<SpectralConfig> {
        SpectralConfig::new(
            self.spectral.sample_rate,
            self.spectral.frames_per_second,
            self.spectral.fft_size,
            self.spectral.window_size,
            self.spectral.n_mel,
            self.spectral.mel_f_max,
            self.spectral.amplitude_floor,
        )
    }

    pub fn lse_config(&self) -> Result<LseConfig> {
        let sp = self.spectral_config()?;
        Ok(LseConfig {
            n_mel: sp.n_mel,
            n_linear: sp.n_linear,
            hidden: self.lse.hidden,
            n_blocks: self.lse.n_blocks,
            n_heads: self.lse.n_heads,
            patch_f: self.lse.patch_f,
            patch_t: self.lse.patch_t,
            ffn_mult: self.lse.ffn_mult,
        })
    }

    pub fn vocos2d_config(&self) -> Result<Vocos2DConfig> {
        let sp = self.spectral_config()?;
        Ok(Vocos2DConfig {
            n_linear: sp.n_linear,
            hidden: self.vocos2d.hidden,
            n_blocks: self.vocos2d.n_blocks,
            expand_mult: self.vocos2d.expand_mult,
            kernel: self.vocos2d.kernel,
            freq_grid: self.vocos2d.freq_grid,
            head_kernel: self.vocos2d.head_kernel,
            head_stride: self.vocos2d.head_stride,
            n_fft_bins: sp.n_fft_bins(),
            mag_clamp_ln: Vocos2DConfig::default().mag_clamp_ln,
        })
    }

    pub fn baseline_config(&self) -> Result<BaselineVocosConfig> {
        let sp = self.spectral_config()?;
        Ok(BaselineVocosConfig {
            n_bands: sp.n_mel,
            hidden: self.baseline.hidden,
            n_blocks: self.baseline.n_blocks,
            expand_mult: self.baseline.expand_mult,
            kernel: self.baseline.kernel,
            n_fft_bins: sp.n_fft_bins(),
            mag_clamp_ln: BaselineVocosConfig::default().mag_clamp_ln,
        })
    }

    pub fn da_config(&self) -> DaConfig {
        DaConfig { max_gain_db: self.da.max_gain_db, max_shift: self.da.max_shift }
    }

    pub fn mrd_config(&self) -> MrdConfig {
        MrdConfig { resolutions: self.mrd.resolutions.clone(), channels: self.mrd.channels }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mel: self.loss.mel,
            feature_matching: self.loss.feature_matching,
            adversarial: self.loss.adversarial,
        }
    }

    pub fn classifier_config(&self, kind: InputKind) -> Result<ClassifierConfig> {
        let sp = self.spectral_config()?;
        let n_bins = match kind {
            InputKind::RawLogMagnitude => sp.n_fft_bins(),
            InputKind::LinearFilterbank => sp.n_linear,
        };
        Ok(ClassifierConfig {
            input_kind: kind,
            n_bins,
            blocks_per_stage: self.classifier.blocks_per_stage,
            widths: self.classifier.widths,
            downsampling_ratios: self.classifier.downsampling_ratios,
            dw_kernel: self.classifier.dw_kernel,
            mlp_mult: self.classifier.mlp_mult,
            pad_value: sp.loudness_floor(),
        })
    }

    pub fn lse_run(&self, steps: Option<usize>) -> LseRunConfig {
        LseRunConfig {
            steps: steps.unwrap_or(self.train_lse.steps),
            batch: self.train_lse.batch,
            seed: self.run.seed,
            plateau_window: self.train_lse.plateau_window,
            checkpoint_every: self.train_lse.checkpoint_every,
            log_every: self.train_lse.log_every,
        }
    }

    pub fn vocoder_run(&self, steps: Option<usize>) -> VocoderRunConfig {
        VocoderRunConfig {
            steps: steps.unwrap_or(self.train_vocoder.steps),
            seed: self.run.seed,
            decay_interval: self.train_vocoder.decay_interval,
            checkpoint_every: self.train_vocoder.checkpoint_every,
            log_every: self.train_vocoder.log_every,
        }
    }

    /// Vocoder training segment length in samples, rounded down to a whole
    /// number of hops so segments stay frame-aligned.
    pub fn segment_samples(&self) -> Result<usize> {
        let sp = self.spectral_config()?;
        let raw = (self.train_vocoder.segment_seconds * sp.sample_rate as f64) as usize;
        let hops = (raw / sp.hop).max(1);
        Ok(hops * sp.hop)
    }
}

/// One line per configuration key for `--help`: dotted path, default, and
/// whether the default is anchored to the reference system description
/// (`[reference]`) or is a choice made by this implementation (`[chosen]`).
pub fn describe_keys() -> String {
    const KEYS: &[(&str, &str, &str)] = &[
        ("spectral.sample_rate", "44100", "reference"),
        ("spectral.frames_per_second", "50", "reference"),
        ("spectral.fft_size", "2048", "reference"),
        ("spectral.window_size", "2048", "reference"),
        ("spectral.n_mel", "80", "reference"),
        ("spectral.mel_f_max", "8000", "reference"),
        ("spectral.amplitude_floor", "1e-5", "chosen"),
        ("lse.hidden", "320", "reference"),
        ("lse.n_blocks", "8", "reference"),
        ("lse.n_heads", "8", "chosen"),
        ("lse.patch_f", "8", "reference"),
        ("lse.patch_t", "2", "reference"),
        ("lse.ffn_mult", "4", "chosen"),
        ("vocos2d.hidden", "256", "chosen"),
        ("vocos2d.n_blocks", "24", "reference"),
        ("vocos2d.expand_mult", "3", "chosen"),
        ("vocos2d.kernel", "7", "chosen"),
        ("vocos2d.freq_grid", "37", "chosen"),
        ("vocos2d.head_kernel", "56", "chosen"),
        ("vocos2d.head_stride", "28", "chosen"),
        ("baseline.hidden", "512", "reference"),
        ("baseline.n_blocks", "10", "reference"),
        ("baseline.expand_mult", "3", "chosen"),
        ("baseline.kernel", "7", "chosen"),
        ("optim_lse.lr_init", "1e-4", "chosen"),
        ("optim_lse.beta1", "0.9", "chosen"),
        ("optim_lse.beta2", "0.999", "chosen"),
        ("optim_lse.weight_decay", "0.01", "chosen"),
        ("optim_lse.eps", "1e-8", "chosen"),
        ("optim_lse.mixed_fp16", "true", "reference"),
        ("optim_vocoder.lr_init", "5e-4", "chosen"),
        ("optim_vocoder.beta1", "0.9", "chosen"),
        ("optim_vocoder.beta2", "0.999", "chosen"),
        ("optim_vocoder.weight_decay", "0.01", "chosen"),
        ("optim_vocoder.eps", "1e-8", "chosen"),
        ("optim_vocoder.mixed_fp16", "false", "reference"),
        ("train_lse.steps", "1200000", "reference"),
        ("train_lse.batch", "18", "reference"),
        ("train_lse.plateau_window", "150000", "reference"),
        ("train_lse.checkpoint_every", "10000", "chosen"),
        ("train_lse.log_every", "100", "chosen"),
        ("train_vocoder.steps", "900000", "reference"),
        ("train_vocoder.segment_seconds", "2.0", "chosen"),
        ("train_vocoder.decay_interval", "1000", "chosen"),
        ("train_vocoder.checkpoint_every", "10000", "chosen"),
        ("train_vocoder.log_every", "100", "chosen"),
        ("da.max_gain_db", "6", "reference"),
        ("da.max_shift", "882", "reference"),
        ("mrd.resolutions", "[[2048,512],[1024,256],[512,128]]", "chosen"),
        ("mrd.channels", "32", "chosen"),
        ("loss.mel", "45", "reference"),
        ("loss.feature_matching", "1", "chosen"),
        ("loss.adversarial", "1", "chosen"),
        ("classifier.blocks_per_stage", "[2,2,2,2]", "chosen"),
        ("classifier.widths", "[32,64,96,128]", "chosen"),
        ("classifier.downsampling_ratios", "[4,4,2,2]", "reference"),
        ("classifier.dw_kernel", "7", "chosen"),
        ("classifier.mlp_mult", "4", "chosen"),
        ("classifier.steps", "500", "chosen"),
        ("classifier.batch", "4", "chosen"),
        ("classifier.lr", "3e-4", "chosen"),
        ("classifier.weight_decay", "1e-4", "chosen"),
        ("classifier.crop_seconds", "4.0", "chosen"),
        ("sampler.steps", "32", "reference"),
        ("sampler.rho", "7.0", "chosen"),
        ("paths.data_root", "data", "chosen"),
        ("paths.checkpoints_root", "checkpoints", "chosen"),
        ("run.seed", "17", "chosen"),
    ];
    let mut out = String::from("Configuration keys (TOML, section.key = default [provenance]):\n");
    for (key, default, tag) in KEYS {
        out.push_str(&format!("  {key} = {default}  [{tag}]\n"));
    }
    out.push_str(
        "Roots can also be set with LSEVOC_DATA_ROOT and LSEVOC_CHECKPOINTS_ROOT;\n\
         command-line flags override both the file and the environment.\n",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = GlobalConfig::standard();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: GlobalConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train_lse.steps, 1_200_000);
        assert_eq!(cfg.train_lse.batch, 18);
        assert_eq!(cfg.train_vocoder.steps, 900_000);
        assert_eq!(cfg.sampler.steps, 32);
        let sp = cfg.spectral_config().unwrap();
        assert_eq!(sp.n_linear, 592);
        assert_eq!(cfg.lse_config().unwrap().n_linear, 592);
        assert_eq!(cfg.vocos2d_config().unwrap().n_fft_bins, 1025);
        assert_eq!(cfg.baseline_config().unwrap().n_bands, 80);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let top: std::result::Result<GlobalConfig, _> = toml::from_str("typo_section = 3");
        assert!(top.is_err());
        let nested: std::result::Result<GlobalConfig, _> =
            toml::from_str("[spectral]\nsample_rate = 44100\nbogus = 1\n");
        assert!(nested.is_err());
        let ok: GlobalConfig = toml::from_str("[spectral]\nsample_rate = 22050\n").unwrap();
        assert_eq!(ok.spectral.sample_rate, 22050);
        // Untouched sections keep their defaults.
        assert_eq!(ok.train_lse.batch, 18);
    }

    #[test]
    fn every_serialized_key_is_documented() {
        let cfg = GlobalConfig::standard();
        let text = toml::to_string(&cfg).unwrap();
        let described = describe_keys();
        let mut section = String::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                section = name.trim_end_matches(']').to_string();
            } else if let Some((key, _)) = line.split_once('=') {
                let dotted = format!("{section}.{}", key.trim());
                assert!(
                    described.contains(&format!("  {dotted} = ")),
                    "config key {dotted} missing from describe_keys()"
                );
            }
        }
    }

    #[test]
    fn derived_fields_follow_the_spectral_section() {
        let text = "[spectral]\nsample_rate = 800\nfft_size = 64\nwindow_size = 64\n\
                    n_mel = 6\nmel_f_max = 300.0\n";
        let cfg: GlobalConfig = toml::from_str(text).unwrap();
        let sp = cfg.spectral_config().unwrap();
        assert_eq!(cfg.lse_config().unwrap().n_linear, sp.n_linear);
        assert_eq!(cfg.vocos2d_config().unwrap().n_fft_bins, sp.n_fft_bins());
        assert_eq!(cfg.baseline_config().unwrap().n_bands, 6);
        let seg = cfg.segment_samples().unwrap();
        assert_eq!(seg % sp.hop, 0);
    }
}
