//! Waveform synthesis from log-amplitude spectrogram features.
//!
//! Two generators share the same differentiable iSTFT tail: the 2-D
//! convolutional generator that consumes 592-band linear spectrograms on a
//! 37-position frequency grid, and a 1-D baseline that consumes features
//! frame-by-frame.  Both emit per-frame log-magnitude and phase for all 1025
//! FFT bins and synthesize audio by overlap-add.  Training support lives
//! here too: the differentiable augmentation chain (gain, circular shift,
//! phase rotation) applied identically to real and generated audio before
//! discrimination, the multi-resolution spectrogram discriminators, and the
//! hinge/feature-matching/mel losses.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    array2_to_tensor, depthwise_conv1d, depthwise_conv2d, phase_rotate, DiffStft, FftPlans,
    LayerNorm, Linear, VarInit, Vars, DEVICE,
};
use crate::spectral::{build_mel_filterbank, SpectralConfig};

// ---------------------------------------------------------------------------
// Configurations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocos2DConfig {
    pub n_linear: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    /// Expansion factor of the inverted bottleneck.
    pub expand_mult: usize,
    /// Depthwise kernel size (odd) along both grid axes.
    pub kernel: usize,
    /// Number of coarse frequency positions carried through the backbone.
    pub freq_grid: usize,
    /// Transposed-convolution kernel/stride unfolding the grid to FFT bins.
    pub head_kernel: usize,
    pub head_stride: usize,
    pub n_fft_bins: usize,
    /// Upper clamp for predicted log magnitudes before exponentiation.
    pub mag_clamp_ln: f64,
}

impl Default for Vocos2DConfig {
    fn default() -> Self {
        Vocos2DConfig {
            n_linear: 592,
            hidden: 256,
            n_blocks: 24,
            expand_mult: 3,
            kernel: 7,
            freq_grid: 37,
            head_kernel: 56,
            head_stride: 28,
            n_fft_bins: 1025,
            mag_clamp_ln: 100f64.ln(),
        }
    }
}

impl Vocos2DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("depthwise kernel must be odd".into()));
        }
        let covered = (self.freq_grid - 1) * self.head_stride + self.head_kernel;
        if covered < self.n_fft_bins {
            return Err(Error::Config(format!(
                "head covers only {covered} of {} FFT bins; widen the grid, kernel or stride",
                self.n_fft_bins
            )));
        }
        if self.hidden == 0 || self.n_blocks == 0 || self.expand_mult == 0 || self.freq_grid == 0 {
            return Err(Error::Config("vocoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineVocosConfig {
    /// Input feature bands per frame (mel bands for the reference baseline).
    pub n_bands: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub expand_mult: usize,
    pub kernel: usize,
    pub n_fft_bins: usize,
    pub mag_clamp_ln: f64,
}

impl Default for BaselineVocosConfig {
    fn default() -> Self {
        BaselineVocosConfig {
            n_bands: 80,
            hidden: 512,
            n_blocks: 10,
            expand_mult: 3,
            kernel: 7,
            n_fft_bins: 1025,
            mag_clamp_ln: 100f64.ln(),
        }
    }
}

impl BaselineVocosConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("depthwise kernel must be odd".into()));
        }
        if self.hidden == 0 || self.n_blocks == 0 || self.expand_mult == 0 || self.n_bands == 0 {
            return Err(Error::Config("vocoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// 2-D generator
// ---------------------------------------------------------------------------

/// ConvNeXt-style block on the `[freq_grid, T, C]` tensor.  The zero-init
/// per-channel gate makes the block an exact identity at initialization.
/// Every block also re-reads the raw input spectrogram through its own
/// per-frame shortcut, injected at the expanded stage.
pub struct BackboneBlock2D {
    dw_kernel: Var,
    dw_bias: Var,
    norm: LayerNorm,
    expand: Linear,
    shortcut: Linear,
    contract: Linear,
    gate: Var,
}

impl BackboneBlock2D {
    pub fn new(
        vars: &mut Vars,
        name: &str,
        cfg: &Vocos2DConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.hidden;
        let e = cfg.expand_mult * c;
        let k = cfg.kernel;
        let bound = 1.0 / ((k * k) as f64).sqrt();
        Ok(BackboneBlock2D {
            dw_kernel: vars.var(
                &format!("{name}.dw.weight"),
                (k, k, c),
                VarInit::Uniform { lo: -bound, hi: bound },
                rng,
            )?,
            dw_bias: vars.var(&format!("{name}.dw.bias"), c, VarInit::Zeros, rng)?,
            norm: LayerNorm::new(vars, &format!("{name}.norm"), c, rng)?,
            expand: Linear::new(vars, &format!("{name}.expand"), c, e, VarInit::KaimingUniform, rng)?,
            shortcut: Linear::new(vars, &format!("{name}.shortcut"), cfg.n_linear, e, VarInit::KaimingUniform, rng)?,
            contract: Linear::new(vars, &format!("{name}.contract"), e, c, VarInit::KaimingUniform, rng)?,
            gate: vars.var(&format!("{name}.gate"), c, VarInit::Zeros, rng)?,
        })
    }

    /// `x` is `[F, T, C]`; `frames` is the raw `[T, n_linear]` input.
    pub fn forward(&self, x: &Tensor, frames: &Tensor) -> Result<Tensor> {
        let h = depthwise_conv2d(x, self.dw_kernel.as_tensor(), Some(self.dw_bias.as_tensor()))?;
        let h = self.norm.forward(&h)?;
        let h = self.expand.forward(&h)?;
        let sc = self.shortcut.forward(frames)?.unsqueeze(0)?; // [1, T, E]
        let h = h.broadcast_add(&sc)?.gelu()?;
        let h = self.contract.forward(&h)?;
        let gate = self.gate.as_tensor().to_dtype(x.dtype())?;
        Ok(x.broadcast_add(&h.broadcast_mul(&gate)?)?)
    }
}

/// Linear-spectrogram to waveform generator on a 2-D time-frequency grid.
pub struct Vocos2D {
    pub cfg: Vocos2DConfig,
    vars: Vars,
    stem: Linear,
    freq_emb: Var,
    stem_norm: LayerNorm,
    blocks: Vec<BackboneBlock2D>,
    head_norm: LayerNorm,
    head_w: Var,
    head_b: Var,
    istft: DiffStft,
}

impl Vocos2D {
    pub fn new(cfg: &Vocos2DConfig, spectral: &SpectralConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if spectral.n_fft_bins() != cfg.n_fft_bins {
            return Err(Error::Config(format!(
                "fft bins mismatch: generator {} vs dsp {}",
                cfg.n_fft_bins,
                spectral.n_fft_bins()
            )));
        }
        if spectral.n_linear != cfg.n_linear {
            return Err(Error::Config(format!(
                "linear band mismatch: generator {} vs dsp {}",
                cfg.n_linear, spectral.n_linear
            )));
        }
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = cfg.hidden;
        let stem = Linear::new(&mut vars, "stem", cfg.n_linear, c, VarInit::KaimingUniform, rng)?;
        let freq_emb =
            vars.var("freq_emb", (cfg.freq_grid, c), VarInit::Randn { std: 0.02 }, rng)?;
        let stem_norm = LayerNorm::new(&mut vars, "stem_norm", c, rng)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| BackboneBlock2D::new(&mut vars, &format!("block.{i:02}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = LayerNorm::new(&mut vars, "head_norm", c, rng)?;
        let head_bound = 1.0 / ((c * cfg.head_kernel) as f64).sqrt();
        let head_w = vars.var(
            "head.weight",
            (c, 2, cfg.head_kernel, 1),
            VarInit::Uniform { lo: -head_bound, hi: head_bound },
            rng,
        )?;
        let head_b = vars.var("head.bias", (1, 2, 1, 1), VarInit::Zeros, rng)?;
        let istft = DiffStft::new(spectral.fft_size, spectral.hop)?;
        Ok(Vocos2D {
            cfg: cfg.clone(),
            vars,
            stem,
            freq_emb,
            stem_norm,
            blocks,
            head_norm,
            head_w,
            head_b,
            istft,
        })
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    /// Normalized log-amplitude `[n_linear, T]` -> waveform `[T * hop]`.
    pub fn forward(&self, lin_spec: &Tensor) -> Result<Tensor> {
        let (n_f, _t) = lin_spec.dims2()?;
        if n_f != self.cfg.n_linear {
            return Err(Error::InvalidInput(format!(
                "expected {} linear bands, got {n_f}",
                self.cfg.n_linear
            )));
        }
        let frames = lin_spec.t()?.contiguous()?; // [T, n_linear]
        let stem = self.stem.forward(&frames)?; // [T, C]
        // Broadcast each frame vector uniformly over the frequency grid and
        // let the learned grid embedding break the symmetry.
        let x = stem.unsqueeze(0)?.broadcast_add(
            &self.freq_emb.as_tensor().to_dtype(stem.dtype())?.unsqueeze(1)?,
        )?; // [F, T, C]
        let mut x = self.stem_norm.forward(&x)?;
        for block in &self.blocks {
            x = block.forward(&x, &frames)?;
        }
        let x = self.head_norm.forward(&x)?;

        // [F, T, C] -> [T, C, F, 1]; the transposed convolution unfolds the
        // F grid positions to (F-1)*stride + kernel frequency bins.  T rides
        // in the batch dimension so the stride never touches time.
        let (f, t, c) = x.dims3()?;
        let h = x.permute((1, 2, 0))?.reshape((t, c, f, 1))?.contiguous()?;
        let w = self.head_w.as_tensor().to_dtype(h.dtype())?;
        let y = h.conv_transpose2d(&w, 0, 0, self.cfg.head_stride, 1)?;
        let y = y.broadcast_add(&self.head_b.as_tensor().to_dtype(h.dtype())?)?;
        let y = y.narrow(2, 0, self.cfg.n_fft_bins)?; // [T, 2, bins, 1]
        let m = y.narrow(1, 0, 1)?.reshape((t, self.cfg.n_fft_bins))?;
        let phi = y.narrow(1, 1, 1)?.reshape((t, self.cfg.n_fft_bins))?;
        spectrum_to_wave(&self.istft, &m, &phi, self.cfg.mag_clamp_ln)
    }
}

/// Shared head tail: clamp and exponentiate log magnitudes, combine with
/// phase, inverse-transform.
fn spectrum_to_wave(istft: &DiffStft, m: &Tensor, phi: &Tensor, clamp_ln: f64) -> Result<Tensor> {
    let clamp = Tensor::full(clamp_ln, m.shape(), &DEVICE)?.to_dtype(m.dtype())?;
    let mag = m.minimum(&clamp)?.exp()?;
    let re = (mag.clone() * phi.cos()?)?;
    let im = (mag * phi.sin()?)?;
    let spec = Tensor::cat(&[re, im], 1)?;
    istft.synthesize(&spec)
}

// ---------------------------------------------------------------------------
// 1-D baseline generator
// ---------------------------------------------------------------------------

struct BaselineBlock {
    dw_kernel: Var,
    dw_bias: Var,
    norm: LayerNorm,
    expand: Linear,
    contract: Linear,
    gate: Var,
}

impl BaselineBlock {
    fn new(
        vars: &mut Vars,
        name: &str,
        cfg: &BaselineVocosConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.hidden;
        let bound = 1.0 / (cfg.kernel as f64).sqrt();
        Ok(BaselineBlock {
            dw_kernel: vars.var(
                &format!("{name}.dw.weight"),
                (cfg.kernel, c),
                VarInit::Uniform { lo: -bound, hi: bound },
                rng,
            )?,
            dw_bias: vars.var(&format!("{name}.dw.bias"), c, VarInit::Zeros, rng)?,
            norm: LayerNorm::new(vars, &format!("{name}.norm"), c, rng)?,
            expand: Linear::new(vars, &format!("{name}.expand"), c, cfg.expand_mult * c, VarInit::KaimingUniform, rng)?,
            contract: Linear::new(vars, &format!("{name}.contract"), cfg.expand_mult * c, c, VarInit::KaimingUniform, rng)?,
            gate: vars.var(&format!("{name}.gate"), c, VarInit::Zeros, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = depthwise_conv1d(x, self.dw_kernel.as_tensor(), Some(self.dw_bias.as_tensor()))?;
        let h = self.norm.forward(&h)?;
        let h = self.contract.forward(&self.expand.forward(&h)?.gelu()?)?;
        let gate = self.gate.as_tensor().to_dtype(x.dtype())?;
        Ok(x.broadcast_add(&h.broadcast_mul(&gate)?)?)
    }
}

/// Frame-wise 1-D baseline vocoder with the same iSTFT tail as the 2-D
/// generator.
pub struct BaselineVocos {
    pub cfg: BaselineVocosConfig,
    vars: Vars,
    stem: Linear,
    stem_norm: LayerNorm,
    blocks: Vec<BaselineBlock>,
    head_norm: LayerNorm,
    head: Linear,
    istft: DiffStft,
}

impl BaselineVocos {
    pub fn new(cfg: &BaselineVocosConfig, spectral: &SpectralConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if spectral.n_fft_bins() != cfg.n_fft_bins {
            return Err(Error::Config(format!(
                "fft bins mismatch: baseline {} vs dsp {}",
                cfg.n_fft_bins,
                spectral.n_fft_bins()
            )));
        }
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = cfg.hidden;
        let stem = Linear::new(&mut vars, "stem", cfg.n_bands, c, VarInit::KaimingUniform, rng)?;
        let stem_norm = LayerNorm::new(&mut vars, "stem_norm", c, rng)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| BaselineBlock::new(&mut vars, &format!("block.{i:02}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = LayerNorm::new(&mut vars, "head_norm", c, rng)?;
        let head = Linear::new(&mut vars, "head", c, 2 * cfg.n_fft_bins, VarInit::KaimingUniform, rng)?;
        let istft = DiffStft::new(spectral.fft_size, spectral.hop)?;
        Ok(BaselineVocos { cfg: cfg.clone(), vars, stem, stem_norm, blocks, head_norm, head, istft })
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    /// Log-amplitude features `[n_bands, T]` -> waveform `[T * hop]`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (n_b, _t) = features.dims2()?;
        if n_b != self.cfg.n_bands {
            return Err(Error::InvalidInput(format!(
                "expected {} feature bands, got {n_b}",
                self.cfg.n_bands
            )));
        }
        let frames = features.t()?.contiguous()?; // [T, n_bands]
        let mut x = self.stem_norm.forward(&self.stem.forward(&frames)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.head_norm.forward(&x)?;
        let y = self.head.forward(&x)?; // [T, 2 * bins]
        let bins = self.cfg.n_fft_bins;
        let m = y.narrow(1, 0, bins)?;
        let phi = y.narrow(1, bins, bins)?;
        spectrum_to_wave(&self.istft, &m, &phi, self.cfg.mag_clamp_ln)
    }
}

// ---------------------------------------------------------------------------
// Differentiable augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    /// Gain drawn uniformly from [-max_gain_db, +max_gain_db].
    pub max_gain_db: f64,
    /// Circular shift drawn uniformly from [0, max_shift] samples.
    pub max_shift: usize,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig { max_gain_db: 6.0, max_shift: 882 }
    }
}

/// One realization of the augmentation; drawn once per step phase and applied
/// to real and generated audio alike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaDraws {
    pub gain_db: f64,
    pub shift: usize,
    pub theta: f64,
}

impl DaDraws {
    pub fn sample(cfg: &DaConfig, rng: &mut ChaCha8Rng) -> Self {
        DaDraws {
            gain_db: rng.gen_range(-cfg.max_gain_db..=cfg.max_gain_db),
            shift: rng.gen_range(0..=cfg.max_shift),
            theta: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub const IDENTITY: DaDraws = DaDraws { gain_db: 0.0, shift: 0, theta: 0.0 };
}

/// Differentiable augmentation for fixed-length clips: scalar gain, circular
/// time shift, and a global phase rotation that preserves every FFT bin
/// magnitude exactly.
pub struct Augmenter {
    pub cfg: DaConfig,
    n: usize,
    plans: FftPlans,
}

impl Augmenter {
    pub fn new(cfg: DaConfig, clip_len: usize) -> Result<Self> {
        if cfg.max_shift >= clip_len {
            return Err(Error::Config(format!(
                "max_shift {} must be smaller than the clip length {clip_len}",
                cfg.max_shift
            )));
        }
        let plans = FftPlans::new(clip_len)?;
        Ok(Augmenter { cfg, n: clip_len, plans })
    }

    pub fn apply(&self, wave: &Tensor, draws: &DaDraws) -> Result<Tensor> {
        let n = wave.dims1()?;
        if n != self.n {
            return Err(Error::InvalidInput(format!(
                "augmenter built for {} samples, got {n}",
                self.n
            )));
        }
        let gain = 10f64.powf(draws.gain_db / 20.0);
        let mut x = wave.affine(gain, 0.0)?;
        if draws.shift > 0 {
            let s = draws.shift;
            x = Tensor::cat(&[x.narrow(0, n - s, s)?, x.narrow(0, 0, n - s)?], 0)?;
        }
        if draws.theta != 0.0 {
            x = phase_rotate(&x, &self.plans, draws.theta)?;
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// Multi-resolution discriminators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdConfig {
    /// `(fft_size, hop)` per sub-discriminator; windows equal the FFT size.
    pub resolutions: Vec<(usize, usize)>,
    pub channels: usize,
}

impl Default for MrdConfig {
    fn default() -> Self {
        MrdConfig {
            resolutions: vec![(2048, 512), (1024, 256), (512, 128)],
            channels: 32,
        }
    }
}

impl MrdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.len() < 2 {
            return Err(Error::Config(
                "discriminator set needs at least two STFT resolutions".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(fft, hop) in &self.resolutions {
            if !seen.insert((fft, hop)) {
                return Err(Error::Config(format!(
                    "duplicate discriminator resolution ({fft}, {hop})"
                )));
            }
        }
        if self.channels == 0 {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        Ok(())
    }
}

struct Conv2dLayer {
    w: Var,
    b: Var,
    pad_h: usize,
    pad_w: usize,
}

impl Conv2dLayer {
    fn new(
        vars: &mut Vars,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kh * kw) as f64).sqrt();
        Ok(Conv2dLayer {
            w: vars.var(
                &format!("{name}.weight"),
                (out_ch, in_ch, kh, kw),
                VarInit::Uniform { lo: -bound, hi: bound },
                rng,
            )?,
            b: vars.var(&format!("{name}.bias"), (1, out_ch, 1, 1), VarInit::Zeros, rng)?,
            pad_h: kh / 2,
            pad_w: kw / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Per-axis padding; the convolution itself runs unpadded because its
        // built-in padding is shared across axes.
        let x = x
            .pad_with_zeros(2, self.pad_h, self.pad_h)?
            .pad_with_zeros(3, self.pad_w, self.pad_w)?;
        let y = x.conv2d(self.w.as_tensor(), 0, 1, 1, 1)?;
        Ok(y.broadcast_add(self.b.as_tensor())?)
    }
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Subsample the time axis by 2, realizing an asymmetric (1, 2) stride.
fn halve_time(x: &Tensor) -> Result<Tensor> {
    let t = x.dim(3)?;
    let ids: Vec<u32> = (0..t).step_by(2).map(|i| i as u32).collect();
    let ids = Tensor::from_vec(ids, t.div_ceil(2), &DEVICE)?;
    Ok(x.index_select(&ids, 3)?)
}

pub struct DiscOutput {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

struct SubDiscriminator {
    stft: DiffStft,
    convs: Vec<Conv2dLayer>,
    post: Conv2dLayer,
}

impl SubDiscriminator {
    fn forward(&self, wave: &Tensor) -> Result<DiscOutput> {
        let mag = self.stft.magnitude(wave)?; // [T', bins]
        let (t, bins) = mag.dims2()?;
        let mut x = mag.t()?.reshape((1, 1, bins, t))?.contiguous()?;
        let mut features = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if (1..=3).contains(&i) {
                x = halve_time(&x)?;
            }
            x = leaky_relu(&x, 0.1)?;
            features.push(x.clone());
        }
        let score = self.post.forward(&x)?;
        features.push(score.clone());
        Ok(DiscOutput { score: score.flatten_all()?, features })
    }
}

/// One spectrogram discriminator per STFT resolution.
pub struct DiscriminatorSet {
    pub cfg: MrdConfig,
    vars: Vars,
    subs: Vec<SubDiscriminator>,
}

impl DiscriminatorSet {
    pub fn new(cfg: &MrdConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ch = cfg.channels;
        let mut subs = Vec::new();
        for (i, &(fft, hop)) in cfg.resolutions.iter().enumerate() {
            let p = format!("res.{i}");
            let convs = vec![
                Conv2dLayer::new(&mut vars, &format!("{p}.conv.0"), 1, ch, 3, 9, rng)?,
                Conv2dLayer::new(&mut vars, &format!("{p}.conv.1"), ch, ch, 3, 9, rng)?,
                Conv2dLayer::new(&mut vars, &format!("{p}.conv.2"), ch, ch, 3, 9, rng)?,
                Conv2dLayer::new(&mut vars, &format!("{p}.conv.3"), ch, ch, 3, 9, rng)?,
                Conv2dLayer::new(&mut vars, &format!("{p}.conv.4"), ch, ch, 3, 3, rng)?,
            ];
            let post = Conv2dLayer::new(&mut vars, &format!("{p}.post"), ch, 1, 3, 3, rng)?;
            subs.push(SubDiscriminator { stft: DiffStft::new(fft, hop)?, convs, post });
        }
        Ok(DiscriminatorSet { cfg: cfg.clone(), vars, subs })
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    pub fn forward(&self, wave: &Tensor) -> Result<Vec<DiscOutput>> {
        self.subs.iter().map(|s| s.forward(wave)).collect()
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mel: f64,
    pub feature_matching: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mel: 45.0, feature_matching: 1.0, adversarial: 1.0 }
    }
}

/// Scalar summaries of one generator step, for logs and tests.
#[derive(Debug, Clone, Copy)]
pub struct GanLossReport {
    pub mel_l1: f32,
    pub adversarial: f32,
    pub feature_matching: f32,
    pub total: f32,
}

/// Hinge loss for the discriminator phase, averaged over sub-discriminators.
pub fn discriminator_hinge(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::InvalidInput("mismatched discriminator outputs".into()));
    }
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake.iter()) {
        let lr = r.score.affine(-1.0, 1.0)?.relu()?.mean_all()?; // relu(1 - D(x))
        let lf = f.score.affine(1.0, 1.0)?.relu()?.mean_all()?; // relu(1 + D(G))
        let term = (lr + lf)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.unwrap().affine(1.0 / real.len() as f64, 0.0)?)
}

/// `-mean D(G)` averaged over sub-discriminators.
pub fn generator_adversarial(fake: &[DiscOutput]) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::InvalidInput("no discriminator outputs".into()));
    }
    let mut acc: Option<Tensor> = None;
    for f in fake {
        let term = f.score.mean_all()?.neg()?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.unwrap().affine(1.0 / fake.len() as f64, 0.0)?)
}

/// Mean L1 distance between real and fake feature maps, averaged over layers
/// and sub-discriminators.
pub fn feature_matching(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::InvalidInput("mismatched discriminator outputs".into()));
    }
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for (r, f) in real.iter().zip(fake.iter()) {
        for (fr, ff) in r.features.iter().zip(f.features.iter()) {
            let term = (fr - ff)?.abs()?.mean_all()?;
            count += 1;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.unwrap().affine(1.0 / count as f64, 0.0)?)
}

/// L1 distance between log-mel spectrograms of two waveforms, computed with
/// the main analysis configuration.
pub struct MelLoss {
    stft: DiffStft,
    fb_t: Tensor, // [bins, n_mel]
    amplitude_floor: f64,
}

impl MelLoss {
    pub fn new(spectral: &SpectralConfig) -> Result<Self> {
        let fb = build_mel_filterbank(spectral)?; // [n_mel, bins]
        let fb_t = array2_to_tensor(&fb)?.t()?.contiguous()?;
        Ok(MelLoss {
            stft: DiffStft::new(spectral.fft_size, spectral.hop)?,
            fb_t,
            amplitude_floor: spectral.amplitude_floor as f64,
        })
    }

    pub fn log_mel(&self, wave: &Tensor) -> Result<Tensor> {
        let mag = self.stft.magnitude(wave)?; // [T, bins]
        let mel = mag.matmul(&self.fb_t.to_dtype(mag.dtype())?)?; // [T, n_mel]
        let floor = Tensor::full(self.amplitude_floor, mel.shape(), &DEVICE)?.to_dtype(mel.dtype())?;
        Ok(mel.maximum(&floor)?.log()?)
    }

    pub fn forward(&self, fake: &Tensor, real: &Tensor) -> Result<Tensor> {
        let a = self.log_mel(fake)?;
        let b = self.log_mel(real)?;
        Ok((a - b)?.abs()?.mean_all()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_spectral() -> SpectralConfig {
        // 800 Hz at 50 fps: hop 16, fft 64 -> 33 bins.
        SpectralConfig::new(800, 50, 64, 64, 6, 300.0, 1e-5).unwrap()
    }

    fn tiny_vocos(spectral: &SpectralConfig) -> Vocos2DConfig {
        Vocos2DConfig {
            n_linear: spectral.n_linear,
            hidden: 8,
            n_blocks: 2,
            expand_mult: 2,
            kernel: 3,
            freq_grid: 5,
            head_kernel: 9,
            head_stride: 7,
            n_fft_bins: spectral.n_fft_bins(),
            mag_clamp_ln: 100f64.ln(),
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn head_geometry_is_validated() {
        let mut cfg = Vocos2DConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.freq_grid - 1) * cfg.head_stride + cfg.head_kernel, 1064);
        cfg.freq_grid = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generator_produces_hop_aligned_audio() {
        let sp = tiny_spectral();
        let cfg = tiny_vocos(&sp);
        let gen = Vocos2D::new(&cfg, &sp, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 6;
        let spec = Tensor::from_vec(randn(&mut rng, sp.n_linear * t), (sp.n_linear, t), &DEVICE).unwrap();
        let wave = gen.forward(&spec).unwrap();
        assert_eq!(wave.dims1().unwrap(), t * sp.hop);
        assert!(wave.to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backbone_block_2d_is_identity_at_init() {
        let sp = tiny_spectral();
        let cfg = tiny_vocos(&sp);
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = BackboneBlock2D::new(&mut vars, "b", &cfg, &mut rng).unwrap();
        let x_data = randn(&mut rng, cfg.freq_grid * 4 * cfg.hidden);
        let x = Tensor::from_vec(x_data.clone(), (cfg.freq_grid, 4, cfg.hidden), &DEVICE).unwrap();
        let frames = Tensor::from_vec(randn(&mut rng, 4 * cfg.n_linear), (4, cfg.n_linear), &DEVICE).unwrap();
        let y = block.forward(&x, &frames).unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(yv, x_data, "zero-gated block must be the exact identity");
    }

    #[test]
    fn baseline_produces_hop_aligned_audio() {
        let sp = tiny_spectral();
        let cfg = BaselineVocosConfig {
            n_bands: sp.n_mel,
            hidden: 12,
            n_blocks: 2,
            expand_mult: 2,
            kernel: 3,
            n_fft_bins: sp.n_fft_bins(),
            mag_clamp_ln: 100f64.ln(),
        };
        let gen = BaselineVocos::new(&cfg, &sp, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 5;
        let mel = Tensor::from_vec(randn(&mut rng, sp.n_mel * t), (sp.n_mel, t), &DEVICE).unwrap();
        let wave = gen.forward(&mel).unwrap();
        assert_eq!(wave.dims1().unwrap(), t * sp.hop);
    }

    #[test]
    fn augmentation_realizes_each_component() {
        let n = 256;
        let aug = Augmenter::new(DaConfig { max_gain_db: 6.0, max_shift: 64 }, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f32> = randn(&mut rng, n);
        let wave = Tensor::from_vec(x.clone(), n, &DEVICE).unwrap();

        // Pure gain.
        let g = aug
            .apply(&wave, &DaDraws { gain_db: 6.0, shift: 0, theta: 0.0 })
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let gain = 10f32.powf(6.0 / 20.0);
        for (a, b) in x.iter().zip(g.iter()) {
            assert!((a * gain - b).abs() < 1e-6);
        }

        // Pure circular shift.
        let s = 17;
        let sh = aug
            .apply(&wave, &DaDraws { gain_db: 0.0, shift: s, theta: 0.0 })
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for i in 0..n {
            assert_eq!(sh[i], x[(i + n - s) % n], "circular shift mismatch at {i}");
        }

        // Pure phase rotation at pi negates.
        let neg = aug
            .apply(&wave, &DaDraws { gain_db: 0.0, shift: 0, theta: std::f64::consts::PI })
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for (a, b) in x.iter().zip(neg.iter()) {
            assert!((a + b).abs() < 1e-5);
        }

        // Gain draws stay inside the configured range and fill it.
        let cfg = DaConfig { max_gain_db: 6.0, max_shift: 64 };
        let mut min = f64::MAX;
        let mut max = f64::MIN;
        for _ in 0..10_000 {
            let d = DaDraws::sample(&cfg, &mut rng);
            assert!(d.gain_db.abs() <= 6.0);
            assert!(d.shift <= 64);
            assert!((0.0..std::f64::consts::TAU).contains(&d.theta));
            min = min.min(d.gain_db);
            max = max.max(d.gain_db);
        }
        assert!(min < -5.5 && max > 5.5, "draws should fill the range: {min}..{max}");
    }

    #[test]
    fn augmentation_is_differentiable_at_fixed_draws() {
        let n = 64;
        let aug = Augmenter::new(DaConfig { max_gain_db: 6.0, max_shift: 16 }, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let var = Var::from_tensor(&Tensor::from_vec(x, n, &DEVICE).unwrap()).unwrap();
        let wts = Tensor::from_vec(
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>(),
            n,
            &DEVICE,
        )
        .unwrap();
        let draws = DaDraws { gain_db: 3.2, shift: 11, theta: 1.9 };
        let v = var.clone();
        let worst = grad_check(
            &var,
            move || {
                let y = aug.apply(v.as_tensor(), &draws)?;
                Ok((y * &wts)?.sum_all()?)
            },
            1e-5,
            24,
            &mut rng,
        )
        .unwrap();
        assert!(worst < 1e-6, "augmentation grad err {worst}");
    }

    #[test]
    fn discriminators_emit_scores_and_features_per_resolution() {
        let cfg = MrdConfig { resolutions: vec![(64, 16), (32, 8)], channels: 4 };
        let set = DiscriminatorSet::new(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wave = Tensor::from_vec(randn(&mut rng, 320), 320, &DEVICE).unwrap();
        let outs = set.forward(&wave).unwrap();
        assert_eq!(outs.len(), 2);
        for out in &outs {
            assert_eq!(out.features.len(), 6);
            assert!(out.score.elem_count() > 0);
        }
        // Time halving: conv layers 1..=3 shrink the time axis.
        let t0 = outs[0].features[0].dim(3).unwrap();
        let t3 = outs[0].features[3].dim(3).unwrap();
        assert_eq!(t3, t0.div_ceil(2).div_ceil(2).div_ceil(2));

        assert!(MrdConfig { resolutions: vec![(64, 16)], channels: 4 }.validate().is_err());
        assert!(
            MrdConfig { resolutions: vec![(64, 16), (64, 16)], channels: 4 }.validate().is_err()
        );
    }

    #[test]
    fn hinge_losses_match_closed_forms() {
        // Constant-score discriminator outputs let us check the hinge math.
        let mk = |c: f32| DiscOutput {
            score: Tensor::full(c, 8, &DEVICE).unwrap(),
            features: vec![Tensor::full(c, (1, 1, 2, 2), &DEVICE).unwrap()],
        };
        let real = vec![mk(0.5), mk(2.0)];
        let fake = vec![mk(-0.25), mk(0.0)];
        let d = discriminator_hinge(&real, &fake).unwrap().to_scalar::<f32>().unwrap();
        // ((1-0.5)+(1-0.25) + (0)+(1+0)) / 2
        assert!((d - (0.5 + 0.75 + 0.0 + 1.0) / 2.0).abs() < 1e-6);
        let g = generator_adversarial(&fake).unwrap().to_scalar::<f32>().unwrap();
        assert!((g - (0.25 + 0.0) / 2.0).abs() < 1e-6);
        let fm = feature_matching(&real, &fake).unwrap().to_scalar::<f32>().unwrap();
        assert!((fm - ((0.5f32 - -0.25).abs() + 2.0) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn mel_loss_is_zero_on_identical_audio_and_positive_otherwise() {
        let sp = tiny_spectral();
        let loss = MelLoss::new(&sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::from_vec(randn(&mut rng, 4 * sp.hop), 4 * sp.hop, &DEVICE).unwrap();
        let b = Tensor::from_vec(randn(&mut rng, 4 * sp.hop), 4 * sp.hop, &DEVICE).unwrap();
        let same = loss.forward(&a, &a).unwrap().to_scalar::<f32>().unwrap();
        let diff = loss.forward(&a, &b).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same, 0.0);
        assert!(diff > 0.01);
    }

    #[test]
    fn generator_gradients_flow_to_all_parameter_groups() {
        let sp = tiny_spectral();
        let cfg = tiny_vocos(&sp);
        let gen = Vocos2D::new(&cfg, &sp, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = 4;
        let spec = Tensor::from_vec(randn(&mut rng, sp.n_linear * t), (sp.n_linear, t), &DEVICE).unwrap();
        let target = Tensor::from_vec(randn(&mut rng, t * sp.hop), t * sp.hop, &DEVICE).unwrap();
        let wave = gen.forward(&spec).unwrap();
        let loss = (wave - target).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        for name in ["stem.weight", "freq_emb", "block.00.dw.weight", "block.01.shortcut.weight", "head.weight"] {
            let var = gen.vars().get(name).expect(name);
            let g = grads.get(var).unwrap_or_else(|| panic!("no grad for {name}"));
            let s = g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(s.is_finite(), "{name} grad not finite");
        }
        // Gates are zero at init, so gradients reach dw kernels only through
        // later blocks' shortcut path; the gate itself must receive signal.
        let gate = gen.vars().get("block.00.gate").unwrap();
        let g = grads.get(gate).expect("gate grad");
        assert!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
    }
}
