//! Spectrogram-realism evaluation harness.
//!
//! A small ConvNeXt binary classifier scores spectrograms as real or
//! synthetic.  Classifiers are trained under four negative-sample regimes
//! (one per synthetic-method subset) and two input kinds (raw log-magnitude
//! STFT and the linear-filterbank features), giving eight instances whose
//! mean scores per method are aggregated into a CSV table and a heatmap
//! figure.  The module also renders individual spectrograms as PNG images
//! for inspection.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{depthwise_conv2d, LayerNorm, Linear, VarInit, Vars, DEVICE};
use crate::spectral::SpectralAnalyzer;
use crate::training::{load_named_tensors, save_named_tensors, write_atomic, AdamW, OptimConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    RawLogMagnitude,
    LinearFilterbank,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::RawLogMagnitude => "raw_log_magnitude",
            InputKind::LinearFilterbank => "linear_filterbank",
        }
    }
}

/// Classifier hyperparameters.  Eight blocks are partitioned over four
/// stages whose downsampling ratios multiply to 64 on both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_kind: InputKind,
    /// Input spectrogram rows: 1025 for raw log magnitude at the reference
    /// STFT, 592 for the linear filterbank.
    pub n_bins: usize,
    pub blocks_per_stage: [usize; 4],
    pub widths: [usize; 4],
    pub downsampling_ratios: [usize; 4],
    pub dw_kernel: usize,
    pub mlp_mult: usize,
    /// Fill value for explicit padding; the featurizer's log-domain floor,
    /// so padded cells are indistinguishable from digital silence.
    pub pad_value: f32,
}

impl ClassifierConfig {
    pub fn new(input_kind: InputKind, n_bins: usize, pad_value: f32) -> Self {
        ClassifierConfig {
            input_kind,
            n_bins,
            blocks_per_stage: [2, 2, 2, 2],
            widths: [32, 64, 96, 128],
            downsampling_ratios: [4, 4, 2, 2],
            dw_kernel: 7,
            mlp_mult: 4,
            pad_value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let product: usize = self.downsampling_ratios.iter().product();
        if product != 64 {
            return Err(Error::Config(format!(
                "downsampling ratios {:?} multiply to {product}, need 64",
                self.downsampling_ratios
            )));
        }
        if self.blocks_per_stage.iter().sum::<usize>() != 8 {
            return Err(Error::Config(format!(
                "blocks per stage {:?} must sum to 8",
                self.blocks_per_stage
            )));
        }
        if self.widths.contains(&0) || self.n_bins == 0 {
            return Err(Error::Config("widths and n_bins must be positive".into()));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::Config("depthwise kernel must be odd".into()));
        }
        if self.mlp_mult == 0 {
            return Err(Error::Config("mlp_mult must be positive".into()));
        }
        Ok(())
    }

    /// Total downsampling factor along each axis.
    pub fn total_ratio(&self) -> usize {
        self.downsampling_ratios.iter().product()
    }
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

/// Render a waveform into classifier input: `[n_bins, T]`, natural-log
/// amplitude with the configured floor.  Both kinds share one floor, so
/// silence maps to the same cell value in either feature space.
pub fn featurize(
    analyzer: &SpectralAnalyzer,
    kind: InputKind,
    wave: &[f32],
) -> Result<Array2<f32>> {
    match kind {
        InputKind::RawLogMagnitude => {
            let floor = analyzer.config().amplitude_floor;
            let mut mag = analyzer.stft(wave)?.magnitude();
            mag.mapv_inplace(|v| v.max(floor).ln());
            Ok(mag)
        }
        InputKind::LinearFilterbank => Ok(analyzer.linear_spectrogram(wave)?.values),
    }
}

pub fn bins_for(analyzer: &SpectralAnalyzer, kind: InputKind) -> usize {
    match kind {
        InputKind::RawLogMagnitude => analyzer.config().n_fft_bins(),
        InputKind::LinearFilterbank => analyzer.config().n_linear,
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ClassifierBlock {
    dw_kernel: candle_core::Var,
    dw_bias: candle_core::Var,
    norm: LayerNorm,
    expand: Linear,
    contract: Linear,
    gate: candle_core::Var,
}

impl ClassifierBlock {
    fn new(vars: &mut Vars, name: &str, width: usize, k: usize, mult: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ClassifierBlock {
            dw_kernel: vars.var(&format!("{name}.dw.weight"), (k, k, width), VarInit::KaimingUniform, rng)?,
            dw_bias: vars.var(&format!("{name}.dw.bias"), width, VarInit::Zeros, rng)?,
            norm: LayerNorm::new(vars, &format!("{name}.norm"), width, rng)?,
            expand: Linear::new(vars, &format!("{name}.expand"), width, width * mult, VarInit::KaimingUniform, rng)?,
            contract: Linear::new(vars, &format!("{name}.contract"), width * mult, width, VarInit::KaimingUniform, rng)?,
            gate: vars.var(&format!("{name}.gate"), width, VarInit::Zeros, rng)?,
        })
    }

    /// Channels-last `[H, W, C]` residual block; exact identity at
    /// initialization because the gate starts at zero.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = depthwise_conv2d(x, self.dw_kernel.as_tensor(), Some(self.dw_bias.as_tensor()))?;
        let h = self.norm.forward(&h)?;
        let h = self.contract.forward(&self.expand.forward(&h)?.gelu()?)?;
        let h = h.broadcast_mul(self.gate.as_tensor())?;
        Ok((x + h)?)
    }
}

struct Downsample {
    norm: LayerNorm,
    w: candle_core::Var,
    b: candle_core::Var,
    ratio: usize,
}

impl Downsample {
    fn new(vars: &mut Vars, name: &str, c_in: usize, c_out: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Downsample {
            norm: LayerNorm::new(vars, &format!("{name}.norm"), c_in, rng)?,
            w: vars.var(&format!("{name}.weight"), (c_out, c_in, ratio, ratio), VarInit::KaimingUniform, rng)?,
            b: vars.var(&format!("{name}.bias"), c_out, VarInit::Zeros, rng)?,
            ratio,
        })
    }

    /// `[1, C_in, H, W] -> [1, C_out, H/r, W/r]` with a pre-norm over
    /// channels.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let nl = x.squeeze(0)?.permute((1, 2, 0))?;
        let nl = self.norm.forward(&nl)?;
        let back = nl.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?;
        let y = back.conv2d(self.w.as_tensor(), 0, self.ratio, 1, 1)?;
        Ok(y.broadcast_add(&self.b.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub vars: Vars,
    stem_w: candle_core::Var,
    stem_b: candle_core::Var,
    stem_norm: LayerNorm,
    stages: Vec<Vec<ClassifierBlock>>,
    downs: Vec<Downsample>,
    head_norm: LayerNorm,
    head: Linear,
}

/// Fixed affine applied to log-amplitude cells before the network; keeps
/// typical values near unit scale without per-input statistics, so the
/// score cannot drift when silence is appended to a clip.
const INPUT_SHIFT: f32 = 5.0;
const INPUT_SCALE: f32 = 3.5;

impl Classifier {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r0 = cfg.downsampling_ratios[0];
        let stem_w = vars.var("stem.weight", (cfg.widths[0], 1, r0, r0), VarInit::KaimingUniform, &mut rng)?;
        let stem_b = vars.var("stem.bias", cfg.widths[0], VarInit::Zeros, &mut rng)?;
        let stem_norm = LayerNorm::new(&mut vars, "stem.norm", cfg.widths[0], &mut rng)?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for (s, &n_blocks) in cfg.blocks_per_stage.iter().enumerate() {
            if s > 0 {
                downs.push(Downsample::new(
                    &mut vars,
                    &format!("down{s}"),
                    cfg.widths[s - 1],
                    cfg.widths[s],
                    cfg.downsampling_ratios[s],
                    &mut rng,
                )?);
            }
            let mut blocks = Vec::new();
            for b in 0..n_blocks {
                blocks.push(ClassifierBlock::new(
                    &mut vars,
                    &format!("stage{s}.block{b}"),
                    cfg.widths[s],
                    cfg.dw_kernel,
                    cfg.mlp_mult,
                    &mut rng,
                )?);
            }
            stages.push(blocks);
        }
        let head_norm = LayerNorm::new(&mut vars, "head.norm", cfg.widths[3], &mut rng)?;
        // Zero-initialized head: the untrained score is exactly 0.5.
        let head = Linear::new(&mut vars, "head", cfg.widths[3], 1, VarInit::Zeros, &mut rng)?;
        Ok(Classifier { cfg, vars, stem_w, stem_b, stem_norm, stages, downs, head_norm, head })
    }

    /// Time extent of the feature map for an input of `frames` columns.
    pub fn time_extent(&self, frames: usize) -> usize {
        frames.div_ceil(self.cfg.total_ratio())
    }

    /// Pad both axes up to multiples of the total downsampling factor with
    /// the configured floor value, and note which pooled columns contain at
    /// least one non-silent frame.
    fn prepare(&self, spec: &Array2<f32>) -> Result<(Tensor, Vec<f32>)> {
        let (bins, frames) = spec.dim();
        if bins != self.cfg.n_bins {
            return Err(Error::InvalidInput(format!(
                "spectrogram has {bins} rows, classifier expects {}",
                self.cfg.n_bins
            )));
        }
        if frames == 0 {
            return Err(Error::InvalidInput("empty spectrogram".into()));
        }
        let ratio = self.cfg.total_ratio();
        let b_pad = bins.div_ceil(ratio) * ratio;
        let t_pad = frames.div_ceil(ratio) * ratio;
        let threshold = self.cfg.pad_value + 1e-3;
        let mut mask = vec![0.0f32; t_pad / ratio];
        let mut data = vec![(self.cfg.pad_value + INPUT_SHIFT) / INPUT_SCALE; b_pad * t_pad];
        for i in 0..bins {
            for j in 0..frames {
                let v = spec[(i, j)];
                data[i * t_pad + j] = (v + INPUT_SHIFT) / INPUT_SCALE;
                if v > threshold {
                    mask[j / ratio] = 1.0;
                }
            }
        }
        let x = Tensor::from_vec(data, (1, 1, b_pad, t_pad), &DEVICE)?;
        Ok((x, mask))
    }

    fn backbone(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.conv2d(self.stem_w.as_tensor(), 0, self.cfg.downsampling_ratios[0], 1, 1)?;
        h = h.broadcast_add(&self.stem_b.as_tensor().reshape((1, (), 1, 1))?)?;
        let mut nl = h.squeeze(0)?.permute((1, 2, 0))?;
        nl = self.stem_norm.forward(&nl)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let nchw = nl.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?;
                let down = self.downs[s - 1].forward(&nchw)?;
                nl = down.squeeze(0)?.permute((1, 2, 0))?;
            }
            for block in blocks {
                nl = block.forward(&nl)?;
            }
        }
        // [H', W', C]
        Ok(nl)
    }

    /// Raw classification logit for a `[n_bins, T]` spectrogram of any T.
    /// Pooled over frequency uniformly and over time with silent pooled
    /// columns excluded, so trailing silence does not dilute the score.
    pub fn forward_logit(&self, spec: &Array2<f32>) -> Result<Tensor> {
        let (x, mask) = self.prepare(spec)?;
        let features = self.backbone(&x)?;
        let (_h, w, _c) = features.dims3()?;
        let freq_mean = features.mean(0)?; // [W', C]
        let active: f32 = mask.iter().sum();
        let pooled = if active > 0.0 {
            let weights = Tensor::from_vec(mask, (w, 1), &DEVICE)?;
            freq_mean.broadcast_mul(&weights)?.sum(0)?.affine(1.0 / active as f64, 0.0)?
        } else {
            freq_mean.mean(0)?
        };
        let pooled = self.head_norm.forward(&pooled)?;
        self.head.forward(&pooled)
    }

    /// Probability that the spectrogram is real, in (0, 1).
    pub fn score(&self, spec: &Array2<f32>) -> Result<f32> {
        let z = self.forward_logit(spec)?.to_dtype(DType::F32)?.to_vec1::<f32>()?[0];
        Ok(1.0 / (1.0 + (-z).exp()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&self.cfg)?)?;
        save_named_tensors(&dir.join("weights.bin"), &self.vars.snapshot()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_bytes =
            std::fs::read(dir.join("config.json")).map_err(|e| Error::io(dir.join("config.json"), e))?;
        let cfg: ClassifierConfig = serde_json::from_slice(&cfg_bytes)?;
        let clf = Classifier::new(cfg, 0)?;
        clf.vars.load(&load_named_tensors(&dir.join("weights.bin"))?)?;
        Ok(clf)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fixed crop length in frames; shorter inputs are padded.
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 500, batch: 4, lr: 3e-4, weight_decay: 1e-4, crop_frames: 200, seed: 0 }
    }
}

pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub warnings: Vec<String>,
    pub final_loss: f64,
}

fn crop_spec(spec: &Array2<f32>, crop: usize, pad_value: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let (bins, frames) = spec.dim();
    let mut out = Array2::from_elem((bins, crop), pad_value);
    if frames <= crop {
        out.slice_mut(ndarray::s![.., ..frames]).assign(spec);
    } else {
        let start = rng.gen_range(0..=frames - crop);
        out.assign(&spec.slice(ndarray::s![.., start..start + crop]));
    }
    out
}

/// Numerically stable binary cross-entropy on logits:
/// `relu(z) - z*y + ln(1 + exp(-|z|))`.
fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let linear = (logits * labels)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - linear)? + softplus)?.mean_all()?)
}

/// Train a binary real-vs-synthetic classifier.  Every batch is drawn
/// half-and-half from the two classes regardless of corpus sizes, which
/// doubles as the reweighting remedy when the classes are imbalanced.
pub fn train_classifier(
    cfg: ClassifierConfig,
    positives: &[Array2<f32>],
    negatives: &[Array2<f32>],
    opts: &TrainOptions,
) -> Result<TrainedClassifier> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput("both classes need at least one example".into()));
    }
    if opts.batch < 2 || !opts.batch.is_multiple_of(2) {
        return Err(Error::Config("batch must be even and at least 2".into()));
    }
    let mut warnings = Vec::new();
    let (np, nn) = (positives.len(), negatives.len());
    if np.max(nn) > 10 * np.min(nn) {
        warnings.push(format!(
            "class imbalance {np}:{nn} exceeds 10:1; balanced resampling in effect"
        ));
    }
    let classifier = Classifier::new(cfg, opts.seed)?;
    let mut optim = AdamW::new(OptimConfig {
        lr_init: opts.lr,
        weight_decay: opts.weight_decay,
        mixed_fp16: false,
        ..OptimConfig::vocoder_default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x636c_6653);
    let pad = classifier.cfg.pad_value;
    let mut final_loss = f64::NAN;
    for _step in 0..opts.steps {
        let mut logits = Vec::with_capacity(opts.batch);
        let mut labels = Vec::with_capacity(opts.batch);
        for i in 0..opts.batch {
            let (pool, y) = if i % 2 == 0 { (positives, 1.0f32) } else { (negatives, 0.0f32) };
            let spec = &pool[rng.gen_range(0..pool.len())];
            let crop = crop_spec(spec, opts.crop_frames, pad, &mut rng);
            logits.push(classifier.forward_logit(&crop)?);
            labels.push(y);
        }
        let z = Tensor::cat(&logits, 0)?.flatten_all()?;
        let y = Tensor::from_vec(labels, opts.batch, &DEVICE)?;
        let loss = bce_with_logits(&z, &y)?;
        final_loss = loss.to_dtype(DType::F32)?.to_vec0::<f32>()? as f64;
        let grads = loss.backward()?;
        optim.step(&classifier.vars, &grads, opts.lr, 1.0)?;
    }
    Ok(TrainedClassifier { classifier, warnings, final_loss })
}

/// Fraction of items whose thresholded score matches the label.
pub fn accuracy(clf: &Classifier, specs: &[Array2<f32>], labels: &[bool]) -> Result<f64> {
    if specs.len() != labels.len() || specs.is_empty() {
        return Err(Error::InvalidInput("specs and labels must align and be non-empty".into()));
    }
    let mut hits = 0usize;
    for (s, &y) in specs.iter().zip(labels) {
        if (clf.score(s)? > 0.5) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / specs.len() as f64)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Area under the ROC curve by the Mann-Whitney statistic with midranks for
/// ties: the probability a random positive outscores a random negative,
/// counting ties as half.
pub fn roc_auc(pos: &[f32], neg: &[f32]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let mut all: Vec<(f32, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be finite"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

// ---------------------------------------------------------------------------
// Regimes and score tables
// ---------------------------------------------------------------------------

/// One negative-sample setting: which synthetic methods the classifier sees
/// as fakes during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub name: String,
    pub negatives: Vec<String>,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::Config(format!("regime {} has no negative methods", self.name)));
        }
        Ok(())
    }
}

/// The four standard settings.
pub fn standard_regimes() -> Vec<RegimeSpec> {
    let mk = |name: &str, negs: &[&str]| RegimeSpec {
        name: name.to_string(),
        negatives: negs.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        mk("mdctgan-only", &["mdctgan"]),
        mk("vocos-only", &["vocos"]),
        mk("both", &["mdctgan", "vocos"]),
        mk("lse-vocos2d-only", &["lse-vocos2d"]),
    ]
}

/// Rendered audio for one method, split so scored items never appear in
/// classifier training.
pub struct MethodClips {
    pub name: String,
    pub train: Vec<Vec<f32>>,
    pub test: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub method: String,
    /// Whether this method's audio was part of the classifier's training
    /// negatives (always true for the real corpus, which supplies the
    /// positives).
    pub seen: bool,
    pub regime: String,
    pub input_kind: InputKind,
    pub mean_score: f64,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub notices: Vec<String>,
}

impl ScoreTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("method,seen,regime,input_kind,mean_score,count\n");
        for r in &self.rows {
            body.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.method,
                r.seen,
                r.regime,
                r.input_kind.as_str(),
                r.mean_score,
                r.count
            ));
        }
        write_atomic(path, body.as_bytes())
    }

    /// Label-free heatmap: one row per (method, seen) pair, one column per
    /// (regime, input kind) classifier, cell brightness = mean score.  The
    /// CSV carries the labels.
    pub fn render_heatmap(&self, path: &Path) -> Result<()> {
        let mut row_keys: Vec<(String, bool)> = Vec::new();
        let mut col_keys: Vec<(String, InputKind)> = Vec::new();
        for r in &self.rows {
            let rk = (r.method.clone(), r.seen);
            if !row_keys.contains(&rk) {
                row_keys.push(rk);
            }
            let ck = (r.regime.clone(), r.input_kind);
            if !col_keys.contains(&ck) {
                col_keys.push(ck);
            }
        }
        if row_keys.is_empty() {
            return Err(Error::InvalidInput("empty score table".into()));
        }
        const CELL: u32 = 24;
        const GAP: u32 = 2;
        let width = col_keys.len() as u32 * (CELL + GAP) + GAP;
        let height = row_keys.len() as u32 * (CELL + GAP) + GAP;
        let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([20, 20, 20]));
        for r in &self.rows {
            let ri = row_keys.iter().position(|k| k.0 == r.method && k.1 == r.seen).unwrap() as u32;
            let ci = col_keys
                .iter()
                .position(|k| k.0 == r.regime && k.1 == r.input_kind)
                .unwrap() as u32;
            let color = viridis(r.mean_score as f32);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(
                        GAP + ci * (CELL + GAP) + dx,
                        GAP + ri * (CELL + GAP) + dy,
                        image::Rgb(color),
                    );
                }
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// Train one classifier per (regime, input kind) pair and score every
/// method's held-out clips with each.  Methods named by a regime but absent
/// from `methods` are dropped from that regime with a notice; a regime left
/// with no negatives is skipped entirely.
pub fn evaluate_regimes(
    analyzer: &SpectralAnalyzer,
    real: &MethodClips,
    methods: &[MethodClips],
    regimes: &[RegimeSpec],
    opts: &TrainOptions,
) -> Result<ScoreTable> {
    let mut table = ScoreTable::default();
    let kinds = [InputKind::RawLogMagnitude, InputKind::LinearFilterbank];
    for regime in regimes {
        regime.validate()?;
        let mut present: Vec<&MethodClips> = Vec::new();
        for name in &regime.negatives {
            match methods.iter().find(|m| &m.name == name) {
                Some(m) if !m.train.is_empty() => present.push(m),
                _ => table.notices.push(format!(
                    "regime {}: method {name} has no training audio; omitted",
                    regime.name
                )),
            }
        }
        if present.is_empty() {
            table.notices.push(format!("regime {}: no negatives available; skipped", regime.name));
            continue;
        }
        for kind in kinds {
            let feat = |clips: &[Vec<f32>]| -> Result<Vec<Array2<f32>>> {
                clips.iter().map(|c| featurize(analyzer, kind, c)).collect()
            };
            let positives = feat(&real.train)?;
            let mut negatives = Vec::new();
            for m in &present {
                negatives.extend(feat(&m.train)?);
            }
            let cfg = ClassifierConfig::new(
                kind,
                bins_for(analyzer, kind),
                analyzer.config().loudness_floor(),
            );
            let trained = train_classifier(cfg, &positives, &negatives, opts)?;
            table.notices.extend(trained.warnings.iter().cloned());
            let clf = &trained.classifier;
            let mut score_method = |name: &str, seen: bool, clips: &[Vec<f32>]| -> Result<()> {
                if clips.is_empty() {
                    table.notices.push(format!(
                        "regime {}: method {name} has no test audio; row omitted",
                        regime.name
                    ));
                    return Ok(());
                }
                let mut sum = 0.0f64;
                for c in clips {
                    sum += clf.score(&featurize(analyzer, kind, c)?)? as f64;
                }
                table.rows.push(ScoreRow {
                    method: name.to_string(),
                    seen,
                    regime: regime.name.clone(),
                    input_kind: kind,
                    mean_score: sum / clips.len() as f64,
                    count: clips.len(),
                });
                Ok(())
            };
            score_method(&real.name, true, &real.test)?;
            for m in methods {
                let seen = regime.negatives.contains(&m.name)
                    && present.iter().any(|p| p.name == m.name);
                score_method(&m.name, seen, &m.test)?;
            }
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Perceptually uniform dark-purple-to-yellow colormap, interpolated
/// linearly between 17 anchor colors.
pub fn viridis(t: f32) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 17] = [
        [0.267004, 0.004874, 0.329415],
        [0.282327, 0.094955, 0.417331],
        [0.278826, 0.175490, 0.483397],
        [0.258965, 0.251537, 0.524736],
        [0.229739, 0.322361, 0.545706],
        [0.199430, 0.387607, 0.554642],
        [0.172719, 0.448791, 0.557885],
        [0.149039, 0.508051, 0.557250],
        [0.127568, 0.566949, 0.550556],
        [0.120638, 0.625828, 0.533488],
        [0.157851, 0.683765, 0.501686],
        [0.246070, 0.738910, 0.452024],
        [0.369214, 0.788888, 0.382914],
        [0.515992, 0.831158, 0.294279],
        [0.678489, 0.863742, 0.189503],
        [0.845561, 0.887322, 0.099702],
        [0.993248, 0.906157, 0.143936],
    ];
    let x = (t.clamp(0.0, 1.0) as f64) * 16.0;
    let lo = (x.floor() as usize).min(15);
    let frac = x - lo as f64;
    let mut rgb = [0u8; 3];
    for ch in 0..3 {
        let v = ANCHORS[lo][ch] * (1.0 - frac) + ANCHORS[lo + 1][ch] * frac;
        rgb[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    rgb
}

/// Render the log-magnitude STFT of a waveform as a PNG: dB relative to the
/// clip's peak, fixed [-80, 0] range, frequency increasing upward (row 0 is
/// the top bin), one pixel per (bin, frame).
pub fn render_spectrogram_image(
    analyzer: &SpectralAnalyzer,
    wave: &[f32],
    out_path: &Path,
) -> Result<()> {
    let mag = analyzer.stft(wave)?.magnitude();
    let (bins, frames) = mag.dim();
    let peak = mag.iter().cloned().fold(0.0f32, f32::max);
    let mut img = image::RgbImage::new(frames as u32, bins as u32);
    for b in 0..bins {
        for f in 0..frames {
            let t = if peak > 0.0 && mag[(b, f)] > 0.0 {
                let db = 20.0 * (mag[(b, f)] / peak).log10();
                (db.clamp(-80.0, 0.0) + 80.0) / 80.0
            } else {
                0.0
            };
            img.put_pixel(f as u32, (bins - 1 - b) as u32, image::Rgb(viridis(t)));
        }
    }
    img.save(out_path)?;
    Ok(())
}
