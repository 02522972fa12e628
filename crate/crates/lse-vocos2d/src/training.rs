//! Optimization loops for both stages, with schedules, EMA, mixed-precision
//! support, and a checkpoint format that round-trips bitwise.
//!
//! One logical trainer thread owns weights and optimizer state.  Runs are
//! deterministic under a fixed seed: data order, noise draws, and
//! augmentation draws all come from one persisted ChaCha8 stream, so a resumed
//! run continues the loss trace of an uninterrupted one exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lse::{LseConfig, LseNet};
use crate::nn::{array2_to_tensor, Vars, DEVICE};
use crate::spectral::{NormStats, SpectralAnalyzer, SpectralConfig};
use crate::vocoder::{
    discriminator_hinge, feature_matching, generator_adversarial, Augmenter, BaselineVocos,
    BaselineVocosConfig, DaConfig, DaDraws, DiscriminatorSet, LossWeights, MelLoss, MrdConfig,
    Vocos2D, Vocos2DConfig,
};

pub const EMA_DECAY: f64 = 0.999;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Half-precision activations with full-precision master weights and a
    /// dynamic loss scale.
    pub mixed_fp16: bool,
}

impl OptimConfig {
    pub fn lse_default() -> Self {
        OptimConfig {
            lr_init: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            mixed_fp16: true,
        }
    }

    pub fn vocoder_default() -> Self {
        OptimConfig { lr_init: 5e-4, mixed_fp16: false, ..Self::lse_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_init <= 0.0 {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over a named parameter set.  Moments are
/// kept in f32 and keyed by parameter name so they serialize into the
/// checkpoint format directly.
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Apply one update at learning rate `lr`.  Gradients are multiplied by
    /// `inv_scale` first (loss-scaling support).  Returns `false` without
    /// touching any state if a gradient is non-finite.
    pub fn step(&mut self, vars: &Vars, grads: &GradStore, lr: f64, inv_scale: f64) -> Result<bool> {
        let mut pending: Vec<(String, &candle_core::Var, Tensor)> = Vec::new();
        for (name, var) in vars.iter() {
            let g = match grads.get(var) {
                Some(g) => g.detach().to_dtype(DType::F32)?.affine(inv_scale, 0.0)?,
                None => Tensor::zeros(var.shape(), DType::F32, &DEVICE)?,
            };
            let total = g.abs()?.sum_all()?.to_scalar::<f32>()?;
            if !total.is_finite() {
                return Ok(false);
            }
            pending.push((name.clone(), var, g));
        }
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for (name, var, g) in pending {
            let m_prev = match self.m.get(&name) {
                Some(m) => m.clone(),
                None => Tensor::zeros(g.shape(), DType::F32, &DEVICE)?,
            };
            let v_prev = match self.v.get(&name) {
                Some(v) => v.clone(),
                None => Tensor::zeros(g.shape(), DType::F32, &DEVICE)?,
            };
            let m = (m_prev.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            let v = (v_prev.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bias1, 0.0)?;
            let v_hat = v.affine(1.0 / bias2, 0.0)?;
            let update = m_hat.div(&(v_hat.sqrt()? + self.cfg.eps)?)?;
            let w = var.as_tensor().detach().to_dtype(DType::F32)?;
            let w_new = (w.affine(1.0 - lr * self.cfg.weight_decay, 0.0)?
                - update.affine(lr, 0.0)?)?;
            var.set(&w_new.to_dtype(var.dtype())?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(true)
    }

    /// Moments as named tensors, prefixed for checkpointing.
    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(
        &mut self,
        prefix: &str,
        state: &BTreeMap<String, Tensor>,
        step: usize,
    ) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in state {
            if let Some(name) = k.strip_prefix(&format!("{prefix}m.")) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&format!("{prefix}v.")) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Dynamic loss scaling for half-precision training: halve on overflow, grow
/// after a streak of clean steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub good_steps: usize,
    pub growth_interval: usize,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler { scale: 1024.0, good_steps: 0, growth_interval: 2000 }
    }
}

impl LossScaler {
    pub fn on_overflow(&mut self) {
        self.scale = (self.scale / 2.0).max(1.0);
        self.good_steps = 0;
    }

    pub fn on_applied(&mut self) {
        self.good_steps += 1;
        if self.good_steps.is_multiple_of(self.growth_interval) && self.scale < 65536.0 {
            self.scale *= 2.0;
        }
    }
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

/// Exponential moving average of a parameter set, initialized from the first
/// snapshot.
pub struct EmaState {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, vars: &Vars) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} must lie in [0, 1]")));
        }
        let mut shadow = BTreeMap::new();
        for (name, var) in vars.iter() {
            // A plain cast can alias the live weight storage, which Var::set
            // mutates in place; the shadow must own its data.
            shadow.insert(name.clone(), var.as_tensor().copy()?.to_dtype(DType::F32)?);
        }
        Ok(EmaState { decay, shadow })
    }

    pub fn update(&mut self, vars: &Vars) -> Result<()> {
        for (name, var) in vars.iter() {
            let s = self
                .shadow
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("EMA missing {name}")))?;
            let w = var.as_tensor().detach().to_dtype(DType::F32)?;
            let next = (s.affine(self.decay, 0.0)? + w.affine(1.0 - self.decay, 0.0)?)?;
            self.shadow.insert(name.clone(), next);
        }
        Ok(())
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn load(&mut self, shadow: BTreeMap<String, Tensor>) {
        self.shadow = shadow;
    }

    /// Copy the shadow weights into the live parameters (for evaluation).
    pub fn apply_to(&self, vars: &Vars) -> Result<()> {
        vars.load(&self.shadow)
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    PlateauHalving,
    Exponential,
}

/// Learning-rate state machine.  Plateau mode halves the rate whenever an
/// exponentially smoothed loss fails to set a new minimum for `window`
/// consecutive steps (raw per-step loss is too noisy to define a minimum).
/// Exponential mode multiplies by `decay_rate` every `decay_interval` steps.
/// The rate never increases in either mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleState {
    pub mode: LrMode,
    pub lr: f64,
    pub step: usize,
    pub best_loss: Option<f64>,
    pub steps_since_best: usize,
    pub window: usize,
    pub decay_rate: f64,
    pub decay_interval: usize,
    pub smoothed_loss: Option<f64>,
    pub smooth_half_life: usize,
}

impl LrScheduleState {
    pub fn plateau(lr_init: f64, window: usize) -> Self {
        LrScheduleState {
            mode: LrMode::PlateauHalving,
            lr: lr_init,
            step: 0,
            best_loss: None,
            steps_since_best: 0,
            window,
            decay_rate: 0.995,
            decay_interval: 1000,
            smoothed_loss: None,
            smooth_half_life: 1000,
        }
    }

    pub fn exponential(lr_init: f64, decay_rate: f64, decay_interval: usize) -> Self {
        LrScheduleState {
            mode: LrMode::Exponential,
            lr: lr_init,
            step: 0,
            best_loss: None,
            steps_since_best: 0,
            window: usize::MAX,
            decay_rate,
            decay_interval,
            smoothed_loss: None,
            smooth_half_life: 1000,
        }
    }

    /// Advance one step with the observed loss; returns the rate to use.
    pub fn on_step(&mut self, loss: f64) -> f64 {
        self.step += 1;
        match self.mode {
            LrMode::Exponential => {
                if self.step.is_multiple_of(self.decay_interval) {
                    self.lr *= self.decay_rate;
                }
            }
            LrMode::PlateauHalving => {
                let alpha = 0.5f64.powf(1.0 / self.smooth_half_life as f64);
                let smoothed = match self.smoothed_loss {
                    None => loss,
                    Some(s) => alpha * s + (1.0 - alpha) * loss,
                };
                self.smoothed_loss = Some(smoothed);
                match self.best_loss {
                    Some(best) if smoothed >= best => {
                        self.steps_since_best += 1;
                        if self.steps_since_best >= self.window {
                            self.lr *= 0.5;
                            self.steps_since_best = 0;
                        }
                    }
                    _ => {
                        self.best_loss = Some(smoothed);
                        self.steps_since_best = 0;
                    }
                }
            }
        }
        self.lr
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Cut clips into non-overlapping fixed-length segments.  A trailing
/// remainder shorter than half a segment is dropped; otherwise it is padded
/// with silence to a full segment.
pub fn segment_clips(clips: &[Vec<f32>], segment_len: usize) -> Result<Vec<Vec<f32>>> {
    if segment_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    if clips.is_empty() {
        return Err(Error::Data("empty corpus: nothing to segment".into()));
    }
    let mut out = Vec::new();
    for clip in clips {
        let n_full = clip.len() / segment_len;
        for k in 0..n_full {
            out.push(clip[k * segment_len..(k + 1) * segment_len].to_vec());
        }
        let rem = clip.len() - n_full * segment_len;
        if rem * 2 >= segment_len && rem > 0 {
            let mut seg = clip[n_full * segment_len..].to_vec();
            seg.resize(segment_len, 0.0);
            out.push(seg);
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "corpus has no clip long enough for {segment_len}-sample segments"
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 8] = b"LSEWGT01";

/// Write named f32 tensors in the little-endian container format:
/// magic, entry count, then per entry name, rank, dims, and row-major payload.
pub fn save_named_tensors(path: &Path, map: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, t) in map {
        if t.dtype() != DType::F32 {
            return Err(Error::InvalidInput(format!(
                "checkpoint payloads are f32; {name} is {:?}",
                t.dtype()
            )));
        }
        let name_b = name.as_bytes();
        buf.extend_from_slice(&(name_b.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_b);
        let dims = t.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.flatten_all()?.to_vec1::<f32>()? {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn load_named_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data(format!("truncated tensor file {}", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != TENSOR_MAGIC {
        return Err(Error::Data(format!("{} is not a weight file (bad magic)", path.display())));
    }
    let n_entries = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..n_entries {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Data("non-utf8 tensor name".into()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let raw = take(&mut pos, count * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.insert(name, Tensor::from_vec(data, dims, &DEVICE)?);
    }
    Ok(out)
}

/// Write through a temp file and rename, so a crash never leaves a partial
/// file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// First 16 bytes of the SHA-256 of a JSON document, as lowercase hex.
pub fn fingerprint_json(value: &serde_json::Value) -> String {
    let s = value.to_string();
    let digest = Sha256::digest(s.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Dotted paths at which two JSON documents differ.
pub fn config_diff(active: &serde_json::Value, stored: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for key in ma.keys().chain(mb.keys().filter(|k| !ma.contains_key(*k))) {
                    let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                    match (ma.get(key), mb.get(key)) {
                        (Some(va), Some(vb)) => walk(va, vb, &sub, out),
                        (Some(va), None) => out.push(format!("{sub}: {va} vs <absent>")),
                        (None, Some(vb)) => out.push(format!("{sub}: <absent> vs {vb}")),
                        (None, None) => unreachable!(),
                    }
                }
            }
            _ if a != b => out.push(format!("{path}: {a} vs {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(active, stored, "", &mut out);
    out
}

/// Resume-compatibility view of a training config: the step budget is a
/// stopping condition, not part of what must match to continue a run, so a
/// finished run can be extended with a larger `--steps`.
fn config_without_step_budget(cfg: &serde_json::Value) -> serde_json::Value {
    let mut c = cfg.clone();
    if let Some(run) = c.get_mut("run").and_then(|r| r.as_object_mut()) {
        run.remove("steps");
    }
    c
}

pub fn ensure_config_matches(active: &serde_json::Value, stored: &serde_json::Value) -> Result<()> {
    let diffs = config_diff(active, stored);
    if diffs.is_empty() {
        return Ok(());
    }
    let shown = diffs.iter().take(12).cloned().collect::<Vec<_>>().join("; ");
    Err(Error::CheckpointMismatch(format!(
        "checkpoint was produced under a different configuration ({} field(s) differ): {shown}",
        diffs.len()
    )))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub stage: String,
    pub step: usize,
    pub lr_state: LrScheduleState,
    pub ema_decay: f64,
    pub optim_step: usize,
    pub optim_step_disc: Option<usize>,
    pub loss_scaler: Option<LossScaler>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub corpus_fingerprint: String,
    pub config_fingerprint: String,
}

/// On-disk checkpoint: a directory with a JSON config manifest, named weight
/// payloads, EMA shadow, optimizer moments, and metadata.
pub struct CheckpointData {
    pub config: serde_json::Value,
    pub weights: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
    pub disc: Option<BTreeMap<String, Tensor>>,
    pub optim: BTreeMap<String, Tensor>,
    pub meta: TrainMeta,
}

pub fn save_checkpoint(dir: &Path, data: &CheckpointData) -> Result<()> {
    let staging = dir.with_extension("tmpdir");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let config_bytes = serde_json::to_vec_pretty(&data.config)?;
    fs::write(staging.join("config.json"), config_bytes)
        .map_err(|e| Error::io(staging.join("config.json"), e))?;
    save_named_tensors(&staging.join("weights.bin"), &data.weights)?;
    save_named_tensors(&staging.join("ema.bin"), &data.ema)?;
    if let Some(disc) = &data.disc {
        save_named_tensors(&staging.join("disc.bin"), disc)?;
    }
    save_named_tensors(&staging.join("optim.bin"), &data.optim)?;
    let meta_bytes = serde_json::to_vec_pretty(&data.meta)?;
    fs::write(staging.join("meta.json"), meta_bytes)
        .map_err(|e| Error::io(staging.join("meta.json"), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointData> {
    let config_path = dir.join("config.json");
    let config_bytes = fs::read(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: serde_json::Value = serde_json::from_slice(&config_bytes)?;
    let weights = load_named_tensors(&dir.join("weights.bin"))?;
    let ema = load_named_tensors(&dir.join("ema.bin"))?;
    let disc_path = dir.join("disc.bin");
    let disc = if disc_path.exists() { Some(load_named_tensors(&disc_path)?) } else { None };
    let optim = load_named_tensors(&dir.join("optim.bin"))?;
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TrainMeta = serde_json::from_slice(&meta_bytes)?;
    Ok(CheckpointData { config, weights, ema, disc, optim, meta })
}

/// Most recent `step_*` checkpoint directory under a run directory.
pub fn find_latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(run_dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("step_"))
                    .unwrap_or(false)
        })
        .max()
}

fn rng_from_meta(meta: &TrainMeta) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
    rng.set_word_pos(meta.rng_word_pos);
    rng
}

fn corpus_fingerprint_f32(parts: &[&[f32]]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((parts.len() as u64).to_le_bytes());
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        let stride = (p.len() / 4096).max(1);
        for x in p.iter().step_by(stride) {
            hasher.update(x.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Loss log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// CSV loss log with header `step,loss,lr`; appending on resume keeps one
/// continuous file per run.
pub struct LossLog {
    writer: BufWriter<fs::File>,
    pub rows: Vec<LogRow>,
}

impl LossLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        if !append || !exists {
            writeln!(writer, "step,loss,lr").map_err(|e| Error::io(path, e))?;
        }
        Ok(LossLog { writer, rows: Vec::new() })
    }

    pub fn log(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        writeln!(self.writer, "{step},{loss:.8e},{lr:.8e}")
            .map_err(|e| Error::Data(format!("loss log write failed: {e}")))?;
        self.rows.push(LogRow { step, loss, lr });
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Data(format!("loss log flush failed: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Stage 1 trainer: diffusion over linear spectrograms
// ---------------------------------------------------------------------------

/// One training example: normalized mel (condition) and normalized linear
/// spectrogram (target), both `[bands, frames]` with a shared frame count.
pub struct FeaturePair {
    pub mel: Array2<f32>,
    pub linear: Array2<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LseRunConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub plateau_window: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

pub struct TrainSummary {
    pub final_step: usize,
    pub rows: Vec<LogRow>,
    pub audit: Vec<(usize, char)>,
    pub final_checkpoint: PathBuf,
}

fn sample_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let data: Vec<f32> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, (rows, cols), &DEVICE)?)
}

pub fn train_lse(
    out_dir: &Path,
    resume: bool,
    lse_cfg: &LseConfig,
    optim_cfg: &OptimConfig,
    run: &LseRunConfig,
    pairs: &[FeaturePair],
) -> Result<TrainSummary> {
    lse_cfg.validate()?;
    optim_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut tensors = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (mb, mt) = p.mel.dim();
        let (lb, lt) = p.linear.dim();
        if mb != lse_cfg.n_mel || lb != lse_cfg.n_linear || mt != lt {
            return Err(Error::InvalidInput(format!(
                "feature pair shape mismatch: mel {mb}x{mt}, linear {lb}x{lt}"
            )));
        }
        if mt == 0 || mt % lse_cfg.patch_t != 0 {
            return Err(Error::InvalidInput(format!(
                "frame count {mt} must be a positive multiple of {}",
                lse_cfg.patch_t
            )));
        }
        tensors.push((array2_to_tensor(&p.mel)?, array2_to_tensor(&p.linear)?));
    }

    let config_json = serde_json::json!({
        "stage": "lse",
        "model": lse_cfg,
        "optim": optim_cfg,
        "run": run,
    });
    let config_fp = fingerprint_json(&config_json);
    let corpus_fp = corpus_fingerprint_f32(
        &pairs.iter().map(|p| p.linear.as_slice().unwrap()).collect::<Vec<_>>(),
    );

    let mut net = LseNet::new(lse_cfg, DType::F32, run.seed ^ 0x6c73_655f)?;
    if optim_cfg.mixed_fp16 {
        net.set_activation_dtype(DType::F16);
    }
    let net = net;
    let schedule = NoiseSchedule::new(NoiseSchedule::DEFAULT_STEPS)?;
    let mut optim = AdamW::new(optim_cfg.clone())?;
    let mut ema = EmaState::new(EMA_DECAY, net.vars())?;
    let mut lr_state = LrScheduleState::plateau(optim_cfg.lr_init, run.plateau_window);
    let mut scaler = optim_cfg.mixed_fp16.then(LossScaler::default);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut start_step = 0usize;

    if resume {
        let latest = find_latest_checkpoint(out_dir).ok_or_else(|| {
            Error::Data(format!("no checkpoint to resume under {}", out_dir.display()))
        })?;
        let ckpt = load_checkpoint(&latest)?;
        ensure_config_matches(
            &config_without_step_budget(&config_json),
            &config_without_step_budget(&ckpt.config),
        )?;
        net.vars().load(&ckpt.weights)?;
        ema.load(ckpt.ema);
        optim.load_state("", &ckpt.optim, ckpt.meta.optim_step)?;
        lr_state = ckpt.meta.lr_state.clone();
        scaler = ckpt.meta.loss_scaler;
        rng = rng_from_meta(&ckpt.meta);
        start_step = ckpt.meta.step;
    }

    let mut log = LossLog::create(&out_dir.join("log.csv"), resume)?;
    let mut overflow_streak = 0usize;

    let save = |step: usize,
                net: &LseNet,
                ema: &EmaState,
                optim: &AdamW,
                lr_state: &LrScheduleState,
                scaler: &Option<LossScaler>,
                rng: &ChaCha8Rng,
                dir: &Path|
     -> Result<()> {
        let data = CheckpointData {
            config: config_json.clone(),
            weights: net.vars().snapshot()?,
            ema: ema.shadow().clone(),
            disc: None,
            optim: optim.state(""),
            meta: TrainMeta {
                stage: "lse".into(),
                step,
                lr_state: lr_state.clone(),
                ema_decay: EMA_DECAY,
                optim_step: optim.step,
                optim_step_disc: None,
                loss_scaler: *scaler,
                rng_seed: rng.get_seed(),
                rng_word_pos: rng.get_word_pos(),
                corpus_fingerprint: corpus_fp.clone(),
                config_fingerprint: config_fp.clone(),
            },
        };
        save_checkpoint(dir, &data)
    };

    for step in start_step..run.steps {
        let mut loss_acc: Option<Tensor> = None;
        for _ in 0..run.batch {
            let idx = rng.gen_range(0..tensors.len());
            let t = rng.gen_range(0..schedule.n_steps());
            let (mel, linear) = &tensors[idx];
            let noise = sample_noise(&mut rng, lse_cfg.n_linear, linear.dim(1)?)?;
            let loss = training_loss(&net, &schedule, linear, mel, t, &noise)?;
            loss_acc = Some(match loss_acc {
                None => loss,
                Some(a) => (a + loss)?,
            });
        }
        let loss = loss_acc.unwrap().affine(1.0 / run.batch as f64, 0.0)?;
        let raw = loss.to_scalar::<f32>()? as f64;

        if !raw.is_finite() {
            if let Some(s) = scaler.as_mut() {
                s.on_overflow();
                overflow_streak += 1;
                if overflow_streak > 50 {
                    save(step, &net, &ema, &optim, &lr_state, &scaler, &rng, &out_dir.join("diverged"))?;
                    return Err(Error::Numeric(format!(
                        "loss not finite for {overflow_streak} consecutive steps at step {step}"
                    )));
                }
                continue;
            }
            save(step, &net, &ema, &optim, &lr_state, &scaler, &rng, &out_dir.join("diverged"))?;
            return Err(Error::Numeric(format!(
                "loss became non-finite at step {step}; diagnostic checkpoint written"
            )));
        }

        let scale = scaler.as_ref().map(|s| s.scale).unwrap_or(1.0);
        let grads = loss.affine(scale, 0.0)?.backward()?;
        let applied = optim.step(net.vars(), &grads, lr_state.lr, 1.0 / scale)?;
        if applied {
            overflow_streak = 0;
            if let Some(s) = scaler.as_mut() {
                s.on_applied();
            }
            ema.update(net.vars())?;
            lr_state.on_step(raw);
        } else if let Some(s) = scaler.as_mut() {
            s.on_overflow();
        }

        if (step + 1) % run.log_every == 0 {
            log.log(step + 1, raw, lr_state.lr)?;
        }
        if (step + 1) % run.checkpoint_every == 0 && step + 1 < run.steps {
            save(
                step + 1,
                &net,
                &ema,
                &optim,
                &lr_state,
                &scaler,
                &rng,
                &out_dir.join(format!("step_{:08}", step + 1)),
            )?;
        }
    }

    log.flush()?;
    let final_dir = out_dir.join(format!("step_{:08}", run.steps));
    save(run.steps, &net, &ema, &optim, &lr_state, &scaler, &rng, &final_dir)?;
    Ok(TrainSummary {
        final_step: run.steps,
        rows: log.rows,
        audit: Vec::new(),
        final_checkpoint: final_dir,
    })
}

// ---------------------------------------------------------------------------
// Stage 2 trainer: adversarial vocoder training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocoderStage {
    Vocos2d,
    VocosBaseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocoderRunConfig {
    pub steps: usize,
    pub seed: u64,
    pub decay_interval: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

enum GenModel {
    V2(Vocos2D),
    B1(BaselineVocos),
}

impl GenModel {
    fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        match self {
            GenModel::V2(g) => g.forward(feats),
            GenModel::B1(g) => g.forward(feats),
        }
    }

    fn vars(&self) -> &Vars {
        match self {
            GenModel::V2(g) => g.vars(),
            GenModel::B1(g) => g.vars(),
        }
    }
}

/// Adversarial trainer shared by the 2-D generator and the 1-D baseline.
/// Discriminator and generator updates strictly alternate by step parity
/// (even steps train the discriminator), the augmentation is redrawn once per
/// step and applied to real and generated audio alike, and EMA tracks the
/// generator only.
#[allow(clippy::too_many_arguments)]
pub fn train_vocoder(
    out_dir: &Path,
    resume: bool,
    stage: VocoderStage,
    v2_cfg: &Vocos2DConfig,
    base_cfg: &BaselineVocosConfig,
    spectral: &SpectralConfig,
    feat_stats: &NormStats,
    mrd_cfg: &MrdConfig,
    da_cfg: &DaConfig,
    weights: &LossWeights,
    optim_cfg: &OptimConfig,
    run: &VocoderRunConfig,
    segments: &[Vec<f32>],
) -> Result<TrainSummary> {
    optim_cfg.validate()?;
    mrd_cfg.validate()?;
    if segments.is_empty() {
        return Err(Error::Data("no training segments".into()));
    }
    let seg_len = segments[0].len();
    if seg_len == 0 || !seg_len.is_multiple_of(spectral.hop) {
        return Err(Error::InvalidInput(format!(
            "segment length {seg_len} must be a positive multiple of hop {}",
            spectral.hop
        )));
    }
    if segments.iter().any(|s| s.len() != seg_len) {
        return Err(Error::InvalidInput("segments must share one length".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Featurize every segment once; generators consume normalized features.
    let analyzer = SpectralAnalyzer::new(spectral.clone())?;
    let mut feats = Vec::with_capacity(segments.len());
    let mut reals = Vec::with_capacity(segments.len());
    for seg in segments {
        let mut values = match stage {
            VocoderStage::Vocos2d => analyzer.linear_spectrogram(seg)?.values,
            VocoderStage::VocosBaseline => analyzer.mel_spectrogram(seg)?.values,
        };
        analyzer.normalize(&mut values, *feat_stats)?;
        feats.push(array2_to_tensor(&values)?);
        reals.push(Tensor::from_vec(seg.clone(), seg.len(), &DEVICE)?);
    }

    let gen_cfg_json = match stage {
        VocoderStage::Vocos2d => serde_json::to_value(v2_cfg)?,
        VocoderStage::VocosBaseline => serde_json::to_value(base_cfg)?,
    };
    let config_json = serde_json::json!({
        "stage": stage,
        "generator": gen_cfg_json,
        "mrd": mrd_cfg,
        "da": da_cfg,
        "weights": weights,
        "optim": optim_cfg,
        "run": run,
        "stats": feat_stats,
    });
    let config_fp = fingerprint_json(&config_json);
    let corpus_fp =
        corpus_fingerprint_f32(&segments.iter().map(|s| s.as_slice()).collect::<Vec<_>>());

    let gen = match stage {
        VocoderStage::Vocos2d => GenModel::V2(Vocos2D::new(v2_cfg, spectral, run.seed ^ 0x7632)?),
        VocoderStage::VocosBaseline => {
            GenModel::B1(BaselineVocos::new(base_cfg, spectral, run.seed ^ 0x7631)?)
        }
    };
    let disc = DiscriminatorSet::new(mrd_cfg, run.seed ^ 0x006d_7264)?;
    let augment = Augmenter::new(*da_cfg, seg_len)?;
    let mel_loss = MelLoss::new(spectral)?;

    let mut optim_g = AdamW::new(optim_cfg.clone())?;
    let mut optim_d = AdamW::new(optim_cfg.clone())?;
    let mut ema = EmaState::new(EMA_DECAY, gen.vars())?;
    let mut lr_state = LrScheduleState::exponential(optim_cfg.lr_init, 0.995, run.decay_interval);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut start_step = 0usize;

    if resume {
        let latest = find_latest_checkpoint(out_dir).ok_or_else(|| {
            Error::Data(format!("no checkpoint to resume under {}", out_dir.display()))
        })?;
        let ckpt = load_checkpoint(&latest)?;
        ensure_config_matches(
            &config_without_step_budget(&config_json),
            &config_without_step_budget(&ckpt.config),
        )?;
        gen.vars().load(&ckpt.weights)?;
        ema.load(ckpt.ema);
        let disc_weights = ckpt
            .disc
            .as_ref()
            .ok_or_else(|| Error::CheckpointMismatch("missing discriminator weights".into()))?;
        disc.vars().load(disc_weights)?;
        optim_g.load_state("gen.", &ckpt.optim, ckpt.meta.optim_step)?;
        optim_d.load_state("disc.", &ckpt.optim, ckpt.meta.optim_step_disc.unwrap_or(0))?;
        lr_state = ckpt.meta.lr_state.clone();
        rng = rng_from_meta(&ckpt.meta);
        start_step = ckpt.meta.step;
    }

    let mut log = LossLog::create(&out_dir.join("log.csv"), resume)?;
    let mut audit_file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(out_dir.join("audit.csv"))
        .map_err(|e| Error::io(out_dir.join("audit.csv"), e))?;
    if start_step == 0 {
        writeln!(audit_file, "step,phase").map_err(|e| Error::io(out_dir.join("audit.csv"), e))?;
    }
    let mut audit = Vec::new();

    let save = |step: usize,
                gen: &GenModel,
                disc: &DiscriminatorSet,
                ema: &EmaState,
                optim_g: &AdamW,
                optim_d: &AdamW,
                lr_state: &LrScheduleState,
                rng: &ChaCha8Rng,
                dir: &Path|
     -> Result<()> {
        let mut optim_state = optim_g.state("gen.");
        optim_state.extend(optim_d.state("disc."));
        let data = CheckpointData {
            config: config_json.clone(),
            weights: gen.vars().snapshot()?,
            ema: ema.shadow().clone(),
            disc: Some(disc.vars().snapshot()?),
            optim: optim_state,
            meta: TrainMeta {
                stage: match stage {
                    VocoderStage::Vocos2d => "vocos2d".into(),
                    VocoderStage::VocosBaseline => "vocos-baseline".into(),
                },
                step,
                lr_state: lr_state.clone(),
                ema_decay: EMA_DECAY,
                optim_step: optim_g.step,
                optim_step_disc: Some(optim_d.step),
                loss_scaler: None,
                rng_seed: rng.get_seed(),
                rng_word_pos: rng.get_word_pos(),
                corpus_fingerprint: corpus_fp.clone(),
                config_fingerprint: config_fp.clone(),
            },
        };
        save_checkpoint(dir, &data)
    };

    for step in start_step..run.steps {
        let idx = rng.gen_range(0..segments.len());
        let draws = DaDraws::sample(&augment.cfg, &mut rng);
        let is_disc_step = step % 2 == 0;
        let raw;

        if is_disc_step {
            let fake = gen.forward(&feats[idx])?.detach();
            let real_da = augment.apply(&reals[idx], &draws)?;
            let fake_da = augment.apply(&fake, &draws)?;
            let outs_real = disc.forward(&real_da)?;
            let outs_fake = disc.forward(&fake_da)?;
            let d_loss = discriminator_hinge(&outs_real, &outs_fake)?;
            raw = d_loss.to_scalar::<f32>()? as f64;
            if !raw.is_finite() {
                save(step, &gen, &disc, &ema, &optim_g, &optim_d, &lr_state, &rng, &out_dir.join("diverged"))?;
                return Err(Error::Numeric(format!(
                    "discriminator loss became non-finite at step {step}"
                )));
            }
            let grads = d_loss.backward()?;
            optim_d.step(disc.vars(), &grads, lr_state.lr, 1.0)?;
            audit.push((step, 'd'));
            writeln!(audit_file, "{step},d").map_err(|e| Error::Data(format!("audit log: {e}")))?;
        } else {
            let fake = gen.forward(&feats[idx])?;
            let real_da = augment.apply(&reals[idx], &draws)?;
            let fake_da = augment.apply(&fake, &draws)?;
            let outs_real = disc.forward(&real_da)?;
            let outs_fake = disc.forward(&fake_da)?;
            let adv = generator_adversarial(&outs_fake)?;
            let fm = feature_matching(&outs_real, &outs_fake)?;
            let mel = mel_loss.forward(&fake, &reals[idx])?;
            let total = ((mel.affine(weights.mel, 0.0)?
                + fm.affine(weights.feature_matching, 0.0)?)?
                + adv.affine(weights.adversarial, 0.0)?)?;
            raw = total.to_scalar::<f32>()? as f64;
            if !raw.is_finite() {
                save(step, &gen, &disc, &ema, &optim_g, &optim_d, &lr_state, &rng, &out_dir.join("diverged"))?;
                return Err(Error::Numeric(format!(
                    "generator loss became non-finite at step {step}"
                )));
            }
            let grads = total.backward()?;
            optim_g.step(gen.vars(), &grads, lr_state.lr, 1.0)?;
            ema.update(gen.vars())?;
            audit.push((step, 'g'));
            writeln!(audit_file, "{step},g").map_err(|e| Error::Data(format!("audit log: {e}")))?;
        }

        lr_state.on_step(raw);
        if (step + 1) % run.log_every == 0 {
            log.log(step + 1, raw, lr_state.lr)?;
        }
        if (step + 1) % run.checkpoint_every == 0 && step + 1 < run.steps {
            save(
                step + 1,
                &gen,
                &disc,
                &ema,
                &optim_g,
                &optim_d,
                &lr_state,
                &rng,
                &out_dir.join(format!("step_{:08}", step + 1)),
            )?;
        }
    }

    log.flush()?;
    audit_file.flush().map_err(|e| Error::Data(format!("audit log flush: {e}")))?;
    let final_dir = out_dir.join(format!("step_{:08}", run.steps));
    save(run.steps, &gen, &disc, &ema, &optim_g, &optim_d, &lr_state, &rng, &final_dir)?;
    Ok(TrainSummary { final_step: run.steps, rows: log.rows, audit, final_checkpoint: final_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_matches_hand_computed_steps() {
        // Scalar parameter, constant gradient; compare against the update
        // rule evaluated directly in f64.
        let cfg = OptimConfig {
            lr_init: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            eps: 1e-8,
            mixed_fp16: false,
        };
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let var = vars.var("w", (1,), crate::nn::VarInit::Const(1.0), &mut rng).unwrap();
        let mut optim = AdamW::new(cfg.clone()).unwrap();

        let mut w_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let g = 0.5f64;
        for t in 1..=3 {
            // Drive the real optimizer with a synthetic graph whose gradient
            // w.r.t. w is exactly 0.5.
            let loss = (var.as_tensor() * 0.5).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            assert!(optim.step(&vars, &grads, cfg.lr_init, 1.0).unwrap());

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w_ref = w_ref * (1.0 - 0.1 * 0.1) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            let w_now = var.as_tensor().to_vec1::<f32>().unwrap()[0] as f64;
            assert!(
                (w_now - w_ref).abs() < 1e-6,
                "step {t}: optimizer {w_now} vs reference {w_ref}"
            );
        }
    }

    #[test]
    fn adamw_skips_update_on_non_finite_gradient() {
        let mut vars = Vars::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let var = vars.var("w", (2,), crate::nn::VarInit::Const(1.0), &mut rng).unwrap();
        let mut optim = AdamW::new(OptimConfig::vocoder_default()).unwrap();
        let bad = (var.as_tensor().affine(f64::INFINITY, 0.0).unwrap()).sum_all().unwrap();
        let grads = bad.backward().unwrap();
        let applied = optim.step(&vars, &grads, 1e-3, 1.0).unwrap();
        assert!(!applied);
        assert_eq!(optim.step, 0);
        assert_eq!(var.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn ema_follows_the_geometric_closed_form() {
        for decay in [0.0, 0.25, 0.9, 0.999, 1.0] {
            let mut vars = Vars::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let var = vars.var("w", (1,), crate::nn::VarInit::Const(2.0), &mut rng).unwrap();
            let mut ema = EmaState::new(decay, &vars).unwrap(); // s0 = 2
            var.set(&Tensor::full(5.0f32, (1,), &DEVICE).unwrap()).unwrap();
            let n = 100;
            for _ in 0..n {
                ema.update(&vars).unwrap();
            }
            // shadow = w + (s0 - w) * decay^n
            let expect = 5.0 + (2.0 - 5.0) * decay.powi(n);
            let got = ema.shadow().get("w").unwrap().to_vec1::<f32>().unwrap()[0] as f64;
            assert!((got - expect).abs() < 1e-4, "decay {decay}: {got} vs {expect}");
        }
    }

    #[test]
    fn plateau_schedule_halves_after_flat_window() {
        let mut s = LrScheduleState::plateau(1.0, 10);
        for _ in 0..11 {
            s.on_step(3.0);
        }
        assert_eq!(s.lr, 0.5, "flat loss for one window halves once");
        for _ in 0..10 {
            s.on_step(3.0);
        }
        assert_eq!(s.lr, 0.25, "another flat window quarters");

        let mut s = LrScheduleState::plateau(1.0, 5);
        for k in 0..50 {
            s.on_step(10.0 - k as f64 * 0.1);
        }
        assert_eq!(s.lr, 1.0, "strictly decreasing loss never halves");
    }

    #[test]
    fn exponential_schedule_matches_closed_form_and_never_increases() {
        let mut s = LrScheduleState::exponential(2.0, 0.995, 100);
        let mut prev = s.lr;
        for _ in 0..1000 {
            let lr = s.on_step(1.0);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        let expect = 2.0 * 0.995f64.powi(10);
        assert!((s.lr - expect).abs() < 1e-12, "{} vs {expect}", s.lr);
    }

    #[test]
    fn segmentation_follows_the_half_segment_rule() {
        // 20 s at a 10-sample "second": 8-sample segments -> 2 full + 4-sample
        // remainder (exactly half) kept and padded.
        let clip: Vec<f32> = (0..200).map(|i| i as f32).collect();
        let segs = segment_clips(std::slice::from_ref(&clip), 80).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.len() == 80));
        assert_eq!(&segs[2][..40], &clip[160..200]);
        assert!(segs[2][40..].iter().all(|&x| x == 0.0));

        // Remainder shorter than half is dropped.
        let segs = segment_clips(&[(0..119).map(|i| i as f32).collect()], 80).unwrap();
        assert_eq!(segs.len(), 1);

        // Source samples consumed never exceed the corpus.
        let consumed: usize = segs.len() * 80;
        assert!(consumed <= 119 + 80 / 2);

        assert!(segment_clips(&[], 80).is_err());
        assert!(segment_clips(&[vec![0.0; 10]], 80).is_err(), "all-dropped corpus errors");
    }

    #[test]
    fn named_tensor_files_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut map = BTreeMap::new();
        map.insert(
            "a.weight".to_string(),
            Tensor::from_vec(vec![1.5f32, -2.25, 3.125], (3,), &DEVICE).unwrap(),
        );
        map.insert(
            "b.bias".to_string(),
            Tensor::from_vec((0..24).map(|i| i as f32 * 0.3).collect(), (2, 3, 4), &DEVICE)
                .unwrap(),
        );
        save_named_tensors(&path, &map).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_named_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["b.bias"].dims(), &[2, 3, 4]);
        assert_eq!(
            loaded["a.weight"].to_vec1::<f32>().unwrap(),
            map["a.weight"].to_vec1::<f32>().unwrap()
        );
        save_named_tensors(&path, &loaded).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn config_diff_reports_dotted_paths() {
        let a = serde_json::json!({"model": {"hidden": 320, "blocks": 8}, "lr": 1e-4});
        let b = serde_json::json!({"model": {"hidden": 64, "blocks": 8}, "lr": 1e-4});
        let diffs = config_diff(&a, &b);
        assert_eq!(diffs, vec!["model.hidden: 320 vs 64".to_string()]);
        assert!(ensure_config_matches(&a, &b).is_err());
        assert!(ensure_config_matches(&a, &a).is_ok());
        match ensure_config_matches(&a, &b).unwrap_err() {
            Error::CheckpointMismatch(msg) => assert!(msg.contains("model.hidden")),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn rng_state_restores_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let _burn: Vec<f64> = (0..17).map(|_| rng.gen::<f64>()).collect();
        let seed = rng.get_seed();
        let pos = rng.get_word_pos();
        let expect: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
        let mut restored = ChaCha8Rng::from_seed(seed);
        restored.set_word_pos(pos);
        let got: Vec<f64> = (0..10).map(|_| restored.gen::<f64>()).collect();
        assert_eq!(expect, got);
    }

    #[test]
    fn loss_scaler_halves_and_grows() {
        let mut s = LossScaler { scale: 8.0, good_steps: 0, growth_interval: 3 };
        s.on_overflow();
        assert_eq!(s.scale, 4.0);
        for _ in 0..3 {
            s.on_applied();
        }
        assert_eq!(s.scale, 8.0);
        let mut s = LossScaler { scale: 1.0, good_steps: 0, growth_interval: 3 };
        s.on_overflow();
        assert_eq!(s.scale, 1.0, "scale never drops below 1");
    }
}
