//! Linear-spectrogram estimator: a diffusion transformer that denoises a
//! normalized 592-band linear spectrogram conditioned on the aligned 80-band
//! mel spectrogram and the diffusion step.
//!
//! The noisy spectrogram is cut into 8 (frequency) x 2 (time) patches, giving
//! a `[n_freq_patches, n_time_tokens, hidden]` grid.  Attention runs along
//! the time axis independently per frequency row; a learned dense map across
//! the 74 frequency rows (identity at init) plus an additive frequency
//! embedding exchange information across bands.  Conditioning enters through
//! adaLN-zero: each block regresses per-token scale/shift/gate parameters
//! from the mel+step embedding with a zero-initialized projection, so every
//! block is exactly the identity at initialization, and the zero-initialized
//! output head makes the initial epsilon prediction exactly zero.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, stable_softmax, LayerNorm, Linear, VarInit, Vars};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LseConfig {
    pub n_mel: usize,
    pub n_linear: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Frequency bins per patch.
    pub patch_f: usize,
    /// Frames per patch (and per token along time).
    pub patch_t: usize,
    /// FFN expansion factor.
    pub ffn_mult: usize,
}

impl Default for LseConfig {
    fn default() -> Self {
        LseConfig {
            n_mel: 80,
            n_linear: 592,
            hidden: 320,
            n_blocks: 8,
            n_heads: 8,
            patch_f: 8,
            patch_t: 2,
            ffn_mult: 4,
        }
    }
}

impl LseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_linear == 0 || !self.n_linear.is_multiple_of(self.patch_f) {
            return Err(Error::Config(format!(
                "n_linear {} must be a positive multiple of patch_f {}",
                self.n_linear, self.patch_f
            )));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config("hidden must be even for sinusoidal embeddings".into()));
        }
        if self.patch_t == 0 || self.patch_f == 0 || self.n_blocks == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("patch sizes, block count and ffn_mult must be positive".into()));
        }
        if self.n_mel == 0 {
            return Err(Error::Config("n_mel must be positive".into()));
        }
        Ok(())
    }

    pub fn n_freq_patches(&self) -> usize {
        self.n_linear / self.patch_f
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_f * self.patch_t
    }

    /// Closed-form parameter count; cross-checked against the store.
    pub fn expected_n_params(&self) -> usize {
        let c = self.hidden;
        let fp = self.n_freq_patches();
        let pd = self.patch_dim();
        let ffn = self.ffn_mult * c;
        let patch_embed = c * pd + c;
        let cond_mlp = (c * (self.n_mel * self.patch_t) + c) + (c * c + c);
        let t_mlp = 2 * (c * c + c);
        let block = (6 * c * c + 6 * c)      // adaLN modulation
            + 4 * (c * c + c)                // q, k, v, proj
            + fp * c                         // frequency embedding
            + fp * fp                        // dense frequency map
            + (ffn * c + ffn) + (c * ffn + c); // FFN
        let head = pd * c + pd;
        patch_embed + cond_mlp + t_mlp + self.n_blocks * block + head
    }
}

/// One transformer block with adaLN-zero modulation.
///
/// Stage 1: non-affine LN -> scale/shift -> time-axis attention -> frequency
/// mixing -> gated residual.  Stage 2: non-affine LN -> scale/shift -> FFN ->
/// gated residual.  All six modulation signals come from a zero-initialized
/// projection of the conditioning, so the block is the identity at init.
pub struct BackboneBlock {
    modulation: Linear,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    freq_emb: candle_core::Var,
    freq_map: Linear,
    norm2: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    n_heads: usize,
}

impl BackboneBlock {
    pub fn new(vars: &mut Vars, name: &str, cfg: &LseConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.hidden;
        let fp = cfg.n_freq_patches();
        Ok(BackboneBlock {
            modulation: Linear::new(vars, &format!("{name}.mod"), c, 6 * c, VarInit::Zeros, rng)?,
            norm1: LayerNorm::non_affine(),
            q: Linear::new(vars, &format!("{name}.attn.q"), c, c, VarInit::KaimingUniform, rng)?,
            k: Linear::new(vars, &format!("{name}.attn.k"), c, c, VarInit::KaimingUniform, rng)?,
            v: Linear::new(vars, &format!("{name}.attn.v"), c, c, VarInit::KaimingUniform, rng)?,
            proj: Linear::new(vars, &format!("{name}.attn.proj"), c, c, VarInit::KaimingUniform, rng)?,
            freq_emb: vars.var(
                &format!("{name}.freq_emb"),
                (fp, c),
                VarInit::Randn { std: 0.02 },
                rng,
            )?,
            freq_map: Linear::new_no_bias(vars, &format!("{name}.freq_map"), fp, fp, VarInit::Eye, rng)?,
            norm2: LayerNorm::non_affine(),
            ffn_in: Linear::new(vars, &format!("{name}.ffn.in"), c, cfg.ffn_mult * c, VarInit::KaimingUniform, rng)?,
            ffn_out: Linear::new(vars, &format!("{name}.ffn.out"), cfg.ffn_mult * c, c, VarInit::KaimingUniform, rng)?,
            n_heads: cfg.n_heads,
        })
    }

    fn attention(&self, h: &Tensor) -> Result<Tensor> {
        let (f, t, c) = h.dims3()?;
        let heads = self.n_heads;
        let hd = c / heads;
        let split = |x: Tensor| -> Result<Tensor> {
            // [F, T, C] -> [F * heads, T, head_dim]
            Ok(x.reshape((f, t, heads, hd))?
                .transpose(1, 2)?
                .reshape((f * heads, t, hd))?
                .contiguous()?)
        };
        let q = split(self.q.forward(h)?)?;
        let k = split(self.k.forward(h)?)?;
        let v = split(self.v.forward(h)?)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let scores = q.matmul(&k.transpose(1, 2)?)?.affine(scale, 0.0)?;
        let attn = stable_softmax(&scores)?;
        let out = attn.matmul(&v)?; // [F * heads, T, head_dim]
        let out = out
            .reshape((f, heads, t, hd))?
            .transpose(1, 2)?
            .reshape((f, t, c))?
            .contiguous()?;
        self.proj.forward(&out)
    }

    /// Mix information across frequency rows: add the frequency embedding,
    /// then apply the learned dense map along the frequency axis.
    fn freq_mix(&self, h: &Tensor) -> Result<Tensor> {
        let (f, _t, c) = h.dims3()?;
        let emb = self.freq_emb.as_tensor().to_dtype(h.dtype())?.reshape((f, 1, c))?;
        let h = h.broadcast_add(&emb)?;
        // [F, T, C] -> [T*C rows over F] via permute; dense map, permute back.
        let moved = h.permute((1, 2, 0))?.contiguous()?; // [T, C, F]
        let mixed = self.freq_map.forward(&moved)?;
        Ok(mixed.permute((2, 0, 1))?.contiguous()?)
    }

    /// `x` is `[F, T, C]`; `cond` is the `[T, C]` conditioning embedding.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (_f, t, c) = x.dims3()?;
        let m = self.modulation.forward(&cond.silu()?)?; // [T, 6C]
        let chunk = |i: usize| -> Result<Tensor> {
            Ok(m.narrow(1, i * c, c)?.reshape((1, t, c))?)
        };
        let (gamma1, beta1, alpha1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (gamma2, beta2, alpha2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = self.norm1.forward(x)?;
        let h = h.broadcast_mul(&gamma1.affine(1.0, 1.0)?)?.broadcast_add(&beta1)?;
        let h = self.attention(&h)?;
        let h = self.freq_mix(&h)?;
        let x = x.broadcast_add(&h.broadcast_mul(&alpha1)?)?;

        let h = self.norm2.forward(&x)?;
        let h = h.broadcast_mul(&gamma2.affine(1.0, 1.0)?)?.broadcast_add(&beta2)?;
        let h = self.ffn_out.forward(&self.ffn_in.forward(&h)?.gelu()?)?;
        let x = x.broadcast_add(&h.broadcast_mul(&alpha2)?)?;
        Ok(x)
    }
}

/// The full denoiser.
pub struct LseNet {
    pub cfg: LseConfig,
    vars: Vars,
    patch_embed: Linear,
    cond_in: Linear,
    cond_mid: Linear,
    t_in: Linear,
    t_out: Linear,
    blocks: Vec<BackboneBlock>,
    final_norm: LayerNorm,
    head: Linear,
    act_dtype: DType,
}

impl LseNet {
    pub fn new(cfg: &LseConfig, store_dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut vars = Vars::with_dtype(store_dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = cfg.hidden;
        let patch_embed =
            Linear::new(&mut vars, "patch_embed", cfg.patch_dim(), c, VarInit::KaimingUniform, rng)?;
        let cond_in = Linear::new(
            &mut vars,
            "cond.in",
            cfg.n_mel * cfg.patch_t,
            c,
            VarInit::KaimingUniform,
            rng,
        )?;
        let cond_mid = Linear::new(&mut vars, "cond.mid", c, c, VarInit::KaimingUniform, rng)?;
        let t_in = Linear::new(&mut vars, "t_embed.in", c, c, VarInit::KaimingUniform, rng)?;
        let t_out = Linear::new(&mut vars, "t_embed.out", c, c, VarInit::KaimingUniform, rng)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| BackboneBlock::new(&mut vars, &format!("block.{i:02}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut vars, "head", c, cfg.patch_dim(), VarInit::Zeros, rng)?;
        let net = LseNet {
            cfg: cfg.clone(),
            vars,
            patch_embed,
            cond_in,
            cond_mid,
            t_in,
            t_out,
            blocks,
            final_norm: LayerNorm::non_affine(),
            head,
            act_dtype: store_dtype,
        };
        let expect = cfg.expected_n_params();
        let got = net.vars.n_params();
        if got != expect {
            return Err(Error::Config(format!(
                "parameter count {got} does not match the closed form {expect}"
            )));
        }
        Ok(net)
    }

    pub fn vars(&self) -> &Vars {
        &self.vars
    }

    /// Dtype used for activations; weights stay in the store dtype and are
    /// cast on the fly.
    pub fn set_activation_dtype(&mut self, dtype: DType) {
        self.act_dtype = dtype;
    }

    /// `[n_linear, T] -> [F_p, T / patch_t, patch_dim]`.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (n_f, t) = x.dims2()?;
        let cfg = &self.cfg;
        if n_f != cfg.n_linear {
            return Err(Error::InvalidInput(format!(
                "expected {} frequency bins, got {n_f}",
                cfg.n_linear
            )));
        }
        if t == 0 || t % cfg.patch_t != 0 {
            return Err(Error::InvalidInput(format!(
                "frame count {t} must be a positive multiple of patch_t {}",
                cfg.patch_t
            )));
        }
        let fp = cfg.n_freq_patches();
        let tp = t / cfg.patch_t;
        Ok(x.reshape((fp, cfg.patch_f, tp, cfg.patch_t))?
            .permute((0, 2, 1, 3))?
            .reshape((fp, tp, cfg.patch_dim()))?
            .contiguous()?)
    }

    /// Exact inverse of [`LseNet::patchify`].
    pub fn unpatchify(&self, tokens: &Tensor) -> Result<Tensor> {
        let (fp, tp, pd) = tokens.dims3()?;
        let cfg = &self.cfg;
        if fp != cfg.n_freq_patches() || pd != cfg.patch_dim() {
            return Err(Error::InvalidInput(format!(
                "token grid [{fp}, {tp}, {pd}] does not match the configuration"
            )));
        }
        Ok(tokens
            .reshape((fp, tp, cfg.patch_f, cfg.patch_t))?
            .permute((0, 2, 1, 3))?
            .reshape((cfg.n_linear, tp * cfg.patch_t))?
            .contiguous()?)
    }

    /// Sinusoidal embedding of token time indices, `[n_tokens, hidden]`.
    pub fn time_positional_embedding(&self, n_tokens: usize, dtype: DType) -> Result<Tensor> {
        let pos: Vec<f32> = (0..n_tokens).map(|i| i as f32).collect();
        sinusoidal_embedding(&pos, self.cfg.hidden, 10_000.0, dtype)
    }

    /// Combine mel frames and the diffusion step into the `[T', hidden]`
    /// conditioning sequence feeding every block's modulation.
    pub fn condition_encode(&self, mel: &Tensor, t_step: usize, dtype: DType) -> Result<Tensor> {
        let (n_mel, t) = mel.dims2()?;
        let cfg = &self.cfg;
        if n_mel != cfg.n_mel {
            return Err(Error::InvalidInput(format!(
                "expected {} mel bands, got {n_mel}",
                cfg.n_mel
            )));
        }
        if t % cfg.patch_t != 0 {
            return Err(Error::InvalidInput(format!(
                "frame count {t} must be a multiple of patch_t {}",
                cfg.patch_t
            )));
        }
        let tp = t / cfg.patch_t;
        let grouped = mel
            .to_dtype(dtype)?
            .reshape((n_mel, tp, cfg.patch_t))?
            .permute((1, 0, 2))?
            .reshape((tp, n_mel * cfg.patch_t))?
            .contiguous()?;
        let c = self.cond_mid.forward(&self.cond_in.forward(&grouped)?.gelu()?)?.gelu()?;
        let t_emb = sinusoidal_embedding(&[t_step as f32], cfg.hidden, 10_000.0, dtype)?;
        let t_emb = self.t_out.forward(&self.t_in.forward(&t_emb)?.gelu()?)?;
        Ok(c.broadcast_add(&t_emb)?)
    }

    /// Predict epsilon for a noisy `[n_linear, T]` spectrogram.
    pub fn forward(&self, x_noisy: &Tensor, mel: &Tensor, t_step: usize) -> Result<Tensor> {
        let in_dtype = x_noisy.dtype();
        let x = x_noisy.to_dtype(self.act_dtype)?;
        let tokens = self.patchify(&x)?;
        let tokens = self.patch_embed.forward(&tokens)?;
        let (_, tp, _) = tokens.dims3()?;
        let pos = self.time_positional_embedding(tp, self.act_dtype)?.unsqueeze(0)?;
        let mut h = tokens.broadcast_add(&pos)?;
        let cond = self.condition_encode(&mel.to_dtype(self.act_dtype)?, t_step, self.act_dtype)?;
        for block in &self.blocks {
            h = block.forward(&h, &cond)?;
        }
        let h = self.final_norm.forward(&h)?;
        let out = self.head.forward(&h)?;
        Ok(self.unpatchify(&out)?.to_dtype(in_dtype)?)
    }
}

impl EpsModel for LseNet {
    fn predict_eps(&self, x_in: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x_in, cond, t)
    }
}

use rand::SeedableRng;
