//! Tensor building blocks shared by the models: a seeded, name-addressed
//! variable store, thin linear/layer-norm layers, sinusoidal embeddings,
//! FFT custom ops with hand-written adjoints, a differentiable STFT/iSTFT
//! pair, and a finite-difference gradient checker.
//!
//! Master weights always live in the store's dtype (f32 for training, f64
//! for gradient checks); layers cast weights to the activation dtype at
//! forward time so the same module definitions run in f16, f32 and f64.
//! Normalization and softmax statistics are never computed in f16.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use ndarray::Array2;
use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;

// ---------------------------------------------------------------------------
// Variable store
// ---------------------------------------------------------------------------

/// Weight initialization rules.  `KaimingUniform` draws from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` the product of all
/// dimensions after the first.
#[derive(Debug, Clone, Copy)]
pub enum VarInit {
    Zeros,
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    Randn { std: f64 },
    KaimingUniform,
    /// Identity matrix; shape must be square 2-D.
    Eye,
}

/// Name-addressed parameter store with deterministic iteration order and
/// seeded initialization.  All draws fill the tensor in row-major order from
/// the caller's RNG, so a fixed seed and construction order give bitwise
/// identical weights.
pub struct Vars {
    map: BTreeMap<String, Var>,
    dtype: DType,
}

impl Vars {
    pub fn new() -> Self {
        Self::with_dtype(DType::F32)
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Vars { map: BTreeMap::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        init: VarInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let shape: Shape = shape.into();
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            VarInit::Zeros => vec![0.0; n],
            VarInit::Const(c) => vec![c; n],
            VarInit::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            VarInit::Randn { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            VarInit::KaimingUniform => {
                let fan_in: usize = shape.dims().iter().skip(1).product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            VarInit::Eye => {
                let dims = shape.dims();
                if dims.len() != 2 || dims[0] != dims[1] {
                    return Err(Error::Config(format!(
                        "identity init needs a square matrix, got {dims:?}"
                    )));
                }
                let d = dims[0];
                let mut data = vec![0.0; n];
                for i in 0..d {
                    data[i * d + i] = 1.0;
                }
                data
            }
        };
        let t = Tensor::from_vec(data, shape, &DEVICE)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.map.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.map.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Overwrite every parameter from `values`; the key sets must match
    /// exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in values.keys() {
            if !self.map.contains_key(name) {
                return Err(Error::CheckpointMismatch(format!("unexpected parameter {name}")));
            }
        }
        for (name, var) in &self.map {
            let t = values
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
            var.set(&t.to_dtype(var.dtype())?)
                .map_err(|e| Error::CheckpointMismatch(format!("cannot set {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.map {
            out.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(out)
    }
}

impl Default for Vars {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Dense layer `y = x W^T + b` over the last dimension; weight is
/// `[out, in]`.
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(
        vars: &mut Vars,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: VarInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = vars.var(&format!("{name}.weight"), (out_dim, in_dim), init, rng)?;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let b_init = match init {
            VarInit::Zeros | VarInit::Const(_) => VarInit::Zeros,
            _ => VarInit::Uniform { lo: -bound, hi: bound },
        };
        let b = vars.var(&format!("{name}.bias"), out_dim, b_init, rng)?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn new_no_bias(
        vars: &mut Vars,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: VarInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = vars.var(&format!("{name}.weight"), (out_dim, in_dim), init, rng)?;
        Ok(Linear { w, b: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::InvalidInput("0-d linear input".into()))?;
        let w = self.w.as_tensor().to_dtype(x.dtype())?;
        let flat = x.reshape(((), in_dim))?;
        let mut y = flat.matmul(&w.t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&b.as_tensor().to_dtype(x.dtype())?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.w.as_tensor().dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer norm over the last dimension.  Statistics are computed in f32 when
/// the activation is f16, otherwise in the activation dtype.
pub struct LayerNorm {
    pub w: Option<Var>,
    pub b: Option<Var>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(vars: &mut Vars, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = vars.var(&format!("{name}.weight"), dim, VarInit::Const(1.0), rng)?;
        let b = vars.var(&format!("{name}.bias"), dim, VarInit::Zeros, rng)?;
        Ok(LayerNorm { w: Some(w), b: Some(b), eps: 1e-6 })
    }

    /// Normalization without learned scale/shift, for blocks that receive
    /// modulation parameters from elsewhere.
    pub fn non_affine() -> Self {
        LayerNorm { w: None, b: None, eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let stats_dt = if dt == DType::F16 { DType::F32 } else { dt };
        let xs = x.to_dtype(stats_dt)?;
        let mean = xs.mean_keepdim(D::Minus1)?;
        let xc = xs.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let denom = (var + self.eps)?.sqrt()?;
        let mut y = xc.broadcast_div(&denom)?;
        if let Some(w) = &self.w {
            y = y.broadcast_mul(&w.as_tensor().to_dtype(stats_dt)?)?;
        }
        if let Some(b) = &self.b {
            y = y.broadcast_add(&b.as_tensor().to_dtype(stats_dt)?)?;
        }
        Ok(y.to_dtype(dt)?)
    }
}

/// Softmax over the last dimension with f32 statistics for f16 inputs.
pub fn stable_softmax(x: &Tensor) -> Result<Tensor> {
    let dt = x.dtype();
    let stats_dt = if dt == DType::F16 { DType::F32 } else { dt };
    let xs = x.to_dtype(stats_dt)?;
    let m = xs.max_keepdim(D::Minus1)?;
    let e = xs.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?.to_dtype(dt)?)
}

/// Sinusoidal embedding of scalar positions: `dim/2` sine channels followed
/// by `dim/2` cosine channels with geometrically spaced periods up to
/// `max_period`.
pub fn sinusoidal_embedding(
    positions: &[f32],
    dim: usize,
    max_period: f64,
    dtype: DType,
) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push((p as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push((p as f64 * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), &DEVICE)?.to_dtype(dtype)?)
}

/// Depthwise 2-D convolution on a channels-last `[H, W, C]` tensor with an
/// odd `[K, K, C]` kernel and zero padding, written as K*K shifted
/// broadcast-multiplies so it stays fast and differentiable on CPU.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (h, w, _c) = x.dims3()?;
    let (kh, kw, _kc) = kernel.dims3()?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config("depthwise kernel must be odd-sized".into()));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kernel.to_dtype(x.dtype())?;
    let padded = x.pad_with_zeros(0, ph, ph)?.pad_with_zeros(1, pw, pw)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..kh {
        for dx in 0..kw {
            let win = padded.narrow(0, dy, h)?.narrow(1, dx, w)?;
            let tap = k.narrow(0, dy, 1)?.narrow(1, dx, 1)?; // [1, 1, C]
            let term = win.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    let mut out = acc.expect("kernel is non-empty");
    if let Some(b) = bias {
        out = out.broadcast_add(&b.to_dtype(x.dtype())?)?;
    }
    Ok(out)
}

/// Depthwise 1-D convolution on `[T, C]` with an odd `[K, C]` kernel.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t, _c) = x.dims2()?;
    let (k_len, _kc) = kernel.dims2()?;
    if k_len % 2 == 0 {
        return Err(Error::Config("depthwise kernel must be odd-sized".into()));
    }
    let p = k_len / 2;
    let k = kernel.to_dtype(x.dtype())?;
    let padded = x.pad_with_zeros(0, p, p)?;
    let mut acc: Option<Tensor> = None;
    for dt in 0..k_len {
        let win = padded.narrow(0, dt, t)?;
        let tap = k.narrow(0, dt, 1)?; // [1, C]
        let term = win.broadcast_mul(&tap)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    let mut out = acc.expect("kernel is non-empty");
    if let Some(b) = bias {
        out = out.broadcast_add(&b.to_dtype(x.dtype())?)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ndarray <-> tensor
// ---------------------------------------------------------------------------

pub fn array2_to_tensor(a: &Array2<f32>) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), &DEVICE)?)
}

pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((r, c), data)
        .map_err(|e| Error::InvalidInput(format!("bad shape for array: {e}")))
}

// ---------------------------------------------------------------------------
// FFT custom ops
// ---------------------------------------------------------------------------

/// Real FFT plans (f32 and f64) for one transform size, shared by the
/// custom ops below.
#[derive(Clone)]
pub struct FftPlans {
    pub n: usize,
    r2c32: Arc<dyn RealToComplex<f32>>,
    c2r32: Arc<dyn ComplexToReal<f32>>,
    r2c64: Arc<dyn RealToComplex<f64>>,
    c2r64: Arc<dyn ComplexToReal<f64>>,
}

impl FftPlans {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::Config(format!("fft size {n} must be even and >= 2")));
        }
        let mut p32 = RealFftPlanner::<f32>::new();
        let mut p64 = RealFftPlanner::<f64>::new();
        Ok(FftPlans {
            n,
            r2c32: p32.plan_fft_forward(n),
            c2r32: p32.plan_fft_inverse(n),
            r2c64: p64.plan_fft_forward(n),
            c2r64: p64.plan_fft_inverse(n),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n / 2 + 1
    }
}

trait FftScalar: realfft::FftNum {
    fn plans(p: &FftPlans) -> (&Arc<dyn RealToComplex<Self>>, &Arc<dyn ComplexToReal<Self>>);
    fn scalar64(v: f64) -> Self;
}

impl FftScalar for f32 {
    fn plans(p: &FftPlans) -> (&Arc<dyn RealToComplex<f32>>, &Arc<dyn ComplexToReal<f32>>) {
        (&p.r2c32, &p.c2r32)
    }
    fn scalar64(v: f64) -> f32 {
        v as f32
    }
}

impl FftScalar for f64 {
    fn plans(p: &FftPlans) -> (&Arc<dyn RealToComplex<f64>>, &Arc<dyn ComplexToReal<f64>>) {
        (&p.r2c64, &p.c2r64)
    }
    fn scalar64(v: f64) -> f64 {
        v
    }
}

/// Rows of length `n` -> rows of `[re(0..bins), im(0..bins)]`.
fn dft_rows<T: FftScalar>(plans: &FftPlans, input: &[T], rows: usize) -> Vec<T> {
    let n = plans.n;
    let bins = plans.n_bins();
    let (r2c, _) = T::plans(plans);
    let mut frame = vec![T::scalar64(0.0); n];
    let mut spec = r2c.make_output_vec();
    let mut scratch = r2c.make_scratch_vec();
    let mut out = vec![T::scalar64(0.0); rows * 2 * bins];
    for r in 0..rows {
        frame.copy_from_slice(&input[r * n..(r + 1) * n]);
        r2c.process_with_scratch(&mut frame, &mut spec, &mut scratch)
            .expect("forward real fft cannot fail on finite input");
        for (b, v) in spec.iter().enumerate() {
            out[r * 2 * bins + b] = v.re;
            out[r * 2 * bins + bins + b] = v.im;
        }
    }
    out
}

/// Rows of `[re, im]` -> real rows via the hermitian inverse transform,
/// scaled by `scale`; interior bins are halved first when `halve_interior`
/// (turning the doubled hermitian sum into a plain one for adjoints).
/// Imaginary parts of the DC and Nyquist bins are ignored.
fn idft_rows<T: FftScalar>(
    plans: &FftPlans,
    input: &[T],
    rows: usize,
    scale: f64,
    halve_interior: bool,
) -> Vec<T> {
    let n = plans.n;
    let bins = plans.n_bins();
    let (_, c2r) = T::plans(plans);
    let mut spec = c2r.make_input_vec();
    let mut frame = vec![T::scalar64(0.0); n];
    let mut scratch = c2r.make_scratch_vec();
    let mut out = vec![T::scalar64(0.0); rows * n];
    let half = T::scalar64(0.5);
    let scale_t = T::scalar64(scale);
    for r in 0..rows {
        let row = &input[r * 2 * bins..(r + 1) * 2 * bins];
        for b in 0..bins {
            let mut re = row[b];
            let mut im = row[bins + b];
            if b == 0 || b == bins - 1 {
                im = T::scalar64(0.0);
            } else if halve_interior {
                re = re * half;
                im = im * half;
            }
            spec[b] = Complex::new(re, im);
        }
        c2r.process_with_scratch(&mut spec, &mut frame, &mut scratch)
            .expect("inverse real fft cannot fail once edge bins are real");
        for (i, v) in frame.iter().enumerate() {
            out[r * n + i] = *v * scale_t;
        }
    }
    out
}

/// Multiply positive-frequency bins by `exp(i theta)`; DC and Nyquist, which
/// must stay real, are multiplied by the sign of `cos(theta)` so every bin
/// magnitude is preserved and `theta = pi` negates the signal exactly.
fn rotate_rows<T: FftScalar>(plans: &FftPlans, input: &[T], rows: usize, theta: f64) -> Vec<T> {
    let n = plans.n;
    let bins = plans.n_bins();
    let (r2c, c2r) = T::plans(plans);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let edge = if cos_t >= 0.0 { 1.0 } else { -1.0 };
    let rot = Complex::new(T::scalar64(cos_t), T::scalar64(sin_t));
    let edge_t = T::scalar64(edge / n as f64);
    let inv_n = Complex::new(T::scalar64(1.0 / n as f64), T::scalar64(0.0));
    let mut frame = vec![T::scalar64(0.0); n];
    let mut spec = r2c.make_output_vec();
    let mut scratch = r2c.make_scratch_vec();
    let mut scratch_inv = c2r.make_scratch_vec();
    let mut out = vec![T::scalar64(0.0); rows * n];
    for r in 0..rows {
        frame.copy_from_slice(&input[r * n..(r + 1) * n]);
        r2c.process_with_scratch(&mut frame, &mut spec, &mut scratch)
            .expect("forward real fft cannot fail on finite input");
        for (b, v) in spec.iter_mut().enumerate() {
            if b == 0 || b == bins - 1 {
                *v = Complex::new(v.re * edge_t, T::scalar64(0.0));
            } else {
                *v = *v * rot * inv_n;
            }
        }
        c2r.process_with_scratch(&mut spec, &mut frame, &mut scratch_inv)
            .expect("inverse real fft cannot fail once edge bins are real");
        out[r * n..(r + 1) * n].copy_from_slice(&frame);
    }
    out
}

/// Borrowed slice of a contiguous f32 or f64 CPU tensor: exactly one of the
/// two slots is populated, plus the element count.
type ContiguousData<'a> = (&'a [f32], Option<&'a [f64]>, usize);

fn contiguous_data<'a>(
    storage: &'a CpuStorage,
    layout: &Layout,
    op: &str,
) -> candle_core::Result<ContiguousData<'a>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{op}: input must be contiguous")))?;
    match storage {
        CpuStorage::F32(v) => Ok((&v[start..end], None, end - start)),
        CpuStorage::F64(v) => Ok((&[], Some(&v[start..end]), end - start)),
        _ => Err(candle_core::Error::Msg(format!("{op}: only f32/f64 supported"))),
    }
}

fn rows_and_last(layout: &Layout, expect_last: usize, op: &str) -> candle_core::Result<usize> {
    let dims = layout.shape().dims();
    let last = *dims.last().unwrap_or(&0);
    if last != expect_last {
        return Err(candle_core::Error::Msg(format!(
            "{op}: last dim {last} != expected {expect_last}"
        )));
    }
    Ok(dims.iter().product::<usize>() / expect_last)
}

fn out_shape(layout: &Layout, last: usize) -> Shape {
    let mut dims = layout.shape().dims().to_vec();
    *dims.last_mut().unwrap() = last;
    Shape::from_dims(&dims)
}

/// `[.., n] -> [.., 2 * (n/2 + 1)]`, the unnormalized real DFT of each row
/// stored as concatenated real and imaginary halves.
#[derive(Clone)]
struct RfftFramesOp {
    plans: FftPlans,
}

impl CustomOp1 for RfftFramesOp {
    fn name(&self) -> &'static str {
        "rfft-frames"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let rows = rows_and_last(layout, self.plans.n, self.name())?;
        let shape = out_shape(layout, 2 * self.plans.n_bins());
        let (f32s, f64s, _) = contiguous_data(storage, layout, self.name())?;
        let out = match f64s {
            None => CpuStorage::F32(dft_rows(&self.plans, f32s, rows)),
            Some(d) => CpuStorage::F64(dft_rows(&self.plans, d, rows)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // Adjoint of the forward DFT: inverse transform of the halved
        // spectrum gradient without the 1/n normalization.
        let g = grad_res.contiguous()?;
        let rows = g.elem_count() / (2 * self.plans.n_bins());
        let grad = match g.dtype() {
            DType::F32 => {
                let data = g.flatten_all()?.to_vec1::<f32>()?;
                let out = idft_rows(&self.plans, &data, rows, 1.0, true);
                Tensor::from_vec(out, arg.shape(), arg.device())?
            }
            DType::F64 => {
                let data = g.flatten_all()?.to_vec1::<f64>()?;
                let out = idft_rows(&self.plans, &data, rows, 1.0, true);
                Tensor::from_vec(out, arg.shape(), arg.device())?
            }
            dt => candle_core::bail!("rfft-frames bwd: unsupported dtype {dt:?}"),
        };
        Ok(Some(grad))
    }
}

/// `[.., 2 * (n/2 + 1)] -> [.., n]`, the normalized hermitian inverse DFT of
/// each row.  Imaginary parts of the DC and Nyquist bins are ignored (they
/// cannot influence a real signal) and receive zero gradient.
#[derive(Clone)]
struct IrfftFramesOp {
    plans: FftPlans,
}

impl CustomOp1 for IrfftFramesOp {
    fn name(&self) -> &'static str {
        "irfft-frames"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.plans.n;
        let rows = rows_and_last(layout, 2 * self.plans.n_bins(), self.name())?;
        let shape = out_shape(layout, n);
        let scale = 1.0 / n as f64;
        let (f32s, f64s, _) = contiguous_data(storage, layout, self.name())?;
        let out = match f64s {
            None => CpuStorage::F32(idft_rows(&self.plans, f32s, rows, scale, false)),
            Some(d) => CpuStorage::F64(idft_rows(&self.plans, d, rows, scale, false)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // Adjoint of the normalized hermitian inverse: forward DFT scaled by
        // k_f / n where k_f is 2 on interior bins and 1 on DC/Nyquist.
        let n = self.plans.n;
        let bins = self.plans.n_bins();
        let g = grad_res.contiguous()?;
        let rows = g.elem_count() / n;
        fn scale_bins<T: FftScalar>(spec: &mut [T], rows: usize, bins: usize, n: usize) {
            let two_over_n = T::scalar64(2.0 / n as f64);
            let one_over_n = T::scalar64(1.0 / n as f64);
            for r in 0..rows {
                let row = &mut spec[r * 2 * bins..(r + 1) * 2 * bins];
                for b in 0..bins {
                    let k = if b == 0 || b == bins - 1 { one_over_n } else { two_over_n };
                    row[b] = row[b] * k;
                    row[bins + b] = row[bins + b] * k;
                }
            }
        }
        let grad = match g.dtype() {
            DType::F32 => {
                let data = g.flatten_all()?.to_vec1::<f32>()?;
                let mut out = dft_rows(&self.plans, &data, rows);
                scale_bins(&mut out, rows, bins, n);
                Tensor::from_vec(out, arg.shape(), arg.device())?
            }
            DType::F64 => {
                let data = g.flatten_all()?.to_vec1::<f64>()?;
                let mut out = dft_rows(&self.plans, &data, rows);
                scale_bins(&mut out, rows, bins, n);
                Tensor::from_vec(out, arg.shape(), arg.device())?
            }
            dt => candle_core::bail!("irfft-frames bwd: unsupported dtype {dt:?}"),
        };
        Ok(Some(grad))
    }
}

/// Constant phase rotation of each row's spectrum (see [`phase_rotate`]).
#[derive(Clone)]
struct PhaseRotateOp {
    plans: FftPlans,
    theta: f64,
}

impl CustomOp1 for PhaseRotateOp {
    fn name(&self) -> &'static str {
        "phase-rotate"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let rows = rows_and_last(layout, self.plans.n, self.name())?;
        let shape = layout.shape().clone();
        let (f32s, f64s, _) = contiguous_data(storage, layout, self.name())?;
        let out = match f64s {
            None => CpuStorage::F32(rotate_rows(&self.plans, f32s, rows, self.theta)),
            Some(d) => CpuStorage::F64(rotate_rows(&self.plans, d, rows, self.theta)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // The rotation is a real circular convolution; its adjoint is the
        // rotation by -theta (the DC/Nyquist sign factor is symmetric).
        let g = grad_res
            .contiguous()?
            .apply_op1(PhaseRotateOp { plans: self.plans.clone(), theta: -self.theta })?;
        Ok(Some(g))
    }
}

/// Unnormalized real DFT of each length-`n` row; output rows hold the real
/// halves then the imaginary halves of the `n/2 + 1` bins.
pub fn rfft_frames(x: &Tensor, plans: &FftPlans) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(RfftFramesOp { plans: plans.clone() })?)
}

/// Normalized hermitian inverse DFT of each `[re, im]` row.
pub fn irfft_frames(x: &Tensor, plans: &FftPlans) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(IrfftFramesOp { plans: plans.clone() })?)
}

/// Rotate the phase of every positive-frequency component of each row by
/// `theta`, leaving all bin magnitudes unchanged; `theta = pi` negates the
/// signal exactly.  Differentiable with an exact adjoint.
pub fn phase_rotate(x: &Tensor, plans: &FftPlans, theta: f64) -> Result<Tensor> {
    // The two real-valued rotations bypass the FFT round trip: 0 is the
    // identity and pi an exact sign flip (its adjoint, rotation by -pi, is
    // the same sign flip, so gradients agree with the general path).
    if theta == 0.0 {
        return Ok(x.clone());
    }
    if theta == std::f64::consts::PI {
        return Ok(x.affine(-1.0, 0.0)?);
    }
    Ok(x.contiguous()?.apply_op1(PhaseRotateOp { plans: plans.clone(), theta })?)
}

// ---------------------------------------------------------------------------
// Differentiable STFT / iSTFT
// ---------------------------------------------------------------------------

/// Differentiable, autodiff-friendly STFT analysis and inverse synthesis for
/// one `(fft_size, hop)` pair with a periodic Hann window of the full FFT
/// length, matching the framing of [`crate::spectral::SpectralAnalyzer`].
pub struct DiffStft {
    pub fft_size: usize,
    pub hop: usize,
    plans: FftPlans,
    window: Tensor, // [1, fft_size], f32
    window_f64: Vec<f64>,
}

impl DiffStft {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        if hop == 0 || hop > fft_size {
            return Err(Error::Config(format!("hop {hop} must be in 1..=fft_size {fft_size}")));
        }
        if !(fft_size - hop).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "fft_size {fft_size} minus hop {hop} must be even for center padding"
            )));
        }
        let plans = FftPlans::new(fft_size)?;
        let w = crate::spectral::hann_window(fft_size);
        let window_f64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let window = Tensor::from_vec(w, (1, fft_size), &DEVICE)?;
        Ok(DiffStft { fft_size, hop, plans, window, window_f64 })
    }

    pub fn plans(&self) -> &FftPlans {
        &self.plans
    }

    pub fn n_bins(&self) -> usize {
        self.plans.n_bins()
    }

    pub fn pad(&self) -> usize {
        (self.fft_size - self.hop) / 2
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }

    fn window_for(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.window.to_dtype(dtype)?)
    }

    /// Center-padded, windowed frames `[T, fft_size]` of a waveform `[n]`.
    pub fn frames(&self, wave: &Tensor) -> Result<Tensor> {
        let n = wave.dims1()?;
        if n == 0 {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        let t = self.n_frames(n);
        let pad = self.pad();
        let padded_len = (t - 1) * self.hop + self.fft_size;
        let right = padded_len - pad - n;
        let padded = wave.pad_with_zeros(0, pad, right)?;
        let views: Vec<Tensor> = (0..t)
            .map(|i| padded.narrow(0, i * self.hop, self.fft_size))
            .collect::<candle_core::Result<_>>()?;
        let frames = Tensor::stack(&views, 0)?;
        Ok(frames.broadcast_mul(&self.window_for(wave.dtype())?)?)
    }

    /// STFT as `[T, 2 * n_bins]` rows of concatenated real/imaginary parts.
    pub fn spectrum(&self, wave: &Tensor) -> Result<Tensor> {
        rfft_frames(&self.frames(wave)?, &self.plans)
    }

    /// STFT magnitudes `[T, n_bins]`; `eps` keeps the square root smooth at
    /// silent bins.
    pub fn magnitude(&self, wave: &Tensor) -> Result<Tensor> {
        let spec = self.spectrum(wave)?;
        let bins = self.n_bins();
        let re = spec.narrow(1, 0, bins)?;
        let im = spec.narrow(1, bins, bins)?;
        Ok(((re.sqr()? + im.sqr()?)? + 1e-12)?.sqrt()?)
    }

    /// Inverse of [`DiffStft::spectrum`]: overlap-add synthesis returning
    /// exactly `T * hop` samples, dividing by the squared-window envelope.
    pub fn synthesize(&self, spec: &Tensor) -> Result<Tensor> {
        let (t, width) = spec.dims2()?;
        if width != 2 * self.n_bins() {
            return Err(Error::InvalidInput(format!(
                "expected {} spectrum columns, got {width}",
                2 * self.n_bins()
            )));
        }
        let frames = irfft_frames(spec, &self.plans)?;
        let frames = frames.broadcast_mul(&self.window_for(spec.dtype())?)?;

        // Overlap-add: frame row t spans [t*hop, t*hop + fft_size) of the
        // padded timeline.  Split each row into hop-sized segments; segment
        // s of all rows forms a contiguous [t * hop] strip offset by s*hop.
        let n_seg = self.fft_size.div_ceil(self.hop);
        // Zero padding of the trailing partial segment can reach past the
        // natural padded length; size the accumulator for the longest strip.
        let acc_len = ((t - 1) * self.hop + self.fft_size).max((n_seg - 1 + t) * self.hop);
        let mut acc: Option<Tensor> = None;
        for s in 0..n_seg {
            let start = s * self.hop;
            let len = self.hop.min(self.fft_size - start);
            let seg = frames.narrow(1, start, len)?;
            let seg = if len < self.hop { seg.pad_with_zeros(1, 0, self.hop - len)? } else { seg };
            let strip = seg.reshape(t * self.hop)?;
            let shifted = strip.pad_with_zeros(0, start, acc_len - start - t * self.hop)?;
            acc = Some(match acc {
                None => shifted,
                Some(a) => (a + shifted)?,
            });
        }
        let acc = acc.expect("at least one segment");

        let pad = self.pad();
        let out_len = t * self.hop;
        let cropped = acc.narrow(0, pad, out_len)?;
        let env = self.envelope(t, pad, out_len)?.to_dtype(spec.dtype())?;
        Ok(cropped.broadcast_div(&env)?)
    }

    /// Squared-window overlap-add envelope on the cropped output range.
    fn envelope(&self, t: usize, pad: usize, out_len: usize) -> Result<Tensor> {
        let mut env = vec![0.0f64; (t - 1) * self.hop + self.fft_size];
        for frame in 0..t {
            let base = frame * self.hop;
            for (i, &w) in self.window_f64.iter().enumerate() {
                env[base + i] += w * w;
            }
        }
        let cropped: Vec<f64> = env[pad..pad + out_len].to_vec();
        if cropped.iter().any(|&v| v <= 1e-10) {
            return Err(Error::Numeric(
                "overlap-add envelope vanishes; hop too large for window".into(),
            ));
        }
        Ok(Tensor::from_vec(cropped, out_len, &DEVICE)?)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare the analytic gradient of `loss_fn` with central finite
/// differences at `probes` randomly chosen coordinates of `var`, returning
/// the worst relative error.  `loss_fn` must re-read `var` on every call.
pub fn grad_check<F>(
    var: &Var,
    loss_fn: F,
    eps: f64,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let loss = loss_fn()?;
    let grads = loss.backward()?;
    let analytic = match grads.get(var) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; var.as_tensor().elem_count()],
    };

    let original = var.as_tensor().copy()?;
    let base: Vec<f64> = original.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let n = base.len();
    let shape = var.as_tensor().shape().clone();
    let dtype = var.dtype();

    let mut indices: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        (0..probes).map(|_| rng.gen_range(0..n)).collect()
    };
    indices.sort_unstable();
    indices.dedup();

    let mut worst = 0.0f64;
    for &i in &indices {
        let mut perturbed = base.clone();
        perturbed[i] = base[i] + eps;
        var.set(&Tensor::from_vec(perturbed.clone(), shape.clone(), &DEVICE)?.to_dtype(dtype)?)?;
        let up = loss_fn()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        perturbed[i] = base[i] - eps;
        var.set(&Tensor::from_vec(perturbed, shape.clone(), &DEVICE)?.to_dtype(dtype)?)?;
        let down = loss_fn()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let fd = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    var.set(&original)?;
    Ok(worst)
}
