//! Denoising-diffusion machinery for the linear-spectrogram estimator:
//! the discrete variance-preserving noise schedule used for training, and a
//! DPM-Solver++(2M) sampler that walks a Karras sigma ladder at inference
//! time.
//!
//! Training uses epsilon prediction: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
//! and the loss is the mean squared error between predicted and drawn noise.
//! Sampling runs in the variance-exploding parameterization `x = x0 + sigma eps`
//! with `sigma(t) = sqrt((1 - abar_t) / abar_t)`; scaling the sampler state by
//! `1 / sqrt(1 + sigma^2)` recovers exactly the `x_t` the network saw during
//! training, so the two parameterizations share one model.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// A noise-conditioned epsilon predictor.  `x_in` is already scaled to the
/// training-time parameterization; `t` indexes the discrete schedule.
pub trait EpsModel {
    fn predict_eps(&self, x_in: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor>;
}

/// Discrete variance-preserving schedule with linearly spaced betas.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const BETA_START: f64 = 1e-4;
    pub const BETA_END: f64 = 2e-2;

    pub fn new(n_steps: usize) -> Result<Self> {
        Self::with_betas(n_steps, Self::BETA_START, Self::BETA_END)
    }

    pub fn with_betas(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::Config("noise schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(n_steps);
        let mut alpha_bars = Vec::with_capacity(n_steps);
        let mut abar = 1.0f64;
        for i in 0..n_steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64;
            abar *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(abar);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Noise level of step `t` in the variance-exploding parameterization.
    pub fn sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ((1.0 - ab) / ab).sqrt()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma(0)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma(self.n_steps() - 1)
    }

    /// Discrete step whose sigma is nearest to `sigma`.
    pub fn nearest_step(&self, sigma: f64) -> usize {
        // sigma(t) increases monotonically with t.
        let n = self.n_steps();
        let mut lo = 0usize;
        let mut hi = n - 1;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.sigma(mid) < sigma {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo > 0 && (sigma - self.sigma(lo - 1)).abs() <= (self.sigma(lo) - sigma).abs() {
            lo - 1
        } else {
            lo
        }
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    if t >= schedule.n_steps() {
        return Err(Error::InvalidInput(format!(
            "step {t} out of range for {}-step schedule",
            schedule.n_steps()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let xt = (x0.affine(ab.sqrt(), 0.0)? + noise.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(xt)
}

/// Epsilon-prediction MSE at step `t` for the given noise draw.
pub fn training_loss(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    let xt = forward_diffuse(schedule, x0, t, noise)?;
    let eps_hat = model.predict_eps(&xt, cond, t)?;
    let diff = (eps_hat - noise)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// Sigma ladder with Karras spacing: uniform in `sigma^(1/rho)` from
/// `sigma_max` down to `sigma_min`, with a trailing exact zero.
pub fn karras_sigmas(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config("karras ladder needs at least 2 sigmas".into()));
    }
    if !(0.0 < sigma_min && sigma_min < sigma_max) {
        return Err(Error::Config(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min}..{sigma_max}"
        )));
    }
    let max_r = sigma_max.powf(1.0 / rho);
    let min_r = sigma_min.powf(1.0 / rho);
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            (max_r + frac * (min_r - max_r)).powf(rho)
        })
        .collect();
    sigmas.push(0.0);
    Ok(sigmas)
}

/// Precomputed sampling plan: the sigma ladder plus, for each ladder rung,
/// the nearest discrete schedule step to condition the model with.
#[derive(Debug, Clone)]
pub struct SamplerPlan {
    pub sigmas: Vec<f64>,
    pub steps: Vec<usize>,
    pub rho: f64,
}

impl SamplerPlan {
    pub const DEFAULT_STEPS: usize = 32;
    pub const DEFAULT_RHO: f64 = 7.0;

    pub fn new(schedule: &NoiseSchedule, n_steps: usize, rho: f64) -> Result<Self> {
        let sigmas = karras_sigmas(n_steps, schedule.sigma_min(), schedule.sigma_max(), rho)?;
        let steps = sigmas[..n_steps]
            .iter()
            .map(|&s| schedule.nearest_step(s))
            .collect();
        Ok(SamplerPlan { sigmas, steps, rho })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

/// DPM-Solver++(2M) in the variance-exploding parameterization.
///
/// `x_init` must be drawn from `N(0, sigma_max^2)`.  Each rung scales the
/// state by `1 / sqrt(1 + sigma^2)` before querying the model, forms the
/// denoised estimate `d = x - sigma eps`, and advances with the exponential
/// integrator; from the second rung on, the previous denoised estimate gives
/// the second-order correction.  Returns the denoised state at sigma 0.
pub fn dpmpp_2m_sample(
    model: &dyn EpsModel,
    plan: &SamplerPlan,
    x_init: &Tensor,
    cond: &Tensor,
) -> Result<Tensor> {
    let n = plan.n_steps();
    let mut x = x_init.clone();
    let mut prev_denoised: Option<Tensor> = None;
    for i in 0..n {
        let sigma = plan.sigmas[i];
        let sigma_next = plan.sigmas[i + 1];
        let c_in = 1.0 / (1.0 + sigma * sigma).sqrt();
        let eps = model.predict_eps(&x.affine(c_in, 0.0)?, cond, plan.steps[i])?;
        let denoised = (x.clone() - eps.affine(sigma, 0.0)?)?;

        let ratio = sigma_next / sigma;
        x = match (&prev_denoised, sigma_next > 0.0 && i > 0) {
            (Some(prev), true) => {
                let h = (sigma / sigma_next).ln();
                let h_last = (plan.sigmas[i - 1] / sigma).ln();
                let r = h_last / h;
                let d_coef = 1.0 + 1.0 / (2.0 * r);
                let denoised_d =
                    (denoised.affine(d_coef, 0.0)? - prev.affine(d_coef - 1.0, 0.0)?)?;
                (x.affine(ratio, 0.0)? + denoised_d.affine(1.0 - ratio, 0.0)?)?
            }
            _ => (x.affine(ratio, 0.0)? + denoised.affine(1.0 - ratio, 0.0)?)?,
        };
        prev_denoised = Some(denoised);
        if !x
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "sampler state became non-finite at rung {i} (sigma {sigma})"
            )));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(v, n, &Device::Cpu).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::new(1000).unwrap();
        assert_eq!(s.n_steps(), 1000);
        assert!((s.betas[0] - 1e-4).abs() < 1e-15);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        for t in 1..1000 {
            assert!(s.betas[t] > s.betas[t - 1]);
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
        assert!(s.alpha_bars[999] > 0.0 && s.alpha_bars[999] < 1e-4);
        // abar_0 = 1 - beta_0
        assert!((s.alpha_bars[0] - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn karras_ladder_matches_definition() {
        let sigmas = karras_sigmas(32, 0.01, 157.0, 7.0).unwrap();
        assert_eq!(sigmas.len(), 33);
        assert!((sigmas[0] - 157.0).abs() < 1e-9);
        assert!((sigmas[31] - 0.01).abs() < 1e-12);
        assert_eq!(sigmas[32], 0.0);
        for i in 1..33 {
            assert!(sigmas[i] < sigmas[i - 1]);
        }
        // Independent recomputation of an interior rung.
        let i = 11;
        let expect = (157.0f64.powf(1.0 / 7.0)
            + (i as f64 / 31.0) * (0.01f64.powf(1.0 / 7.0) - 157.0f64.powf(1.0 / 7.0)))
        .powi(7);
        assert!((sigmas[i] - expect).abs() < 1e-9 * expect.abs());
    }

    #[test]
    fn nearest_step_is_really_nearest() {
        let s = NoiseSchedule::new(1000).unwrap();
        let plan = SamplerPlan::new(&s, 32, 7.0).unwrap();
        for (i, &sigma) in plan.sigmas[..32].iter().enumerate() {
            let t = plan.steps[i];
            let d = (s.sigma(t) - sigma).abs();
            if t > 0 {
                assert!(d <= (s.sigma(t - 1) - sigma).abs());
            }
            if t < 999 {
                assert!(d <= (s.sigma(t + 1) - sigma).abs());
            }
        }
        assert_eq!(plan.steps[0], 999);
    }

    #[test]
    fn forward_diffuse_matches_closed_form() {
        let s = NoiseSchedule::new(1000).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::from_vec(vec![1.0f32, -2.0, 0.5], 3, &dev).unwrap();
        let noise = Tensor::from_vec(vec![0.3f32, 0.1, -1.2], 3, &dev).unwrap();
        let t = 417;
        let xt = forward_diffuse(&s, &x0, t, &noise).unwrap();
        let ab = s.alpha_bar(t);
        let got = xt.to_vec1::<f32>().unwrap();
        for (i, (&a, &b)) in [1.0f32, -2.0, 0.5].iter().zip([0.3f32, 0.1, -1.2].iter()).enumerate()
        {
            let expect = (ab.sqrt() as f32) * a + ((1.0 - ab).sqrt() as f32) * b;
            assert!((got[i] - expect).abs() < 1e-6);
        }
    }

    struct ZeroModel;
    impl EpsModel for ZeroModel {
        fn predict_eps(&self, x_in: &Tensor, _cond: &Tensor, _t: usize) -> Result<Tensor> {
            Ok(x_in.zeros_like()?)
        }
    }

    #[test]
    fn loss_of_zero_model_is_noise_power() {
        let s = NoiseSchedule::new(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, 256);
        let noise = randn(&mut rng, 256);
        let cond = x0.zeros_like().unwrap();
        let loss = training_loss(&ZeroModel, &s, &x0, &cond, 31, &noise).unwrap();
        let expect = noise.sqr().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
        let got = loss.to_scalar::<f32>().unwrap();
        assert!((got - expect).abs() < 1e-6);
    }

    /// Posterior-mean epsilon predictor for scalar Gaussian data
    /// `x0 ~ N(mean, std^2)` under the discrete schedule.
    pub struct GaussianEps {
        pub schedule: NoiseSchedule,
        pub mean: f64,
        pub std: f64,
    }

    impl EpsModel for GaussianEps {
        fn predict_eps(&self, x_in: &Tensor, _cond: &Tensor, t: usize) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(t);
            let var = ab * self.std * self.std + (1.0 - ab);
            let scale = (1.0 - ab).sqrt() / var;
            Ok(x_in.affine(scale, -scale * ab.sqrt() * self.mean)?)
        }
    }

    #[test]
    fn sampler_recovers_gaussian_statistics_coarsely() {
        let schedule = NoiseSchedule::new(1000).unwrap();
        let plan = SamplerPlan::new(&schedule, 16, 7.0).unwrap();
        let model = GaussianEps { schedule: NoiseSchedule::new(1000).unwrap(), mean: 1.0, std: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 2048;
        let sigma_max = model.schedule.sigma_max();
        let x_init = randn(&mut rng, n).affine(sigma_max, 0.0).unwrap();
        let cond = Tensor::zeros(n, DType::F32, &Device::Cpu).unwrap();
        let out = dpmpp_2m_sample(&model, &plan, &x_init, &cond).unwrap();
        let v = out.to_vec1::<f32>().unwrap();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.2, "var {var}");
    }
}
