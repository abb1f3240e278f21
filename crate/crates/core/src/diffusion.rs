//! Noise schedules, the closed-form forward marginal, and the DDIM reverse
//! update, independent of any particular denoiser network.
//!
//! Step indices run over `0..=T`: `alpha_bar(0) = 1` is the clean image and
//! `alpha_bar(T)` the most heavily noised state. `alpha_bar` is the
//! cumulative product of `1 - beta`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_eta: f64,
}

impl DiffusionSchedule {
    /// Linearly spaced betas, both endpoints included.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("diffusion schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (num_steps - 1) as f64;
            (0..num_steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("betas must be non-empty and inside (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            betas,
            alpha_bar,
            sigma_eta: 0.0,
        })
    }

    /// Interpolates between deterministic DDIM (`0`) and DDPM-like sampling (`1`).
    pub fn with_sigma_eta(mut self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("sigma_eta {eta} outside [0, 1]")));
        }
        self.sigma_eta = eta;
        Ok(self)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma_eta(&self) -> f64 {
        self.sigma_eta
    }

    /// Standard deviation of the injected noise when stepping `t -> t_next`.
    pub fn sigma(&self, t: usize, t_next: usize) -> f64 {
        if self.sigma_eta == 0.0 {
            return 0.0;
        }
        let (a, an) = (self.alpha_bar[t], self.alpha_bar[t_next]);
        self.sigma_eta * ((1.0 - an) / (1.0 - a)).sqrt() * (1.0 - a / an).sqrt()
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.num_steps(),
            });
        }
        Ok(())
    }
}

/// An image (or batch of images) at diffusion step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState<T> {
    pub x: Tensor<T>,
    pub t: usize,
}

/// Samples `x_t ~ q(x_t | x_0)` given the Gaussian draw `eps`.
pub fn forward_diffuse<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &DiffusionSchedule,
) -> Result<NoisyState<T>> {
    schedule.check_step(t, 1)?;
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (T::lit(a.sqrt()), T::lit((1.0 - a).sqrt()));
    let x = x0.zip_map(eps, |x, e| sa * x + sn * e)?;
    Ok(NoisyState { x, t })
}

/// Predicted clean image implied by a noise prediction at step `t`.
pub fn predict_x0<T: Scalar>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    let a = schedule.alpha_bar(t);
    if a <= 0.0 {
        return Err(Error::invalid(format!("alpha_bar({t}) is zero")));
    }
    let (sa, sn) = (T::lit(a.sqrt()), T::lit((1.0 - a).sqrt()));
    x_t.zip_map(eps_pred, |x, e| (x - sn * e) / sa)
}

/// One reverse step from `state.t` to `t_next < state.t`.
///
/// With `sigma_eta == 0` this is the deterministic DDIM update; otherwise
/// `noise` must supply the standard-normal draw for the variance term.
pub fn ddim_step<T: Scalar>(
    state: &NoisyState<T>,
    eps_pred: &Tensor<T>,
    t_next: usize,
    schedule: &DiffusionSchedule,
    clip_x0: bool,
    noise: Option<&Tensor<T>>,
) -> Result<NoisyState<T>> {
    schedule.check_step(state.t, 1)?;
    if t_next >= state.t {
        return Err(Error::invalid(format!(
            "ddim step must decrease t: {} -> {t_next}",
            state.t
        )));
    }
    eps_pred.ensure_shape(state.x.shape())?;
    let mut x0 = predict_x0(&state.x, eps_pred, state.t, schedule)?;
    if clip_x0 {
        x0 = x0.map(|v| v.max(-T::one()).min(T::one()));
    }
    let an = schedule.alpha_bar(t_next);
    let sigma = schedule.sigma(state.t, t_next);
    let (sa, sd) = (T::lit(an.sqrt()), T::lit((1.0 - an - sigma * sigma).max(0.0).sqrt()));
    let mut x = x0.zip_map(eps_pred, |x0, e| sa * x0 + sd * e)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::invalid("stochastic step needs a noise tensor"))?;
        let s = T::lit(sigma);
        x = x.zip_map(z, |v, z| v + s * z)?;
    }
    Ok(NoisyState { x, t: t_next })
}

/// Uniformly strided, strictly decreasing step indices `t_S, ..., t_1`
/// followed by `0`. With `num_infer_steps == T` this is `T, T-1, ..., 1, 0`.
pub fn inference_steps(num_steps: usize, num_infer_steps: usize) -> Result<Vec<usize>> {
    if num_infer_steps == 0 || num_infer_steps > num_steps {
        return Err(Error::invalid(format!(
            "num_infer_steps must be in 1..={num_steps}, got {num_infer_steps}"
        )));
    }
    let mut steps: Vec<usize> = (1..=num_infer_steps)
        .rev()
        .map(|k| k * num_steps / num_infer_steps)
        .collect();
    steps.push(0);
    Ok(steps)
}

/// A conditional noise predictor `eps(x_t, t, c)` over a batch.
///
/// `x_t` is `[n, channels, height, width]` and `cond` is `[n, latent_dim]`.
pub trait Denoiser<T: Scalar> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn predict_noise(&self, x_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        (**self).predict_noise(x_t, t, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub num_infer_steps: usize,
    /// Clamp the predicted clean image to `[-1, 1]` before re-noising.
    pub clip_x0: bool,
    /// Seed for the variance term when the schedule is stochastic.
    pub stochastic_seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            num_infer_steps: 100,
            clip_x0: true,
            stochastic_seed: 0,
        }
    }
}

/// Runs the reverse chain from `x_T` to a clean image.
pub fn ddim_decode<T: Scalar, D: Denoiser<T> + ?Sized>(
    x_t: &Tensor<T>,
    cond: &Tensor<T>,
    denoiser: &D,
    schedule: &DiffusionSchedule,
    options: &DecodeOptions,
) -> Result<Tensor<T>> {
    let steps = inference_steps(schedule.num_steps(), options.num_infer_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.stochastic_seed);
    let mut state = NoisyState {
        x: x_t.clone(),
        t: steps[0],
    };
    for pair in steps.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = denoiser.predict_noise(&state.x, t, cond)?;
        if !eps.all_finite() {
            return Err(Error::NonFinite(format!("noise prediction at step {t}")));
        }
        let noise = (schedule.sigma(t, t_next) > 0.0).then(|| Tensor::randn(state.x.shape(), &mut rng));
        state = ddim_step(&state, &eps, t_next, schedule, options.clip_x0, noise.as_ref())?;
        if !state.x.all_finite() {
            return Err(Error::NonFinite(format!("ddim step {t} -> {t_next}")));
        }
    }
    Ok(state.x)
}

/// Denoiser whose prediction always points at a fixed clean image, ignoring
/// the condition. Decoding with it lands on that image from any start.
#[derive(Clone, Debug)]
pub struct FixedTargetDenoiser<'a, T> {
    pub target: Tensor<T>,
    pub schedule: &'a DiffusionSchedule,
}

impl<T: Scalar> Denoiser<T> for FixedTargetDenoiser<'_, T> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: usize, _cond: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.schedule.alpha_bar(t);
        let (sa, sn) = (T::lit(a.sqrt()), T::lit((1.0 - a).sqrt()));
        let per_image = self.target.len();
        if x_t.len() % per_image != 0 {
            return Err(Error::ShapeMismatch {
                expected: self.target.shape().to_vec(),
                actual: x_t.shape().to_vec(),
            });
        }
        let target = self.target.data();
        let data = x_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - sa * target[i % per_image]) / sn)
            .collect();
        Tensor::from_vec(x_t.shape(), data)
    }
}
