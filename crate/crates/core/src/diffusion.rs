//! Diffusion process, losses, schedules, and the probability-flow ODE
//! sampler.
//!
//! The process is variance-exploding with sigma identified with time:
//! noisy observations are `x0 + eps`, `eps ~ N(0, sigma^2 I)`. A denoiser
//! estimates `x0` from the observation; its output is linked to the score
//! of the noised marginal by [`denoiser_to_score`], and sampling integrates
//! the backward ODE `dx/dsigma = (x - D(x, sigma)) / sigma` down a Karras
//! schedule with optional per-step churn.

use crate::error::{QuiltError, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A noise standard deviation (also the time coordinate, sigma(t) = t).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    /// Nonnegative and finite. Zero is allowed for noising; operations that
    /// divide by sigma reject it explicitly.
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(QuiltError::InvalidConfig(format!(
                "noise level must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(Self(sigma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Karras-style power-law discretization of noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
}

impl SigmaScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(QuiltError::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got ({}, {})",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(QuiltError::InvalidConfig(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.n_steps < 2 {
            return Err(QuiltError::InvalidConfig(format!(
                "n_steps must be >= 2, got {}",
                self.n_steps
            )));
        }
        Ok(())
    }
}

/// Integration order of the ODE sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerOrder {
    /// One denoiser evaluation per step.
    Euler,
    /// Second-order (trapezoidal) correction on all but the final step.
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: SigmaScheduleConfig,
    pub order: SamplerOrder,
    /// Total churn budget; per-step noise inflation is
    /// `gamma = min(s_churn / (n_steps - 1), sqrt(2) - 1)`.
    pub s_churn: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.s_churn >= 0.0) {
            return Err(QuiltError::InvalidConfig(format!(
                "s_churn must be >= 0, got {}",
                self.s_churn
            )));
        }
        Ok(())
    }
}

/// Log-normal distribution over noise levels used during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSampler {
    pub log_mean: f64,
    pub log_std: f64,
}

impl SigmaSampler {
    pub fn new(log_mean: f64, log_std: f64) -> Result<Self> {
        if !log_mean.is_finite() || !log_std.is_finite() || log_std < 0.0 {
            return Err(QuiltError::InvalidConfig(format!(
                "bad sigma sampler ({log_mean}, {log_std})"
            )));
        }
        Ok(Self { log_mean, log_std })
    }
}

/// Draw `sigma = exp(g)`, `g ~ N(log_mean, log_std^2)`.
pub fn sample_sigma(sampler: &SigmaSampler, rng: &mut Rng) -> NoiseLevel {
    let g: f64 = StandardNormal.sample(rng);
    NoiseLevel(f64::exp(sampler.log_mean + sampler.log_std * g))
}

/// Per-sigma weight of the denoising loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossWeighting {
    /// lambda(sigma) = 1.
    Unit,
    /// lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2.
    Edm { sigma_data: f64 },
}

impl LossWeighting {
    pub fn weight(&self, sigma: NoiseLevel) -> f64 {
        match self {
            LossWeighting::Unit => 1.0,
            LossWeighting::Edm { sigma_data } => {
                let s = sigma.value();
                (s * s + sigma_data * sigma_data) / (s * sigma_data).powi(2)
            }
        }
    }
}

/// Conditioning information attached to a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cond {
    /// A single normalized position in [0, 1]^2 (x, y order).
    Position([f64; 2]),
    /// A set of positions; the expanded-domain conditioning.
    Positions(Vec<[f64; 2]>),
}

/// The denoiser contract: map a noisy sample (plus optional conditioning)
/// at a noise level to an estimate of the clean sample, same shape.
/// `None` conditioning is the distinguished masked input.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor>;

    /// Evaluate several inputs at one noise level. Implementations may
    /// batch this; the default just loops.
    fn denoise_batch(
        &self,
        xs: &[&Tensor],
        conds: &[Option<&Cond>],
        sigma: NoiseLevel,
    ) -> Result<Vec<Tensor>> {
        xs.iter()
            .zip(conds)
            .map(|(x, c)| self.denoise(x, *c, sigma))
            .collect()
    }
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, Option<&Cond>, NoiseLevel) -> Result<Tensor>,
{
    fn denoise(&self, x: &Tensor, cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor> {
        self(x, cond, sigma)
    }
}

/// `x0 + sigma * eps` with elementwise standard normal `eps`.
pub fn add_noise(x0: &Tensor, sigma: NoiseLevel, rng: &mut Rng) -> Result<Tensor> {
    if !x0.is_finite() {
        return Err(QuiltError::NonFinite {
            context: "add_noise input".into(),
        });
    }
    let mut out = x0.clone();
    if sigma.value() > 0.0 {
        for v in out.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma.value() * e;
        }
    }
    Ok(out)
}

/// Score of the noised marginal from a denoiser output: `(d - x) / sigma^2`.
pub fn denoiser_to_score(d_out: &Tensor, x: &Tensor, sigma: NoiseLevel) -> Result<Tensor> {
    if sigma.value() == 0.0 {
        return Err(QuiltError::InvalidConfig(
            "score undefined at sigma = 0".into(),
        ));
    }
    x.check_same_shape(d_out)?;
    let inv = 1.0 / (sigma.value() * sigma.value());
    d_out.zip(x, |d, xv| (d - xv) * inv)
}

/// Inverse of [`denoiser_to_score`]: `x + sigma^2 * score`.
pub fn score_to_denoiser(score: &Tensor, x: &Tensor, sigma: NoiseLevel) -> Result<Tensor> {
    x.check_same_shape(score)?;
    let s2 = sigma.value() * sigma.value();
    x.zip(score, |xv, sc| xv + s2 * sc)
}

/// One element of a denoising-loss batch. The `id` keys the per-element
/// (sigma, eps) draw so the estimate does not depend on batch order.
pub struct LossItem<'a> {
    pub id: u64,
    pub clean: &'a Tensor,
    pub cond: Option<&'a Cond>,
}

/// Monte-Carlo estimate of the weighted denoising error over a batch: the
/// mean over elements of `lambda(sigma) * ||D(x + eps, cond, sigma) - x||^2`
/// with one (sigma, eps) draw per element.
pub fn denoising_loss(
    denoiser: &dyn Denoiser,
    batch: &[LossItem<'_>],
    sigma_sampler: &SigmaSampler,
    weighting: &LossWeighting,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(QuiltError::EmptyBatch);
    }
    use rand::RngCore;
    let round_key = rng.next_u64();
    let mut per_element = Vec::with_capacity(batch.len());
    for item in batch {
        let mut item_rng = rng_from_seed(derive_seed(round_key, item.id));
        let sigma = sample_sigma(sigma_sampler, &mut item_rng);
        let noisy = add_noise(item.clean, sigma, &mut item_rng)?;
        let d = denoiser.denoise(&noisy, item.cond, sigma)?;
        let err = d.sub(item.clean)?.sq_norm();
        per_element.push((item.id, weighting.weight(sigma) * err));
    }
    // summation in id order: the estimate is exactly invariant under batch
    // permutation
    per_element.sort_by_key(|&(id, _)| id);
    let total: f64 = per_element.iter().map(|&(_, l)| l).sum();
    Ok(total / batch.len() as f64)
}

/// Noise levels `sigma_0 = sigma_max > ... > sigma_{n-1} = sigma_min`
/// interpolated as `(smax^(1/rho) + frac * (smin^(1/rho) - smax^(1/rho)))^rho`.
/// Endpoints are pinned exactly.
pub fn karras_sigmas(config: &SigmaScheduleConfig) -> Result<Vec<NoiseLevel>> {
    config.validate()?;
    let n = config.n_steps;
    let inv_rho = 1.0 / config.rho;
    let lo = config.sigma_min.powf(inv_rho);
    let hi = config.sigma_max.powf(inv_rho);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sigma = if i == 0 {
            config.sigma_max
        } else if i == n - 1 {
            config.sigma_min
        } else {
            let frac = i as f64 / (n - 1) as f64;
            (hi + frac * (lo - hi)).powf(config.rho)
        };
        out.push(NoiseLevel(sigma));
    }
    Ok(out)
}

/// Integrate the backward probability-flow ODE from `sigma_max` to
/// `sigma_min` along the Karras schedule.
///
/// If `x_init` is absent, the start point is drawn from the Gaussian prior
/// `N(0, sigma_max^2 I)` with the given shape. With `s_churn > 0` each step
/// first inflates the noise level by `gamma` before stepping (stochastic
/// but reproducible under the seed). Heun order adds a trapezoidal
/// correction on all but the final step.
pub fn ode_sample(
    denoiser: &dyn Denoiser,
    cond: Option<&Cond>,
    config: &SamplerConfig,
    shape: &[usize],
    x_init: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<Tensor> {
    config.validate()?;
    let sigmas = karras_sigmas(&config.schedule)?;
    let n = sigmas.len();
    let mut x = match x_init {
        Some(t) => {
            if t.shape() != shape {
                return Err(QuiltError::ShapeMismatch {
                    expected: shape.to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            t.clone()
        }
        None => Tensor::randn(shape, rng).scale(config.schedule.sigma_max),
    };

    let gamma_cap = 2.0_f64.sqrt() - 1.0;
    let gamma = if config.s_churn > 0.0 {
        (config.s_churn / (n - 1) as f64).min(gamma_cap)
    } else {
        0.0
    };

    for i in 0..n - 1 {
        let sigma = sigmas[i].value();
        let sigma_next = sigmas[i + 1].value();

        // Churn: lift the state to a higher noise level before the step.
        let sigma_hat = if gamma > 0.0 {
            let sh = sigma * (1.0 + gamma);
            let extra = (sh * sh - sigma * sigma).sqrt();
            for v in x.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += extra * e;
            }
            sh
        } else {
            sigma
        };

        let d = denoiser.denoise(&x, cond, NoiseLevel(sigma_hat))?;
        if !d.is_finite() {
            return Err(QuiltError::Divergence {
                step: i,
                context: "denoiser output".into(),
            });
        }
        let h = sigma_next - sigma_hat;
        // dx/dsigma = (x - D) / sigma
        let slope = x.zip(&d, |xv, dv| (xv - dv) / sigma_hat)?;
        let mut x_next = x.clone();
        x_next.axpy(h, &slope)?;

        if config.order == SamplerOrder::Heun && i < n - 2 {
            let d2 = denoiser.denoise(&x_next, cond, sigmas[i + 1])?;
            if !d2.is_finite() {
                return Err(QuiltError::Divergence {
                    step: i,
                    context: "denoiser output (correction)".into(),
                });
            }
            let slope2 = x_next.zip(&d2, |xv, dv| (xv - dv) / sigma_next)?;
            x_next = x.clone();
            let avg = slope.zip(&slope2, |a, b| 0.5 * (a + b))?;
            x_next.axpy(h, &avg)?;
        }

        if !x_next.is_finite() {
            return Err(QuiltError::Divergence {
                step: i,
                context: "state update".into(),
            });
        }
        x = x_next;
    }
    Ok(x)
}

// EMA of parameter sets lives in `params`; re-exported from the crate root
// alongside these ops.
