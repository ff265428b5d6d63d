//! Closed-form diffusion quantities for diagonal Gaussian data.
//!
//! When the data distribution is `N(mu, diag(v))`, the noised marginal, the
//! loss-optimal denoiser (the posterior mean), and the endpoint of the
//! backward probability-flow ODE all have closed forms. These give exact
//! ground truth for validating losses, trained denoisers, and samplers.

use crate::diffusion::{Cond, Denoiser, NoiseLevel};
use crate::error::{QuiltError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// Diagonal Gaussian data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianData {
    mean: Vec<f64>,
    variances: Vec<f64>,
}

impl GaussianData {
    pub fn new(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(QuiltError::ShapeMismatch {
                expected: vec![mean.len()],
                actual: vec![variances.len()],
            });
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(QuiltError::InvalidConfig(
                "all variances must be positive and finite".into(),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(QuiltError::InvalidConfig("mean must be finite".into()));
        }
        Ok(Self { mean, variances })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Draw one sample as a rank-1 tensor.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let data = self
            .mean
            .iter()
            .zip(&self.variances)
            .map(|(&m, &v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            })
            .collect();
        Tensor::from_vec(data)
    }
}

/// Marginal of the noised process: `N(mu, diag(v) + sigma^2 I)`.
pub fn gaussian_marginal(data: &GaussianData, sigma: NoiseLevel) -> GaussianData {
    let s2 = sigma.value() * sigma.value();
    GaussianData {
        mean: data.mean.clone(),
        variances: data.variances.iter().map(|&v| v + s2).collect(),
    }
}

/// The denoiser minimizing the denoising error for Gaussian data: the
/// posterior mean `x - sigma^2 / (v + sigma^2) * (x - mu)`, elementwise.
#[derive(Clone, Debug)]
pub struct GaussianOptimalDenoiser {
    data: GaussianData,
}

impl Denoiser for GaussianOptimalDenoiser {
    fn denoise(&self, x: &Tensor, _cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor> {
        if x.len() != self.data.dim() {
            return Err(QuiltError::ShapeMismatch {
                expected: vec![self.data.dim()],
                actual: x.shape().to_vec(),
            });
        }
        let s2 = sigma.value() * sigma.value();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let shrink = s2 / (self.data.variances[i] + s2);
            *v -= shrink * (*v - self.data.mean[i]);
        }
        Ok(out)
    }
}

pub fn gaussian_optimal_denoiser(data: &GaussianData) -> GaussianOptimalDenoiser {
    GaussianOptimalDenoiser { data: data.clone() }
}

/// Exact endpoint of the backward ODE run with the optimal score from
/// `sigma_max` down to `sigma_min`:
/// `mu + (x - mu) * sqrt((v + sigma_min^2) / (v + sigma_max^2))` per
/// coordinate.
pub fn gaussian_flow_endpoint(
    data: &GaussianData,
    x_at_sigma_max: &Tensor,
    sigma_max: f64,
    sigma_min: f64,
) -> Result<Tensor> {
    if x_at_sigma_max.len() != data.dim() {
        return Err(QuiltError::ShapeMismatch {
            expected: vec![data.dim()],
            actual: x_at_sigma_max.shape().to_vec(),
        });
    }
    if !(sigma_min <= sigma_max) {
        return Err(QuiltError::InvalidConfig(format!(
            "need sigma_min <= sigma_max, got ({sigma_min}, {sigma_max})"
        )));
    }
    let mut out = x_at_sigma_max.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let var = data.variances[i];
        let contraction =
            ((var + sigma_min * sigma_min) / (var + sigma_max * sigma_max)).sqrt();
        *v = data.mean[i] + (*v - data.mean[i]) * contraction;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::add_noise;
    use crate::rng::rng_from_seed;

    #[test]
    fn marginal_identity_at_zero_and_variance_addition() {
        let data = GaussianData::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let same = gaussian_marginal(&data, NoiseLevel::new(0.0).unwrap());
        assert_eq!(same, data);
        let bumped = gaussian_marginal(
            &GaussianData::new(vec![0.0; 3], vec![1.0; 3]).unwrap(),
            NoiseLevel::new(2.0).unwrap(),
        );
        assert_eq!(bumped.variances(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn marginal_matches_empirical_covariance_of_add_noise() {
        let data = GaussianData::new(vec![0.5, -1.0], vec![0.5, 2.0]).unwrap();
        let sigma = NoiseLevel::new(0.8).unwrap();
        let marginal = gaussian_marginal(&data, sigma);
        let mut rng = rng_from_seed(0);
        let n = 100_000;
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let x0 = data.sample(&mut rng);
            let x = add_noise(&x0, sigma, &mut rng).unwrap();
            for k in 0..2 {
                sums[k] += x.data()[k];
                sq[k] += x.data()[k] * x.data()[k];
            }
        }
        for k in 0..2 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let expected = marginal.variances()[k];
            assert!(
                (var - expected).abs() / expected < 0.05,
                "coordinate {k}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn optimal_denoiser_limits() {
        let data = GaussianData::new(vec![0.3; 4], vec![1.5; 4]).unwrap();
        let denoiser = gaussian_optimal_denoiser(&data);
        let x = Tensor::from_vec(vec![2.0, -1.0, 0.0, 5.0]);
        let near = denoiser
            .denoise(&x, None, NoiseLevel::new(1e-9).unwrap())
            .unwrap();
        assert!(near.max_abs_diff(&x) < 1e-12);
        let far = denoiser
            .denoise(&x, None, NoiseLevel::new(1e9).unwrap())
            .unwrap();
        let mu = Tensor::from_vec(vec![0.3; 4]);
        assert!(far.max_abs_diff(&mu) < 1e-6);
    }

    #[test]
    fn optimal_denoiser_matches_monte_carlo_posterior_mean() {
        // E[x0 | x0 + eps = 2] for x0 ~ N(0,1), eps ~ N(0,1) is 1 exactly.
        // Check the closed form against an importance-weighted estimate.
        let data = GaussianData::new(vec![0.0], vec![1.0]).unwrap();
        let denoiser = gaussian_optimal_denoiser(&data);
        let x = Tensor::from_vec(vec![2.0]);
        let sigma = NoiseLevel::new(1.0).unwrap();
        let closed = denoiser.denoise(&x, None, sigma).unwrap().data()[0];
        assert!((closed - 1.0).abs() < 1e-12);

        let mut rng = rng_from_seed(1);
        let n = 1_000_000;
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..n {
            let x0 = data.sample(&mut rng).data()[0];
            // likelihood of observing x = 2 given x0, up to a constant
            let w = (-(2.0 - x0) * (2.0 - x0) / 2.0).exp();
            num += w * x0;
            den += w;
        }
        let mc = num / den;
        assert!((mc - closed).abs() < 1e-2, "mc {mc} vs closed {closed}");
    }

    #[test]
    fn flow_endpoint_trivial_cases() {
        let data = GaussianData::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let x = Tensor::from_vec(vec![3.0, -1.0]);
        let same = gaussian_flow_endpoint(&data, &x, 5.0, 5.0).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-15);
        let mu = Tensor::from_vec(vec![1.0, 2.0]);
        let fixed = gaussian_flow_endpoint(&data, &mu, 80.0, 1e-4).unwrap();
        assert!(fixed.max_abs_diff(&mu) < 1e-15);
    }

    #[test]
    fn flow_endpoint_matches_fine_step_integration() {
        // Independent oracle: straightforward Euler on the backward ODE with
        // 1e5 log-spaced steps.
        let dim = 4;
        let data = GaussianData::new(vec![0.2; dim], vec![1.0; dim]).unwrap();
        let (sigma_max, sigma_min) = (80.0, 1e-4);
        let mut rng = rng_from_seed(2);
        let x0 = Tensor::randn(&[dim], &mut rng).scale(sigma_max);
        let exact = gaussian_flow_endpoint(&data, &x0, sigma_max, sigma_min).unwrap();

        let n = 100_000;
        let mut x = x0.clone();
        let log_hi = sigma_max.ln();
        let log_lo = sigma_min.ln();
        for i in 0..n {
            let s = (log_hi + (log_lo - log_hi) * i as f64 / n as f64).exp();
            let s_next = (log_hi + (log_lo - log_hi) * (i + 1) as f64 / n as f64).exp();
            let h = s_next - s;
            for (k, v) in x.data_mut().iter_mut().enumerate() {
                // dx/dsigma = sigma * (x - mu) / (var + sigma^2)
                let slope = s * (*v - data.mean()[k]) / (data.variances()[k] + s * s);
                *v += h * slope;
            }
        }
        let rel = x.sub(&exact).unwrap().sq_norm().sqrt() / exact.sq_norm().sqrt();
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn flow_endpoint_transports_moments() {
        // Pushing N(mu, v + sigma_max^2) through the endpoint map must give
        // N(mu, v + sigma_min^2) up to Monte-Carlo error.
        let dim = 3;
        let data = GaussianData::new(vec![1.0; dim], vec![2.0; dim]).unwrap();
        let (sigma_max, sigma_min) = (40.0, 0.5);
        let start = gaussian_marginal(&data, NoiseLevel::new(sigma_max).unwrap());
        let target = gaussian_marginal(&data, NoiseLevel::new(sigma_min).unwrap());
        let mut rng = rng_from_seed(3);
        let n = 10_000;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for _ in 0..n {
            let x = start.sample(&mut rng);
            let y = gaussian_flow_endpoint(&data, &x, sigma_max, sigma_min).unwrap();
            for k in 0..dim {
                sum[k] += y.data()[k];
                sq[k] += y.data()[k] * y.data()[k];
            }
        }
        for k in 0..dim {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!((mean - target.mean()[k]).abs() < 0.1, "mean {mean}");
            let expected = target.variances()[k];
            assert!(
                (var - expected).abs() / expected < 0.05,
                "var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn least_squares_fit_recovers_optimal_affine_denoiser() {
        // Fit a per-coordinate affine denoiser by closed-form least squares
        // on (noisy, clean) pairs; slope and intercept must match the
        // analytic posterior-mean coefficients.
        let data = GaussianData::new(vec![0.7], vec![1.3]).unwrap();
        let sigma = NoiseLevel::new(0.9).unwrap();
        let mut rng = rng_from_seed(4);
        let n = 4_000_000;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x0 = data.sample(&mut rng).data()[0];
            let x = add_noise(&Tensor::from_vec(vec![x0]), sigma, &mut rng).unwrap().data()[0];
            sx += x;
            sy += x0;
            sxx += x * x;
            sxy += x * x0;
        }
        let nf = n as f64;
        let slope = (sxy / nf - sx / nf * sy / nf) / (sxx / nf - (sx / nf) * (sx / nf));
        let intercept = sy / nf - slope * sx / nf;
        let v = data.variances()[0];
        let s2 = sigma.value() * sigma.value();
        let slope_star = v / (v + s2);
        let intercept_star = data.mean()[0] * s2 / (v + s2);
        assert!((slope - slope_star).abs() < 1e-3, "slope {slope}");
        assert!(
            (intercept - intercept_star).abs() < 1e-3,
            "intercept {intercept}"
        );
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(GaussianData::new(vec![0.0], vec![1.0, 2.0]).is_err());
        assert!(GaussianData::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianData::new(vec![f64::NAN], vec![1.0]).is_err());
    }
}
