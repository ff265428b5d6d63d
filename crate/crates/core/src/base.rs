//! Trainable base denoisers.
//!
//! A raw network is wrapped in the EDM output reparametrization
//! `D(x, sigma) = c_skip * x + c_out * raw(c_in * x, c_noise)`; noise levels
//! enter through a Gaussian Fourier projection of `c_noise`, positions
//! through a zero-initialized Fourier conditioning head (so the masked
//! input and a real conditioning coincide until training separates them).
//! Architectures are a small residual MLP and, for analytic verification,
//! a per-coordinate affine map.

use crate::autodiff::{Tape, Var};
use crate::diffusion::{sample_sigma, Cond, Denoiser, LossWeighting, NoiseLevel, SigmaSampler};
use crate::error::{QuiltError, Result};
use crate::params::{ema_update, Adam, LrSchedule, ParamSet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// EDM preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// `c_skip = sd^2/(s^2+sd^2)`, `c_out = s*sd/sqrt(s^2+sd^2)`,
/// `c_in = 1/sqrt(s^2+sd^2)`, `c_noise = ln(s)/4`.
pub fn precondition_coeffs(sigma: NoiseLevel, sigma_data: f64) -> Result<PreconditionCoeffs> {
    let s = sigma.value();
    if s <= 0.0 {
        return Err(QuiltError::InvalidConfig(format!(
            "preconditioning needs sigma > 0, got {s}"
        )));
    }
    if !(sigma_data > 0.0) {
        return Err(QuiltError::InvalidConfig(format!(
            "sigma_data must be positive, got {sigma_data}"
        )));
    }
    let den = s * s + sigma_data * sigma_data;
    Ok(PreconditionCoeffs {
        c_skip: sigma_data * sigma_data / den,
        c_out: s * sigma_data / den.sqrt(),
        c_in: 1.0 / den.sqrt(),
        c_noise: s.ln() / 4.0,
    })
}

/// Wrap an arbitrary raw network in the output reparametrization.
pub fn precondition(
    raw_net: impl Fn(&Tensor, f64) -> Result<Tensor>,
    x: &Tensor,
    sigma: NoiseLevel,
    sigma_data: f64,
) -> Result<Tensor> {
    let c = precondition_coeffs(sigma, sigma_data)?;
    let raw = raw_net(&x.scale(c.c_in), c.c_noise)?;
    x.check_same_shape(&raw)?;
    x.zip(&raw, |xv, rv| c.c_skip * xv + c.c_out * rv)
}

/// How conditioning inputs are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondEncoding {
    /// Unconditional model; any real conditioning is rejected.
    None,
    /// A 2D position, Fourier-projected per coordinate.
    Position2d,
}

/// Raw-network architecture behind the preconditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseArch {
    /// Residual MLP; time/conditioning embeddings added inside each block.
    Residual { hidden: usize, blocks: usize },
    /// Elementwise affine map, used to verify training against the
    /// closed-form optimal denoiser on Gaussian data.
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseNetConfig {
    pub input_shape: Vec<usize>,
    pub arch: BaseArch,
    pub cond: CondEncoding,
    /// Fourier frequency count for the noise-level embedding and (per
    /// coordinate) the position embedding.
    pub fourier_dim: usize,
    pub sigma_data: f64,
}

impl BaseNetConfig {
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_dim() == 0 {
            return Err(QuiltError::InvalidConfig("empty input shape".into()));
        }
        if self.fourier_dim == 0 {
            return Err(QuiltError::InvalidConfig("fourier_dim must be >= 1".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(QuiltError::InvalidConfig("sigma_data must be > 0".into()));
        }
        if let BaseArch::Residual { hidden, blocks } = self.arch {
            if hidden == 0 || blocks == 0 {
                return Err(QuiltError::InvalidConfig(
                    "residual arch needs hidden >= 1 and blocks >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Frequency spread of the noise-level Fourier features.
const TIME_FOURIER_SCALE: f64 = 1.0;
/// Frequency spread of the position Fourier features.
const COND_FOURIER_SCALE: f64 = 4.0;

/// A base denoiser: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct BaseDenoiser {
    pub cfg: BaseNetConfig,
    pub params: ParamSet,
}

impl BaseDenoiser {
    /// Fresh parameters; output and conditioning heads start at zero, so
    /// the untrained denoiser is `c_skip * x` and masked/real conditioning
    /// coincide.
    pub fn init(cfg: BaseNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 0xBA5E));
        let d = cfg.input_dim();
        let f = cfg.fourier_dim;
        let mut ps = ParamSet::new();
        match cfg.arch {
            BaseArch::Affine => {
                ps.push("affine.scale", Tensor::zeros(&[d]), true);
                ps.push("affine.bias", Tensor::zeros(&[d]), true);
            }
            BaseArch::Residual { hidden, blocks } => {
                let h = hidden;
                ps.push(
                    "in.w",
                    Tensor::randn(&[d, h], &mut rng).scale(1.0 / (d as f64).sqrt()),
                    true,
                );
                ps.push("in.b", Tensor::zeros(&[h]), true);
                ps.push(
                    "t_freq",
                    Tensor::randn(&[f], &mut rng).scale(TIME_FOURIER_SCALE),
                    false,
                );
                ps.push(
                    "t_emb.w",
                    Tensor::randn(&[2 * f, h], &mut rng).scale(1.0 / (2.0 * f as f64).sqrt()),
                    true,
                );
                ps.push("t_emb.b", Tensor::zeros(&[h]), true);
                if cfg.cond == CondEncoding::Position2d {
                    ps.push(
                        "c_freq",
                        Tensor::randn(&[2 * f], &mut rng).scale(COND_FOURIER_SCALE),
                        false,
                    );
                    ps.push("c_emb.w", Tensor::zeros(&[4 * f, h]), true);
                    ps.push("c_emb.b", Tensor::zeros(&[h]), true);
                }
                for i in 0..blocks {
                    let p = |s: &str| format!("blk{i}.{s}");
                    ps.push(p("ln.g"), Tensor::filled(&[h], 1.0), true);
                    ps.push(p("ln.b"), Tensor::zeros(&[h]), true);
                    ps.push(
                        p("w1"),
                        Tensor::randn(&[h, h], &mut rng).scale(1.0 / (h as f64).sqrt()),
                        true,
                    );
                    ps.push(p("b1"), Tensor::zeros(&[h]), true);
                    ps.push(
                        p("w2"),
                        Tensor::randn(&[h, h], &mut rng).scale(1.0 / (h as f64).sqrt()),
                        true,
                    );
                    ps.push(p("b2"), Tensor::zeros(&[h]), true);
                }
                ps.push("out.w", Tensor::zeros(&[h, d]), true);
                ps.push("out.b", Tensor::zeros(&[d]), true);
            }
        }
        Ok(Self { cfg, params: ps })
    }

    /// Fourier features of the conditioning; all-zero for the masked input,
    /// so the head bias acts as the learned null embedding.
    fn cond_features(&self, cond: Option<&Cond>) -> Result<Vec<f64>> {
        let f = self.cfg.fourier_dim;
        match (self.cfg.cond, cond) {
            (CondEncoding::None, None) => Ok(Vec::new()),
            (CondEncoding::None, Some(_)) => Err(QuiltError::InvalidConfig(
                "unconditional base model got a conditioning input".into(),
            )),
            (CondEncoding::Position2d, None) => Ok(vec![0.0; 4 * f]),
            (CondEncoding::Position2d, Some(Cond::Position(p))) => {
                let freqs = self
                    .params
                    .get("c_freq")
                    .expect("c_freq buffer")
                    .data();
                let mut feats = Vec::with_capacity(4 * f);
                for (axis, &coord) in p.iter().enumerate() {
                    for j in 0..f {
                        let w = std::f64::consts::TAU * freqs[axis * f + j] * coord;
                        feats.push(w.sin());
                        feats.push(w.cos());
                    }
                }
                Ok(feats)
            }
            (CondEncoding::Position2d, Some(other)) => Err(QuiltError::InvalidConfig(format!(
                "base model expects a single position conditioning, got {other:?}"
            ))),
        }
    }

    fn time_features(&self, c_noise: f64) -> Vec<f64> {
        let f = self.cfg.fourier_dim;
        let freqs = self.params.get("t_freq").expect("t_freq buffer").data();
        let mut feats = Vec::with_capacity(2 * f);
        for j in 0..f {
            let w = std::f64::consts::TAU * freqs[j] * c_noise;
            feats.push(w.sin());
            feats.push(w.cos());
        }
        feats
    }

    /// Push the whole batched forward pass onto a tape. `param_vars` must
    /// be leaves aligned with `self.params` order. Rows of the result are
    /// flattened denoised samples.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        param_vars: &[Var],
        xs: &[&Tensor],
        conds: &[Option<&Cond>],
        sigmas: &[f64],
    ) -> Result<Var> {
        let n = xs.len();
        if n == 0 {
            return Err(QuiltError::EmptyBatch);
        }
        if conds.len() != n || sigmas.len() != n {
            return Err(QuiltError::ShapeMismatch {
                expected: vec![n],
                actual: vec![conds.len(), sigmas.len()],
            });
        }
        let d = self.cfg.input_dim();
        let pv = |name: &str| -> Var {
            param_vars[self
                .params
                .index_of(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))]
        };

        let mut coeffs = Vec::with_capacity(n);
        for &s in sigmas {
            coeffs.push(precondition_coeffs(NoiseLevel::new(s)?, self.cfg.sigma_data)?);
        }

        let mut x_in = Tensor::zeros(&[n, d]);
        let mut skip = Tensor::zeros(&[n, d]);
        for (i, x) in xs.iter().enumerate() {
            if x.shape() != self.cfg.input_shape.as_slice() {
                return Err(QuiltError::ShapeMismatch {
                    expected: self.cfg.input_shape.clone(),
                    actual: x.shape().to_vec(),
                });
            }
            if !x.is_finite() {
                return Err(QuiltError::NonFinite {
                    context: "base denoiser input".into(),
                });
            }
            for j in 0..d {
                x_in.data_mut()[i * d + j] = coeffs[i].c_in * x.data()[j];
                skip.data_mut()[i * d + j] = coeffs[i].c_skip * x.data()[j];
            }
        }
        let c_out: Rc<Vec<f64>> = Rc::new(coeffs.iter().map(|c| c.c_out).collect());

        let x_in = tape.leaf(x_in);
        let raw = match self.cfg.arch {
            BaseArch::Affine => {
                let scaled = tape.mul_row(x_in, pv("affine.scale"));
                tape.add_row(scaled, pv("affine.bias"))
            }
            BaseArch::Residual { blocks, .. } => {
                let mut h = tape.matmul(x_in, pv("in.w"));
                h = tape.add_row(h, pv("in.b"));

                let mut t_feats = Tensor::zeros(&[n, 2 * self.cfg.fourier_dim]);
                for (i, c) in coeffs.iter().enumerate() {
                    let feats = self.time_features(c.c_noise);
                    t_feats.data_mut()[i * feats.len()..(i + 1) * feats.len()]
                        .copy_from_slice(&feats);
                }
                let tf = tape.leaf(t_feats);
                let temb = tape.matmul(tf, pv("t_emb.w"));
                let mut emb = tape.add_row(temb, pv("t_emb.b"));

                if self.cfg.cond == CondEncoding::Position2d {
                    let w = 4 * self.cfg.fourier_dim;
                    let mut c_feats = Tensor::zeros(&[n, w]);
                    for (i, cond) in conds.iter().enumerate() {
                        let feats = self.cond_features(*cond)?;
                        c_feats.data_mut()[i * w..(i + 1) * w].copy_from_slice(&feats);
                    }
                    let cf = tape.leaf(c_feats);
                    let cemb = tape.matmul(cf, pv("c_emb.w"));
                    let cemb = tape.add_row(cemb, pv("c_emb.b"));
                    emb = tape.add(emb, cemb);
                } else {
                    for cond in conds {
                        self.cond_features(*cond)?;
                    }
                }

                for i in 0..blocks {
                    let p = |s: &str| format!("blk{i}.{s}");
                    let u = tape.layer_norm(h, pv(&p("ln.g")), pv(&p("ln.b")), 1e-6);
                    let mut v = tape.matmul(u, pv(&p("w1")));
                    v = tape.add_row(v, pv(&p("b1")));
                    v = tape.add(v, emb);
                    v = tape.silu(v);
                    v = tape.matmul(v, pv(&p("w2")));
                    v = tape.add_row(v, pv(&p("b2")));
                    h = tape.add(h, v);
                }
                let o = tape.matmul(h, pv("out.w"));
                tape.add_row(o, pv("out.b"))
            }
        };
        let scaled = tape.scale_rows(raw, c_out);
        let skip = tape.leaf(skip);
        Ok(tape.add(scaled, skip))
    }

    /// For the affine architecture: the end-to-end slope and intercept per
    /// coordinate at a fixed noise level, `D(x) = slope * x + intercept`.
    pub fn implied_affine(&self, sigma: NoiseLevel) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.cfg.arch != BaseArch::Affine {
            return Err(QuiltError::InvalidConfig(
                "implied_affine needs the affine architecture".into(),
            ));
        }
        let c = precondition_coeffs(sigma, self.cfg.sigma_data)?;
        let w = self.params.get("affine.scale").unwrap();
        let b = self.params.get("affine.bias").unwrap();
        let slope = w
            .data()
            .iter()
            .map(|&wi| c.c_skip + c.c_out * c.c_in * wi)
            .collect();
        let intercept = b.data().iter().map(|&bi| c.c_out * bi).collect();
        Ok((slope, intercept))
    }
}

impl Denoiser for BaseDenoiser {
    fn denoise(&self, x: &Tensor, cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor> {
        let out = self.denoise_batch(&[x], &[cond], sigma)?;
        Ok(out.into_iter().next().unwrap())
    }

    fn denoise_batch(
        &self,
        xs: &[&Tensor],
        conds: &[Option<&Cond>],
        sigma: NoiseLevel,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let sigmas = vec![sigma.value(); xs.len()];
        let out = self.forward_tape(&mut tape, &param_vars, xs, conds, &sigmas)?;
        let value = tape.value(out);
        let d = self.cfg.input_dim();
        (0..xs.len())
            .map(|i| {
                Tensor::new(
                    self.cfg.input_shape.clone(),
                    value.data()[i * d..(i + 1) * d].to_vec(),
                )
            })
            .collect()
    }
}

/// Frozen per-element draws for one loss evaluation: clean samples, masks
/// applied, noise levels, and noise. Keeping them explicit makes analytic
/// gradients directly comparable to finite differences.
#[derive(Clone, Debug)]
pub struct BatchDraws {
    pub clean: Vec<Tensor>,
    pub conds: Vec<Option<Cond>>,
    pub sigmas: Vec<f64>,
    pub noisy: Vec<Tensor>,
}

impl BatchDraws {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Draw (sigma, eps) per element, keyed by element id so the result is
/// independent of batch order; conditioning is masked with probability
/// `cond_dropout`.
pub fn draw_batch(
    items: &[(u64, &Tensor, Option<&Cond>)],
    sampler: &SigmaSampler,
    cond_dropout: f64,
    draw_seed: u64,
) -> Result<BatchDraws> {
    if items.is_empty() {
        return Err(QuiltError::EmptyBatch);
    }
    let mut clean = Vec::with_capacity(items.len());
    let mut conds = Vec::with_capacity(items.len());
    let mut sigmas = Vec::with_capacity(items.len());
    let mut noisy = Vec::with_capacity(items.len());
    for &(id, x, cond) in items {
        let mut rng = rng_from_seed(derive_seed(draw_seed, id));
        let sigma = sample_sigma(sampler, &mut rng);
        let mut xn = x.clone();
        for v in xn.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sigma.value() * e;
        }
        let dropped = rng.gen_range(0.0..1.0) < cond_dropout;
        clean.push(x.clone());
        conds.push(if dropped { None } else { cond.cloned() });
        sigmas.push(sigma.value());
        noisy.push(xn);
    }
    Ok(BatchDraws {
        clean,
        conds,
        sigmas,
        noisy,
    })
}

fn loss_tape(
    model: &BaseDenoiser,
    draws: &BatchDraws,
    weighting: &LossWeighting,
) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = model
        .params
        .iter()
        .map(|p| tape.leaf(p.value.clone()))
        .collect();
    let xs: Vec<&Tensor> = draws.noisy.iter().collect();
    let conds: Vec<Option<&Cond>> = draws.conds.iter().map(|c| c.as_ref()).collect();
    let out = model.forward_tape(&mut tape, &param_vars, &xs, &conds, &draws.sigmas)?;

    let n = draws.len();
    let d = model.cfg.input_dim();
    let mut target = Tensor::zeros(&[n, d]);
    for (i, c) in draws.clean.iter().enumerate() {
        target.data_mut()[i * d..(i + 1) * d].copy_from_slice(c.data());
    }
    let target = tape.leaf(target);
    let diff = tape.sub(out, target);
    let sq = tape.mul(diff, diff);
    let weights: Rc<Vec<f64>> = Rc::new(
        draws
            .sigmas
            .iter()
            .map(|&s| weighting.weight(NoiseLevel::new(s).expect("sigma")) / n as f64)
            .collect(),
    );
    let weighted = tape.scale_rows(sq, weights);
    let loss = tape.sum_all(weighted);
    Ok((tape, param_vars, loss))
}

/// Loss value under frozen draws.
pub fn base_loss(
    model: &BaseDenoiser,
    draws: &BatchDraws,
    weighting: &LossWeighting,
) -> Result<f64> {
    let (tape, _, loss) = loss_tape(model, draws, weighting)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and analytic parameter gradients under frozen draws, aligned with
/// `model.params` order.
pub fn base_loss_and_grads(
    model: &BaseDenoiser,
    draws: &BatchDraws,
    weighting: &LossWeighting,
) -> Result<(f64, Vec<Tensor>)> {
    let (tape, param_vars, loss) = loss_tape(model, draws, weighting)?;
    let grads = tape.backward(loss)?;
    let out = model
        .params
        .iter()
        .zip(&param_vars)
        .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
        .collect();
    Ok((tape.value(loss).data()[0], out))
}

/// Training hyperparameters shared by base and coordinator training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma_sampler: SigmaSampler,
    pub cond_dropout: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub lr_final_scale: f64,
}

impl TrainConfig {
    pub fn new(sigma_sampler: SigmaSampler) -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 10,
            sigma_sampler,
            cond_dropout: 0.10,
            ema_decay: 0.999,
            seed: 0,
            lr_final_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(QuiltError::InvalidConfig(
                "lr, batch_size, epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(QuiltError::InvalidConfig(format!(
                "cond_dropout must be in [0,1], got {}",
                self.cond_dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(QuiltError::InvalidConfig(format!(
                "ema_decay must be in [0,1], got {}",
                self.ema_decay
            )));
        }
        if !(self.lr_final_scale > 0.0) {
            return Err(QuiltError::InvalidConfig(
                "lr_final_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output of a training run: final weights, their EMA, and per-epoch
/// traces.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub epoch_losses: Vec<f64>,
    pub epoch_ema_distance: Vec<f64>,
}

/// Records for training: a clean sample plus optional conditioning.
pub type TrainRecord = (Tensor, Option<Cond>);

/// Stochastic-gradient training of the denoising loss over `records`.
/// Deterministic under `config.seed`; per-element draws are keyed by
/// (epoch, element id).
pub fn train_base(
    model: &mut BaseDenoiser,
    records: &[TrainRecord],
    config: &TrainConfig,
    weighting: &LossWeighting,
) -> Result<TrainOutput> {
    config.validate()?;
    if records.is_empty() {
        return Err(QuiltError::EmptyBatch);
    }
    let mut ema = model.params.clone();
    let mut adam = Adam::new(&model.params, config.lr, (0.9, 0.99));
    let schedule = LrSchedule::LinearDecay {
        final_scale: config.lr_final_scale,
    };
    let steps_per_epoch = records.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_ema_distance = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, 0x5E_0000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let draw_seed = derive_seed(config.seed, 0xD5_0000 + epoch as u64);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<(u64, &Tensor, Option<&Cond>)> = chunk
                .iter()
                .map(|&i| (i as u64, &records[i].0, records[i].1.as_ref()))
                .collect();
            let draws = draw_batch(&items, &config.sigma_sampler, config.cond_dropout, draw_seed)?;
            let (loss, grads) = base_loss_and_grads(model, &draws, weighting)?;
            if !loss.is_finite() {
                return Err(QuiltError::Divergence {
                    step: epoch,
                    context: format!("base training loss = {loss}"),
                });
            }
            adam.step(&mut model.params, &grads, schedule.scale(step, total_steps))?;
            ema = ema_update(&ema, &model.params, config.ema_decay)?;
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        epoch_losses.push(epoch_loss / records.len() as f64);
        epoch_ema_distance.push(ema.max_abs_diff(&model.params));
    }
    Ok(TrainOutput {
        params: model.params.clone(),
        ema,
        epoch_losses,
        epoch_ema_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianData;
    use crate::rng::rng_from_seed;

    #[test]
    fn precondition_coefficient_values() {
        // frozen from an independent evaluation at (sigma=1, sigma_data=0.5)
        let c = precondition_coeffs(NoiseLevel::new(1.0).unwrap(), 0.5).unwrap();
        assert!((c.c_skip - 0.2).abs() < 1e-15);
        assert!((c.c_out - 0.4472135954999579).abs() < 1e-15);
        assert!((c.c_in - 0.8944271909999159).abs() < 1e-15);
        assert_eq!(c.c_noise, 0.0);
        assert!(precondition_coeffs(NoiseLevel::new(0.0).unwrap(), 0.5).is_err());
    }

    #[test]
    fn precondition_limits() {
        let x = Tensor::from_vec(vec![2.0, -1.0]);
        // tiny sigma: output approaches x regardless of the raw net
        let wild = |_: &Tensor, _: f64| Ok(Tensor::from_vec(vec![100.0, 100.0]));
        let near = precondition(wild, &x, NoiseLevel::new(1e-8).unwrap(), 1.0).unwrap();
        assert!(near.max_abs_diff(&x) < 1e-5);
        // zero raw net: pure shrinkage by c_skip
        let zero = |u: &Tensor, _: f64| Ok(u.scale(0.0));
        let sigma = NoiseLevel::new(0.7).unwrap();
        let c = precondition_coeffs(sigma, 1.0).unwrap();
        let shrunk = precondition(zero, &x, sigma, 1.0).unwrap();
        assert!(shrunk.max_abs_diff(&x.scale(c.c_skip)) < 1e-15);
    }

    #[test]
    fn precondition_is_continuous_in_sigma() {
        let x = Tensor::from_vec(vec![1.0, -0.5, 2.0]);
        let id = |u: &Tensor, _: f64| Ok(u.clone());
        let mut prev: Option<Tensor> = None;
        // geometric sweep over the sampler range
        let mut s = 1e-4;
        while s < 90.0 {
            let out = precondition(id, &x, NoiseLevel::new(s).unwrap(), 1.0).unwrap();
            assert!(out.is_finite());
            if let Some(p) = prev {
                assert!(out.max_abs_diff(&p) < 0.3, "jump at sigma {s}");
            }
            prev = Some(out);
            s *= 1.15;
        }
    }

    fn small_cfg(cond: CondEncoding) -> BaseNetConfig {
        BaseNetConfig {
            input_shape: vec![6],
            arch: BaseArch::Residual {
                hidden: 16,
                blocks: 2,
            },
            cond,
            fourier_dim: 4,
            sigma_data: 1.0,
        }
    }

    #[test]
    fn forward_shape_and_untrained_shrinkage() {
        let model = BaseDenoiser::init(small_cfg(CondEncoding::None), 1).unwrap();
        let x = Tensor::randn(&[6], &mut rng_from_seed(2));
        for s in [1e-4, 0.1, 1.0, 80.0] {
            let sigma = NoiseLevel::new(s).unwrap();
            let out = model.denoise(&x, None, sigma).unwrap();
            assert_eq!(out.shape(), x.shape());
            // zero-initialized output head => exactly c_skip * x
            let c = precondition_coeffs(sigma, 1.0).unwrap();
            assert!(out.max_abs_diff(&x.scale(c.c_skip)) < 1e-12);
        }
    }

    #[test]
    fn masked_and_real_conditioning_coincide_at_init() {
        let model = BaseDenoiser::init(small_cfg(CondEncoding::Position2d), 3).unwrap();
        let x = Tensor::randn(&[6], &mut rng_from_seed(4));
        let sigma = NoiseLevel::new(0.5).unwrap();
        let cond = Cond::Position([0.3, 0.7]);
        let with = model.denoise(&x, Some(&cond), sigma).unwrap();
        let without = model.denoise(&x, None, sigma).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn conditioning_shape_mismatch_rejected() {
        let model = BaseDenoiser::init(small_cfg(CondEncoding::Position2d), 5).unwrap();
        let x = Tensor::zeros(&[6]);
        let sigma = NoiseLevel::new(1.0).unwrap();
        let bad = Cond::Positions(vec![[0.1, 0.2]]);
        assert!(model.denoise(&x, Some(&bad), sigma).is_err());
        let uncond = BaseDenoiser::init(small_cfg(CondEncoding::None), 5).unwrap();
        assert!(uncond
            .denoise(&x, Some(&Cond::Position([0.1, 0.2])), sigma)
            .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = BaseDenoiser::init(small_cfg(CondEncoding::Position2d), 6).unwrap();
        let mut rng = rng_from_seed(7);
        // off the zero-init point, so interior parameters carry gradient
        for p in model.params.iter_mut() {
            if p.name == "out.w" || p.name == "c_emb.w" {
                p.value = Tensor::randn(p.value.shape(), &mut rng).scale(0.1);
            }
        }
        let cleans: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[6], &mut rng)).collect();
        let cond = Cond::Position([0.4, 0.6]);
        let items: Vec<(u64, &Tensor, Option<&Cond>)> = cleans
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u64, c, if i % 2 == 0 { Some(&cond) } else { None }))
            .collect();
        let sampler = SigmaSampler::new(-0.5, 0.5).unwrap();
        let draws = draw_batch(&items, &sampler, 0.0, 99).unwrap();
        let weighting = LossWeighting::Edm { sigma_data: 1.0 };
        let (_, grads) = base_loss_and_grads(&model, &draws, &weighting).unwrap();

        // probe 10 random trainable coordinates
        let mut probe_rng = rng_from_seed(8);
        let trainable = model.params.trainable_indices();
        let h = 1e-5;
        for _ in 0..10 {
            let pi = trainable[probe_rng.gen_range(0..trainable.len())];
            let len = model.params.at(pi).value.len();
            let ci = probe_rng.gen_range(0..len);
            let mut plus = model.clone();
            plus.params.at_mut(pi).value.data_mut()[ci] += h;
            let mut minus = model.clone();
            minus.params.at_mut(pi).value.data_mut()[ci] -= h;
            let fd = (base_loss(&plus, &draws, &weighting).unwrap()
                - base_loss(&minus, &draws, &weighting).unwrap())
                / (2.0 * h);
            let a = grads[pi].data()[ci];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!(
                (fd - a).abs() / denom < 1e-4,
                "param {pi} coord {ci}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn affine_training_recovers_optimal_denoiser() {
        // Fixed sigma so the optimal denoiser is a single affine map.
        let data = GaussianData::new(
            vec![0.7, -0.3, 0.0, 1.2],
            vec![1.3, 0.6, 1.0, 2.0],
        )
        .unwrap();
        let sigma_bar: f64 = 0.9;
        let cfg = BaseNetConfig {
            input_shape: vec![4],
            arch: BaseArch::Affine,
            cond: CondEncoding::None,
            fourier_dim: 1,
            sigma_data: 1.0,
        };
        let mut model = BaseDenoiser::init(cfg, 11).unwrap();
        let mut rng = rng_from_seed(12);
        let records: Vec<TrainRecord> = (0..16384)
            .map(|_| (data.sample(&mut rng), None))
            .collect();
        let config = TrainConfig {
            lr: 0.02,
            batch_size: 256,
            epochs: 40,
            sigma_sampler: SigmaSampler::new(sigma_bar.ln(), 0.0).unwrap(),
            cond_dropout: 0.0,
            ema_decay: 0.999,
            seed: 13,
            lr_final_scale: 0.005,
        };
        train_base(&mut model, &records, &config, &LossWeighting::Unit).unwrap();
        let (slope, intercept) = model
            .implied_affine(NoiseLevel::new(sigma_bar).unwrap())
            .unwrap();
        let s2 = sigma_bar * sigma_bar;
        for i in 0..4 {
            let v = data.variances()[i];
            let slope_star = v / (v + s2);
            let intercept_star = data.mean()[i] * s2 / (v + s2);
            assert!(
                (slope[i] - slope_star).abs() < 1e-2,
                "slope[{i}] {} vs {}",
                slope[i],
                slope_star
            );
            assert!(
                (intercept[i] - intercept_star).abs() < 1e-2,
                "intercept[{i}] {} vs {}",
                intercept[i],
                intercept_star
            );
        }
    }

    #[test]
    fn training_reduces_loss_and_tracks_ema() {
        let ds = crate::dataset::make_toy_dataset(crate::dataset::DatasetKind::Bump2d, 64, 21)
            .unwrap();
        let cfg = BaseNetConfig {
            input_shape: vec![16, 16],
            arch: BaseArch::Residual {
                hidden: 32,
                blocks: 2,
            },
            cond: CondEncoding::Position2d,
            fourier_dim: 8,
            sigma_data: ds.sigma_data,
        };
        let mut model = BaseDenoiser::init(cfg, 22).unwrap();
        let records: Vec<TrainRecord> = ds
            .records
            .iter()
            .map(|r| (r.sample.clone(), r.cond.clone()))
            .collect();
        let config = TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            epochs: 30,
            sigma_sampler: SigmaSampler::new(-1.0, 1.6).unwrap(),
            cond_dropout: 0.10,
            ema_decay: 0.99,
            seed: 23,
            lr_final_scale: 0.01,
        };
        let out = train_base(
            &mut model,
            &records,
            &config,
            &LossWeighting::Edm {
                sigma_data: ds.sigma_data,
            },
        )
        .unwrap();
        assert!(
            out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap(),
            "losses {:?}",
            out.epoch_losses
        );

        // EMA distance trend over the last 10% of epochs: fitted slope <= 0
        let tail_start = out.epoch_ema_distance.len() * 9 / 10;
        let tail = &out.epoch_ema_distance[tail_start..];
        let n = tail.len() as f64;
        let mean_x = (tail.len() as f64 - 1.0) / 2.0;
        let mean_y: f64 = tail.iter().sum::<f64>() / n;
        let slope: f64 = tail
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - mean_x) * (y - mean_y))
            .sum::<f64>();
        assert!(slope <= 0.0, "ema distance tail {tail:?}");
    }

    #[test]
    fn full_dropout_makes_conditioning_inert() {
        let ds = crate::dataset::make_toy_dataset(crate::dataset::DatasetKind::Bump2d, 16, 31)
            .unwrap();
        let cfg = BaseNetConfig {
            input_shape: vec![16, 16],
            arch: BaseArch::Residual {
                hidden: 16,
                blocks: 1,
            },
            cond: CondEncoding::Position2d,
            fourier_dim: 4,
            sigma_data: ds.sigma_data,
        };
        let mut model = BaseDenoiser::init(cfg, 32).unwrap();
        let records: Vec<TrainRecord> = ds
            .records
            .iter()
            .map(|r| (r.sample.clone(), r.cond.clone()))
            .collect();
        let config = TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 6,
            sigma_sampler: SigmaSampler::new(-1.0, 1.6).unwrap(),
            cond_dropout: 1.0,
            ema_decay: 0.99,
            seed: 33,
            lr_final_scale: 1.0,
        };
        train_base(
            &mut model,
            &records,
            &config,
            &LossWeighting::Edm {
                sigma_data: ds.sigma_data,
            },
        )
        .unwrap();
        // the conditioning head never received gradient, so masked and real
        // conditioning still coincide exactly
        let x = Tensor::randn(&[16, 16], &mut rng_from_seed(34));
        let sigma = NoiseLevel::new(0.4).unwrap();
        let with = model
            .denoise(&x, Some(&Cond::Position([0.5, 0.5])), sigma)
            .unwrap();
        let without = model.denoise(&x, None, sigma).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn trained_conditioning_has_effect() {
        let ds = crate::dataset::make_toy_dataset(crate::dataset::DatasetKind::Bump2d, 48, 41)
            .unwrap();
        let cfg = BaseNetConfig {
            input_shape: vec![16, 16],
            arch: BaseArch::Residual {
                hidden: 32,
                blocks: 2,
            },
            cond: CondEncoding::Position2d,
            fourier_dim: 8,
            sigma_data: ds.sigma_data,
        };
        let mut model = BaseDenoiser::init(cfg, 42).unwrap();
        let records: Vec<TrainRecord> = ds
            .records
            .iter()
            .map(|r| (r.sample.clone(), r.cond.clone()))
            .collect();
        let config = TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            epochs: 20,
            sigma_sampler: SigmaSampler::new(-1.0, 1.6).unwrap(),
            cond_dropout: 0.10,
            ema_decay: 0.99,
            seed: 43,
            lr_final_scale: 0.1,
        };
        train_base(
            &mut model,
            &records,
            &config,
            &LossWeighting::Edm {
                sigma_data: ds.sigma_data,
            },
        )
        .unwrap();
        let x = Tensor::randn(&[16, 16], &mut rng_from_seed(44)).scale(2.0);
        let sigma = NoiseLevel::new(2.0).unwrap();
        let with = model
            .denoise(&x, Some(&Cond::Position([0.3, 0.3])), sigma)
            .unwrap();
        let without = model.denoise(&x, None, sigma).unwrap();
        assert!(with.max_abs_diff(&without) > 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = crate::dataset::make_toy_dataset(crate::dataset::DatasetKind::Signal1d, 24, 51)
            .unwrap();
        let cfg = BaseNetConfig {
            input_shape: vec![64],
            arch: BaseArch::Residual {
                hidden: 16,
                blocks: 1,
            },
            cond: CondEncoding::None,
            fourier_dim: 4,
            sigma_data: 1.0,
        };
        let records: Vec<TrainRecord> = ds
            .records
            .iter()
            .map(|r| (r.sample.clone(), None))
            .collect();
        let config = TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 3,
            sigma_sampler: SigmaSampler::new(-3.0, 1.0).unwrap(),
            cond_dropout: 0.0,
            ema_decay: 0.999,
            seed: 52,
            lr_final_scale: 1.0,
        };
        let mut m1 = BaseDenoiser::init(cfg.clone(), 53).unwrap();
        let o1 = train_base(&mut m1, &records, &config, &LossWeighting::Unit).unwrap();
        let mut m2 = BaseDenoiser::init(cfg, 53).unwrap();
        let o2 = train_base(&mut m2, &records, &config, &LossWeighting::Unit).unwrap();
        assert_eq!(o1.epoch_losses, o2.epoch_losses);
        assert_eq!(o1.params.max_abs_diff(&o2.params), 0.0);
    }
}
