//! Training-free coordination baselines: independent per-patch sampling
//! with concatenation, per-patch output averaging, and the guidance-sum
//! composition of one unconditional and L conditional denoiser outputs.

use crate::coordinator::distribute_cond;
use crate::diffusion::{ode_sample, Cond, Denoiser, NoiseLevel, SamplerConfig};
use crate::error::{QuiltError, Result};
use crate::grid::{coverage_counts, decompose, recompose_average, Decomposition, PatchLayout};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Guidance weight of the composed multi-conditioning denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RRRConfig {
    pub w: f64,
}

impl RRRConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() {
            return Err(QuiltError::InvalidConfig(format!(
                "rrr weight must be finite, got {}",
                self.w
            )));
        }
        Ok(())
    }
}

/// Sample every patch independently and write each into its region.
/// Defined only for disjoint layouts (no position covered twice). Patch
/// `p` uses the RNG stream `derive_seed(seed, p)`.
pub fn concat_sample(
    base: &dyn Denoiser,
    conds: &[Option<Cond>],
    sampler: &SamplerConfig,
    layout: &PatchLayout,
    seed: u64,
) -> Result<Tensor> {
    layout.validate()?;
    let counts = coverage_counts(layout)?;
    if counts.data().iter().any(|&c| c != 1.0) {
        return Err(QuiltError::InvalidConfig(
            "concatenation needs a disjoint layout (stride = patch length)".into(),
        ));
    }
    if conds.len() != layout.num_patches() {
        return Err(QuiltError::ShapeMismatch {
            expected: vec![layout.num_patches()],
            actual: vec![conds.len()],
        });
    }
    let patch_shape = layout.patch_shape();
    let mut out = Tensor::zeros(&layout.object_shape());
    for p in 0..layout.num_patches() {
        let mut rng = rng_from_seed(derive_seed(seed, p as u64));
        let patch = ode_sample(
            base,
            conds[p].as_ref(),
            sampler,
            &patch_shape,
            None,
            &mut rng,
        )?;
        for (k, i) in layout.object_indices(p).into_iter().enumerate() {
            out.data_mut()[i] = patch.data()[k];
        }
    }
    Ok(out)
}

/// Denoise every patch with the base model and average overlapping
/// predictions; by the linearity of the score-denoiser identity this is
/// the same as averaging scores.
pub fn multidiffusion_denoise(
    base: &dyn Denoiser,
    x: &Tensor,
    conds: &[Option<Cond>],
    sigma: NoiseLevel,
    layout: &PatchLayout,
) -> Result<Tensor> {
    if conds.len() != layout.num_patches() {
        return Err(QuiltError::ShapeMismatch {
            expected: vec![layout.num_patches()],
            actual: vec![conds.len()],
        });
    }
    let decomposition = decompose(x, layout)?;
    let patch_refs: Vec<&Tensor> = decomposition.patches.iter().collect();
    let cond_refs: Vec<Option<&Cond>> = conds.iter().map(|c| c.as_ref()).collect();
    let outputs = base.denoise_batch(&patch_refs, &cond_refs, sigma)?;
    for (out, patch) in outputs.iter().zip(&patch_refs) {
        out.check_same_shape(patch)?;
    }
    recompose_average(&Decomposition {
        patches: outputs,
        layout: layout.clone(),
    })
}

/// Expanded-domain denoiser wrapper around [`multidiffusion_denoise`].
pub struct MultiDiffusionDenoiser<'a> {
    pub base: &'a dyn Denoiser,
    pub layout: PatchLayout,
}

impl Denoiser for MultiDiffusionDenoiser<'_> {
    fn denoise(&self, x: &Tensor, cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor> {
        let conds = distribute_cond(&self.layout, cond)?;
        multidiffusion_denoise(self.base, x, &conds, sigma, &self.layout)
    }
}

/// Compose one unconditional and L conditional outputs:
/// `D(x, masked) + w * sum_i (D(x, c_i) - D(x, masked))`.
pub fn rrr_denoise(
    base: &dyn Denoiser,
    x: &Tensor,
    conds: &[Cond],
    sigma: NoiseLevel,
    w: f64,
) -> Result<Tensor> {
    RRRConfig { w }.validate()?;
    let uncond = base.denoise(x, None, sigma)?;
    let mut out = uncond.clone();
    for cond in conds {
        let d = base.denoise(x, Some(cond), sigma)?;
        d.check_same_shape(&uncond)?;
        out.axpy(w, &d.sub(&uncond)?)?;
    }
    Ok(out)
}

/// Denoiser wrapper around [`rrr_denoise`] taking a position-set
/// conditioning.
pub struct RrrDenoiser<'a> {
    pub base: &'a dyn Denoiser,
    pub w: f64,
}

impl Denoiser for RrrDenoiser<'_> {
    fn denoise(&self, x: &Tensor, cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor> {
        let conds: Vec<Cond> = match cond {
            None => Vec::new(),
            Some(Cond::Position(p)) => vec![Cond::Position(*p)],
            Some(Cond::Positions(ps)) => {
                ps.iter().map(|&p| Cond::Position(p)).collect()
            }
        };
        rrr_denoise(self.base, x, &conds, sigma, self.w)
    }
}
