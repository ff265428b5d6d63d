//! Synthetic toy datasets.
//!
//! Two generators with the structural roles of the real tasks: long
//! stationary 1D signals (base models see fixed-length slices) and small
//! images carrying Gaussian bumps with a position annotation. Both are
//! deterministic under a seed.

use crate::diffusion::Cond;
use crate::error::{QuiltError, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use rand::Rng as _;

/// Base patch length for the 1D signal task.
pub const SIGNAL_PATCH_LEN: usize = 64;
/// Fundamental period of the signal ensemble, in samples.
pub const SIGNAL_PERIOD: usize = 128;
/// Number of harmonics.
pub const SIGNAL_HARMONICS: usize = 8;
/// Image side for the bump task.
pub const BUMP_IMAGE_SIDE: usize = 16;
/// Gaussian bump width (standard deviation) in pixels.
pub const BUMP_WIDTH_PX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Unconditional 1D signal patches of length [`SIGNAL_PATCH_LEN`].
    Signal1d,
    /// 16x16 images with 1..=3 unit-peak bumps; one annotated position.
    Bump2d,
}

#[derive(Clone, Debug)]
pub struct ToyRecord {
    pub sample: Tensor,
    /// One annotated conditioning input (bump task only).
    pub cond: Option<Cond>,
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub records: Vec<ToyRecord>,
    /// Characteristic data standard deviation, recorded in checkpoints and
    /// used by the output reparametrization and the loss weighting.
    pub sigma_data: f64,
}

/// Analytic std of the signal ensemble before normalization: independent
/// random phases make the harmonic powers add, E[x^2] = sum a_k^2 / 2.
fn signal_raw_std() -> f64 {
    let power: f64 = (1..=SIGNAL_HARMONICS)
        .map(|k| {
            let a = 1.0 / k as f64;
            a * a / 2.0
        })
        .sum();
    power.sqrt()
}

/// One stationary signal of the given length: a sum of harmonics of
/// [`SIGNAL_PERIOD`] with 1/f amplitudes and uniform random phases,
/// normalized so the ensemble std is 1.
pub fn make_signal_object(total_len: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let phases: Vec<f64> = (0..SIGNAL_HARMONICS)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let norm = 1.0 / signal_raw_std();
    let data: Vec<f64> = (0..total_len)
        .map(|t| {
            let mut v = 0.0;
            for (k, phase) in phases.iter().enumerate() {
                let freq = (k + 1) as f64 / SIGNAL_PERIOD as f64;
                v += (std::f64::consts::TAU * freq * t as f64 + phase).sin() / (k + 1) as f64;
            }
            v * norm
        })
        .collect();
    Tensor::from_vec(data)
}

/// Long clean signals for coordinator training and evaluation references.
pub fn make_signal_objects(total_len: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..size)
        .map(|i| make_signal_object(total_len, derive_seed(seed, i as u64)))
        .collect()
}

/// Render bumps into an image; the value at each pixel is the max over
/// bumps, so every bump keeps unit peak amplitude.
pub fn render_bumps(side: usize, positions: &[[f64; 2]]) -> Tensor {
    let mut img = Tensor::zeros(&[side, side]);
    let scale = (side - 1) as f64;
    for r in 0..side {
        for c in 0..side {
            let mut v: f64 = 0.0;
            for p in positions {
                let (px, py) = (p[0] * scale, p[1] * scale);
                let d2 = (r as f64 - py).powi(2) + (c as f64 - px).powi(2);
                v = v.max((-d2 / (2.0 * BUMP_WIDTH_PX * BUMP_WIDTH_PX)).exp());
            }
            img.data_mut()[r * side + c] = v;
        }
    }
    img
}

fn make_bump_record(seed: u64) -> (ToyRecord, Vec<[f64; 2]>) {
    let mut rng = rng_from_seed(seed);
    let n_bumps = rng.gen_range(1..=3usize);
    let positions: Vec<[f64; 2]> = (0..n_bumps)
        .map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)])
        .collect();
    let img = render_bumps(BUMP_IMAGE_SIDE, &positions);
    let annotated = positions[rng.gen_range(0..n_bumps)];
    (
        ToyRecord {
            sample: img,
            cond: Some(Cond::Position(annotated)),
        },
        positions,
    )
}

/// Build a dataset of `size` records, deterministic under `seed`.
pub fn make_toy_dataset(kind: DatasetKind, size: usize, seed: u64) -> Result<ToyDataset> {
    if size == 0 {
        return Err(QuiltError::InvalidConfig("dataset size must be >= 1".into()));
    }
    match kind {
        DatasetKind::Signal1d => {
            let records: Vec<ToyRecord> = (0..size)
                .map(|i| {
                    let item_seed = derive_seed(seed, i as u64);
                    // slice one patch at a random offset from a fresh
                    // longer signal; the ensemble is stationary
                    let long = make_signal_object(2 * SIGNAL_PERIOD, item_seed);
                    let mut rng = rng_from_seed(derive_seed(item_seed, 1));
                    let off = rng.gen_range(0..=(2 * SIGNAL_PERIOD - SIGNAL_PATCH_LEN));
                    let slice = long.data()[off..off + SIGNAL_PATCH_LEN].to_vec();
                    ToyRecord {
                        sample: Tensor::from_vec(slice),
                        cond: None,
                    }
                })
                .collect();
            Ok(ToyDataset {
                kind,
                records,
                sigma_data: 1.0,
            })
        }
        DatasetKind::Bump2d => {
            let records: Vec<ToyRecord> = (0..size)
                .map(|i| make_bump_record(derive_seed(seed, i as u64)).0)
                .collect();
            // measured, not normalized: the unit-peak construction is what
            // the constraint oracle checks against
            let n_total: usize = records.iter().map(|r| r.sample.len()).sum();
            let mean: f64 =
                records.iter().map(|r| r.sample.sum()).sum::<f64>() / n_total as f64;
            let var: f64 = records
                .iter()
                .flat_map(|r| r.sample.data())
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n_total as f64;
            Ok(ToyDataset {
                kind,
                records,
                sigma_data: var.sqrt(),
            })
        }
    }
}

/// All bump positions of a freshly generated record; used to build
/// multi-conditioning training items without widening the dataset record
/// beyond its single annotation.
pub fn bump_positions_for_seed(dataset_seed: u64, index: usize) -> Vec<[f64; 2]> {
    make_bump_record(derive_seed(dataset_seed, index as u64)).1
}
