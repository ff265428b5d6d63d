//! Named parameter sets, the Adam optimizer, and EMA of weights.

use crate::error::{QuiltError, Result};
use crate::tensor::Tensor;

/// One named tensor. `trainable: false` marks fixed buffers (e.g. the
/// random Fourier projection matrices), which are persisted and EMA-copied
/// but never touched by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters. Order is part of the structure: two
/// sets match only if names, shapes, and order all agree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Total number of scalar entries (all parameters).
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Indices of trainable parameters.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn at(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(QuiltError::ParamMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name {
                return Err(QuiltError::ParamMismatch(format!(
                    "name {} vs {}",
                    a.name, b.name
                )));
            }
            if a.value.shape() != b.value.shape() {
                return Err(QuiltError::ParamMismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    a.name,
                    a.value.shape(),
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Largest entrywise absolute difference across all parameters.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .fold(0.0, |m, (a, b)| m.max(a.value.max_abs_diff(&b.value)))
    }
}

/// `decay * ema + (1 - decay) * params`, elementwise over matching sets.
pub fn ema_update(ema: &ParamSet, params: &ParamSet, decay: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(QuiltError::InvalidConfig(format!(
            "ema decay must be in [0, 1], got {decay}"
        )));
    }
    ema.check_same_structure(params)?;
    let mut out = ema.clone();
    for (o, p) in out.params.iter_mut().zip(&params.params) {
        for (e, v) in o.value.data_mut().iter_mut().zip(p.value.data()) {
            *e = decay * *e + (1.0 - decay) * v;
        }
    }
    Ok(out)
}

/// Learning-rate schedule over optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from the base rate down to `base * final_scale` at the
    /// last step.
    LinearDecay { final_scale: f64 },
}

impl LrSchedule {
    pub fn scale(&self, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearDecay { final_scale } => {
                if total_steps <= 1 {
                    return *final_scale;
                }
                let t = step as f64 / (total_steps - 1) as f64;
                1.0 + t * (final_scale - 1.0)
            }
        }
    }
}

/// Adam with bias correction. State tensors mirror the trainable subset.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    slots: Vec<usize>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, betas: (f64, f64)) -> Self {
        let slots = params.trainable_indices();
        let m = slots
            .iter()
            .map(|&i| Tensor::zeros(params.at(i).value.shape()))
            .collect();
        let v = slots
            .iter()
            .map(|&i| Tensor::zeros(params.at(i).value.shape()))
            .collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m,
            v,
            slots,
        }
    }

    /// Apply one update. `grads` must be aligned with the full parameter
    /// set; non-trainable slots are ignored.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr_scale: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(QuiltError::ParamMismatch(format!(
                "{} grads for {} params",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr * lr_scale;
        for (k, &i) in self.slots.iter().enumerate() {
            let g = &grads[i];
            let p = &mut params.at_mut(i).value;
            p.check_same_shape(g)?;
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for j in 0..g.len() {
                let gj = g.data()[j];
                m.data_mut()[j] = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                v.data_mut()[j] = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data()[j] / bc1;
                let vhat = v.data()[j] / bc2;
                p.data_mut()[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
