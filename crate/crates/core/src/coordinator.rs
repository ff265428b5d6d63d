//! The trainable coordinator: a small transformer that consumes per-patch
//! base-denoiser outputs plus conditioning and produces corrected patches,
//! reconciled by overlap averaging into the expanded-domain denoised
//! estimate.
//!
//! Tokens carry global positions (patch offset plus intra-patch offset, in
//! token-patch units) encoded with rotary embeddings, so attention depends
//! on relative positions only and the model runs unchanged at object sizes
//! beyond those seen in training. The final projection is zero-initialized
//! with a residual from the base outputs: the untrained composite denoiser
//! is exactly the per-patch average.
//!
//! A sequential recurrent coordinator over ordered 1D patches is included
//! as a trained baseline.

use crate::autodiff::{SparseMap, Tape, Var};
use crate::base::{TrainConfig, TrainOutput};
use crate::diffusion::{sample_sigma, Cond, Denoiser, LossWeighting, NoiseLevel};
use crate::error::{QuiltError, Result};
use crate::grid::{decompose, recompose_map, PatchLayout};
use crate::params::{ema_update, Adam, LrSchedule, ParamSet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::rope::RopeConfig;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// One patch position in the expanded object: element-unit offset plus its
/// conditioning. The coordinator sees patches only through slots, so
/// permuting (outputs, slots) together permutes its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSlot {
    pub offset: (usize, usize),
    pub cond: Option<Cond>,
}

/// A model that corrects a list of base-denoiser patch outputs.
pub trait CoordinatorModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn patch_shape(&self) -> &[usize];
    /// Push the forward pass onto `tape`; returns the corrected patches as
    /// one flat `[L * patch_volume]` node. `param_vars` are leaves aligned
    /// with `params()` order.
    fn forward_tape(
        &self,
        tape: &mut Tape,
        param_vars: &[Var],
        base_outputs: &[&Tensor],
        slots: &[PatchSlot],
        sigma: NoiseLevel,
    ) -> Result<Var>;
}

/// Run a coordinator outside of training and split the corrected patches.
pub fn coordinator_forward(
    model: &dyn CoordinatorModel,
    base_outputs: &[&Tensor],
    slots: &[PatchSlot],
    sigma: NoiseLevel,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = model
        .params()
        .iter()
        .map(|p| tape.leaf(p.value.clone()))
        .collect();
    let out = model.forward_tape(&mut tape, &param_vars, base_outputs, slots, sigma)?;
    let flat = tape.value(out);
    let shape = model.patch_shape().to_vec();
    let vol: usize = shape.iter().product();
    (0..base_outputs.len())
        .map(|i| Tensor::new(shape.clone(), flat.data()[i * vol..(i + 1) * vol].to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Transformer coordinator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    /// Base-domain patch shape, `[len]` or `[side, side]`.
    pub patch_shape: Vec<usize>,
    /// Token sub-patch edge; patch dims and strides must be divisible by it.
    pub token_patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// RoPE frequency base.
    pub theta_base: f64,
    /// Fourier frequency count for noise-level and position features.
    pub fourier_dim: usize,
    /// Render each patch's position conditioning as a one-hot map channel.
    pub cond_channels: bool,
    /// Append one conditioning token per patch (own embedding and MLP
    /// weights; rotary position at the target coordinate).
    pub cond_tokens: bool,
}

impl CoordinatorConfig {
    /// Spec-scale defaults: depth 4, hidden 128, heads 4, token patch 4.
    pub fn default_for(patch_shape: Vec<usize>) -> Self {
        let is_2d = patch_shape.len() == 2;
        Self {
            patch_shape,
            token_patch: 4,
            hidden: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            theta_base: 1e4,
            fourier_dim: 8,
            cond_channels: is_2d,
            cond_tokens: is_2d,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.head_dim(), self.theta_base)
    }

    /// Tokens per patch along each axis (rows, cols).
    fn token_grid(&self) -> (usize, usize) {
        match self.patch_shape.as_slice() {
            [len] => (len / self.token_patch, 1),
            [h, w] => (h / self.token_patch, w / self.token_patch),
            _ => unreachable!("validated"),
        }
    }

    fn tokens_per_patch(&self) -> usize {
        let (r, c) = self.token_grid();
        r * c
    }

    /// Values per token on the output side.
    fn token_out_dim(&self) -> usize {
        match self.patch_shape.len() {
            1 => self.token_patch,
            _ => self.token_patch * self.token_patch,
        }
    }

    /// Values per token on the input side (plus the conditioning channel).
    fn token_in_dim(&self) -> usize {
        let base = self.token_out_dim();
        if self.cond_channels {
            base * 2
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.patch_shape.as_slice() {
            [len] => {
                if !len.is_multiple_of(self.token_patch) {
                    return Err(QuiltError::InvalidConfig(format!(
                        "patch length {len} not divisible by token_patch {}",
                        self.token_patch
                    )));
                }
                if self.cond_channels {
                    return Err(QuiltError::InvalidConfig(
                        "conditioning map channels need a 2D patch".into(),
                    ));
                }
            }
            [h, w] => {
                if !h.is_multiple_of(self.token_patch) || !w.is_multiple_of(self.token_patch) {
                    return Err(QuiltError::InvalidConfig(format!(
                        "patch {h}x{w} not divisible by token_patch {}",
                        self.token_patch
                    )));
                }
            }
            other => {
                return Err(QuiltError::InvalidConfig(format!(
                    "patch shape must be rank 1 or 2, got {other:?}"
                )));
            }
        }
        if self.token_patch == 0
            || self.hidden == 0
            || self.depth == 0
            || self.heads == 0
            || self.mlp_ratio == 0
            || self.fourier_dim == 0
        {
            return Err(QuiltError::InvalidConfig(
                "coordinator dims must be positive".into(),
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(QuiltError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        self.rope()?;
        Ok(())
    }
}

const COORD_TIME_FOURIER_SCALE: f64 = 1.0;
const COORD_POS_FOURIER_SCALE: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct Coordinator {
    pub cfg: CoordinatorConfig,
    pub params: ParamSet,
}

impl Coordinator {
    pub fn init(cfg: CoordinatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 0xC003D));
        let h = cfg.hidden;
        let f = cfg.fourier_dim;
        let r = cfg.mlp_ratio;
        let mut ps = ParamSet::new();
        let dense = |rng: &mut crate::rng::Rng, rows: usize, cols: usize| {
            Tensor::randn(&[rows, cols], rng).scale(1.0 / (rows as f64).sqrt())
        };

        ps.push("embed.w", dense(&mut rng, cfg.token_in_dim(), h), true);
        ps.push("embed.b", Tensor::zeros(&[h]), true);
        ps.push(
            "t_freq",
            Tensor::randn(&[f], &mut rng).scale(COORD_TIME_FOURIER_SCALE),
            false,
        );
        ps.push("t_emb.w", dense(&mut rng, 2 * f, h), true);
        ps.push("t_emb.b", Tensor::zeros(&[h]), true);
        if cfg.cond_tokens {
            ps.push(
                "c_freq",
                Tensor::randn(&[2 * f], &mut rng).scale(COORD_POS_FOURIER_SCALE),
                false,
            );
            ps.push("cembed.w", Tensor::zeros(&[4 * f, h]), true);
            ps.push("cembed.b", Tensor::zeros(&[h]), true);
        }
        for l in 0..cfg.depth {
            let p = |s: &str| format!("l{l}.{s}");
            ps.push(p("ln1.g"), Tensor::filled(&[h], 1.0), true);
            ps.push(p("ln1.b"), Tensor::zeros(&[h]), true);
            for name in ["wq", "wk", "wv", "wo"] {
                ps.push(p(name), dense(&mut rng, h, h), true);
            }
            for name in ["bq", "bk", "bv", "bo"] {
                ps.push(p(name), Tensor::zeros(&[h]), true);
            }
            ps.push(p("ln2.g"), Tensor::filled(&[h], 1.0), true);
            ps.push(p("ln2.b"), Tensor::zeros(&[h]), true);
            ps.push(p("smlp.w1"), dense(&mut rng, h, r * h), true);
            ps.push(p("smlp.b1"), Tensor::zeros(&[r * h]), true);
            ps.push(p("smlp.w2"), dense(&mut rng, r * h, h), true);
            ps.push(p("smlp.b2"), Tensor::zeros(&[h]), true);
            if cfg.cond_tokens {
                ps.push(p("cmlp.w1"), dense(&mut rng, h, r * h), true);
                ps.push(p("cmlp.b1"), Tensor::zeros(&[r * h]), true);
                ps.push(p("cmlp.w2"), dense(&mut rng, r * h, h), true);
                ps.push(p("cmlp.b2"), Tensor::zeros(&[h]), true);
            }
        }
        ps.push("final.ln.g", Tensor::filled(&[h], 1.0), true);
        ps.push("final.ln.b", Tensor::zeros(&[h]), true);
        // zero-initialized output head: the untrained coordinator passes
        // base outputs through unchanged
        ps.push("out.w", Tensor::zeros(&[h, cfg.token_out_dim()]), true);
        ps.push("out.b", Tensor::zeros(&[cfg.token_out_dim()]), true);
        Ok(Self { cfg, params: ps })
    }

    /// Sample-token content rows for one patch (pixels plus the optional
    /// conditioning map channel), intra-patch row-major.
    fn patch_token_rows(&self, patch: &Tensor, cond: Option<&Cond>) -> Result<Vec<Vec<f64>>> {
        let p = self.cfg.token_patch;
        match self.cfg.patch_shape.as_slice() {
            [len] => {
                let mut rows = Vec::with_capacity(len / p);
                for t in 0..len / p {
                    rows.push(patch.data()[t * p..(t + 1) * p].to_vec());
                }
                Ok(rows)
            }
            [side, _] => {
                let s = *side;
                let map = if self.cfg.cond_channels {
                    Some(match cond {
                        Some(Cond::Position(pos)) => one_hot_map(s, *pos),
                        None => Tensor::zeros(&[s, s]),
                        Some(other) => {
                            return Err(QuiltError::InvalidConfig(format!(
                                "coordinator expects per-patch position conditioning, got {other:?}"
                            )))
                        }
                    })
                } else {
                    None
                };
                let g = s / p;
                let mut rows = Vec::with_capacity(g * g);
                for a in 0..g {
                    for b in 0..g {
                        let mut row = Vec::with_capacity(self.cfg.token_in_dim());
                        for dr in 0..p {
                            for dc in 0..p {
                                row.push(patch.data()[(a * p + dr) * s + (b * p + dc)]);
                            }
                        }
                        if let Some(m) = &map {
                            for dr in 0..p {
                                for dc in 0..p {
                                    row.push(m.data()[(a * p + dr) * s + (b * p + dc)]);
                                }
                            }
                        }
                        rows.push(row);
                    }
                }
                Ok(rows)
            }
            _ => unreachable!("validated"),
        }
    }

    fn fourier_features(&self, freqs: &[f64], inputs: &[f64]) -> Vec<f64> {
        let f = self.cfg.fourier_dim;
        let mut feats = Vec::with_capacity(2 * f * inputs.len());
        for (axis, &u) in inputs.iter().enumerate() {
            for j in 0..f {
                let w = std::f64::consts::TAU * freqs[axis * f + j] * u;
                feats.push(w.sin());
                feats.push(w.cos());
            }
        }
        feats
    }

    /// Rotary position of a conditioning token: the target coordinate in
    /// token-patch units, or the patch center for the masked input.
    fn cond_token_position(&self, slot: &PatchSlot) -> Result<(i64, i64)> {
        let p = self.cfg.token_patch as f64;
        match (&slot.cond, self.cfg.patch_shape.as_slice()) {
            (Some(Cond::Position(pos)), [side, _]) => {
                let scale = (*side - 1) as f64;
                let row = (slot.offset.0 as f64 + pos[1] * scale) / p;
                let col = (slot.offset.1 as f64 + pos[0] * scale) / p;
                Ok((row.round() as i64, col.round() as i64))
            }
            (None, [side, _]) => {
                let row = (slot.offset.0 as f64 + *side as f64 / 2.0) / p;
                let col = (slot.offset.1 as f64 + *side as f64 / 2.0) / p;
                Ok((row.round() as i64, col.round() as i64))
            }
            (Some(Cond::Position(_)), [len]) => {
                let row = (slot.offset.0 as f64 + *len as f64 / 2.0) / p;
                Ok((row.round() as i64, 0))
            }
            (None, [len]) => Ok((((slot.offset.0 as f64 + *len as f64 / 2.0) / p).round() as i64, 0)),
            (Some(other), _) => Err(QuiltError::InvalidConfig(format!(
                "unsupported conditioning token source: {other:?}"
            ))),
            (None, shape) => Err(QuiltError::InvalidConfig(format!(
                "unsupported patch shape {shape:?}"
            ))),
        }
    }
}

/// One-hot position map: 1 at the pixel nearest to the normalized
/// coordinate, 0 elsewhere.
pub fn one_hot_map(side: usize, pos: [f64; 2]) -> Tensor {
    let scale = (side - 1) as f64;
    let col = (pos[0] * scale).round().clamp(0.0, scale) as usize;
    let row = (pos[1] * scale).round().clamp(0.0, scale) as usize;
    let mut m = Tensor::zeros(&[side, side]);
    m.data_mut()[row * side + col] = 1.0;
    m
}

impl CoordinatorModel for Coordinator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn patch_shape(&self) -> &[usize] {
        &self.cfg.patch_shape
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        param_vars: &[Var],
        base_outputs: &[&Tensor],
        slots: &[PatchSlot],
        sigma: NoiseLevel,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let l_patches = base_outputs.len();
        if l_patches == 0 || slots.len() != l_patches {
            return Err(QuiltError::InvalidConfig(format!(
                "coordinator needs matching patch and slot counts, got {} and {}",
                l_patches,
                slots.len()
            )));
        }
        if sigma.value() <= 0.0 {
            return Err(QuiltError::InvalidConfig(
                "coordinator needs sigma > 0".into(),
            ));
        }
        let pv = |name: &str| -> Var {
            param_vars[self
                .params
                .index_of(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))]
        };
        let p = cfg.token_patch;
        let per_patch = cfg.tokens_per_patch();
        let t_samples = l_patches * per_patch;
        let tok_in = cfg.token_in_dim();
        let tok_out = cfg.token_out_dim();
        let vol: usize = cfg.patch_shape.iter().product();

        // --- assemble constant inputs ---------------------------------
        let mut content = Tensor::zeros(&[t_samples, tok_in]);
        let mut positions: Vec<(i64, i64)> = Vec::with_capacity(t_samples);
        let (_, grid_c) = cfg.token_grid();
        for (ell, (patch, slot)) in base_outputs.iter().zip(slots).enumerate() {
            if patch.shape() != cfg.patch_shape.as_slice() {
                return Err(QuiltError::ShapeMismatch {
                    expected: cfg.patch_shape.clone(),
                    actual: patch.shape().to_vec(),
                });
            }
            if !slot.offset.0.is_multiple_of(p) || !slot.offset.1.is_multiple_of(p) {
                return Err(QuiltError::InvalidConfig(format!(
                    "patch offset {:?} not aligned to token_patch {p}",
                    slot.offset
                )));
            }
            let rows = self.patch_token_rows(patch, slot.cond.as_ref())?;
            debug_assert_eq!(rows.len(), per_patch);
            for (t, row) in rows.into_iter().enumerate() {
                let dst = (ell * per_patch + t) * tok_in;
                content.data_mut()[dst..dst + tok_in].copy_from_slice(&row);
                let (a, b) = (t / grid_c, t % grid_c);
                positions.push((
                    (slot.offset.0 / p + a) as i64,
                    (slot.offset.1 / p + b) as i64,
                ));
            }
        }

        // unpatchify map: token grid -> concatenated patch storage
        let mut unpatch: Vec<(u32, u32, f64)> = Vec::with_capacity(t_samples * tok_out);
        for ell in 0..l_patches {
            for t in 0..per_patch {
                let row = ell * per_patch + t;
                let (a, b) = (t / grid_c, t % grid_c);
                for k in 0..tok_out {
                    let intra = match cfg.patch_shape.as_slice() {
                        [_] => a * p + k,
                        [_, w] => {
                            let (dr, dc) = (k / p, k % p);
                            (a * p + dr) * w + (b * p + dc)
                        }
                        _ => unreachable!(),
                    };
                    unpatch.push(((ell * vol + intra) as u32, (row * tok_out + k) as u32, 1.0));
                }
            }
        }
        let unpatch: SparseMap = Rc::new(unpatch);

        // --- embed ------------------------------------------------------
        let content = tape.leaf(content);
        let s_tok = tape.matmul(content, pv("embed.w"));
        let s_tok = tape.add_row(s_tok, pv("embed.b"));

        let mut h = if cfg.cond_tokens {
            let w = 4 * cfg.fourier_dim;
            let mut c_feats = Tensor::zeros(&[l_patches, w]);
            let freqs = self.params.get("c_freq").expect("c_freq").data().to_vec();
            for (ell, slot) in slots.iter().enumerate() {
                match &slot.cond {
                    Some(Cond::Position(pos)) => {
                        let feats = self.fourier_features(&freqs, pos);
                        c_feats.data_mut()[ell * w..(ell + 1) * w].copy_from_slice(&feats);
                    }
                    None => {}
                    Some(other) => {
                        return Err(QuiltError::InvalidConfig(format!(
                            "unsupported conditioning {other:?}"
                        )))
                    }
                }
                positions.push(self.cond_token_position(slot)?);
            }
            let cf = tape.leaf(c_feats);
            let c_tok = tape.matmul(cf, pv("cembed.w"));
            let c_tok = tape.add_row(c_tok, pv("cembed.b"));
            tape.concat_rows(&[s_tok, c_tok])
        } else {
            s_tok
        };
        let t_total = tape.value(h).rows();
        let positions = Rc::new(positions);
        debug_assert_eq!(positions.len(), t_total);

        // noise-level embedding added to every token
        let c_noise = sigma.value().ln() / 4.0;
        let t_freqs = self.params.get("t_freq").expect("t_freq").data().to_vec();
        let mut t_feats = Tensor::zeros(&[1, 2 * cfg.fourier_dim]);
        for j in 0..cfg.fourier_dim {
            let w = std::f64::consts::TAU * t_freqs[j] * c_noise;
            t_feats.data_mut()[2 * j] = w.sin();
            t_feats.data_mut()[2 * j + 1] = w.cos();
        }
        let tf = tape.leaf(t_feats);
        let temb = tape.matmul(tf, pv("t_emb.w"));
        let temb = tape.add_row(temb, pv("t_emb.b"));
        h = tape.add_row(h, temb);

        let rope = cfg.rope()?;
        let dh = cfg.head_dim();
        let sample_idx: Rc<Vec<usize>> = Rc::new((0..t_samples).collect());
        let cond_idx: Rc<Vec<usize>> = Rc::new((t_samples..t_total).collect());

        for l in 0..cfg.depth {
            let pname = |s: &str| format!("l{l}.{s}");
            let u = tape.layer_norm(h, pv(&pname("ln1.g")), pv(&pname("ln1.b")), 1e-6);
            let q = tape.matmul(u, pv(&pname("wq")));
            let q = tape.add_row(q, pv(&pname("bq")));
            let k = tape.matmul(u, pv(&pname("wk")));
            let k = tape.add_row(k, pv(&pname("bk")));
            let v = tape.matmul(u, pv(&pname("wv")));
            let v = tape.add_row(v, pv(&pname("bv")));

            let mut head_outs = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = tape.narrow_cols(q, head * dh, dh);
                let kh = tape.narrow_cols(k, head * dh, dh);
                let vh = tape.narrow_cols(v, head * dh, dh);
                let qh = tape.rope_rows(qh, positions.clone(), rope);
                let kh = tape.rope_rows(kh, positions.clone(), rope);
                let logits = tape.matmul_nt(qh, kh);
                let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
                let probs = tape.softmax_rows(logits);
                head_outs.push(tape.matmul(probs, vh));
            }
            let attn = tape.concat_cols(&head_outs);
            let attn = tape.matmul(attn, pv(&pname("wo")));
            let attn = tape.add_row(attn, pv(&pname("bo")));
            h = tape.add(h, attn);

            let u2 = tape.layer_norm(h, pv(&pname("ln2.g")), pv(&pname("ln2.b")), 1e-6);
            let mlp = |tape: &mut Tape, x: Var, prefix: &str| -> Var {
                let z = tape.matmul(x, pv(&format!("{prefix}.w1")));
                let z = tape.add_row(z, pv(&format!("{prefix}.b1")));
                let z = tape.silu(z);
                let z = tape.matmul(z, pv(&format!("{prefix}.w2")));
                tape.add_row(z, pv(&format!("{prefix}.b2")))
            };
            let mlp_out = if cfg.cond_tokens && t_total > t_samples {
                let s_rows = tape.gather_rows(u2, sample_idx.clone());
                let s_out = mlp(tape, s_rows, &pname("smlp"));
                let c_rows = tape.gather_rows(u2, cond_idx.clone());
                let c_out = mlp(tape, c_rows, &pname("cmlp"));
                tape.concat_rows(&[s_out, c_out])
            } else {
                mlp(tape, u2, &pname("smlp"))
            };
            h = tape.add(h, mlp_out);
        }

        let fin = tape.layer_norm(h, pv("final.ln.g"), pv("final.ln.b"), 1e-6);
        let fin = if t_total > t_samples {
            tape.gather_rows(fin, sample_idx)
        } else {
            fin
        };
        let delta_tok = tape.matmul(fin, pv("out.w"));
        let delta_tok = tape.add_row(delta_tok, pv("out.b"));
        let delta = tape.sparse_linear(delta_tok, vec![l_patches * vol], unpatch);

        let mut base_concat = Tensor::zeros(&[l_patches * vol]);
        for (ell, patch) in base_outputs.iter().enumerate() {
            base_concat.data_mut()[ell * vol..(ell + 1) * vol].copy_from_slice(patch.data());
        }
        let base_concat = tape.leaf(base_concat);
        Ok(tape.add(delta, base_concat))
    }
}

// ---------------------------------------------------------------------------
// Recurrent coordinator baseline
// ---------------------------------------------------------------------------

/// Sequential baseline over ordered 1D patches: a learned map `f` carries a
/// hidden state left to right, `(h_{i+1}, x'_i) = f(h_i, x_i)`. `f` is two
/// 1D convolutions over `1 + hidden_channels` per-position channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub patch_len: usize,
    pub hidden_channels: usize,
    pub conv_hidden: usize,
    pub kernel: usize,
}

impl RecurrentConfig {
    pub fn new(patch_len: usize) -> Self {
        Self {
            patch_len,
            hidden_channels: 16,
            conv_hidden: 32,
            kernel: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.hidden_channels == 0 || self.conv_hidden == 0 {
            return Err(QuiltError::InvalidConfig(
                "recurrent dims must be positive".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(QuiltError::InvalidConfig("kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentCoordinator {
    pub cfg: RecurrentConfig,
    pub params: ParamSet,
    patch_shape: Vec<usize>,
}

impl RecurrentCoordinator {
    pub fn init(cfg: RecurrentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 0x2EC));
        let c_in = 1 + cfg.hidden_channels;
        let k = cfg.kernel;
        let mut ps = ParamSet::new();
        ps.push(
            "f.w1",
            Tensor::randn(&[k * c_in, cfg.conv_hidden], &mut rng)
                .scale(1.0 / ((k * c_in) as f64).sqrt()),
            true,
        );
        ps.push("f.b1", Tensor::zeros(&[cfg.conv_hidden]), true);
        ps.push(
            "f.w2",
            Tensor::randn(&[k * cfg.conv_hidden, c_in], &mut rng)
                .scale(1.0 / ((k * cfg.conv_hidden) as f64).sqrt()),
            true,
        );
        ps.push("f.b2", Tensor::zeros(&[c_in]), true);
        Ok(Self {
            patch_shape: vec![cfg.patch_len],
            cfg,
            params: ps,
        })
    }

    /// Zero-pad im2col for a `[positions, channels]` layout.
    fn im2col_map(&self, positions: usize, channels: usize) -> SparseMap {
        let k = self.cfg.kernel;
        let half = (k / 2) as isize;
        let mut map = Vec::new();
        for b in 0..positions as isize {
            for o in 0..k as isize {
                let src = b + o - half;
                if src < 0 || src >= positions as isize {
                    continue;
                }
                for ch in 0..channels {
                    map.push((
                        (b as usize * k * channels + o as usize * channels + ch) as u32,
                        (src as usize * channels + ch) as u32,
                        1.0,
                    ));
                }
            }
        }
        Rc::new(map)
    }
}

impl CoordinatorModel for RecurrentCoordinator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn patch_shape(&self) -> &[usize] {
        &self.patch_shape
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        param_vars: &[Var],
        base_outputs: &[&Tensor],
        slots: &[PatchSlot],
        _sigma: NoiseLevel,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let l_patches = base_outputs.len();
        if l_patches == 0 || slots.len() != l_patches {
            return Err(QuiltError::InvalidConfig(
                "recurrent coordinator needs matching patch and slot counts".into(),
            ));
        }
        let pv = |name: &str| -> Var {
            param_vars[self.params.index_of(name).expect("recurrent param")]
        };
        let b = cfg.patch_len;
        let hc = cfg.hidden_channels;
        let c_in = 1 + hc;
        let im2col_in = self.im2col_map(b, c_in);
        let im2col_mid = self.im2col_map(b, cfg.conv_hidden);

        let mut hidden = tape.leaf(Tensor::zeros(&[b, hc]));
        let mut outputs = Vec::with_capacity(l_patches);
        for patch in base_outputs {
            if patch.shape() != self.patch_shape.as_slice() {
                return Err(QuiltError::ShapeMismatch {
                    expected: self.patch_shape.clone(),
                    actual: patch.shape().to_vec(),
                });
            }
            let x = tape.leaf(Tensor::new(vec![b, 1], patch.data().to_vec())?);
            let state = tape.concat_cols(&[x, hidden]);
            let cols = tape.sparse_linear(state, vec![b, cfg.kernel * c_in], im2col_in.clone());
            let z = tape.matmul(cols, pv("f.w1"));
            let z = tape.add_row(z, pv("f.b1"));
            let z = tape.silu(z);
            let cols2 =
                tape.sparse_linear(z, vec![b, cfg.kernel * cfg.conv_hidden], im2col_mid.clone());
            let z2 = tape.matmul(cols2, pv("f.w2"));
            let z2 = tape.add_row(z2, pv("f.b2"));
            outputs.push(tape.narrow_cols(z2, 0, 1));
            hidden = tape.narrow_cols(z2, 1, hc);
        }
        // concatenated [L * B, 1] = flat corrected patches
        Ok(tape.concat_rows(&outputs))
    }
}

// ---------------------------------------------------------------------------
// Composite denoiser, guidance, training
// ---------------------------------------------------------------------------

/// Classifier-free guidance combination `(1 + w) * cond - w * uncond`.
pub fn cfg_combine(cond_out: &Tensor, uncond_out: &Tensor, w: f64) -> Result<Tensor> {
    cond_out.check_same_shape(uncond_out)?;
    cond_out.zip(uncond_out, |c, u| (1.0 + w) * c - w * u)
}

/// Spread an expanded-domain conditioning over the patches of a layout.
pub fn distribute_cond(layout: &PatchLayout, cond: Option<&Cond>) -> Result<Vec<Option<Cond>>> {
    let l = layout.num_patches();
    match cond {
        None => Ok(vec![None; l]),
        Some(Cond::Positions(ps)) => {
            if ps.len() != l {
                return Err(QuiltError::ShapeMismatch {
                    expected: vec![l],
                    actual: vec![ps.len()],
                });
            }
            Ok(ps.iter().map(|&p| Some(Cond::Position(p))).collect())
        }
        Some(Cond::Position(p)) => {
            if l != 1 {
                return Err(QuiltError::InvalidConfig(format!(
                    "single position conditioning for a {l}-patch layout"
                )));
            }
            Ok(vec![Some(Cond::Position(*p))])
        }
    }
}

fn composite_tape(
    base: &dyn Denoiser,
    model: &dyn CoordinatorModel,
    x: &Tensor,
    conds: &[Option<Cond>],
    sigma: NoiseLevel,
    layout: &PatchLayout,
) -> Result<(Tape, Vec<Var>, Var)> {
    layout.validate()?;
    if conds.len() != layout.num_patches() {
        return Err(QuiltError::ShapeMismatch {
            expected: vec![layout.num_patches()],
            actual: vec![conds.len()],
        });
    }
    if layout.patch_shape() != model.patch_shape() {
        return Err(QuiltError::ShapeMismatch {
            expected: model.patch_shape().to_vec(),
            actual: layout.patch_shape(),
        });
    }
    let decomposition = decompose(x, layout)?;
    let patch_refs: Vec<&Tensor> = decomposition.patches.iter().collect();
    let cond_refs: Vec<Option<&Cond>> = conds.iter().map(|c| c.as_ref()).collect();
    let base_outputs = base.denoise_batch(&patch_refs, &cond_refs, sigma)?;
    for (out, patch) in base_outputs.iter().zip(&patch_refs) {
        out.check_same_shape(patch)?;
    }
    let slots: Vec<PatchSlot> = (0..layout.num_patches())
        .map(|p| PatchSlot {
            offset: layout.patch_offset(p),
            cond: conds[p].clone(),
        })
        .collect();

    let mut tape = Tape::new();
    let param_vars: Vec<Var> = model
        .params()
        .iter()
        .map(|p| tape.leaf(p.value.clone()))
        .collect();
    let base_refs: Vec<&Tensor> = base_outputs.iter().collect();
    let corrected = model.forward_tape(&mut tape, &param_vars, &base_refs, &slots, sigma)?;
    let map: SparseMap = Rc::new(recompose_map(layout)?);
    let object = tape.sparse_linear(corrected, layout.object_shape(), map);
    Ok((tape, param_vars, object))
}

/// The composite denoiser on the expanded domain: decompose, run the base
/// denoiser per patch, correct with the coordinator, reconcile overlapping
/// predictions by averaging.
pub fn composite_denoise(
    base: &dyn Denoiser,
    model: &dyn CoordinatorModel,
    x: &Tensor,
    conds: &[Option<Cond>],
    sigma: NoiseLevel,
    layout: &PatchLayout,
) -> Result<Tensor> {
    let (tape, _, object) = composite_tape(base, model, x, conds, sigma, layout)?;
    Ok(tape.value(object).clone())
}

/// Expanded-domain denoiser wrapper for the ODE sampler, with optional
/// classifier-free guidance (the unconditional branch masks every base call
/// and conditioning token).
pub struct CompositeDenoiser<'a> {
    pub base: &'a dyn Denoiser,
    pub model: &'a dyn CoordinatorModel,
    pub layout: PatchLayout,
    pub guidance: Option<f64>,
}

impl Denoiser for CompositeDenoiser<'_> {
    fn denoise(&self, x: &Tensor, cond: Option<&Cond>, sigma: NoiseLevel) -> Result<Tensor> {
        let conds = distribute_cond(&self.layout, cond)?;
        let out = composite_denoise(self.base, self.model, x, &conds, sigma, &self.layout)?;
        match self.guidance {
            Some(w) if cond.is_some() && w != 0.0 => {
                // In a replicate layout every masked replica carries
                // identical tokens at identical positions, so attention
                // weights renormalize to the single-replica case and the
                // averaged output is the same; one replica suffices.
                let uncond_layout = match &self.layout {
                    PatchLayout::Replicate { shape, .. } => PatchLayout::Replicate {
                        count: 1,
                        shape: shape.clone(),
                    },
                    other => other.clone(),
                };
                let unconds = vec![None; uncond_layout.num_patches()];
                let uncond =
                    composite_denoise(self.base, self.model, x, &unconds, sigma, &uncond_layout)?;
                cfg_combine(&out, &uncond, w)
            }
            _ => Ok(out),
        }
    }
}

/// Frozen draws for one coordinator loss evaluation.
#[derive(Clone, Debug)]
pub struct CoordDraw {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub conds: Vec<Option<Cond>>,
    pub layout: PatchLayout,
    pub sigma: f64,
}

fn coord_loss_tape(
    base: &dyn Denoiser,
    model: &dyn CoordinatorModel,
    draw: &CoordDraw,
    weighting: &LossWeighting,
    scale: f64,
) -> Result<(Tape, Vec<Var>, Var)> {
    let sigma = NoiseLevel::new(draw.sigma)?;
    let (mut tape, param_vars, object) = composite_tape(
        base,
        model,
        &draw.noisy,
        &draw.conds,
        sigma,
        &draw.layout,
    )?;
    let target = tape.leaf(draw.clean.clone());
    let err = tape.sq_err_sum(object, target);
    let loss = tape.scale(err, weighting.weight(sigma) * scale);
    Ok((tape, param_vars, loss))
}

/// Mean weighted composite denoising error over frozen draws.
pub fn coordinator_loss(
    base: &dyn Denoiser,
    model: &dyn CoordinatorModel,
    draws: &[CoordDraw],
    weighting: &LossWeighting,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(QuiltError::EmptyBatch);
    }
    let mut total = 0.0;
    for draw in draws {
        let (tape, _, loss) = coord_loss_tape(base, model, draw, weighting, 1.0)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / draws.len() as f64)
}

/// Loss and analytic gradients w.r.t. coordinator parameters (the base
/// denoiser is treated as frozen).
pub fn coordinator_loss_and_grads(
    base: &dyn Denoiser,
    model: &dyn CoordinatorModel,
    draws: &[CoordDraw],
    weighting: &LossWeighting,
) -> Result<(f64, Vec<Tensor>)> {
    if draws.is_empty() {
        return Err(QuiltError::EmptyBatch);
    }
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    let scale = 1.0 / draws.len() as f64;
    for draw in draws {
        let (tape, param_vars, loss) = coord_loss_tape(base, model, draw, weighting, scale)?;
        total += tape.value(loss).data()[0];
        let g = tape.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(&param_vars) {
            if let Some(part) = g.get(v) {
                acc.axpy(1.0, part)?;
            }
        }
    }
    Ok((total, grads))
}

/// What the coordinator is trained to do.
#[derive(Clone, Debug)]
pub enum CoordTask {
    /// Fixed spatial decomposition of every training object.
    Spatial { layout: PatchLayout },
    /// One object replicated per conditioning; the conditioning count is
    /// drawn uniformly from `1..=l_train` for each example.
    MultiCond { l_train: usize },
}

/// One coordinator training example: an expanded object plus the
/// conditioning positions available in it.
#[derive(Clone, Debug)]
pub struct CoordTrainItem {
    pub object: Tensor,
    pub positions: Vec<[f64; 2]>,
}

fn draw_coord_batch(
    items: &[(u64, &CoordTrainItem)],
    task: &CoordTask,
    config: &TrainConfig,
    draw_seed: u64,
) -> Result<Vec<CoordDraw>> {
    let mut draws = Vec::with_capacity(items.len());
    for &(id, item) in items {
        let mut rng = rng_from_seed(derive_seed(draw_seed, id));
        let sigma = sample_sigma(&config.sigma_sampler, &mut rng);
        let mut noisy = item.object.clone();
        for v in noisy.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sigma.value() * e;
        }
        let (layout, conds) = match task {
            CoordTask::Spatial { layout } => {
                (layout.clone(), vec![None; layout.num_patches()])
            }
            CoordTask::MultiCond { l_train } => {
                if item.positions.is_empty() {
                    return Err(QuiltError::InvalidConfig(
                        "multi-conditioning training item without positions".into(),
                    ));
                }
                let l_max = (*l_train).max(1);
                let l = rng.gen_range(1..=l_max).min(item.positions.len());
                let mut order: Vec<usize> = (0..item.positions.len()).collect();
                order.shuffle(&mut rng);
                let masked = rng.gen_range(0.0..1.0) < config.cond_dropout;
                let conds: Vec<Option<Cond>> = order[..l]
                    .iter()
                    .map(|&i| {
                        if masked {
                            None
                        } else {
                            Some(Cond::Position(item.positions[i]))
                        }
                    })
                    .collect();
                (
                    PatchLayout::Replicate {
                        count: l,
                        shape: item.object.shape().to_vec(),
                    },
                    conds,
                )
            }
        };
        draws.push(CoordDraw {
            noisy,
            clean: item.object.clone(),
            conds,
            layout,
            sigma: sigma.value(),
        });
    }
    Ok(draws)
}

/// Train a coordinator against a frozen base denoiser by minimizing the
/// composite denoising error. Deterministic under `config.seed`.
pub fn train_coordinator(
    base: &dyn Denoiser,
    model: &mut dyn CoordinatorModel,
    task: &CoordTask,
    items: &[CoordTrainItem],
    config: &TrainConfig,
    weighting: &LossWeighting,
) -> Result<TrainOutput> {
    config.validate()?;
    if items.is_empty() {
        return Err(QuiltError::EmptyBatch);
    }
    if let CoordTask::Spatial { layout } = task {
        layout.validate()?;
        for item in items {
            if item.object.shape() != layout.object_shape().as_slice() {
                return Err(QuiltError::ShapeMismatch {
                    expected: layout.object_shape(),
                    actual: item.object.shape().to_vec(),
                });
            }
        }
    }
    let mut ema = model.params().clone();
    let mut adam = Adam::new(model.params(), config.lr, (0.9, 0.99));
    let schedule = LrSchedule::LinearDecay {
        final_scale: config.lr_final_scale,
    };
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_ema_distance = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, 0xC0_0000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let draw_seed = derive_seed(config.seed, 0xCD_0000 + epoch as u64);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(u64, &CoordTrainItem)> =
                chunk.iter().map(|&i| (i as u64, &items[i])).collect();
            let draws = draw_coord_batch(&batch, task, config, draw_seed)?;
            let (loss, grads) = coordinator_loss_and_grads(base, model, &draws, weighting)?;
            if !loss.is_finite() {
                return Err(QuiltError::Divergence {
                    step: epoch,
                    context: format!("coordinator training loss = {loss}"),
                });
            }
            adam.step(model.params_mut(), &grads, schedule.scale(step, total_steps))?;
            ema = ema_update(&ema, model.params(), config.ema_decay)?;
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        epoch_losses.push(epoch_loss / items.len() as f64);
        epoch_ema_distance.push(ema.max_abs_diff(model.params()));
    }
    Ok(TrainOutput {
        params: model.params().clone(),
        ema,
        epoch_losses,
        epoch_ema_distance,
    })
}
