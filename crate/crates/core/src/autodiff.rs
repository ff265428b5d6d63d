//! Reverse-mode autodiff on a tape of [`Tensor`] ops.
//!
//! Each forward call pushes a node holding the value, its parent ids, and a
//! closure producing parent gradients from the output gradient. Graphs are
//! rebuilt per step; everything is plain f64 so analytic gradients can be
//! validated against central finite differences at tight tolerances.
//!
//! Only the ops the models in this crate need are provided. All of them are
//! exercised by finite-difference tests below.

use crate::error::{QuiltError, Result};
use crate::rope::{rope_apply, RopeConfig};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Sparse linear map, shared between forward and backward closures.
/// Entries are (output index, input index, coefficient).
pub type SparseMap = Rc<Vec<(u32, u32, f64)>>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Used both for trainable parameters and constant inputs;
    /// gradients are accumulated for every leaf that influences the loss.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add: shape");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub: shape");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip(self.value(b), |x, y| x * y)
            .expect("mul: shape");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p| {
                vec![
                    g.zip(p[1], |gv, bv| gv * bv).unwrap(),
                    g.zip(p[0], |gv, av| gv * av).unwrap(),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _| vec![g.scale(c)])),
        )
    }

    /// Broadcast-add a `[d]` vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(bv.len(), d, "add_row: bias length");
        let mut out = xv.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += bv.data()[j];
            }
        }
        self.push(
            out,
            vec![x, bias],
            Some(Box::new(move |g, _| {
                let mut gb = Tensor::zeros(&[d]);
                for i in 0..n {
                    for j in 0..d {
                        gb.data_mut()[j] += g.data()[i * d + j];
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// Broadcast-multiply every row of an `[n, d]` matrix by a `[d]` vector.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(wv.len(), d, "mul_row: weight length");
        let mut out = xv.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] *= wv.data()[j];
            }
        }
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g, p| {
                let (xv, wv) = (p[0], p[1]);
                let mut gx = g.clone();
                let mut gw = Tensor::zeros(&[d]);
                for i in 0..n {
                    for j in 0..d {
                        gx.data_mut()[i * d + j] *= wv.data()[j];
                        gw.data_mut()[j] += g.data()[i * d + j] * xv.data()[i * d + j];
                    }
                }
                vec![gx, gw]
            })),
        )
    }

    /// Scale each row of an `[n, d]` matrix by a fixed coefficient.
    pub fn scale_rows(&mut self, x: Var, coeffs: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(coeffs.len(), n, "scale_rows: coefficient count");
        let mut out = xv.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] *= coeffs[i];
            }
        }
        let cb = coeffs.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = g.clone();
                for i in 0..n {
                    for j in 0..d {
                        gx.data_mut()[i * d + j] *= cb[i];
                    }
                }
                vec![gx]
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul: inner dims");
        let value = av.matmul(bv).expect("matmul");
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, p| {
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g.data(), p[1].data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(p[0].data(), g.data(), &mut gb, m, k, n);
                vec![
                    Tensor::new(vec![m, k], ga).unwrap(),
                    Tensor::new(vec![k, n], gb).unwrap(),
                ]
            })),
        )
    }

    /// `a [m,k] * b^T [n,k] -> [m,n]`; used for attention logits.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(bv.cols(), k, "matmul_nt: inner dims");
        let mut out = vec![0.0; m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, p| {
                let mut ga = vec![0.0; m * k];
                matmul_into(g.data(), p[1].data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                matmul_tn_into(g.data(), p[0].data(), &mut gb, m, n, k);
                vec![
                    Tensor::new(vec![m, k], ga).unwrap(),
                    Tensor::new(vec![n, k], gb).unwrap(),
                ]
            })),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, p| {
                vec![g
                    .zip(p[0], |gv, v| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .unwrap()]
            })),
        )
    }

    /// Per-row layer norm with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.len(), d, "layer_norm: gamma length");
        assert_eq!(bv.len(), d, "layer_norm: beta length");
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.data_mut()[i * d + j] = (row[j] - mean) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g, p| {
                let (xv, gv) = (p[0], p[1]);
                let mut gx = Tensor::zeros(&[n, d]);
                let mut gg = Tensor::zeros(&[d]);
                let mut gb = Tensor::zeros(&[d]);
                for i in 0..n {
                    let row = xv.row(i);
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_gy = 0.0; // sum_j grad_j * gamma_j
                    let mut sum_gy_xhat = 0.0; // sum_j grad_j * gamma_j * xhat_j
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gy = grow[j] * gv.data()[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        gg.data_mut()[j] += grow[j] * xhat;
                        gb.data_mut()[j] += grow[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gy = grow[j] * gv.data()[j];
                        gx.data_mut()[i * d + j] =
                            inv * (gy - sum_gy / dn - xhat * sum_gy_xhat / dn);
                    }
                }
                vec![gx, gg, gb]
            })),
        )
    }

    /// Row-wise softmax of an `[n, m]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = xv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out.data_mut()[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out.data_mut()[i * m + j] /= z;
            }
        }
        let probs = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let prow = probs.row(i);
                    let grow = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..m {
                        gx.data_mut()[i * m + j] = prow[j] * (grow[j] - dot);
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Select (and possibly repeat) rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather_rows: index out of range");
            out.data_mut()[k * d..(k + 1) * d].copy_from_slice(xv.row(i));
        }
        let ib = idx.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, d]);
                for (k, &i) in ib.iter().enumerate() {
                    let grow = &g.data()[k * d..(k + 1) * d];
                    let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                    for (o, gv) in dst.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let sizes: Vec<usize> = parts.iter().map(|&v| self.value(v).rows()).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Tensor::zeros(&[total, d]);
        let mut off = 0;
        for &v in parts {
            let t = self.value(v);
            assert_eq!(t.cols(), d, "concat_rows: column mismatch");
            out.data_mut()[off..off + t.len()].copy_from_slice(t.data());
            off += t.len();
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &r in &sizes {
                    let len = r * d;
                    grads.push(
                        Tensor::new(vec![r, d], g.data()[off..off + len].to_vec()).unwrap(),
                    );
                    off += len;
                }
                grads
            })),
        )
    }

    /// Column slice `[start, start+len)` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert!(start + len <= d, "narrow_cols: out of range");
        let mut out = Tensor::zeros(&[n, len]);
        for i in 0..n {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    gx.data_mut()[i * d + start..i * d + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![gx]
            })),
        )
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&v| self.value(v).cols()).collect();
        let d: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, d]);
        let mut off = 0;
        for (&v, &w) in parts.iter().zip(&widths) {
            let t = self.value(v);
            assert_eq!(t.rows(), n, "concat_cols: row mismatch");
            for i in 0..n {
                out.data_mut()[i * d + off..i * d + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut gp = Tensor::zeros(&[n, w]);
                    for i in 0..n {
                        gp.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * d + off..i * d + off + w]);
                    }
                    grads.push(gp);
                    off += w;
                }
                grads
            })),
        )
    }

    /// Rotary position transform of each row of a `[tokens, head_dim]`
    /// matrix; rotations are isometries, so the backward pass applies the
    /// inverse rotation to the gradient.
    pub fn rope_rows(&mut self, x: Var, positions: Rc<Vec<(i64, i64)>>, cfg: RopeConfig) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(d, cfg.head_dim, "rope_rows: head_dim");
        assert_eq!(positions.len(), n, "rope_rows: position count");
        let mut out = xv.clone();
        for i in 0..n {
            rope_apply(
                &mut out.data_mut()[i * d..(i + 1) * d],
                positions[i],
                &cfg,
                false,
            );
        }
        let pb = positions.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = g.clone();
                for i in 0..n {
                    rope_apply(&mut gx.data_mut()[i * d..(i + 1) * d], pb[i], &cfg, true);
                }
                vec![gx]
            })),
        )
    }

    /// General sparse linear map over flattened storage; covers unpatchify
    /// and overlap averaging. The transpose map gives the backward pass.
    pub fn sparse_linear(&mut self, x: Var, out_shape: Vec<usize>, map: SparseMap) -> Var {
        let xv = self.value(x);
        let in_len = xv.len();
        let mut out = Tensor::zeros(&out_shape);
        for &(o, i, c) in map.iter() {
            out.data_mut()[o as usize] += c * xv.data()[i as usize];
        }
        let mb = map.clone();
        let in_shape = xv.shape().to_vec();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&in_shape);
                debug_assert_eq!(gx.len(), in_len);
                for &(o, i, c) in mb.iter() {
                    gx.data_mut()[i as usize] += c * g.data()[o as usize];
                }
                vec![gx]
            })),
        )
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _| {
                vec![Tensor::filled(&shape, g.data()[0])]
            })),
        )
    }

    /// Convenience: sum of squared entries of `a - b`.
    pub fn sq_err_sum(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    /// Reverse pass from a scalar loss; returns one gradient slot per node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(QuiltError::InvalidConfig(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parts = backward(&g, &parent_vals);
                debug_assert_eq!(parts.len(), node.parents.len());
                for (p, part) in node.parents.iter().zip(parts) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.axpy(1.0, &part)?,
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, or None if the node does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with zeros substituted when the node is disconnected.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Central finite-difference check of a scalar-valued graph builder
    /// against analytic gradients, for every coordinate of every input.
    fn check_grads(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).data()[0]
        };

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.shape());
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let denom = fd.abs().max(a.abs()).max(1.0);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "input {k} coord {j}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn rand_weights(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut rng_from_seed(seed))
    }

    /// Weighted sum turns any output into a scalar while keeping full
    /// gradient information.
    fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let shape = tape.value(out).shape().to_vec();
        let w = tape.leaf(rand_weights(&shape, seed));
        let prod = tape.mul(out, w);
        tape.sum_all(prod)
    }

    #[test]
    fn elementwise_ops() {
        let a = rand_weights(&[3, 4], 1);
        let b = rand_weights(&[3, 4], 2);
        check_grads(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[1]);
            let sc = t.scale(m, 1.7);
            weighted(t, sc, 10)
        }, 1e-6);
    }

    #[test]
    fn matmul_ops() {
        let a = rand_weights(&[3, 4], 3);
        let b = rand_weights(&[4, 2], 4);
        check_grads(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            weighted(t, m, 11)
        }, 1e-6);

        let a = rand_weights(&[3, 4], 5);
        let b = rand_weights(&[5, 4], 6);
        check_grads(&[a, b], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            weighted(t, m, 12)
        }, 1e-6);
    }

    #[test]
    fn broadcast_and_row_scale() {
        let x = rand_weights(&[4, 3], 7);
        let bias = rand_weights(&[3], 8);
        check_grads(&[x.clone(), bias.clone()], |t, v| {
            let o = t.add_row(v[0], v[1]);
            weighted(t, o, 13)
        }, 1e-6);

        check_grads(&[x.clone(), bias], |t, v| {
            let o = t.mul_row(v[0], v[1]);
            weighted(t, o, 36)
        }, 1e-6);

        let coeffs = Rc::new(vec![0.5, -1.5, 2.0, 0.1]);
        check_grads(&[x], move |t, v| {
            let o = t.scale_rows(v[0], coeffs.clone());
            weighted(t, o, 14)
        }, 1e-6);
    }

    #[test]
    fn nonlinearities() {
        let x = rand_weights(&[4, 5], 9);
        check_grads(std::slice::from_ref(&x), |t, v| {
            let o = t.silu(v[0]);
            weighted(t, o, 15)
        }, 1e-6);

        check_grads(&[x], |t, v| {
            let o = t.softmax_rows(v[0]);
            weighted(t, o, 16)
        }, 1e-5);
    }

    #[test]
    fn layer_norm_grad() {
        let x = rand_weights(&[3, 6], 17);
        let gamma = rand_weights(&[6], 18).map(|v| 1.0 + 0.1 * v);
        let beta = rand_weights(&[6], 19);
        check_grads(&[x, gamma, beta], |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-6);
            weighted(t, o, 20)
        }, 1e-5);
    }

    #[test]
    fn gather_and_concat() {
        let x = rand_weights(&[5, 3], 21);
        let idx = Rc::new(vec![4usize, 0, 0, 2]);
        check_grads(&[x], move |t, v| {
            let o = t.gather_rows(v[0], idx.clone());
            weighted(t, o, 22)
        }, 1e-6);

        let a = rand_weights(&[2, 3], 23);
        let b = rand_weights(&[4, 3], 24);
        check_grads(&[a, b], |t, v| {
            let o = t.concat_rows(&[v[0], v[1]]);
            weighted(t, o, 25)
        }, 1e-6);

        let a = rand_weights(&[3, 2], 26);
        let b = rand_weights(&[3, 5], 27);
        check_grads(&[a.clone(), b], |t, v| {
            let o = t.concat_cols(&[v[0], v[1]]);
            weighted(t, o, 28)
        }, 1e-6);

        check_grads(&[a], |t, v| {
            let o = t.narrow_cols(v[0], 0, 1);
            weighted(t, o, 29)
        }, 1e-6);
    }

    #[test]
    fn rope_rows_grad_and_isometry() {
        let cfg = RopeConfig::new(8, 100.0).unwrap();
        let x = rand_weights(&[3, 8], 30);
        let pos = Rc::new(vec![(0i64, 0i64), (2, 5), (-3, 7)]);
        let pos2 = pos.clone();
        check_grads(std::slice::from_ref(&x), move |t, v| {
            let o = t.rope_rows(v[0], pos2.clone(), cfg);
            weighted(t, o, 31)
        }, 1e-6);

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let o = tape.rope_rows(v, pos, cfg);
        let rotated = tape.value(o);
        for i in 0..3 {
            let n0: f64 = x.row(i).iter().map(|v| v * v).sum();
            let n1: f64 = rotated.row(i).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-10);
        }
    }

    #[test]
    fn sparse_linear_grad() {
        let x = rand_weights(&[2, 3], 32);
        let map: SparseMap = Rc::new(vec![
            (0, 0, 1.0),
            (0, 3, 0.5),
            (1, 1, -2.0),
            (3, 5, 1.5),
            (3, 0, 0.25),
        ]);
        check_grads(&[x], move |t, v| {
            let o = t.sparse_linear(v[0], vec![4], map.clone());
            weighted(t, o, 33)
        }, 1e-6);
    }

    #[test]
    fn fan_out_accumulates() {
        // One node feeding two consumers must receive the sum of both paths.
        let x = rand_weights(&[2, 2], 34);
        check_grads(&[x], |t, v| {
            let a = t.scale(v[0], 2.0);
            let b = t.mul(v[0], v[0]);
            let s = t.add(a, b);
            weighted(t, s, 35)
        }, 1e-6);
    }

    #[test]
    fn disconnected_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::scalar(2.0));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
