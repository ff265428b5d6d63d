//! Decomposition of an object into overlapping patches and the
//! overlap-averaging recomposition.
//!
//! Three layouts cover the tasks in this crate: a 1D line of overlapping
//! windows, a 2D grid of square patches, and replication (every "patch" is
//! the whole object), which is how a single image paired with several
//! conditioning inputs is decomposed.

use crate::error::{QuiltError, Result};
use crate::tensor::Tensor;

/// Overlapping windows along one axis: `total = patch + stride * (count-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid1D {
    pub total_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub count: usize,
}

impl PatchGrid1D {
    /// Build from patch geometry; the total length follows.
    pub fn new(patch_len: usize, stride: usize, count: usize) -> Result<Self> {
        let grid = Self {
            total_len: patch_len + stride * (count.saturating_sub(1)),
            patch_len,
            stride,
            count,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Build from a required total length; rejected unless the windows tile
    /// it exactly (no padding is ever applied).
    pub fn from_total(total_len: usize, patch_len: usize, stride: usize) -> Result<Self> {
        if total_len < patch_len {
            return Err(QuiltError::InvalidConfig(format!(
                "total_len {total_len} < patch_len {patch_len}"
            )));
        }
        if stride == 0 || !(total_len - patch_len).is_multiple_of(stride) {
            return Err(QuiltError::InvalidConfig(format!(
                "(total {total_len} - patch {patch_len}) not divisible by stride {stride}"
            )));
        }
        Self::new(patch_len, stride, (total_len - patch_len) / stride + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 || self.patch_len == 0 {
            return Err(QuiltError::InvalidConfig(
                "patch_len and count must be positive".into(),
            ));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(QuiltError::InvalidConfig(format!(
                "need 1 <= stride <= patch_len, got stride {} patch {}",
                self.stride, self.patch_len
            )));
        }
        if self.total_len != self.patch_len + self.stride * (self.count - 1) {
            return Err(QuiltError::InvalidConfig(
                "total_len inconsistent with patch geometry".into(),
            ));
        }
        Ok(())
    }

    pub fn offset(&self, patch: usize) -> usize {
        debug_assert!(patch < self.count);
        patch * self.stride
    }
}

/// Square-window grid over a 2D object; per-axis geometry as in 1D. Patch
/// `(i, j)` covers rows `[i*stride, i*stride+patch)` and the analogous
/// column range, ordered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid2D {
    pub rows: PatchGrid1D,
    pub cols: PatchGrid1D,
}

impl PatchGrid2D {
    pub fn new(rows: PatchGrid1D, cols: PatchGrid1D) -> Self {
        Self { rows, cols }
    }

    /// Same geometry on both axes.
    pub fn square(patch_len: usize, stride: usize, count: usize) -> Result<Self> {
        let axis = PatchGrid1D::new(patch_len, stride, count)?;
        Ok(Self {
            rows: axis,
            cols: axis,
        })
    }
}

/// The decomposition function: object shape, patch shape, and the index map
/// between them.
#[derive(Clone, Debug, PartialEq)]
pub enum PatchLayout {
    Line(PatchGrid1D),
    Grid(PatchGrid2D),
    /// `count` copies of the whole object; used when one object is paired
    /// with several conditioning inputs.
    Replicate { count: usize, shape: Vec<usize> },
}

impl PatchLayout {
    pub fn num_patches(&self) -> usize {
        match self {
            PatchLayout::Line(g) => g.count,
            PatchLayout::Grid(g) => g.rows.count * g.cols.count,
            PatchLayout::Replicate { count, .. } => *count,
        }
    }

    pub fn object_shape(&self) -> Vec<usize> {
        match self {
            PatchLayout::Line(g) => vec![g.total_len],
            PatchLayout::Grid(g) => vec![g.rows.total_len, g.cols.total_len],
            PatchLayout::Replicate { shape, .. } => shape.clone(),
        }
    }

    pub fn patch_shape(&self) -> Vec<usize> {
        match self {
            PatchLayout::Line(g) => vec![g.patch_len],
            PatchLayout::Grid(g) => vec![g.rows.patch_len, g.cols.patch_len],
            PatchLayout::Replicate { shape, .. } => shape.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PatchLayout::Line(g) => g.validate(),
            PatchLayout::Grid(g) => {
                g.rows.validate()?;
                g.cols.validate()
            }
            PatchLayout::Replicate { count, shape } => {
                if *count == 0 || shape.is_empty() || shape.contains(&0) {
                    return Err(QuiltError::InvalidConfig(
                        "replicate layout needs count >= 1 and a nonempty shape".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Flat object indices covered by a patch, in intra-patch row-major
    /// order.
    pub fn object_indices(&self, patch: usize) -> Vec<usize> {
        match self {
            PatchLayout::Line(g) => {
                let off = g.offset(patch);
                (off..off + g.patch_len).collect()
            }
            PatchLayout::Grid(g) => {
                let (i, j) = (patch / g.cols.count, patch % g.cols.count);
                let (r0, c0) = (g.rows.offset(i), g.cols.offset(j));
                let width = g.cols.total_len;
                let mut out = Vec::with_capacity(g.rows.patch_len * g.cols.patch_len);
                for r in r0..r0 + g.rows.patch_len {
                    for c in c0..c0 + g.cols.patch_len {
                        out.push(r * width + c);
                    }
                }
                out
            }
            PatchLayout::Replicate { shape, .. } => (0..shape.iter().product()).collect(),
        }
    }

    /// Grid offset of a patch in stride units per axis; used for global
    /// positional encodings. Replicated patches all sit at the origin.
    pub fn patch_offset(&self, patch: usize) -> (usize, usize) {
        match self {
            PatchLayout::Line(g) => (g.offset(patch), 0),
            PatchLayout::Grid(g) => {
                let (i, j) = (patch / g.cols.count, patch % g.cols.count);
                (g.rows.offset(i), g.cols.offset(j))
            }
            PatchLayout::Replicate { .. } => (0, 0),
        }
    }

    /// Interior patch-boundary positions along the line, for seam metrics.
    /// Meaningful for `Line` layouts only.
    pub fn line_boundaries(&self) -> Vec<usize> {
        match self {
            PatchLayout::Line(g) => {
                let mut b = Vec::new();
                for p in 0..g.count {
                    let start = g.offset(p);
                    let end = start + g.patch_len;
                    if start > 0 {
                        b.push(start);
                    }
                    if end < g.total_len {
                        b.push(end);
                    }
                }
                b.sort_unstable();
                b.dedup();
                b
            }
            _ => Vec::new(),
        }
    }
}

/// An object split into patches under a layout.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub patches: Vec<Tensor>,
    pub layout: PatchLayout,
}

/// Read the patches of `object` under `layout`.
pub fn decompose(object: &Tensor, layout: &PatchLayout) -> Result<Decomposition> {
    layout.validate()?;
    let expected = layout.object_shape();
    if object.shape() != expected.as_slice() {
        return Err(QuiltError::ShapeMismatch {
            expected,
            actual: object.shape().to_vec(),
        });
    }
    let patch_shape = layout.patch_shape();
    let mut patches = Vec::with_capacity(layout.num_patches());
    for p in 0..layout.num_patches() {
        let data: Vec<f64> = layout
            .object_indices(p)
            .into_iter()
            .map(|i| object.data()[i])
            .collect();
        patches.push(Tensor::new(patch_shape.clone(), data)?);
    }
    Ok(Decomposition {
        patches,
        layout: layout.clone(),
    })
}

/// Number of patches covering each object position (as an integral-valued
/// tensor over the object shape).
pub fn coverage_counts(layout: &PatchLayout) -> Result<Tensor> {
    layout.validate()?;
    let mut counts = Tensor::zeros(&layout.object_shape());
    for p in 0..layout.num_patches() {
        for i in layout.object_indices(p) {
            counts.data_mut()[i] += 1.0;
        }
    }
    debug_assert!(counts.data().iter().all(|&c| c >= 1.0));
    Ok(counts)
}

/// Reassemble an object, averaging the patch values at every position.
pub fn recompose_average(decomposition: &Decomposition) -> Result<Tensor> {
    let layout = &decomposition.layout;
    layout.validate()?;
    if decomposition.patches.len() != layout.num_patches() {
        return Err(QuiltError::ShapeMismatch {
            expected: vec![layout.num_patches()],
            actual: vec![decomposition.patches.len()],
        });
    }
    let patch_shape = layout.patch_shape();
    let mut acc = Tensor::zeros(&layout.object_shape());
    for (p, patch) in decomposition.patches.iter().enumerate() {
        if patch.shape() != patch_shape.as_slice() {
            return Err(QuiltError::ShapeMismatch {
                expected: patch_shape,
                actual: patch.shape().to_vec(),
            });
        }
        for (k, i) in layout.object_indices(p).into_iter().enumerate() {
            acc.data_mut()[i] += patch.data()[k];
        }
    }
    let counts = coverage_counts(layout)?;
    for (v, c) in acc.data_mut().iter_mut().zip(counts.data()) {
        *v /= c;
    }
    Ok(acc)
}

/// Sparse map from concatenated patch storage (patch-major, intra-patch
/// row-major) to the object, with overlap-averaging coefficients. This is
/// exactly `recompose_average` as a linear operator; the coordinator uses
/// it on the autodiff tape.
pub fn recompose_map(layout: &PatchLayout) -> Result<Vec<(u32, u32, f64)>> {
    layout.validate()?;
    let counts = coverage_counts(layout)?;
    let patch_len: usize = layout.patch_shape().iter().product();
    let mut map = Vec::new();
    for p in 0..layout.num_patches() {
        for (k, i) in layout.object_indices(p).into_iter().enumerate() {
            map.push((
                i as u32,
                (p * patch_len + k) as u32,
                1.0 / counts.data()[i],
            ));
        }
    }
    Ok(map)
}
