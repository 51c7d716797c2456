//! Token-grid geometry and the patch-aligned reorder/restore permutations.
//!
//! Tokens arrive frame-major, row-major within a frame. Reordering groups
//! the tokens of every `patch_h x patch_w` patch into one contiguous run so
//! that region `i` occupies rows `[i * p, (i + 1) * p)`. Regions are numbered
//! frame first, then patch row, then patch column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Shape of a latent video: `frames` feature maps of `height x width`
/// tokens, tiled by non-overlapping `patch_h x patch_w` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentLayout {
    frames: usize,
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
}

impl LatentLayout {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        patch_h: usize,
        patch_w: usize,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || patch_h == 0 || patch_w == 0 {
            return Err(Error::Layout(format!(
                "all extents must be positive (F={frames}, H={height}, W={width}, h={patch_h}, w={patch_w})"
            )));
        }
        if height % patch_h != 0 || width % patch_w != 0 {
            return Err(Error::Layout(format!(
                "patch {patch_h}x{patch_w} does not tile a {height}x{width} frame"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            patch_h,
            patch_w,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn patch_h(&self) -> usize {
        self.patch_h
    }
    pub fn patch_w(&self) -> usize {
        self.patch_w
    }

    /// Patches per frame along the height axis.
    pub fn grid_h(&self) -> usize {
        self.height / self.patch_h
    }

    /// Patches per frame along the width axis.
    pub fn grid_w(&self) -> usize {
        self.width / self.patch_w
    }

    /// Token count `n = F * H * W`.
    pub fn n(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Tokens per region, `p = h * w`.
    pub fn region_size(&self) -> usize {
        self.patch_h * self.patch_w
    }

    /// Region count `g = n / p`.
    pub fn regions(&self) -> usize {
        self.frames * self.grid_h() * self.grid_w()
    }

    /// Region of the token at original (row-major) index `idx`.
    pub fn region_of(&self, idx: usize) -> usize {
        let frame_len = self.height * self.width;
        let (f, rem) = (idx / frame_len, idx % frame_len);
        let (y, x) = (rem / self.width, rem % self.width);
        (f * self.grid_h() + y / self.patch_h) * self.grid_w() + x / self.patch_w
    }

    /// Frame holding the token at original index `idx`.
    pub fn frame_of(&self, idx: usize) -> usize {
        idx / (self.height * self.width)
    }
}

/// A bijection on token indices together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    /// Validates `forward` and computes its inverse.
    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let inverse = invert(&forward)?;
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// `forward[i]` is the source index gathered into position `i`.
    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Permutation applying `first` and then `self`, in gather form:
    /// `result.forward[i] = first.forward[self.forward[i]]`.
    pub fn after(&self, first: &Permutation) -> Result<Permutation> {
        if self.len() != first.len() {
            return Err(Error::Shape(format!(
                "compose permutations of length {} and {}",
                self.len(),
                first.len()
            )));
        }
        Permutation::from_forward(self.forward.iter().map(|&i| first.forward[i]).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }
}

fn invert(forward: &[usize]) -> Result<Vec<usize>> {
    let n = forward.len();
    let mut inverse = vec![usize::MAX; n];
    for (i, &src) in forward.iter().enumerate() {
        if src >= n {
            return Err(Error::IndexOutOfRange { index: src, len: n });
        }
        if inverse[src] != usize::MAX {
            return Err(Error::DuplicateIndex { index: src });
        }
        inverse[src] = i;
    }
    Ok(inverse)
}

/// Patch-aligned reorder index: visits frames, then patch rows, then patch
/// columns, then the rows and columns inside each patch, appending the
/// original row-major index of every token.
pub fn gen_reorder_index(layout: &LatentLayout) -> Permutation {
    let (h, w) = (layout.patch_h, layout.patch_w);
    let (height, width) = (layout.height, layout.width);
    let mut forward = Vec::with_capacity(layout.n());
    for f in 0..layout.frames {
        for i in 0..layout.grid_h() {
            for j in 0..layout.grid_w() {
                for u in 0..h {
                    for v in 0..w {
                        let y = i * h + u;
                        let x = j * w + v;
                        forward.push(f * height * width + y * width + x);
                    }
                }
            }
        }
    }
    let inverse = invert(&forward).expect("reorder index is a bijection by construction");
    Permutation { forward, inverse }
}

/// Restore index: the inverse permutation, `restore[pi[i]] = i`.
///
/// Fails with [`Error::DuplicateIndex`] if `perm.forward` repeats an index.
pub fn gen_restore_index(perm: &Permutation) -> Result<Permutation> {
    let mut restore = vec![0usize; perm.len()];
    let mut seen = vec![false; perm.len()];
    for (i, &src) in perm.forward.iter().enumerate() {
        if src >= perm.len() {
            return Err(Error::IndexOutOfRange {
                index: src,
                len: perm.len(),
            });
        }
        if std::mem::replace(&mut seen[src], true) {
            return Err(Error::DuplicateIndex { index: src });
        }
        restore[src] = i;
    }
    Ok(Permutation {
        forward: restore,
        inverse: perm.forward.clone(),
    })
}

/// Gathers rows: `out[i] = x[perm.forward[i]]`.
pub fn permute_rows<T: Scalar>(x: &Matrix<T>, perm: &Permutation) -> Result<Matrix<T>> {
    if x.rows() != perm.len() {
        return Err(Error::Shape(format!(
            "permutation of length {} applied to {} rows",
            perm.len(),
            x.rows()
        )));
    }
    let d = x.cols();
    let mut data = Vec::with_capacity(x.rows() * d);
    for &src in &perm.forward {
        data.extend_from_slice(x.row(src));
    }
    Ok(Matrix::from_vec_masked(x.rows(), d, data).expect("rows copied from a valid matrix"))
}
