//! Zero-padding of frames whose size is not a multiple of the patch.
//!
//! Padded tokens are left out of pooling averages, never receive attention
//! weight as keys, and their output rows are dropped on the way back. Key
//! regions made only of padding are never selected.

use crate::error::{Error, Result};
use crate::layout::LatentLayout;
use crate::sparse::{run_draft_pipeline, run_draft_pipeline_masked, PipelineOptions, PipelineOutput};
use crate::tensor::{Matrix, Scalar};

/// A tiled layout covering an original `frames x height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedLayout {
    pub layout: LatentLayout,
    pub height: usize,
    pub width: usize,
    /// Token validity in padded original (row-major) order.
    pub valid: Vec<bool>,
}

/// Smallest `H' >= H`, `W' >= W` with `h | H'` and `w | W'`.
pub fn pad_layout(
    frames: usize,
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
) -> Result<PaddedLayout> {
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::Layout("patch extents must be positive".into()));
    }
    let padded_h = height.div_ceil(patch_h) * patch_h;
    let padded_w = width.div_ceil(patch_w) * patch_w;
    let layout = LatentLayout::new(frames, padded_h, padded_w, patch_h, patch_w)?;
    let mut valid = Vec::with_capacity(layout.n());
    for _ in 0..frames {
        for y in 0..padded_h {
            for x in 0..padded_w {
                valid.push(y < height && x < width);
            }
        }
    }
    Ok(PaddedLayout {
        layout,
        height,
        width,
        valid,
    })
}

impl PaddedLayout {
    pub fn is_identity(&self) -> bool {
        self.layout.height() == self.height && self.layout.width() == self.width
    }

    pub fn original_n(&self) -> usize {
        self.layout.frames() * self.height * self.width
    }

    /// Inserts zero rows for padded tokens.
    pub fn pad_rows<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != self.original_n() {
            return Err(Error::Shape(format!(
                "{} rows for {} unpadded tokens",
                x.rows(),
                self.original_n()
            )));
        }
        let d = x.cols();
        let mut out = Matrix::zeros(self.layout.n(), d);
        let real = self.valid.iter().enumerate().filter(|(_, &v)| v);
        for (src, (dst, _)) in real.enumerate() {
            out.row_mut(dst).copy_from_slice(x.row(src));
        }
        Ok(out)
    }

    /// Keeps only rows of real tokens.
    pub fn unpad_rows<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != self.layout.n() {
            return Err(Error::Shape(format!(
                "{} rows for {} padded tokens",
                x.rows(),
                self.layout.n()
            )));
        }
        let mut data = Vec::with_capacity(self.original_n() * x.cols());
        for (u, _) in self.valid.iter().enumerate().filter(|(_, &v)| v) {
            data.extend_from_slice(x.row(u));
        }
        Matrix::from_vec_masked(self.original_n(), x.cols(), data)
    }
}

/// Draft pipeline on an arbitrary frame size. Already-tiled inputs take the
/// unpadded path unchanged.
#[allow(clippy::too_many_arguments)]
pub fn draft_sparse_attention_padded<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    frames: usize,
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
    sparsity: f64,
    opts: &PipelineOptions,
) -> Result<PipelineOutput<T>> {
    let padded = pad_layout(frames, height, width, patch_h, patch_w)?;
    if padded.is_identity() {
        return run_draft_pipeline(q, k, v, &padded.layout, sparsity, opts);
    }
    let qp = padded.pad_rows(q)?;
    let kp = padded.pad_rows(k)?;
    let vp = padded.pad_rows(v)?;
    let mut out = run_draft_pipeline_masked(
        &qp,
        &kp,
        &vp,
        &padded.layout,
        sparsity,
        opts,
        Some(&padded.valid),
    )?;
    out.output = padded.unpad_rows(&out.output)?;
    Ok(out)
}
