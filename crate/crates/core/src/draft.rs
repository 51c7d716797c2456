//! Region pooling of reordered queries/keys and the low-resolution draft
//! attention map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LatentLayout;
use crate::tensor::{logits, softmax_rows, AttnScale, Matrix, Scalar};

/// Reduction applied over the tokens of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    #[serde(alias = "avg")]
    Average,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "average" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            other => Err(Error::Config(format!("unknown pool mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Average => "avg",
            PoolMode::Max => "max",
        })
    }
}

/// Pools each region of `x_reordered` (rows `[i*p, (i+1)*p)`) to one row.
pub fn pool_regions<T: Scalar>(
    x_reordered: &Matrix<T>,
    layout: &LatentLayout,
    mode: PoolMode,
) -> Result<Matrix<T>> {
    pool_regions_masked(x_reordered, layout, mode, None)
}

/// Region pooling restricted to valid tokens.
///
/// `valid` is indexed in reordered order. Averages divide by the number of
/// valid tokens in the region; a region without valid tokens pools to zero.
pub fn pool_regions_masked<T: Scalar>(
    x_reordered: &Matrix<T>,
    layout: &LatentLayout,
    mode: PoolMode,
    valid: Option<&[bool]>,
) -> Result<Matrix<T>> {
    let n = layout.n();
    if x_reordered.rows() != n {
        return Err(Error::Shape(format!(
            "{} rows but layout has {n} tokens",
            x_reordered.rows()
        )));
    }
    if let Some(v) = valid {
        if v.len() != n {
            return Err(Error::Shape(format!("validity mask of length {}", v.len())));
        }
    }
    let (g, p, d) = (layout.regions(), layout.region_size(), x_reordered.cols());
    let mut out = Matrix::zeros(g, d);
    for i in 0..g {
        let acc = out.row_mut(i);
        let mut count = 0usize;
        for u in i * p..(i + 1) * p {
            if valid.is_some_and(|v| !v[u]) {
                continue;
            }
            let row = x_reordered.row(u);
            if count == 0 {
                acc.copy_from_slice(row);
            } else {
                match mode {
                    PoolMode::Average => acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x),
                    PoolMode::Max => acc.iter_mut().zip(row).for_each(|(a, &x)| *a = a.max(x)),
                }
            }
            count += 1;
        }
        if mode == PoolMode::Average && count > 0 {
            let inv = T::ONE / T::from_f64(count as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
        }
    }
    Ok(out)
}

/// Pooled draft queries and keys.
#[derive(Debug, Clone)]
pub struct DraftPair<T: Scalar> {
    pub q_draft: Matrix<T>,
    pub k_draft: Matrix<T>,
    pub layout: LatentLayout,
    pub mode: PoolMode,
}

impl<T: Scalar> DraftPair<T> {
    /// Pools already-reordered `q` and `k`.
    pub fn from_reordered(
        q: &Matrix<T>,
        k: &Matrix<T>,
        layout: LatentLayout,
        mode: PoolMode,
    ) -> Result<Self> {
        Self::from_reordered_masked(q, k, layout, mode, None)
    }

    pub fn from_reordered_masked(
        q: &Matrix<T>,
        k: &Matrix<T>,
        layout: LatentLayout,
        mode: PoolMode,
        valid: Option<&[bool]>,
    ) -> Result<Self> {
        if q.cols() != k.cols() {
            return Err(Error::Shape(format!(
                "Q has {} columns, K has {}",
                q.cols(),
                k.cols()
            )));
        }
        Ok(Self {
            q_draft: pool_regions_masked(q, &layout, mode, valid)?,
            k_draft: pool_regions_masked(k, &layout, mode, valid)?,
            layout,
            mode,
        })
    }
}

/// `S~[i][j] = scale * <Q~_i, K~_j>`.
pub fn draft_logits<T: Scalar>(pair: &DraftPair<T>, scale: AttnScale) -> Result<Matrix<T>> {
    let g = pair.layout.regions();
    if pair.q_draft.rows() != g || pair.k_draft.rows() != g {
        return Err(Error::Shape(format!(
            "draft rows {}/{} but layout has {g} regions",
            pair.q_draft.rows(),
            pair.k_draft.rows()
        )));
    }
    logits(&pair.q_draft, &pair.k_draft, scale)
}

/// Row softmax of the draft logits.
pub fn draft_attention_map<T: Scalar>(pair: &DraftPair<T>, scale: AttnScale) -> Result<Matrix<T>> {
    Ok(softmax_rows(&draft_logits(pair, scale)?))
}
