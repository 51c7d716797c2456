//! Logit-space error analysis of draft pooling and block masking.
//!
//! With unscaled logits `S = Q K^T`, average-pooled draft logits
//! `S~ = Q~ K~^T` and `delta = max |S_uv - S~_ij|` over token pairs, two
//! Frobenius bounds are checked on concrete instances:
//!
//! * draft error: `||S - S_draft||_F <= delta * n`, where `S_draft` repeats
//!   `S~_ij` over block `(i, j)`;
//! * mask error: `||S - S ⊙ M^||_F <= n (delta + t) sqrt(1 - r)` for the
//!   global top-`ceil(r g^2)` mask with threshold `t`.
//!
//! The mask bound leans on `|S~_ij| <= t` for dropped blocks, which only
//! holds when no dropped draft logit is more negative than `-t`. Reports
//! therefore also carry the pointwise check, the largest dropped `|S~_ij|`
//! and a bound using that value in place of `t`, which is always valid.

use serde::{Deserialize, Serialize};

use crate::draft::{draft_logits, DraftPair, PoolMode};
use crate::error::{Error, Result};
use crate::layout::{gen_reorder_index, permute_rows, LatentLayout};
use crate::mask::{hadamard_masked_logits, select_top_fraction, RegionMask};
use crate::tensor::{logits, softmax_rows, AttnScale, Matrix, Precision, Scalar};

/// Relative slack allowed when comparing an error with its bound.
pub fn comparison_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::Single => 1e-4,
        Precision::Double => 1e-12,
    }
}

fn within(error: f64, bound: f64, precision: Precision) -> bool {
    error <= bound + comparison_tolerance(precision) * bound.abs()
}

/// `max |S[u][v] - S~[i][j]|` over all token pairs, with `S` in reordered
/// order so block `(i, j)` is a contiguous `p x p` tile.
pub fn compute_delta<T: Scalar>(
    s: &Matrix<T>,
    s_tilde: &Matrix<T>,
    layout: &LatentLayout,
) -> Result<f64> {
    let (n, g, p) = (layout.n(), layout.regions(), layout.region_size());
    if s.shape() != (n, n) || s_tilde.shape() != (g, g) {
        return Err(Error::Shape(format!(
            "S {:?} and S~ {:?} for n = {n}, g = {g}",
            s.shape(),
            s_tilde.shape()
        )));
    }
    let mut delta = 0.0f64;
    for u in 0..n {
        let row = s.row(u);
        let draft_row = s_tilde.row(u / p);
        for (v, &x) in row.iter().enumerate() {
            delta = delta.max((x.as_f64() - draft_row[v / p].as_f64()).abs());
        }
    }
    Ok(delta)
}

/// Unscaled logits of one instance in reordered token order.
#[derive(Debug, Clone)]
pub struct LogitAnalysis<T: Scalar> {
    pub layout: LatentLayout,
    pub head_dim: usize,
    /// `Q K^T`, reordered.
    pub s: Matrix<T>,
    /// Average-pooled draft logits.
    pub s_tilde: Matrix<T>,
    pub delta: f64,
}

impl<T: Scalar> LogitAnalysis<T> {
    /// `q` and `k` are in original token order.
    pub fn new(q: &Matrix<T>, k: &Matrix<T>, layout: &LatentLayout) -> Result<Self> {
        if q.rows() != layout.n() || k.rows() != layout.n() {
            return Err(Error::Shape(format!(
                "Q {:?}, K {:?} for {} tokens",
                q.shape(),
                k.shape(),
                layout.n()
            )));
        }
        let pi = gen_reorder_index(layout);
        let qr = permute_rows(q, &pi)?;
        let kr = permute_rows(k, &pi)?;
        let unit = AttnScale::unit(q.cols());
        let s = logits(&qr, &kr, unit)?;
        let pair = DraftPair::from_reordered(&qr, &kr, *layout, PoolMode::Average)?;
        let s_tilde = draft_logits(&pair, unit)?;
        let delta = compute_delta(&s, &s_tilde, layout)?;
        Ok(Self {
            layout: *layout,
            head_dim: q.cols(),
            s,
            s_tilde,
            delta,
        })
    }

    /// Block-constant expansion of `S~` to `n x n`.
    pub fn s_draft(&self) -> Matrix<T> {
        let p = self.layout.region_size();
        let n = self.layout.n();
        Matrix::from_fn(n, n, |u, v| self.s_tilde.get(u / p, v / p))
    }

    /// `||S - S_draft||_F` without materialising `S_draft`.
    pub fn draft_error(&self) -> f64 {
        let p = self.layout.region_size();
        let mut sum = 0.0f64;
        for u in 0..self.layout.n() {
            let draft_row = self.s_tilde.row(u / p);
            for (v, &x) in self.s.row(u).iter().enumerate() {
                let dev = x.as_f64() - draft_row[v / p].as_f64();
                sum += dev * dev;
            }
        }
        sum.sqrt()
    }
}

/// Draft-pooling bound on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub delta: f64,
    pub frob_draft_error: f64,
    pub bound_draft: f64,
    pub slack_draft: f64,
    pub holds_draft: bool,
}

pub fn theorem1_from<T: Scalar>(a: &LogitAnalysis<T>) -> Theorem1Report {
    let err = a.draft_error();
    let bound = a.delta * a.layout.n() as f64;
    Theorem1Report {
        delta: a.delta,
        frob_draft_error: err,
        bound_draft: bound,
        slack_draft: bound - err,
        holds_draft: within(err, bound, T::PRECISION),
    }
}

/// Checks `||S - S_draft||_F <= delta * n` for `q`, `k` in original order.
pub fn theorem1_check<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    layout: &LatentLayout,
) -> Result<Theorem1Report> {
    Ok(theorem1_from(&LogitAnalysis::new(q, k, layout)?))
}

/// Masking bound on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub delta: f64,
    pub r: f64,
    pub t: f64,
    pub kept_count: usize,
    pub dropped_blocks: usize,
    pub frob_mask_error: f64,
    /// `n (delta + t) sqrt(1 - r)`.
    pub bound_mask: f64,
    pub slack_mask: f64,
    pub holds_mask: bool,
    /// Largest `|S_uv|` over dropped token pairs (0 when nothing is dropped).
    pub dropped_abs_max: f64,
    /// `delta + t`.
    pub pointwise_bound: f64,
    pub pointwise_holds: bool,
    /// Largest `|S~_ij|` over dropped blocks.
    pub dropped_draft_abs_max: f64,
    /// `n (delta + dropped_draft_abs_max) sqrt(dropped_blocks / g^2)`.
    pub corrected_bound_mask: f64,
    pub corrected_holds: bool,
}

/// Masking bound using the top-`ceil(r g^2)` mask on `S~` with no forced
/// row keeps.
pub fn theorem2_from<T: Scalar>(a: &LogitAnalysis<T>, r: f64) -> Result<Theorem2Report> {
    let mask = select_top_fraction(&a.s_tilde, r, false)?;
    theorem2_with_mask(a, &mask)
}

/// Masking bound for an explicit mask; `t` and `r` are read from it.
pub fn theorem2_with_mask<T: Scalar>(a: &LogitAnalysis<T>, mask: &RegionMask) -> Result<Theorem2Report> {
    let layout = &a.layout;
    let (n, g, p) = (layout.n(), layout.regions(), layout.region_size());
    let masked = hadamard_masked_logits(&a.s, &mask.lift(layout)?)?;
    let mut err_sq = 0.0f64;
    let mut dropped_abs_max = 0.0f64;
    for u in 0..n {
        for (v, (&x, &y)) in a.s.row(u).iter().zip(masked.row(u)).enumerate() {
            let diff = x.as_f64() - y.as_f64();
            err_sq += diff * diff;
            if !mask.is_kept(u / p, v / p) {
                dropped_abs_max = dropped_abs_max.max(x.as_f64().abs());
            }
        }
    }
    let err = err_sq.sqrt();
    let (r, t) = (mask.keep_ratio(), mask.threshold());
    let bound = n as f64 * (a.delta + t) * (1.0 - r).max(0.0).sqrt();

    let dropped_blocks = g * g - mask.kept_count();
    let dropped_draft_abs_max = (0..g * g)
        .filter(|&f| !mask.bits()[f])
        .map(|f| a.s_tilde.as_slice()[f].as_f64().abs())
        .fold(0.0, f64::max);
    let corrected = n as f64
        * (a.delta + dropped_draft_abs_max)
        * (dropped_blocks as f64 / (g * g) as f64).sqrt();

    let pointwise_bound = a.delta + t;
    Ok(Theorem2Report {
        delta: a.delta,
        r,
        t,
        kept_count: mask.kept_count(),
        dropped_blocks,
        frob_mask_error: err,
        bound_mask: bound,
        slack_mask: bound - err,
        holds_mask: within(err, bound, T::PRECISION),
        dropped_abs_max,
        pointwise_bound,
        pointwise_holds: dropped_blocks == 0
            || within(dropped_abs_max, pointwise_bound, T::PRECISION),
        dropped_draft_abs_max,
        corrected_bound_mask: corrected,
        corrected_holds: within(err, corrected, T::PRECISION),
    })
}

/// Checks `||S - S ⊙ M^||_F <= n (delta + t) sqrt(1 - r)` for `q`, `k` in
/// original order.
pub fn theorem2_check<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    layout: &LatentLayout,
    r: f64,
) -> Result<Theorem2Report> {
    theorem2_from(&LogitAnalysis::new(q, k, layout)?, r)
}

/// Frobenius distance between the attention maps of `S` and `S_draft` at
/// scale `1/sqrt(d)`. Informational only; no bound is claimed for it.
pub fn softmax_draft_error<T: Scalar>(a: &LogitAnalysis<T>) -> f64 {
    let scale = T::from_f64(AttnScale::for_head_dim(a.head_dim).value());
    let full = softmax_rows(&a.s.map(|x| x * scale));
    let draft = softmax_rows(&a.s_draft().map(|x| x * scale));
    full.as_slice()
        .iter()
        .zip(draft.as_slice())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Both bounds for one `(instance, r)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub g: usize,
    pub p: usize,
    pub d: usize,
    pub precision: Precision,
    pub delta: f64,
    pub t: f64,
    pub r: f64,
    pub frob_draft_error: f64,
    pub bound_draft: f64,
    pub frob_mask_error: f64,
    pub bound_mask: f64,
    pub slack_draft: f64,
    pub slack_mask: f64,
    pub holds_draft: bool,
    pub holds_mask: bool,
    pub dropped_abs_max: f64,
    pub pointwise_holds: bool,
    pub corrected_bound_mask: f64,
    pub corrected_holds: bool,
    pub softmax_draft_error: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.holds_draft && self.holds_mask
    }
}

/// Runs both checks on one analysed instance for every keep ratio.
pub fn bound_reports<T: Scalar>(a: &LogitAnalysis<T>, keep_ratios: &[f64]) -> Result<Vec<BoundReport>> {
    let t1 = theorem1_from(a);
    let soft = softmax_draft_error(a);
    keep_ratios
        .iter()
        .map(|&r| {
            let t2 = theorem2_from(a, r)?;
            Ok(BoundReport {
                n: a.layout.n(),
                g: a.layout.regions(),
                p: a.layout.region_size(),
                d: a.head_dim,
                precision: T::PRECISION,
                delta: a.delta,
                t: t2.t,
                r,
                frob_draft_error: t1.frob_draft_error,
                bound_draft: t1.bound_draft,
                frob_mask_error: t2.frob_mask_error,
                bound_mask: t2.bound_mask,
                slack_draft: t1.slack_draft,
                slack_mask: t2.slack_mask,
                holds_draft: t1.holds_draft,
                holds_mask: t2.holds_mask,
                dropped_abs_max: t2.dropped_abs_max,
                pointwise_holds: t2.pointwise_holds,
                corrected_bound_mask: t2.corrected_bound_mask,
                corrected_holds: t2.corrected_holds,
                softmax_draft_error: soft,
            })
        })
        .collect()
}
