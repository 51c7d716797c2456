//! Region-level mask selection.
//!
//! The mask keeps the `ceil(r * g^2)` globally largest draft scores. Ties at
//! the threshold go to the smaller flat index `i * g + j`, so the kept count
//! is exact even with repeated scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LatentLayout;
use crate::tensor::{Matrix, Scalar};

/// Which draft quantity is ranked when selecting blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOn {
    /// Draft logits `Q~ K~^T` (scaled).
    #[default]
    Logits,
    /// Row-softmaxed draft attention map.
    Softmax,
}

impl std::str::FromStr for SelectOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(SelectOn::Logits),
            "softmax" => Ok(SelectOn::Softmax),
            other => Err(Error::Config(format!("unknown selection target {other:?}"))),
        }
    }
}

impl std::fmt::Display for SelectOn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectOn::Logits => "logits",
            SelectOn::Softmax => "softmax",
        })
    }
}

/// `ceil(r * total)`, ignoring floating-point fuzz just above an integer.
pub fn keep_count(r: f64, total: usize) -> usize {
    let x = r * total as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil();
    (k.max(0.0) as usize).min(total)
}

/// Converts a dropped fraction into a keep ratio.
pub fn keep_ratio_from_sparsity(sparsity: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Sparsity(sparsity));
    }
    Ok(1.0 - sparsity)
}

/// Binary `g x g` mask over region pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    g: usize,
    kept: Vec<bool>,
    keep_ratio: f64,
    threshold: f64,
    kept_count: usize,
    forced_row_keeps: usize,
}

impl RegionMask {
    /// Every region pair kept.
    pub fn full(g: usize) -> Self {
        Self::from_bits(g, vec![true; g * g], 1.0, f64::NAN).expect("square bitmap")
    }

    /// Wraps an explicit bitmap. `keep_ratio` and `threshold` are recorded
    /// as given.
    pub fn from_bits(g: usize, kept: Vec<bool>, keep_ratio: f64, threshold: f64) -> Result<Self> {
        if kept.len() != g * g {
            return Err(Error::Shape(format!("{} bits for a {g}x{g} mask", kept.len())));
        }
        let kept_count = kept.iter().filter(|&&b| b).count();
        Ok(Self {
            g,
            kept,
            keep_ratio,
            threshold,
            kept_count,
            forced_row_keeps: 0,
        })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep_ratio
    }

    /// Score of the weakest entry kept by the global top-fraction selection.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn forced_row_keeps(&self) -> usize {
        self.forced_row_keeps
    }

    #[inline]
    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.kept[i * self.g + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.kept
    }

    /// Kept key regions of query region `i`, ascending.
    pub fn kept_columns(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.kept[i * self.g..(i + 1) * self.g]
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
    }

    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.g).map(|i| self.kept_columns(i).count()).collect()
    }

    /// Token-resolution view over `layout`.
    pub fn lift<'a>(&'a self, layout: &'a LatentLayout) -> Result<LiftedMaskView<'a>> {
        LiftedMaskView::new(layout, self)
    }
}

/// Keeps the `ceil(r * g^2)` largest scores globally; optionally keeps each
/// row's argmax as well so no query region is left without keys.
pub fn select_top_fraction<T: Scalar>(
    scores: &Matrix<T>,
    r: f64,
    force_row_keep: bool,
) -> Result<RegionMask> {
    select_top_fraction_eligible(scores, r, force_row_keep, None)
}

/// [`select_top_fraction`] where only key regions with
/// `eligible_cols[j] == true` may be selected. The kept count is capped by
/// the number of eligible entries.
pub fn select_top_fraction_eligible<T: Scalar>(
    scores: &Matrix<T>,
    r: f64,
    force_row_keep: bool,
    eligible_cols: Option<&[bool]>,
) -> Result<RegionMask> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::KeepRatio(r));
    }
    let g = scores.rows();
    if scores.cols() != g {
        return Err(Error::Shape(format!(
            "scores must be square, got {:?}",
            scores.shape()
        )));
    }
    if let Some(e) = eligible_cols {
        if e.len() != g {
            return Err(Error::Shape(format!("{} eligibility flags for g = {g}", e.len())));
        }
    }
    let col_ok = |j: usize| eligible_cols.is_none_or(|e| e[j]);
    let vals = scores.as_slice();

    let mut order: Vec<usize> = (0..g * g).filter(|&f| col_ok(f % g)).collect();
    order.sort_by(|&a, &b| {
        vals[b]
            .partial_cmp(&vals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let target = keep_count(r, g * g).min(order.len());

    let mut kept = vec![false; g * g];
    for &f in &order[..target] {
        kept[f] = true;
    }
    let threshold = if target > 0 {
        vals[order[target - 1]].as_f64()
    } else {
        f64::INFINITY
    };

    let mut forced = 0;
    if force_row_keep {
        for i in 0..g {
            let row = &kept[i * g..(i + 1) * g];
            if row.iter().any(|&b| b) {
                continue;
            }
            let best = (0..g)
                .filter(|&j| col_ok(j))
                .fold(None::<usize>, |best, j| match best {
                    Some(b) if vals[i * g + b] >= vals[i * g + j] => Some(b),
                    _ => Some(j),
                });
            if let Some(j) = best {
                kept[i * g + j] = true;
                forced += 1;
            }
        }
    }

    Ok(RegionMask {
        g,
        kept,
        keep_ratio: r,
        threshold,
        kept_count: target + forced,
        forced_row_keeps: forced,
    })
}

/// Block-constant expansion of a [`RegionMask`] to token pairs in reordered
/// coordinates: token `u` belongs to region `u / p`.
#[derive(Debug, Clone, Copy)]
pub struct LiftedMaskView<'a> {
    layout: &'a LatentLayout,
    base: &'a RegionMask,
}

impl<'a> LiftedMaskView<'a> {
    pub fn new(layout: &'a LatentLayout, base: &'a RegionMask) -> Result<Self> {
        if base.g() != layout.regions() {
            return Err(Error::Shape(format!(
                "mask has g = {}, layout has {} regions",
                base.g(),
                layout.regions()
            )));
        }
        Ok(Self { layout, base })
    }

    pub fn layout(&self) -> &LatentLayout {
        self.layout
    }

    pub fn base(&self) -> &RegionMask {
        self.base
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        let p = self.layout.region_size();
        self.base.is_kept(u / p, v / p)
    }
}

/// `S ⊙ M^`: dropped entries become literal zeros. Used for logit-space error
/// analysis; attention execution skips dropped blocks instead.
pub fn hadamard_masked_logits<T: Scalar>(s: &Matrix<T>, mask: &LiftedMaskView<'_>) -> Result<Matrix<T>> {
    let n = mask.layout().n();
    if s.shape() != (n, n) {
        return Err(Error::Shape(format!("S is {:?}, expected {n}x{n}", s.shape())));
    }
    let mut out = s.clone();
    for u in 0..n {
        let row = out.row_mut(u);
        for (v, x) in row.iter_mut().enumerate() {
            if !mask.get(u, v) {
                *x = T::ZERO;
            }
        }
    }
    Ok(out)
}

/// Density summary of a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub g: usize,
    pub kept_count: usize,
    pub kept_fraction: f64,
    pub row_min: usize,
    pub row_mean: f64,
    pub row_max: usize,
    pub forced_row_keeps: usize,
}

pub fn mask_density_stats(mask: &RegionMask) -> MaskStats {
    let counts = mask.row_counts();
    let g = mask.g();
    let total = (g * g).max(1) as f64;
    MaskStats {
        g,
        kept_count: mask.kept_count(),
        kept_fraction: mask.kept_count() as f64 / total,
        row_min: counts.iter().copied().min().unwrap_or(0),
        row_mean: counts.iter().sum::<usize>() as f64 / g.max(1) as f64,
        row_max: counts.iter().copied().max().unwrap_or(0),
        forced_row_keeps: mask.forced_row_keeps(),
    }
}

/// JSON form of a mask: header fields plus kept `[i, j]` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskExport {
    pub g: usize,
    pub r: f64,
    pub t: Option<f64>,
    pub kept_count: usize,
    pub forced_row_keeps: usize,
    pub kept: Vec<[usize; 2]>,
}

impl From<&RegionMask> for MaskExport {
    fn from(m: &RegionMask) -> Self {
        let g = m.g();
        Self {
            g,
            r: m.keep_ratio(),
            t: m.threshold().is_finite().then_some(m.threshold()),
            kept_count: m.kept_count(),
            forced_row_keeps: m.forced_row_keeps(),
            kept: (0..g)
                .flat_map(|i| m.kept_columns(i).map(move |j| [i, j]))
                .collect(),
        }
    }
}

const BITMAP_MAGIC: &[u8; 4] = b"DAMK";

/// Row-major bitmap: magic `DAMK`, `u32` version 1, `u32` g, then
/// `ceil(g^2 / 8)` bytes with bit `f % 8` of byte `f / 8` set when flat
/// entry `f = i * g + j` is kept.
pub fn encode_bitmap(mask: &RegionMask) -> Vec<u8> {
    let g = mask.g();
    let mut out = Vec::with_capacity(12 + (g * g).div_ceil(8));
    out.extend_from_slice(BITMAP_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(g as u32).to_le_bytes());
    let mut bytes = vec![0u8; (g * g).div_ceil(8)];
    for (f, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        bytes[f / 8] |= 1 << (f % 8);
    }
    out.extend_from_slice(&bytes);
    out
}

/// Inverse of [`encode_bitmap`]. Ratio and threshold are not stored and come
/// back as NaN.
pub fn decode_bitmap(bytes: &[u8]) -> Result<RegionMask> {
    if bytes.len() < 12 || &bytes[..4] != BITMAP_MAGIC {
        return Err(Error::Format("not a DAMK mask bitmap".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != 1 {
        return Err(Error::Format(format!("unsupported bitmap version {version}")));
    }
    let g = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != (g * g).div_ceil(8) {
        return Err(Error::Format(format!("bitmap body of {} bytes for g = {g}", body.len())));
    }
    let bits = (0..g * g).map(|f| body[f / 8] >> (f % 8) & 1 == 1).collect();
    RegionMask::from_bits(g, bits, f64::NAN, f64::NAN)
}
