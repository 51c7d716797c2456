//! Block-skipping sparse attention and the end-to-end draft pipeline.
//!
//! Inputs to the executor are in reordered token order, so query region `i`
//! and key region `j` are the contiguous row blocks `[i*p, (i+1)*p)` and
//! `[j*p, (j+1)*p)`. For each query block only the kept key blocks are
//! visited, in ascending order, and a running row max and denominator carry
//! the softmax across them. Dropped blocks are never computed.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::draft::{draft_logits, DraftPair, PoolMode};
use crate::error::{Error, Result};
use crate::layout::{gen_reorder_index, gen_restore_index, permute_rows, LatentLayout};
use crate::mask::{
    keep_count, keep_ratio_from_sparsity, select_top_fraction_eligible, LiftedMaskView,
    RegionMask, SelectOn,
};
use crate::tensor::{logits, masked, softmax_rows, AttnScale, Matrix, Scalar};

/// Per query block, the key blocks to visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    layout: LatentLayout,
    kept: Vec<Vec<usize>>,
}

impl BlockPlan {
    pub fn from_mask(mask: &RegionMask, layout: &LatentLayout) -> Result<Self> {
        if mask.g() != layout.regions() {
            return Err(Error::Shape(format!(
                "mask has g = {}, layout has {} regions",
                mask.g(),
                layout.regions()
            )));
        }
        Ok(Self {
            layout: *layout,
            kept: (0..mask.g()).map(|i| mask.kept_columns(i).collect()).collect(),
        })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn block_size(&self) -> usize {
        self.layout.region_size()
    }

    pub fn kept_blocks(&self, query_block: usize) -> &[usize] {
        &self.kept[query_block]
    }

    pub fn total_blocks(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }
}

/// How the executor normalises across key blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxStrategy {
    /// Single pass with running max and denominator.
    #[default]
    Streaming,
    /// Row maxima first, then exponentials; recomputes every score block.
    TwoPass,
}

/// Executor knobs beyond the mask itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions<'a> {
    pub strategy: SoftmaxStrategy,
    /// Per-token key validity in reordered order; invalid keys get no weight.
    pub key_valid: Option<&'a [bool]>,
}

/// Sparse attention over reordered `qr`, `kr`, `vr` guided by `mask`.
///
/// Query rows whose kept key blocks are all dropped produce zeros.
pub fn block_sparse_attention<T: Scalar>(
    qr: &Matrix<T>,
    kr: &Matrix<T>,
    vr: &Matrix<T>,
    mask: &RegionMask,
    layout: &LatentLayout,
    scale: AttnScale,
) -> Result<Matrix<T>> {
    let plan = BlockPlan::from_mask(mask, layout)?;
    execute_plan(qr, kr, vr, &plan, scale, ExecOptions::default())
}

/// Runs a precomputed [`BlockPlan`].
pub fn execute_plan<T: Scalar>(
    qr: &Matrix<T>,
    kr: &Matrix<T>,
    vr: &Matrix<T>,
    plan: &BlockPlan,
    scale: AttnScale,
    opts: ExecOptions<'_>,
) -> Result<Matrix<T>> {
    let layout = plan.layout();
    let n = layout.n();
    if qr.rows() != n || kr.rows() != n || vr.rows() != n || qr.cols() != kr.cols() {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?} for a layout of {n} tokens",
            qr.shape(),
            kr.shape(),
            vr.shape()
        )));
    }
    if let Some(valid) = opts.key_valid {
        if valid.len() != n {
            return Err(Error::Shape(format!("{} key flags for {n} tokens", valid.len())));
        }
    }
    let p = layout.region_size();
    let dv = vr.cols();
    let mut out = Matrix::zeros(n, dv);
    if dv == 0 {
        return Ok(out);
    }
    let alpha = T::from_f64(scale.value());
    out.as_mut_slice()
        .par_chunks_mut(p * dv)
        .enumerate()
        .for_each(|(i, out_blk)| {
            let ctx = BlockCtx {
                q_blk: qr.row_block(i * p, p),
                k: kr,
                v: vr,
                p,
                alpha,
                key_valid: opts.key_valid,
            };
            match opts.strategy {
                SoftmaxStrategy::Streaming => ctx.streaming(plan.kept_blocks(i), out_blk),
                SoftmaxStrategy::TwoPass => ctx.two_pass(plan.kept_blocks(i), out_blk),
            }
        });
    Ok(out)
}

struct BlockCtx<'a, T: Scalar> {
    q_blk: &'a [T],
    k: &'a Matrix<T>,
    v: &'a Matrix<T>,
    p: usize,
    alpha: T,
    key_valid: Option<&'a [bool]>,
}

impl<T: Scalar> BlockCtx<'_, T> {
    /// `scores = alpha * Q_i K_j^T`, with invalid keys set to the mask value.
    fn scores(&self, j: usize, scores: &mut [T]) {
        let (p, d) = (self.p, self.k.cols());
        T::gemm(
            p,
            d,
            p,
            self.alpha,
            self.q_blk,
            d,
            1,
            self.k.row_block(j * p, p),
            1,
            d,
            T::ZERO,
            scores,
            p,
        );
        if let Some(valid) = self.key_valid {
            let flags = &valid[j * p..(j + 1) * p];
            if flags.iter().any(|&f| !f) {
                for row in scores.chunks_mut(p) {
                    for (x, _) in row.iter_mut().zip(flags).filter(|(_, &f)| !f) {
                        *x = masked();
                    }
                }
            }
        }
    }

    /// `out += probs * V_j`.
    fn accumulate(&self, j: usize, probs: &[T], out: &mut [T]) {
        let (p, dv) = (self.p, self.v.cols());
        T::gemm(
            p,
            p,
            dv,
            T::ONE,
            probs,
            p,
            1,
            self.v.row_block(j * p, p),
            dv,
            1,
            T::ONE,
            out,
            dv,
        );
    }

    fn streaming(&self, blocks: &[usize], out: &mut [T]) {
        let (p, dv) = (self.p, self.v.cols());
        let mut run_max = vec![T::NEG_INFINITY; p];
        let mut denom = vec![T::ZERO; p];
        let mut s = vec![T::ZERO; p * p];
        for &j in blocks {
            self.scores(j, &mut s);
            for r in 0..p {
                let row = &mut s[r * p..(r + 1) * p];
                let block_max = row.iter().fold(T::NEG_INFINITY, |m, &x| m.max(x));
                let new_max = run_max[r].max(block_max);
                if !new_max.is_finite() {
                    row.iter_mut().for_each(|x| *x = T::ZERO);
                    continue;
                }
                let mut sum = T::ZERO;
                for x in row.iter_mut() {
                    *x = (*x - new_max).exp();
                    sum += *x;
                }
                if run_max[r] != new_max {
                    let corr = (run_max[r] - new_max).exp();
                    denom[r] *= corr;
                    out[r * dv..(r + 1) * dv].iter_mut().for_each(|o| *o *= corr);
                    run_max[r] = new_max;
                }
                denom[r] += sum;
            }
            self.accumulate(j, &s, out);
        }
        normalise(out, &denom, dv);
    }

    fn two_pass(&self, blocks: &[usize], out: &mut [T]) {
        let (p, dv) = (self.p, self.v.cols());
        let mut row_max = vec![T::NEG_INFINITY; p];
        let mut s = vec![T::ZERO; p * p];
        for &j in blocks {
            self.scores(j, &mut s);
            for (r, m) in row_max.iter_mut().enumerate() {
                *m = s[r * p..(r + 1) * p].iter().fold(*m, |m, &x| m.max(x));
            }
        }
        let mut denom = vec![T::ZERO; p];
        for &j in blocks {
            self.scores(j, &mut s);
            for r in 0..p {
                let row = &mut s[r * p..(r + 1) * p];
                if !row_max[r].is_finite() {
                    row.iter_mut().for_each(|x| *x = T::ZERO);
                    continue;
                }
                for x in row.iter_mut() {
                    *x = (*x - row_max[r]).exp();
                    denom[r] += *x;
                }
            }
            self.accumulate(j, &s, out);
        }
        normalise(out, &denom, dv);
    }
}

fn normalise<T: Scalar>(out: &mut [T], denom: &[T], dv: usize) {
    for (row, &l) in out.chunks_mut(dv).zip(denom) {
        if l > T::ZERO {
            let inv = T::ONE / l;
            row.iter_mut().for_each(|o| *o *= inv);
        } else {
            row.iter_mut().for_each(|o| *o = T::ZERO);
        }
    }
}

/// Dense reference for the executor: materialises all logits, sets dropped
/// pairs (and invalid keys) to `-inf`, then applies row softmax and `V`.
pub fn dense_masked_attention<T: Scalar>(
    qr: &Matrix<T>,
    kr: &Matrix<T>,
    vr: &Matrix<T>,
    mask: &LiftedMaskView<'_>,
    scale: AttnScale,
    key_valid: Option<&[bool]>,
) -> Result<Matrix<T>> {
    let mut s = logits(qr, kr, scale)?;
    let n = mask.layout().n();
    if s.shape() != (n, n) {
        return Err(Error::Shape(format!("logits {:?} for {n} tokens", s.shape())));
    }
    for u in 0..n {
        for v in 0..n {
            if !mask.get(u, v) || key_valid.is_some_and(|k| !k[v]) {
                s.set(u, v, masked());
            }
        }
    }
    softmax_rows(&s).matmul(vr)
}

/// Settings of the full draft-guided pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub pool: PoolMode,
    pub select_on: SelectOn,
    pub force_row_keep: bool,
    pub strategy: SoftmaxStrategy,
    /// Attention scale; `None` means `1/sqrt(d)`.
    pub scale: Option<f64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            pool: PoolMode::Average,
            select_on: SelectOn::Logits,
            force_row_keep: true,
            strategy: SoftmaxStrategy::Streaming,
            scale: None,
        }
    }
}

impl PipelineOptions {
    fn attn_scale(&self, d: usize) -> Result<AttnScale> {
        match self.scale {
            Some(s) => AttnScale::new(s, d),
            None => Ok(AttnScale::for_head_dim(d)),
        }
    }
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub reorder: f64,
    pub draft: f64,
    pub select: f64,
    pub attention: f64,
    pub restore: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.reorder + self.draft + self.select + self.attention + self.restore
    }
}

/// Result of [`run_draft_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput<T: Scalar> {
    /// Attention output in the original token order.
    pub output: Matrix<T>,
    pub mask: RegionMask,
    pub timings: StageTimings,
}

/// Draft-guided sparse attention on inputs in original token order.
pub fn draft_sparse_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &LatentLayout,
    sparsity: f64,
    opts: &PipelineOptions,
) -> Result<Matrix<T>> {
    Ok(run_draft_pipeline(q, k, v, layout, sparsity, opts)?.output)
}

/// Reorder, pool, draft, select, execute, restore. Returns the output
/// together with the chosen mask and stage timings.
pub fn run_draft_pipeline<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &LatentLayout,
    sparsity: f64,
    opts: &PipelineOptions,
) -> Result<PipelineOutput<T>> {
    run_draft_pipeline_masked(q, k, v, layout, sparsity, opts, None)
}

/// Pipeline with a token validity mask in original order. Invalid tokens are
/// left out of pooling averages and receive no attention weight as keys;
/// key regions without any valid token are never selected.
pub fn run_draft_pipeline_masked<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &LatentLayout,
    sparsity: f64,
    opts: &PipelineOptions,
    valid: Option<&[bool]>,
) -> Result<PipelineOutput<T>> {
    let r = keep_ratio_from_sparsity(sparsity)?;
    let n = layout.n();
    if q.rows() != n || k.rows() != n || v.rows() != n {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?} for a layout of {n} tokens",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "Q has {} columns, K has {}",
            q.cols(),
            k.cols()
        )));
    }
    if valid.is_some_and(|m| m.len() != n) {
        return Err(Error::Shape("validity mask length differs from token count".into()));
    }
    let scale = opts.attn_scale(q.cols())?;
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let pi = gen_reorder_index(layout);
    let qr = permute_rows(q, &pi)?;
    let kr = permute_rows(k, &pi)?;
    let vr = permute_rows(v, &pi)?;
    let valid_r: Option<Vec<bool>> =
        valid.map(|m| pi.forward().iter().map(|&src| m[src]).collect());
    timings.reorder = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let pair = DraftPair::from_reordered_masked(&qr, &kr, *layout, opts.pool, valid_r.as_deref())?;
    let mut scores = draft_logits(&pair, scale)?;
    timings.draft = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let p = layout.region_size();
    let eligible: Option<Vec<bool>> = valid_r
        .as_ref()
        .map(|m| m.chunks(p).map(|blk| blk.iter().any(|&b| b)).collect());
    if opts.select_on == SelectOn::Softmax {
        if let Some(e) = &eligible {
            let g = layout.regions();
            for i in 0..g {
                for (j, _) in e.iter().enumerate().filter(|(_, &ok)| !ok) {
                    scores.set(i, j, masked());
                }
            }
        }
        scores = softmax_rows(&scores);
    }
    let mask = select_top_fraction_eligible(&scores, r, opts.force_row_keep, eligible.as_deref())?;
    let plan = BlockPlan::from_mask(&mask, layout)?;
    timings.select = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let exec = ExecOptions {
        strategy: opts.strategy,
        key_valid: valid_r.as_deref(),
    };
    let out_r = execute_plan(&qr, &kr, &vr, &plan, scale, exec)?;
    timings.attention = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let output = permute_rows(&out_r, &gen_restore_index(&pi)?)?;
    timings.restore = clock.elapsed().as_secs_f64();

    Ok(PipelineOutput {
        output,
        mask,
        timings,
    })
}

/// Matmul FLOP accounting, counting `2*m*n*k` per product. Softmax and
/// pooling are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub n: usize,
    pub g: usize,
    pub p: usize,
    pub d: usize,
    pub kept_count: usize,
    pub full_logits_flops: u64,
    pub full_av_flops: u64,
    pub draft_flops: u64,
    pub sparse_logits_flops: u64,
    pub sparse_av_flops: u64,
    /// `draft_flops / full_logits_flops`.
    pub overhead_ratio: f64,
    /// Sparse matmul work relative to dense, plus `overhead_ratio`.
    pub total_ratio: f64,
}

/// FLOPs of the pipeline when `ceil((1 - sparsity) g^2)` blocks plus
/// `force_row_keep_extras` forced blocks are computed.
pub fn flops_count(
    layout: &LatentLayout,
    d: usize,
    sparsity: f64,
    force_row_keep_extras: usize,
) -> Result<FlopsReport> {
    let r = keep_ratio_from_sparsity(sparsity)?;
    let g = layout.regions();
    let kept = (keep_count(r, g * g) + force_row_keep_extras).min(g * g);
    Ok(flops_for_kept(layout, d, kept))
}

/// FLOPs for an explicit number of kept region pairs.
pub fn flops_for_kept(layout: &LatentLayout, d: usize, kept_count: usize) -> FlopsReport {
    let (n, g, p) = (layout.n() as u64, layout.regions() as u64, layout.region_size() as u64);
    let d64 = d as u64;
    let full_logits = 2 * n * n * d64;
    let full_av = 2 * n * n * d64;
    let draft = 2 * g * g * d64;
    let sparse = 2 * kept_count as u64 * p * p * d64;
    let overhead_ratio = ratio(draft, full_logits);
    FlopsReport {
        n: layout.n(),
        g: layout.regions(),
        p: layout.region_size(),
        d,
        kept_count,
        full_logits_flops: full_logits,
        full_av_flops: full_av,
        draft_flops: draft,
        sparse_logits_flops: sparse,
        sparse_av_flops: sparse,
        overhead_ratio,
        total_ratio: ratio(2 * sparse, full_logits + full_av) + overhead_ratio,
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
