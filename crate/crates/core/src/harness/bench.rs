//! Dense vs. draft-sparse timing on synthetic inputs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::{bound_reports, LogitAnalysis};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::padding::pad_layout;
use crate::harness::run::run_heads;
use crate::harness::synth::gen_synthetic;
use crate::mask::{mask_density_stats, MaskStats};
use crate::sparse::{flops_count, FlopsReport};
use crate::tensor::{full_attention, AttnScale, Precision, Scalar};

/// Minimum repetitions per timing.
pub const MIN_REPS: usize = 3;

/// Ratio between measured and FLOPs-predicted speedup beyond which a
/// record is flagged.
pub const SPEEDUP_WARN_FACTOR: f64 = 3.0;

pub fn median(samples: &mut [f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    }
}

/// Head-0 bound summary attached to a record when requested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchBounds {
    pub delta: f64,
    pub t: f64,
    pub slack_draft: f64,
    pub slack_mask: f64,
    pub holds_draft: bool,
    pub holds_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub config: RunConfig,
    pub n: usize,
    pub threads: usize,
    pub reps: usize,
    /// Median seconds of dense attention over all heads.
    pub dense_seconds: f64,
    /// Median seconds of the full draft pipeline over all heads.
    pub sparse_seconds: f64,
    pub speedup: f64,
    /// `1 / flops.total_ratio`.
    pub predicted_speedup: f64,
    pub speedup_warning: bool,
    /// Head 0, counting its forced row keeps.
    pub flops: FlopsReport,
    /// Head 0.
    pub mask: MaskStats,
    pub bounds: Option<BenchBounds>,
}

fn bench_typed<T: Scalar>(cfg: &RunConfig, reps: usize, with_bounds: bool) -> Result<BenchRecord> {
    let reps = reps.max(MIN_REPS);
    let data = gen_synthetic::<T>(cfg)?;
    let scale = AttnScale::for_head_dim(cfg.d);

    let mut dense = Vec::with_capacity(reps);
    for _ in 0..reps {
        let clock = Instant::now();
        for h in 0..cfg.heads {
            let cols = |m: &crate::tensor::Matrix<T>| m.column_block(h * cfg.d, cfg.d);
            std::hint::black_box(full_attention(&cols(&data.q)?, &cols(&data.k)?, &cols(&data.v)?, scale)?);
        }
        dense.push(clock.elapsed().as_secs_f64());
    }

    let mut sparse = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let clock = Instant::now();
        let out = run_heads(cfg, &data)?;
        sparse.push(clock.elapsed().as_secs_f64());
        last = Some(out);
    }
    let last = last.expect("at least one repetition");

    let padded = pad_layout(cfg.frames, cfg.height, cfg.width, cfg.patch_h, cfg.patch_w)?;
    let flops = flops_count(&padded.layout, cfg.d, cfg.sparsity, last.masks[0].forced_row_keeps())?;
    let dense_seconds = median(&mut dense);
    let sparse_seconds = median(&mut sparse);
    let speedup = dense_seconds / sparse_seconds;
    let predicted_speedup = 1.0 / flops.total_ratio;
    let off_by = speedup / predicted_speedup;
    let speedup_warning = !(1.0 / SPEEDUP_WARN_FACTOR..=SPEEDUP_WARN_FACTOR).contains(&off_by);
    if speedup_warning {
        log::warn!(
            "n={} sparsity={}: measured speedup {speedup:.2}x vs FLOPs-predicted {predicted_speedup:.2}x",
            cfg.n(),
            cfg.sparsity
        );
    }

    let bounds = if with_bounds {
        let layout = cfg.layout()?;
        let a = LogitAnalysis::new(
            &data.q.column_block(0, cfg.d)?.cast::<f64>(),
            &data.k.column_block(0, cfg.d)?.cast::<f64>(),
            &layout,
        )?;
        let rep = bound_reports(&a, &[1.0 - cfg.sparsity])?.remove(0);
        Some(BenchBounds {
            delta: rep.delta,
            t: rep.t,
            slack_draft: rep.slack_draft,
            slack_mask: rep.slack_mask,
            holds_draft: rep.holds_draft,
            holds_mask: rep.holds_mask,
        })
    } else {
        None
    };

    Ok(BenchRecord {
        config: cfg.clone(),
        n: cfg.n(),
        threads: rayon::current_num_threads(),
        reps,
        dense_seconds,
        sparse_seconds,
        speedup,
        predicted_speedup,
        speedup_warning,
        flops,
        mask: mask_density_stats(&last.masks[0]),
        bounds,
    })
}

/// Benchmarks one configuration at its configured precision.
pub fn bench_one(cfg: &RunConfig, reps: usize, with_bounds: bool) -> Result<BenchRecord> {
    match cfg.precision {
        Precision::Single => bench_typed::<f32>(cfg, reps, with_bounds),
        Precision::Double => bench_typed::<f64>(cfg, reps, with_bounds),
    }
}

pub fn bench(grid: &[RunConfig], reps: usize, with_bounds: bool) -> Result<Vec<BenchRecord>> {
    grid.iter().map(|cfg| bench_one(cfg, reps, with_bounds)).collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    frames: usize,
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
    d: usize,
    heads: usize,
    sparsity: f64,
    pool: String,
    select_on: String,
    precision: String,
    n: usize,
    threads: usize,
    reps: usize,
    dense_seconds: f64,
    sparse_seconds: f64,
    speedup: f64,
    predicted_speedup: f64,
    speedup_warning: bool,
    kept_count: usize,
    kept_fraction: f64,
    full_logits_flops: u64,
    full_av_flops: u64,
    draft_flops: u64,
    sparse_logits_flops: u64,
    sparse_av_flops: u64,
    overhead_ratio: f64,
    total_ratio: f64,
    #[serde(skip)]
    _marker: std::marker::PhantomData<&'a ()>,
}

pub fn write_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRow {
            frames: r.config.frames,
            height: r.config.height,
            width: r.config.width,
            patch_h: r.config.patch_h,
            patch_w: r.config.patch_w,
            d: r.config.d,
            heads: r.config.heads,
            sparsity: r.config.sparsity,
            pool: r.config.pool.to_string(),
            select_on: r.config.select_on.to_string(),
            precision: r.config.precision.to_string(),
            n: r.n,
            threads: r.threads,
            reps: r.reps,
            dense_seconds: r.dense_seconds,
            sparse_seconds: r.sparse_seconds,
            speedup: r.speedup,
            predicted_speedup: r.predicted_speedup,
            speedup_warning: r.speedup_warning,
            kept_count: r.flops.kept_count,
            kept_fraction: r.mask.kept_fraction,
            full_logits_flops: r.flops.full_logits_flops,
            full_av_flops: r.flops.full_av_flops,
            draft_flops: r.flops.draft_flops,
            sparse_logits_flops: r.flops.sparse_logits_flops,
            sparse_av_flops: r.flops.sparse_av_flops,
            overhead_ratio: r.flops.overhead_ratio,
            total_ratio: r.flops.total_ratio,
            _marker: std::marker::PhantomData,
        })?;
    }
    w.flush()?;
    Ok(())
}
