//! Multi-head driver: the single-head pipeline applied to every head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{draft_logits, DraftPair};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::padding::draft_sparse_attention_padded;
use crate::harness::synth::Synthetic;
use crate::layout::{gen_reorder_index, gen_restore_index, permute_rows};
use crate::mask::{
    keep_ratio_from_sparsity, mask_density_stats, select_top_fraction, MaskStats, RegionMask,
    SelectOn,
};
use crate::sparse::{execute_plan, flops_count, BlockPlan, ExecOptions, FlopsReport, StageTimings};
use crate::tensor::{softmax_rows, AttnScale, Matrix, Scalar};

/// Output of [`run_heads`].
#[derive(Debug, Clone)]
pub struct RunOutput<T: Scalar> {
    /// `n x (heads * d)`, original token order.
    pub output: Matrix<T>,
    /// One mask per head; identical entries when the mask is shared.
    pub masks: Vec<RegionMask>,
    pub timings: Vec<StageTimings>,
    pub seconds: f64,
}

/// Runs the pipeline for every head of `data`. With `shared_head_mask`, the
/// selection scores are averaged over heads and one mask serves all of them.
pub fn run_heads<T: Scalar>(cfg: &RunConfig, data: &Synthetic<T>) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let d = cfg.d;
    let mut outputs = Vec::with_capacity(cfg.heads);
    let mut masks = Vec::with_capacity(cfg.heads);
    let mut timings = Vec::with_capacity(cfg.heads);
    let opts = cfg.pipeline_options();

    if cfg.shared_head_mask {
        let layout = cfg.layout().map_err(|e| {
            Error::Config(format!("shared head masks need a tiled layout: {e}"))
        })?;
        let scale = AttnScale::for_head_dim(d);
        let pi = gen_reorder_index(&layout);
        let restore = gen_restore_index(&pi)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut avg: Option<Matrix<f64>> = None;
        for h in 0..cfg.heads {
            let qr = permute_rows(&data.q.column_block(h * d, d)?, &pi)?;
            let kr = permute_rows(&data.k.column_block(h * d, d)?, &pi)?;
            let vr = permute_rows(&data.v.column_block(h * d, d)?, &pi)?;
            let pair = DraftPair::from_reordered(&qr, &kr, layout, cfg.pool)?;
            let mut scores = draft_logits(&pair, scale)?;
            if cfg.select_on == SelectOn::Softmax {
                scores = softmax_rows(&scores);
            }
            let scores = scores.cast::<f64>();
            avg = Some(match avg {
                None => scores,
                Some(acc) => {
                    let mut acc = acc;
                    acc.as_mut_slice()
                        .iter_mut()
                        .zip(scores.as_slice())
                        .for_each(|(a, &s)| *a += s);
                    acc
                }
            });
            heads.push((qr, kr, vr));
        }
        let avg = avg.expect("heads >= 1").map(|x| x / cfg.heads as f64);
        let r = keep_ratio_from_sparsity(cfg.sparsity)?;
        let mask = select_top_fraction(&avg, r, cfg.force_row_keep)?;
        let plan = BlockPlan::from_mask(&mask, &layout)?;
        for (qr, kr, vr) in &heads {
            let clock = Instant::now();
            let exec = ExecOptions {
                strategy: opts.strategy,
                key_valid: None,
            };
            let out = execute_plan(qr, kr, vr, &plan, scale, exec)?;
            let attention = clock.elapsed().as_secs_f64();
            outputs.push(permute_rows(&out, &restore)?);
            masks.push(mask.clone());
            timings.push(StageTimings {
                attention,
                ..StageTimings::default()
            });
        }
    } else {
        for h in 0..cfg.heads {
            let res = draft_sparse_attention_padded(
                &data.q.column_block(h * d, d)?,
                &data.k.column_block(h * d, d)?,
                &data.v.column_block(h * d, d)?,
                cfg.frames,
                cfg.height,
                cfg.width,
                cfg.patch_h,
                cfg.patch_w,
                cfg.sparsity,
                &opts,
            )?;
            outputs.push(res.output);
            masks.push(res.mask);
            timings.push(res.timings);
        }
    }

    Ok(RunOutput {
        output: Matrix::hstack(&outputs)?,
        masks,
        timings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// JSON report emitted by `run --report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub threads: usize,
    /// Per head, counting that head's forced row keeps.
    pub flops: Vec<FlopsReport>,
    pub mask_stats: Vec<MaskStats>,
    pub timings: Vec<StageTimings>,
    pub seconds: f64,
}

impl RunReport {
    pub fn new<T: Scalar>(cfg: &RunConfig, out: &RunOutput<T>) -> Result<Self> {
        let padded = crate::harness::padding::pad_layout(
            cfg.frames,
            cfg.height,
            cfg.width,
            cfg.patch_h,
            cfg.patch_w,
        )?;
        let flops = out
            .masks
            .iter()
            .map(|m| flops_count(&padded.layout, cfg.d, cfg.sparsity, m.forced_row_keeps()))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            threads: rayon::current_num_threads(),
            flops,
            mask_stats: out.masks.iter().map(mask_density_stats).collect(),
            timings: out.timings.clone(),
            seconds: out.seconds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::gen_synthetic;
    use crate::sparse::draft_sparse_attention;

    fn small() -> RunConfig {
        RunConfig {
            frames: 2,
            height: 4,
            width: 8,
            patch_h: 2,
            patch_w: 4,
            d: 4,
            heads: 3,
            sparsity: 0.5,
            seed: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn heads_are_independent_pipelines() {
        let cfg = small();
        let data = gen_synthetic::<f64>(&cfg).unwrap();
        let out = run_heads(&cfg, &data).unwrap();
        assert_eq!(out.output.shape(), (64, 12));
        let layout = cfg.layout().unwrap();
        for h in 0..3 {
            let single = draft_sparse_attention(
                &data.q.column_block(h * 4, 4).unwrap(),
                &data.k.column_block(h * 4, 4).unwrap(),
                &data.v.column_block(h * 4, 4).unwrap(),
                &layout,
                0.5,
                &cfg.pipeline_options(),
            )
            .unwrap();
            assert_eq!(out.output.column_block(h * 4, 4).unwrap(), single);
        }
    }

    #[test]
    fn shared_mask_is_identical_across_heads() {
        let cfg = RunConfig {
            shared_head_mask: true,
            ..small()
        };
        let data = gen_synthetic::<f32>(&cfg).unwrap();
        let out = run_heads(&cfg, &data).unwrap();
        assert!(out.masks.windows(2).all(|w| w[0] == w[1]));
        let report = RunReport::new(&cfg, &out).unwrap();
        assert_eq!(report.flops.len(), 3);
        assert_eq!(report.mask_stats[0].g, 8);
    }
}
