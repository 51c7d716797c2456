//! Randomised bound-verification suite over a grid of layouts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{bound_reports, BoundReport, LogitAnalysis};
use crate::error::{Error, Result};
use crate::harness::config::DataMode;
use crate::harness::synth::{generate, Grid};
use crate::layout::LatentLayout;
use crate::tensor::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSuiteConfig {
    pub frames: Vec<usize>,
    /// Patches per frame along the height.
    pub grid_h: Vec<usize>,
    /// Patches per frame along the width.
    pub grid_w: Vec<usize>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d: Vec<usize>,
    pub modes: Vec<DataMode>,
    pub keep_ratios: Vec<f64>,
    pub trials: usize,
    pub n_max: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BoundSuiteConfig {
    fn default() -> Self {
        Self {
            frames: vec![1, 2, 3],
            grid_h: vec![1, 2, 4],
            grid_w: vec![1, 2, 4],
            patch_h: 2,
            patch_w: 4,
            d: vec![4, 16, 64],
            modes: vec![DataMode::Gaussian, DataMode::Smooth],
            keep_ratios: vec![0.1, 0.25, 0.5],
            trials: 1000,
            n_max: 512,
            precision: Precision::Double,
            seed: 0,
        }
    }
}

/// One generated instance of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub trial: usize,
    pub seed: u64,
    pub mode: DataMode,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d: usize,
}

impl Instance {
    pub fn layout(&self) -> LatentLayout {
        LatentLayout::new(self.frames, self.height, self.width, self.patch_h, self.patch_w)
            .expect("suite layouts tile by construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    #[serde(flatten)]
    pub instance: Instance,
    #[serde(flatten)]
    pub report: BoundReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub trials: usize,
    pub reports: usize,
    pub draft_failures: usize,
    pub mask_failures: usize,
    pub pointwise_failures: usize,
    pub corrected_failures: usize,
    pub min_slack_draft: f64,
    pub min_slack_mask: f64,
}

impl BoundSummary {
    pub fn from_records(trials: usize, records: &[BoundRecord]) -> Self {
        let count = |f: fn(&BoundReport) -> bool| records.iter().filter(|r| f(&r.report)).count();
        let min = |f: fn(&BoundReport) -> f64| {
            records
                .iter()
                .map(|r| f(&r.report))
                .fold(f64::INFINITY, f64::min)
        };
        Self {
            trials,
            reports: records.len(),
            draft_failures: count(|r| !r.holds_draft),
            mask_failures: count(|r| !r.holds_mask),
            pointwise_failures: count(|r| !r.pointwise_holds),
            corrected_failures: count(|r| !r.corrected_holds),
            min_slack_draft: min(|r| r.slack_draft),
            min_slack_mask: min(|r| r.slack_mask),
        }
    }

    /// Both Frobenius bounds and the pointwise step behind the mask bound.
    pub fn all_hold(&self) -> bool {
        self.draft_failures == 0 && self.mask_failures == 0 && self.pointwise_failures == 0
    }
}

impl std::fmt::Display for BoundSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trials={} reports={} draft_failures={} mask_failures={} pointwise_failures={} \
             corrected_failures={} min_slack_draft={:.6e} min_slack_mask={:.6e}",
            self.trials,
            self.reports,
            self.draft_failures,
            self.mask_failures,
            self.pointwise_failures,
            self.corrected_failures,
            self.min_slack_draft,
            self.min_slack_mask
        )
    }
}

/// Instances visited by the suite: grid points with `n <= n_max`, cycled in
/// order, each trial with its own seed.
pub fn instances(cfg: &BoundSuiteConfig) -> Result<Vec<Instance>> {
    let mut points = Vec::new();
    for &frames in &cfg.frames {
        for &gh in &cfg.grid_h {
            for &gw in &cfg.grid_w {
                for &d in &cfg.d {
                    for &mode in &cfg.modes {
                        let (height, width) = (gh * cfg.patch_h, gw * cfg.patch_w);
                        if frames * height * width <= cfg.n_max && frames * height * width > 0 {
                            points.push((frames, height, width, d, mode));
                        }
                    }
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Config("bound suite grid is empty under n_max".into()));
    }
    if cfg.modes.contains(&DataMode::File) {
        return Err(Error::Config("the bound suite generates its own data".into()));
    }
    Ok((0..cfg.trials)
        .map(|trial| {
            let (frames, height, width, d, mode) = points[trial % points.len()];
            Instance {
                trial,
                seed: cfg.seed.wrapping_add(trial as u64),
                mode,
                frames,
                height,
                width,
                patch_h: cfg.patch_h,
                patch_w: cfg.patch_w,
                d,
            }
        })
        .collect())
}

fn check_instance<T: Scalar>(inst: &Instance, keep_ratios: &[f64]) -> Result<Vec<BoundRecord>> {
    let layout = inst.layout();
    let data = generate::<T>(&Grid::from(&layout), inst.d, inst.mode, inst.seed)?;
    let analysis = LogitAnalysis::new(&data.q, &data.k, &layout)?;
    Ok(bound_reports(&analysis, keep_ratios)?
        .into_iter()
        .map(|report| BoundRecord {
            instance: *inst,
            report,
        })
        .collect())
}

/// Runs every instance in parallel; records come back in trial order.
pub fn run_bound_suite(cfg: &BoundSuiteConfig) -> Result<(Vec<BoundRecord>, BoundSummary)> {
    let insts = instances(cfg)?;
    let per: Vec<Vec<BoundRecord>> = insts
        .par_iter()
        .map(|inst| match cfg.precision {
            Precision::Single => check_instance::<f32>(inst, &cfg.keep_ratios),
            Precision::Double => check_instance::<f64>(inst, &cfg.keep_ratios),
        })
        .collect::<Result<_>>()?;
    let records: Vec<BoundRecord> = per.into_iter().flatten().collect();
    let summary = BoundSummary::from_records(insts.len(), &records);
    Ok((records, summary))
}
