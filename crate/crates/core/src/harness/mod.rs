//! Operational surface: configs, synthetic data, padding, multi-head runs,
//! benchmarks and the bound-verification suite.
//!
//! There is no diffusion loop here, so schedules that switch between dense
//! and sparse attention across denoising steps have no counterpart; callers
//! wanting dense warm-up simply run `full_attention` for those steps.

pub mod bench;
pub mod config;
pub mod padding;
pub mod run;
pub mod synth;
pub mod verify;

pub use bench::{bench, bench_one, BenchRecord};
pub use config::{DataMode, Preset, RunConfig};
pub use padding::{draft_sparse_attention_padded, pad_layout, PaddedLayout};
pub use run::{run_heads, RunOutput, RunReport};
pub use synth::{gen_synthetic, Synthetic};
pub use verify::{run_bound_suite, BoundSuiteConfig, BoundSummary};
