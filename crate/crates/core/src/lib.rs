//! Draft-guided block-sparse attention for video diffusion transformers.
//!
//! Queries and keys are reordered so every `patch_h x patch_w` patch of a
//! frame is a contiguous run of tokens, average-pooled per patch into a
//! low-resolution "draft" attention map, and the globally strongest region
//! pairs of that map select which `p x p` blocks the full-resolution
//! attention computes. The output is restored to the original token order.
//!
//! ```
//! use draft_attention::{LatentLayout, Matrix, PipelineOptions, draft_sparse_attention};
//!
//! let layout = LatentLayout::new(1, 4, 8, 2, 4).unwrap();
//! let q = Matrix::<f32>::from_fn(32, 8, |r, c| ((r * 7 + c) % 5) as f32 * 0.1);
//! let out = draft_sparse_attention(&q, &q, &q, &layout, 0.5, &PipelineOptions::default()).unwrap();
//! assert_eq!(out.shape(), (32, 8));
//! ```

pub mod bounds;
pub mod draft;
pub mod error;
pub mod harness;
pub mod io;
pub mod layout;
pub mod mask;
pub mod sparse;
pub mod tensor;

pub use bounds::{compute_delta, theorem1_check, theorem2_check, BoundReport, LogitAnalysis};
pub use draft::{draft_attention_map, draft_logits, pool_regions, DraftPair, PoolMode};
pub use error::{Error, Result};
pub use io::{read_matrix, write_matrix, DynMatrix};
pub use layout::{gen_reorder_index, gen_restore_index, permute_rows, LatentLayout, Permutation};
pub use mask::{
    hadamard_masked_logits, mask_density_stats, select_top_fraction, LiftedMaskView, MaskStats,
    RegionMask, SelectOn,
};
pub use sparse::{
    block_sparse_attention, draft_sparse_attention, flops_count, run_draft_pipeline, BlockPlan,
    FlopsReport, PipelineOptions, SoftmaxStrategy,
};
pub use tensor::{full_attention, logits, softmax_rows, AttnScale, Matrix, Precision, Scalar};
