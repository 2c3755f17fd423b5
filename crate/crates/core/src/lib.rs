//! Weakly supervised object localization with a Global Token Transformer
//! (GTFormer) and mask-gallery matching.
//!
//! The pipeline has three stages:
//!
//! 1. [`gtformer`] predicts class logits and a coarse foreground map `M_b`
//!    from image-level supervision only.
//! 2. [`mask_provider`] produces a gallery of binary instance masks for each
//!    image from a dense grid of point prompts (a frozen segmentation model or
//!    the deterministic fake used in tests).
//! 3. [`mask_matching`] scores every gallery mask against the binarized `M_b`
//!    with pixel IoU and keeps the best one as the localization mask.
//!
//! [`eval_metrics`] implements GT-Known, Top-k Loc and MaxBoxAccV2, and
//! [`pipeline`] wires training and inference together for the CLI.

pub mod data;
pub mod error;
pub mod eval_metrics;
pub mod gtformer;
pub mod heatmap;
pub mod io;
pub mod losses;
pub mod mask;
pub mod mask_matching;
pub mod mask_provider;
pub mod pipeline;
pub mod visualize;

pub use error::{Error, Result};
pub use heatmap::HeatMap;
pub use mask::BinaryMask;
