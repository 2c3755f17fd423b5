//! Training, mask generation and inference drivers used by the CLI.

mod config;
mod infer;
mod manifest;
mod optim;
mod train;

use rayon::prelude::*;

pub use config::{ExperimentConfig, LrSchedule, OptimizerConfig, ScheduleConfig};
pub use infer::{
    classification_accuracy, infer, predict, prepare_eval, top_k, ImagePrediction, InferMode, InferOptions,
};
pub use manifest::{EpochRow, RunManifest};
pub use optim::{decays, AdamW};
pub use train::{split_validation, StepLog, TrainSummary, Trainer};

use crate::data::{preprocess, Example, PreprocessConfig, PreprocessMode};
use crate::mask_provider::{
    config_hash, generate_gallery, generate_grid_points, GalleryCache, GridPromptConfig, MaskProvider,
};
use crate::{Error, Result};

pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GallerySummary {
    pub config_hash: String,
    pub images: usize,
    pub masks: usize,
    pub empty: usize,
}

/// Fills the cache with a gallery for every example, generated on the
/// eval-preprocessed image. Existing valid entries are reused.
pub fn generate_galleries(
    examples: &[Example],
    pre: &PreprocessConfig,
    provider: &dyn MaskProvider,
    grid: &GridPromptConfig,
    cache: &GalleryCache,
    workers: usize,
) -> Result<GallerySummary> {
    let hash = config_hash(provider, grid);
    let points = generate_grid_points(grid)?;
    let name = provider.descriptor().name;
    let counts: Vec<usize> = worker_pool(workers)?.install(|| {
        examples
            .par_iter()
            .map(|e| {
                let g = cache.get_or_generate(&e.image_id, &name, &hash, || {
                    let p = preprocess(&e.image, &[], pre, PreprocessMode::Eval)?;
                    generate_gallery(&e.image_id, &p.rgb, &points, provider, &hash)
                })?;
                Ok(g.len())
            })
            .collect::<Result<_>>()
    })?;
    Ok(GallerySummary {
        config_hash: hash,
        images: counts.len(),
        masks: counts.iter().sum(),
        empty: counts.iter().filter(|&&c| c == 0).count(),
    })
}
