//! Datasets, preprocessing and the synthetic-shapes corpus.

mod cub;
mod ilsvrc;
mod preprocess;
pub mod synth;
mod tensor;

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::eval_metrics::BBox;
use crate::{Error, Result};

pub use cub::{load_cub, CUB_NUM_CLASSES};
pub use ilsvrc::{load_ilsvrc_val, parse_voc_xml, VocAnnotation};
pub use preprocess::{
    augment_rng, normalize, preprocess, CropGeometry, Preprocess, PreprocessConfig, PreprocessMode,
    IMAGENET_MEAN, IMAGENET_STD,
};
pub use synth::{generate_synth, load_synth, ShapeKind, SynthDataset, SynthSpec};
pub use tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "val" | "eval" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One image on disk with its label and boxes in original pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A preprocessed example: normalized image, label and boxes in the
/// preprocessed frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: ImageTensor,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
    /// Some box lost area to clipping or became degenerate.
    pub boxes_clipped: bool,
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::dataset(path, e.to_string()))
}

/// A decoded image with its label and original-frame boxes.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_id: String,
    pub image: RgbImage,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
}

/// Decodes every record, in record order, on up to `workers` threads.
pub fn load_examples(dataset: &Dataset, workers: usize) -> Result<Vec<Example>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        dataset
            .records
            .par_iter()
            .map(|r| {
                Ok(Example {
                    image_id: r.image_id.clone(),
                    image: load_rgb(&r.path)?,
                    label: r.label,
                    gt_boxes: r.gt_boxes.clone(),
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cub,
    Ilsvrc,
    Synth,
}

/// Dataset section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub preprocess: PreprocessConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synth,
            root: PathBuf::from("data/synth"),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self.kind {
            DatasetKind::Cub => load_cub(&self.root, split),
            DatasetKind::Ilsvrc => match split {
                Split::Test => load_ilsvrc_val(&self.root),
                Split::Train => Err(Error::Config(
                    "only the ILSVRC validation split is supported".into(),
                )),
            },
            DatasetKind::Synth => Ok(load_synth(&self.root)?.dataset(split)),
        }
    }
}
