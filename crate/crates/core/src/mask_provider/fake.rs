use std::collections::HashMap;

use image::RgbImage;

use crate::{BinaryMask, Error, Result};

use super::{GridPoint, MaskProvider, ProviderDescriptor};

/// Replays ground-truth instance masks.
///
/// For an image with instances it returns every non-empty instance mask
/// followed by the background (complement of the instance union). An image
/// without instances yields an empty gallery.
#[derive(Debug, Clone, Default)]
pub struct FakeProvider {
    instances: HashMap<String, Vec<BinaryMask>>,
}

impl FakeProvider {
    pub fn new(instances: HashMap<String, Vec<BinaryMask>>) -> Self {
        Self { instances }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, masks: Vec<BinaryMask>) {
        self.instances.insert(image_id.into(), masks);
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

impl MaskProvider for FakeProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: "fake".into(),
            version: "1".into(),
        }
    }

    fn generate(&self, image_id: &str, image: &RgbImage, _points: &[GridPoint]) -> Result<Vec<BinaryMask>> {
        let instances = self.instances.get(image_id).ok_or_else(|| Error::Provider {
            image_id: image_id.to_string(),
            msg: "no ground-truth instances registered".into(),
        })?;
        let (w, h) = image.dimensions();
        let (h, w) = (h as usize, w as usize);
        let mut out: Vec<BinaryMask> = Vec::with_capacity(instances.len() + 1);
        let mut union = BinaryMask::zeros(h, w);
        for m in instances {
            if m.shape() != (h, w) {
                return Err(Error::Provider {
                    image_id: image_id.to_string(),
                    msg: format!("instance mask {:?} does not match image {h}x{w}", m.shape()),
                });
            }
            if m.is_empty() {
                continue;
            }
            union = union.union(m)?;
            out.push(m.clone());
        }
        if !out.is_empty() {
            let background = union.complement();
            if !background.is_empty() {
                out.push(background);
            }
        }
        Ok(out)
    }
}
