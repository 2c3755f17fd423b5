use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::eval_metrics::BBox;
use crate::{Error, Result};

use super::{Dataset, Record, Split};

pub const CUB_NUM_CLASSES: usize = 200;

fn read_index(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::dataset(path, format!("cannot read index file: {e}")))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::dataset(path, format!("line {}: bad image id", n + 1)))?;
        rows.push((id, parts.map(str::to_string).collect()));
    }
    Ok(rows)
}

fn field<'a>(path: &Path, id: usize, fields: &'a [String], n: usize) -> Result<&'a str> {
    if fields.len() != n {
        return Err(Error::dataset(
            path,
            format!("image {id}: expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(&fields[0])
}

fn parse_num<T: std::str::FromStr>(path: &Path, id: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::dataset(path, format!("image {id}: cannot parse {s:?}")))
}

/// Reads the standard CUB-200-2011 index files under `root`.
///
/// Boxes are converted from `(x, y, w, h)` to corner form in original
/// image coordinates; labels become zero-based.
pub fn load_cub(root: &Path, split: Split) -> Result<Dataset> {
    let p = |name: &str| -> PathBuf { root.join(name) };
    let images_path = p("images.txt");
    let labels_path = p("image_class_labels.txt");
    let split_path = p("train_test_split.txt");
    let boxes_path = p("bounding_boxes.txt");

    let images = read_index(&images_path)?;
    let mut labels = HashMap::new();
    for (id, f) in read_index(&labels_path)? {
        let l: usize = parse_num(&labels_path, id, field(&labels_path, id, &f, 1)?)?;
        if l == 0 || l > CUB_NUM_CLASSES {
            return Err(Error::dataset(
                &labels_path,
                format!("image {id}: class {l} out of range"),
            ));
        }
        labels.insert(id, l - 1);
    }
    let mut is_train = HashMap::new();
    for (id, f) in read_index(&split_path)? {
        let v: u8 = parse_num(&split_path, id, field(&split_path, id, &f, 1)?)?;
        is_train.insert(id, v == 1);
    }
    let mut boxes = HashMap::new();
    for (id, f) in read_index(&boxes_path)? {
        field(&boxes_path, id, &f, 4)?;
        let v: Vec<f64> = f
            .iter()
            .map(|s| parse_num(&boxes_path, id, s))
            .collect::<Result<_>>()?;
        let b = BBox::new(v[0], v[1], v[0] + v[2], v[1] + v[3])
            .map_err(|e| Error::dataset(&boxes_path, format!("image {id}: {e}")))?;
        boxes.insert(id, b);
    }

    let want_train = split == Split::Train;
    let mut records = Vec::new();
    for (id, f) in images {
        let rel = field(&images_path, id, &f, 1)?;
        let train = *is_train
            .get(&id)
            .ok_or_else(|| Error::dataset(&split_path, format!("image {id} missing")))?;
        if train != want_train {
            continue;
        }
        let label = *labels
            .get(&id)
            .ok_or_else(|| Error::dataset(&labels_path, format!("image {id} missing")))?;
        let b = *boxes
            .get(&id)
            .ok_or_else(|| Error::dataset(&boxes_path, format!("image {id} missing")))?;
        records.push(Record {
            image_id: rel.to_string(),
            path: root.join("images").join(rel),
            label,
            gt_boxes: vec![b],
        });
    }
    Ok(Dataset {
        num_classes: CUB_NUM_CLASSES,
        records,
    })
}
