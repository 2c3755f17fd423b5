use std::collections::BTreeSet;
use std::path::Path;

use crate::eval_metrics::BBox;
use crate::{Error, Result};

use super::{Dataset, Record};

/// Pascal-VOC style annotation as shipped with the ILSVRC validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct VocAnnotation {
    pub filename: String,
    pub width: usize,
    pub height: usize,
    /// `(synset, box)` per object, in file order.
    pub objects: Vec<(String, BBox)>,
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .and_then(|c| c.text())
        .map(str::trim)
}

pub fn parse_voc_xml(text: &str, source: &Path) -> Result<VocAnnotation> {
    let bad = |msg: String| Error::dataset(source, msg);
    let doc = roxmltree::Document::parse(text).map_err(|e| bad(format!("XML parse error: {e}")))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(bad("root element is not <annotation>".into()));
    }
    let filename = child_text(root, "filename")
        .ok_or_else(|| bad("missing <filename>".into()))?
        .to_string();
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| bad("missing <size>".into()))?;
    let dim = |name: &str| -> Result<usize> {
        child_text(size, name)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid <{name}>")))
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")
            .ok_or_else(|| bad("object without <name>".into()))?
            .to_string();
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| bad(format!("object {name} without <bndbox>")))?;
        let coord = |n: &str| -> Result<f64> {
            child_text(bnd, n)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("object {name}: invalid <{n}>")))
        };
        let b = BBox::new(coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?)
            .map_err(|e| bad(format!("object {name}: {e}")))?;
        objects.push((name, b));
    }
    if objects.is_empty() {
        return Err(bad("annotation has no objects".into()));
    }
    Ok(VocAnnotation {
        filename,
        width,
        height,
        objects,
    })
}

/// Loads `root/val/*.xml` annotations with images in `root/val/`.
///
/// Class indices follow `root/synsets.txt` (one synset per line) when
/// present and the sorted set of annotated synsets otherwise. The label of
/// an image is the synset of its first object; every box is kept.
pub fn load_ilsvrc_val(root: &Path) -> Result<Dataset> {
    let val = root.join("val");
    let entries =
        std::fs::read_dir(&val).map_err(|e| Error::dataset(&val, format!("cannot list directory: {e}")))?;
    let mut xmls: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    xmls.sort();
    let mut annotations = Vec::with_capacity(xmls.len());
    for path in &xmls {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::dataset(path, format!("cannot read: {e}")))?;
        annotations.push(parse_voc_xml(&text, path)?);
    }

    let synsets_path = root.join("synsets.txt");
    let synsets: Vec<String> = if synsets_path.exists() {
        std::fs::read_to_string(&synsets_path)?
            .lines()
            .filter_map(|l| l.split_whitespace().next().map(str::to_string))
            .collect()
    } else {
        annotations
            .iter()
            .flat_map(|a| a.objects.iter().map(|(n, _)| n.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };

    let mut records = Vec::with_capacity(annotations.len());
    for (a, path) in annotations.into_iter().zip(&xmls) {
        let synset = &a.objects[0].0;
        let label = synsets
            .iter()
            .position(|s| s == synset)
            .ok_or_else(|| Error::dataset(path, format!("unknown synset {synset}")))?;
        let stem = Path::new(&a.filename)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| a.filename.clone());
        let file = if Path::new(&a.filename).extension().is_some() {
            a.filename.clone()
        } else {
            format!("{}.JPEG", a.filename)
        };
        records.push(Record {
            image_id: stem,
            path: val.join(file),
            label,
            gt_boxes: a.objects.into_iter().map(|(_, b)| b).collect(),
        });
    }
    Ok(Dataset {
        num_classes: synsets.len(),
        records,
    })
}
