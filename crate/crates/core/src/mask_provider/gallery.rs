//! Mask galleries and their on-disk text format.
//!
//! ```text
//! P2SMASK 1
//! {"image_id":"...","height":H,"width":W,"count":L,"provider":"...","config_hash":"..."}
//! z0,o0,z1,o1,...      one line per mask
//! ```
//!
//! Each mask line holds row-major run lengths alternating zero-runs and
//! one-runs, starting with a (possibly empty) zero-run. Runs sum to `H·W`.

use serde::{Deserialize, Serialize};

use crate::{BinaryMask, Error, Result};

pub const MAGIC: &str = "P2SMASK 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGallery {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub masks: Vec<BinaryMask>,
    pub provider: String,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    image_id: String,
    height: usize,
    width: usize,
    count: usize,
    provider: String,
    config_hash: String,
}

/// Row-major run lengths, zero-run first.
pub fn rle_encode(mask: &BinaryMask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &bit in mask.bits() {
        if bit != current {
            runs.push(len);
            len = 0;
            current = bit;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], height: usize, width: usize) -> Result<BinaryMask> {
    let total: usize = runs.iter().sum();
    if total != height * width {
        return Err(Error::format(
            "gallery",
            format!("runs sum to {total}, expected {}", height * width),
        ));
    }
    let mut bits = Vec::with_capacity(total);
    for (i, &run) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, run));
    }
    BinaryMask::from_vec(height, width, bits)
}

impl MaskGallery {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        let header = Header {
            image_id: self.image_id.clone(),
            height: self.height,
            width: self.width,
            count: self.masks.len(),
            provider: self.provider.clone(),
            config_hash: self.config_hash.clone(),
        };
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for mask in &self.masks {
            if mask.shape() != (self.height, self.width) {
                return Err(Error::Shape(format!(
                    "gallery mask is {:?}, gallery is {}x{}",
                    mask.shape(),
                    self.height,
                    self.width
                )));
            }
            let runs = rle_encode(mask);
            let line: Vec<String> = runs.iter().map(usize::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        if lines.next() != Some(MAGIC) {
            return Err(Error::format("gallery", "missing P2SMASK 1 header"));
        }
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::format("gallery", "missing metadata line"))?,
        )
        .map_err(|e| Error::format("gallery", format!("metadata: {e}")))?;
        let mut masks = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let line = lines
                .next()
                .ok_or_else(|| Error::format("gallery", "fewer mask lines than count"))?;
            let runs = line
                .split(',')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::format("gallery", format!("bad run length {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            masks.push(rle_decode(&runs, header.height, header.width)?);
        }
        // A well-formed file ends right after the last newline.
        if lines.any(|l| !l.is_empty()) {
            return Err(Error::format("gallery", "trailing data after masks"));
        }
        Ok(Self {
            image_id: header.image_id,
            height: header.height,
            width: header.width,
            masks,
            provider: header.provider,
            config_hash: header.config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::from_vec(1, 5, vec![true, true, false, true, false]).unwrap();
        assert_eq!(rle_encode(&m), vec![0, 2, 1, 1, 1]);
        let m = BinaryMask::zeros(2, 3);
        assert_eq!(rle_encode(&m), vec![6]);
    }

    #[test]
    fn exact_text_layout() {
        let g = MaskGallery {
            image_id: "a/b.jpg".into(),
            height: 2,
            width: 2,
            masks: vec![
                BinaryMask::from_vec(2, 2, vec![false, true, true, false]).unwrap(),
                BinaryMask::ones(2, 2),
            ],
            provider: "fake".into(),
            config_hash: "abc".into(),
        };
        let text = g.to_text().unwrap();
        assert_eq!(
            text,
            "P2SMASK 1\n{\"image_id\":\"a/b.jpg\",\"height\":2,\"width\":2,\"count\":2,\"provider\":\"fake\",\"config_hash\":\"abc\"}\n1,2,1\n0,4\n"
        );
        assert_eq!(MaskGallery::from_text(&text).unwrap(), g);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(MaskGallery::from_text("P2SMASK 2\n{}\n").is_err());
        let bad_sum = "P2SMASK 1\n{\"image_id\":\"x\",\"height\":2,\"width\":2,\"count\":1,\"provider\":\"fake\",\"config_hash\":\"h\"}\n1,2\n";
        assert!(MaskGallery::from_text(bad_sum).is_err());
        let short = "P2SMASK 1\n{\"image_id\":\"x\",\"height\":2,\"width\":2,\"count\":2,\"provider\":\"fake\",\"config_hash\":\"h\"}\n4\n";
        assert!(MaskGallery::from_text(short).is_err());
    }
}
