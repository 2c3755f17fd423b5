//! Gallery-to-map matching.
//!
//! Every gallery mask is reduced to the resolution of `M_b`, scored against
//! the binarized map with pixel IoU, and the highest-scoring mask (at its
//! native resolution) becomes the localization mask `M_Loc`.

use serde::{Deserialize, Serialize};

use crate::mask_provider::MaskGallery;
use crate::{BinaryMask, Error, HeatMap, Result};

pub const DEFAULT_MAP_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizedMap {
    pub grid: BinaryMask,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub winner_index: Option<usize>,
    #[serde(with = "rle_serde")]
    pub final_mask: BinaryMask,
    pub fallback_used: bool,
}

/// `{"height", "width", "runs"}` instead of one boolean per pixel.
mod rle_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::mask_provider::{rle_decode, rle_encode};
    use crate::BinaryMask;

    #[derive(Serialize, Deserialize)]
    struct Rle {
        height: usize,
        width: usize,
        runs: Vec<usize>,
    }

    pub fn serialize<S: Serializer>(mask: &BinaryMask, s: S) -> Result<S::Ok, S::Error> {
        Rle {
            height: mask.height(),
            width: mask.width(),
            runs: rle_encode(mask),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BinaryMask, D::Error> {
        let r = Rle::deserialize(d)?;
        rle_decode(&r.runs, r.height, r.width).map_err(serde::de::Error::custom)
    }
}

pub fn binarize_map(map: &HeatMap, threshold: f32) -> BinarizedMap {
    BinarizedMap {
        grid: map.threshold(threshold),
        threshold,
    }
}

/// Area downsampling to `(height, width)`; a cell is set when at least half
/// of the source area it covers is set.
///
/// Source pixels straddling a cell border contribute fractionally, so the
/// result is exact for any pair of sizes.
pub fn resize_mask_to_map(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    let (h, w) = mask.shape();
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize a {h}x{w} mask to {height}x{width}"
        )));
    }
    // Work in units of 1/(height*width*...) by scaling coordinates so that
    // both grids are integral: source pixel spans [y*height, (y+1)*height),
    // target cell spans [r*h, (r+1)*h).
    let mut covered = vec![0u64; height * width];
    for y in 0..h {
        let (sy0, sy1) = (y * height, (y + 1) * height);
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let (sx0, sx1) = (x * width, (x + 1) * width);
            for r in sy0 / h..=((sy1 - 1) / h).min(height - 1) {
                let oy = sy1.min((r + 1) * h) - sy0.max(r * h);
                for c in sx0 / w..=((sx1 - 1) / w).min(width - 1) {
                    let ox = sx1.min((c + 1) * w) - sx0.max(c * w);
                    covered[r * width + c] += (oy * ox) as u64;
                }
            }
        }
    }
    let cell_area = (h * w) as u64;
    Ok(BinaryMask::from_fn(height, width, |r, c| {
        2 * covered[r * width + c] >= cell_area
    }))
}

/// Intersection over union of two equally sized binary masks; 0 when both
/// are empty.
pub fn similarity_score(mask: &BinaryMask, map: &BinarizedMap) -> Result<f64> {
    mask_iou(mask, &map.grid)
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (inter, union) = a.overlap_counts(b)?;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Upsampled binarized map used when matching fails. Never empty: if no
/// cell reaches the threshold, the cells holding the map maximum are used.
pub fn fallback_mask(map: &HeatMap, threshold: f32, height: usize, width: usize) -> BinaryMask {
    let mut grid = map.threshold(threshold);
    if grid.is_empty() {
        grid = map.threshold(map.max());
    }
    grid.resize_nearest(height, width)
}

/// Scores the gallery against `M_b` and picks the winner, lowest index on
/// ties.
pub fn select_mask(gallery: &MaskGallery, map: &HeatMap, threshold: f32) -> Result<MatchResult> {
    let binarized = binarize_map(map, threshold);
    let (mh, mw) = map.shape();
    let mut scores = Vec::with_capacity(gallery.len());
    for mask in &gallery.masks {
        let reduced = resize_mask_to_map(mask, mh, mw)?;
        scores.push(similarity_score(&reduced, &binarized)?);
    }
    let mut winner: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 && winner.is_none_or(|w| s > scores[w]) {
            winner = Some(i);
        }
    }
    Ok(match winner {
        Some(i) => MatchResult {
            image_id: gallery.image_id.clone(),
            scores,
            winner_index: Some(i),
            final_mask: gallery.masks[i].clone(),
            fallback_used: false,
        },
        None => MatchResult {
            image_id: gallery.image_id.clone(),
            scores,
            winner_index: None,
            final_mask: fallback_mask(map, threshold, gallery.height, gallery.width),
            fallback_used: true,
        },
    })
}

/// Result for an image without a gallery entry.
pub fn fallback_result(
    image_id: &str,
    map: &HeatMap,
    threshold: f32,
    height: usize,
    width: usize,
) -> MatchResult {
    MatchResult {
        image_id: image_id.to_string(),
        scores: Vec::new(),
        winner_index: None,
        final_mask: fallback_mask(map, threshold, height, width),
        fallback_used: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gallery(masks: Vec<BinaryMask>) -> MaskGallery {
        let (h, w) = masks.first().map(|m| m.shape()).unwrap_or((28, 28));
        MaskGallery {
            image_id: "img".into(),
            height: h,
            width: w,
            masks,
            provider: "fake".into(),
            config_hash: "h".into(),
        }
    }

    #[test]
    fn binarize_boundaries() {
        let m = HeatMap::filled(3, 3, 0.7);
        assert_eq!(binarize_map(&m, 0.5).grid.count(), 9);
        let m = HeatMap::from_fn(3, 3, |y, x| (y * 3 + x) as f32 / 8.0);
        assert_eq!(binarize_map(&m, 0.0).grid.count(), 9);
        assert_eq!(binarize_map(&m, 0.5).grid.count(), 5);
    }

    #[test]
    fn resize_full_empty_and_half_plane() {
        assert_eq!(
            resize_mask_to_map(&BinaryMask::ones(224, 224), 14, 14).unwrap(),
            BinaryMask::ones(14, 14)
        );
        assert!(resize_mask_to_map(&BinaryMask::zeros(224, 224), 14, 14)
            .unwrap()
            .is_empty());
        let half = BinaryMask::from_rect(224, 224, 0, 0, 112, 224);
        assert_eq!(
            resize_mask_to_map(&half, 14, 14).unwrap(),
            BinaryMask::from_rect(14, 14, 0, 0, 7, 14)
        );
    }

    #[test]
    fn resize_non_integral_ratio() {
        // 3 source columns onto 2 cells: cell 0 covers col 0 and half of col 1.
        let m = BinaryMask::from_vec(1, 3, vec![true, false, false]).unwrap();
        let r = resize_mask_to_map(&m, 1, 2).unwrap();
        assert_eq!(r.bits(), &[true, false]);
        let m = BinaryMask::from_vec(1, 3, vec![false, true, false]).unwrap();
        let r = resize_mask_to_map(&m, 1, 2).unwrap();
        assert_eq!(r.bits(), &[false, false]);
    }

    #[test]
    fn score_examples() {
        let a = BinaryMask::from_rect(2, 4, 0, 0, 3, 2);
        let b = BinaryMask::from_rect(2, 4, 1, 0, 4, 2);
        let bm = BinarizedMap {
            grid: b,
            threshold: 0.5,
        };
        assert_eq!(similarity_score(&a, &bm).unwrap(), 0.5);
        let same = BinarizedMap {
            grid: a.clone(),
            threshold: 0.5,
        };
        assert_eq!(similarity_score(&a, &same).unwrap(), 1.0);
        let empty = BinarizedMap {
            grid: BinaryMask::zeros(2, 4),
            threshold: 0.5,
        };
        assert_eq!(similarity_score(&BinaryMask::zeros(2, 4), &empty).unwrap(), 0.0);
        let other = BinarizedMap {
            grid: BinaryMask::zeros(3, 4),
            threshold: 0.5,
        };
        assert!(matches!(similarity_score(&a, &other), Err(Error::Input(_))));
    }

    #[test]
    fn self_match_wins() {
        let map = HeatMap::from_fn(14, 14, |y, x| {
            if (3..9).contains(&y) && (2..7).contains(&x) {
                0.9
            } else {
                0.1
            }
        });
        let target = map.threshold(0.5).resize_nearest(224, 224);
        let g = gallery(vec![
            BinaryMask::from_rect(224, 224, 100, 100, 200, 200),
            target.clone(),
            BinaryMask::ones(224, 224),
        ]);
        let r = select_mask(&g, &map, 0.5).unwrap();
        assert_eq!(r.winner_index, Some(1));
        assert_eq!(r.scores[1], 1.0);
        assert_eq!(r.final_mask, target);
        assert!(!r.fallback_used);
    }

    #[test]
    fn empty_gallery_falls_back() {
        let map = HeatMap::from_fn(4, 4, |y, _| if y < 2 { 0.8 } else { 0.2 });
        let mut g = gallery(vec![]);
        g.height = 16;
        g.width = 16;
        let r = select_mask(&g, &map, 0.5).unwrap();
        assert!(r.fallback_used);
        assert_eq!(r.winner_index, None);
        assert_eq!(r.final_mask, BinaryMask::from_rect(16, 16, 0, 0, 16, 8));
    }

    #[test]
    fn fallback_is_never_empty() {
        let map = HeatMap::from_fn(4, 4, |y, x| if (y, x) == (2, 1) { 0.3 } else { 0.1 });
        let m = fallback_mask(&map, 0.5, 8, 8);
        assert_eq!(m, BinaryMask::from_rect(8, 8, 2, 4, 4, 6));
    }

    #[test]
    fn match_result_json_round_trip() {
        let r = fallback_result("a", &HeatMap::filled(2, 2, 0.9), 0.5, 6, 4);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"runs\":[0,24]"));
        let back: MatchResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let map = HeatMap::from_fn(2, 2, |_, x| if x == 0 { 1.0 } else { 0.0 });
        let left = BinaryMask::from_rect(2, 2, 0, 0, 1, 2);
        let g = gallery(vec![BinaryMask::from_rect(2, 2, 1, 0, 2, 2), left.clone(), left]);
        let r = select_mask(&g, &map, 0.5).unwrap();
        assert_eq!(r.winner_index, Some(1));
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryMask::from_vec(h, w, bits).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_mask(6, 5), b in arb_mask(6, 5)) {
            let ab = mask_iou(&a, &b).unwrap();
            let ba = mask_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn winner_is_permutation_invariant(
            masks in proptest::collection::vec(arb_mask(7, 7), 1..8),
            vals in proptest::collection::vec(0.0f32..1.0, 49),
            seed in any::<u64>(),
        ) {
            let map = HeatMap::from_vec(7, 7, vals).unwrap();
            let g = gallery(masks.clone());
            let r = select_mask(&g, &map, 0.5).unwrap();
            let mut order: Vec<usize> = (0..masks.len()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled = gallery(order.iter().map(|&i| masks[i].clone()).collect());
            let rs = select_mask(&shuffled, &map, 0.5).unwrap();
            let best = |res: &MatchResult| res.scores.iter().cloned().fold(0.0, f64::max);
            prop_assert_eq!(best(&r), best(&rs));
            prop_assert_eq!(r.fallback_used, rs.fallback_used);
            if let (Some(a), Some(b)) = (r.winner_index, rs.winner_index) {
                prop_assert_eq!(r.scores[a], rs.scores[b]);
            }
        }

        #[test]
        fn strictly_better_mask_takes_over(
            masks in proptest::collection::vec(arb_mask(5, 5), 1..6),
            vals in proptest::collection::vec(0.0f32..1.0, 25),
        ) {
            let map = HeatMap::from_vec(5, 5, vals).unwrap();
            let target = map.threshold(0.5);
            prop_assume!(!target.is_empty());
            let r = select_mask(&gallery(masks.clone()), &map, 0.5).unwrap();
            let max = r.scores.iter().cloned().fold(0.0, f64::max);
            prop_assume!(max < 1.0);
            let mut extended = masks;
            extended.push(target);
            let r2 = select_mask(&gallery(extended.clone()), &map, 0.5).unwrap();
            prop_assert_eq!(r2.winner_index, Some(extended.len() - 1));
        }
    }
}
