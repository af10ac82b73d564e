//! ClassMix and region-level CutMix mask generation with the complementary
//! inner/outer split, plus pixel-wise image/label mixing.
//!
//! All mask generation is a pure function of its inputs and the passed RNG.

use ndarray::{Array2, Array3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{LabelMap, IGNORE};

/// Pixel selector: `true` takes the source-side pixel, `false` the target
/// side.
pub type MixMask = Array2<bool>;

/// Disjoint class sets for the outer and inner optimization steps.
///
/// When only one class is present the inner set is empty and consumers fall
/// back to a CutMix rectangle for the inner mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplementarySplit {
    pub outer_classes: Vec<u8>,
    pub inner_classes: Vec<u8>,
}

impl ComplementarySplit {
    pub fn needs_rect_fallback(&self) -> bool {
        self.inner_classes.is_empty()
    }
}

/// Randomly partition the classes present in `source_labels`; the outer set
/// receives `ceil(present / 2)` classes, the inner set the rest.
pub fn split_classes(
    source_labels: &LabelMap,
    rng: &mut ChaCha8Rng,
) -> Result<ComplementarySplit> {
    let mut present = [false; 256];
    for (_, _, y) in source_labels.non_ignored() {
        present[y as usize] = true;
    }
    let mut classes: Vec<u8> = (0..=254u8).filter(|&c| present[c as usize]).collect();
    if classes.is_empty() {
        return Err(Error::EmptySample("label map has no non-ignored pixels".into()));
    }
    classes.shuffle(rng);
    let outer_len = classes.len().div_ceil(2);
    let mut outer: Vec<u8> = classes[..outer_len].to_vec();
    let mut inner: Vec<u8> = classes[outer_len..].to_vec();
    outer.sort_unstable();
    inner.sort_unstable();
    Ok(ComplementarySplit { outer_classes: outer, inner_classes: inner })
}

/// Mask that is true exactly where the source label is in `classes`.
pub fn classmix_mask(source_labels: &LabelMap, classes: &[u8]) -> MixMask {
    source_labels.0.mapv(|y| y != IGNORE && classes.contains(&y))
}

/// A single axis-aligned rectangle of `true` with area ratio uniform in
/// `[0.25, 0.5]`, placed uniformly, fully inside the image.
pub fn cutmix_mask(height: usize, width: usize, rng: &mut ChaCha8Rng) -> MixMask {
    assert!(height >= 2 && width >= 2, "cutmix needs at least a 2x2 image");
    let ratio: f64 = 0.25 + rng.random::<f64>() * 0.25;
    let scale = ratio.sqrt();
    let rh = ((height as f64 * scale).round() as usize).clamp(1, height);
    let rw = ((width as f64 * scale).round() as usize).clamp(1, width);
    let top = rng.random_range(0..=height - rh);
    let left = rng.random_range(0..=width - rw);
    let mut mask = Array2::from_elem((height, width), false);
    mask.slice_mut(ndarray::s![top..top + rh, left..left + rw]).fill(true);
    mask
}

/// Inner/outer CutMix rectangles constrained to overlap on less than 10% of
/// the smaller rectangle. Used for binary tasks where class splitting
/// degenerates.
pub fn cutmix_pair(height: usize, width: usize, rng: &mut ChaCha8Rng) -> (MixMask, MixMask) {
    fn rect_dims(height: usize, width: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let ratio: f64 = 0.25 + rng.random::<f64>() * 0.25;
        let scale = ratio.sqrt();
        let rh = ((height as f64 * scale).round() as usize).clamp(1, height);
        let rw = ((width as f64 * scale).round() as usize).clamp(1, width);
        (rh, rw)
    }
    loop {
        let (oh, ow) = rect_dims(height, width, rng);
        let o_top = rng.random_range(0..=height - oh);
        let o_left = rng.random_range(0..=width - ow);
        let (ih, iw) = rect_dims(height, width, rng);
        let limit = 0.10 * ((oh * ow).min(ih * iw) as f64);

        // every inner placement whose rectangle overlap stays under the limit
        let mut valid = Vec::new();
        for top in 0..=height - ih {
            let dv = (top + ih).min(o_top + oh).saturating_sub(top.max(o_top));
            for left in 0..=width - iw {
                let dh = (left + iw).min(o_left + ow).saturating_sub(left.max(o_left));
                if ((dv * dh) as f64) < limit {
                    valid.push((top, left));
                }
            }
        }
        let Some(&(i_top, i_left)) = valid.as_slice().choose(rng) else {
            continue; // a large centered outer can exclude all placements
        };
        let mut outer = Array2::from_elem((height, width), false);
        outer.slice_mut(ndarray::s![o_top..o_top + oh, o_left..o_left + ow]).fill(true);
        let mut inner = Array2::from_elem((height, width), false);
        inner.slice_mut(ndarray::s![i_top..i_top + ih, i_left..i_left + iw]).fill(true);
        return (outer, inner);
    }
}

/// Pixel-wise selection: mask-true pixels from the source pair, mask-false
/// from the target pair.
pub fn mix(
    x_source: &Array3<f64>,
    x_target: &Array3<f64>,
    y_source: &LabelMap,
    y_target: &LabelMap,
    mask: &MixMask,
) -> Result<(Array3<f64>, LabelMap)> {
    let (c, h, w) = x_source.dim();
    if x_target.dim() != (c, h, w) || y_source.shape() != (h, w) || y_target.shape() != (h, w)
        || mask.dim() != (h, w)
    {
        return Err(Error::ShapeMismatch("mix inputs are not aligned".into()));
    }
    let mut image = x_target.clone();
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j]] {
                    image[[k, i, j]] = x_source[[k, i, j]];
                }
            }
        }
    }
    let mut label = y_target.0.clone();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] {
                label[[i, j]] = y_source.0[[i, j]];
            }
        }
    }
    Ok((image, LabelMap(label)))
}

/// Per-pixel loss weights for a mixed sample: source-side pixels weigh 1,
/// target-side pixels carry the target image's quality weight.
pub fn mixed_weights(mask: &MixMask, target_quality: f64) -> Array2<f64> {
    mask.mapv(|m| if m { 1.0 } else { target_quality })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn labels_of(values: Vec<u8>, h: usize, w: usize) -> LabelMap {
        LabelMap(Array2::from_shape_vec((h, w), values).unwrap())
    }

    #[test]
    fn split_partitions_present_classes() {
        let labels = labels_of(vec![0, 1, 2, 3, 0, 1, 2, 3, 0], 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = split_classes(&labels, &mut rng).unwrap();
        assert_eq!(s.outer_classes.len(), 2);
        assert_eq!(s.inner_classes.len(), 2);
        let mut all: Vec<u8> = s.outer_classes.iter().chain(&s.inner_classes).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        for c in &s.outer_classes {
            assert!(!s.inner_classes.contains(c));
        }
    }

    #[test]
    fn split_takes_ceil_half_for_odd_counts() {
        let labels = labels_of(vec![0, 1, 2, 0, 1, 2, 0, 1, 2], 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = split_classes(&labels, &mut rng).unwrap();
        assert_eq!(s.outer_classes.len(), 2);
        assert_eq!(s.inner_classes.len(), 1);
    }

    #[test]
    fn split_single_class_flags_rectangle_fallback() {
        let labels = labels_of(vec![0; 9], 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = split_classes(&labels, &mut rng).unwrap();
        assert_eq!(s.outer_classes, vec![0]);
        assert!(s.inner_classes.is_empty());
        assert!(s.needs_rect_fallback());
    }

    #[test]
    fn split_errors_on_fully_ignored_maps() {
        let labels = labels_of(vec![IGNORE; 4], 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(split_classes(&labels, &mut rng), Err(Error::EmptySample(_))));
    }

    #[test]
    fn classmix_mask_hand_cases() {
        let labels = labels_of(vec![0, 1, 2, 0], 2, 2);
        let empty = classmix_mask(&labels, &[]);
        assert!(empty.iter().all(|&v| !v));
        let all = classmix_mask(&labels, &[0, 1, 2]);
        assert!(all.iter().all(|&v| v));
        let zero_only = classmix_mask(&labels, &[0]);
        assert_eq!(
            zero_only,
            Array2::from_shape_vec((2, 2), vec![true, false, false, true]).unwrap()
        );
    }

    #[test]
    fn complementary_masks_are_disjoint_and_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let values: Vec<u8> = (0..64)
                .map(|_| {
                    if rng.random::<f64>() < 0.1 {
                        IGNORE
                    } else {
                        rng.random_range(0..5) as u8
                    }
                })
                .collect();
            if values.iter().all(|&v| v == IGNORE) {
                continue;
            }
            let labels = labels_of(values, 8, 8);
            let split = split_classes(&labels, &mut rng).unwrap();
            let outer = classmix_mask(&labels, &split.outer_classes);
            let inner = classmix_mask(&labels, &split.inner_classes);
            for ((i, j), &y) in labels.0.indexed_iter() {
                assert!(!(outer[[i, j]] && inner[[i, j]]), "masks overlap");
                if y != IGNORE {
                    assert!(outer[[i, j]] || inner[[i, j]], "uncovered labeled pixel");
                } else {
                    assert!(!outer[[i, j]] && !inner[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn cutmix_respects_area_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mask = cutmix_mask(33, 47, &mut rng);
            let area: usize = mask.iter().filter(|&&v| v).count();
            let total = 33.0 * 47.0;
            // one row/col of rounding slack on each dimension
            assert!(area as f64 >= 0.25 * total - 47.0 - 33.0, "area {area}");
            assert!(area as f64 <= 0.5 * total + 47.0 + 33.0, "area {area}");
        }
        let a = cutmix_mask(16, 16, &mut ChaCha8Rng::seed_from_u64(3));
        let b = cutmix_mask(16, 16, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn cutmix_pair_overlap_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (outer, inner) = cutmix_pair(32, 32, &mut rng);
            let oa = outer.iter().filter(|&&v| v).count();
            let ia = inner.iter().filter(|&&v| v).count();
            let ov = outer.iter().zip(inner.iter()).filter(|(&a, &b)| a && b).count();
            assert!((ov as f64) < 0.10 * oa.min(ia) as f64);
        }
    }

    #[test]
    fn mix_limits_and_interleave() {
        let x_s = Array3::from_shape_fn((2, 2, 2), |(k, i, j)| (k * 4 + i * 2 + j) as f64);
        let x_t = x_s.mapv(|v| v + 100.0);
        let y_s = labels_of(vec![0, 1, 2, 3], 2, 2);
        let y_t = labels_of(vec![3, 2, 1, 0], 2, 2);

        let all_true = Array2::from_elem((2, 2), true);
        let (img, lab) = mix(&x_s, &x_t, &y_s, &y_t, &all_true).unwrap();
        assert_eq!(img, x_s);
        assert_eq!(lab, y_s);

        let all_false = Array2::from_elem((2, 2), false);
        let (img, lab) = mix(&x_s, &x_t, &y_s, &y_t, &all_false).unwrap();
        assert_eq!(img, x_t);
        assert_eq!(lab, y_t);

        let checker = Array2::from_shape_fn((2, 2), |(i, j)| (i + j) % 2 == 0);
        let (img, lab) = mix(&x_s, &x_t, &y_s, &y_t, &checker).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let from_source = (i + j) % 2 == 0;
                for k in 0..2 {
                    let want = if from_source { x_s[[k, i, j]] } else { x_t[[k, i, j]] };
                    assert_eq!(img[[k, i, j]], want);
                }
                let want = if from_source { y_s.0[[i, j]] } else { y_t.0[[i, j]] };
                assert_eq!(lab.0[[i, j]], want);
            }
        }
    }

    #[test]
    fn mix_rejects_misaligned_shapes() {
        let x_s = Array3::zeros((2, 2, 2));
        let x_t = Array3::zeros((2, 2, 3));
        let y = labels_of(vec![0, 0, 0, 0], 2, 2);
        let mask = Array2::from_elem((2, 2), true);
        assert!(matches!(
            mix(&x_s, &x_t, &y, &y, &mask),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn remixing_with_complement_recovers_target_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_s = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>());
        let x_t = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>());
        let y_s = labels_of((0..64).map(|i| (i % 4) as u8).collect(), 8, 8);
        let y_t = labels_of((0..64).map(|i| (i % 3) as u8).collect(), 8, 8);
        let mask = cutmix_mask(8, 8, &mut rng);
        let complement = mask.mapv(|v| !v);

        let (mixed, mixed_lab) = mix(&x_s, &x_t, &y_s, &y_t, &mask).unwrap();
        // re-mix with complement and swapped operands: originally-false pixels
        // must come out pure target
        let (remixed, remixed_lab) =
            mix(&mixed, &x_t, &mixed_lab, &y_t, &complement).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if !mask[[i, j]] {
                    for k in 0..3 {
                        assert_eq!(remixed[[k, i, j]], x_t[[k, i, j]]);
                    }
                    assert_eq!(remixed_lab.0[[i, j]], y_t.0[[i, j]]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn prop_split_is_a_partition(seed in 0u64..1000, class_bits in 1u8..31) {
            let mut values = Vec::new();
            for c in 0..5u8 {
                if class_bits & (1 << c) != 0 {
                    values.extend(std::iter::repeat_n(c, 3));
                }
            }
            while values.len() < 16 {
                values.push(IGNORE);
            }
            let labels = labels_of(values.clone(), 4, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = split_classes(&labels, &mut rng).unwrap();
            let present: std::collections::BTreeSet<u8> =
                values.iter().copied().filter(|&v| v != IGNORE).collect();
            let mut joined: Vec<u8> =
                s.outer_classes.iter().chain(&s.inner_classes).copied().collect();
            joined.sort_unstable();
            prop_assert_eq!(joined, present.iter().copied().collect::<Vec<u8>>());
            prop_assert_eq!(s.outer_classes.len(), present.len().div_ceil(2));
        }
    }
}
