//! Dice similarity metrics over integer class masks.
//!
//! Absent-class convention, applied uniformly: a class present in
//! neither mask contributes nothing to any average; a class present in
//! exactly one mask scores zero. Aggregation is macro style, per-class
//! means first, unweighted mean across classes second.

use crate::tensor::ClassMask;
use crate::{Error, Result};

/// Per-class and averaged Dice scores over a set of images.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Indexed by class id; `None` when the class appeared in no mask.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean of the present per-class scores.
    pub mean_dsc: f64,
    pub n_images: usize,
}

/// Dice coefficient of one class between two same-shape masks:
/// `2 |pred ∩ gt| / (|pred| + |gt|)`, `None` when the class appears in
/// neither mask.
pub fn dice_per_class(pred: &ClassMask, gt: &ClassMask, class: usize) -> Result<Option<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "dice_per_class",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut both, mut in_pred, mut in_gt) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize == class, g as usize == class);
        in_pred += p as u64;
        in_gt += g as u64;
        both += (p && g) as u64;
    }
    if in_pred + in_gt == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (in_pred + in_gt) as f64))
}

/// Mean Dice over the classes present in either mask of one image;
/// `None` for empty masks. This is the per-image score that paired
/// statistical comparisons rank.
pub fn image_mean_dsc(pred: &ClassMask, gt: &ClassMask, classes: usize) -> Result<Option<f64>> {
    let (mut sum, mut present) = (0.0, 0usize);
    for class in 0..classes {
        if let Some(d) = dice_per_class(pred, gt, class)? {
            sum += d;
            present += 1;
        }
    }
    Ok((present > 0).then(|| sum / present as f64))
}

/// Aggregates Dice over many images: per-class scores average only the
/// images where the class occurs, and classes seen nowhere stay absent.
pub fn aggregate_dsc<'a, I>(pairs: I, classes: usize) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a ClassMask, &'a ClassMask)>,
{
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    let mut n_images = 0usize;
    for (pred, gt) in pairs {
        n_images += 1;
        for class in 0..classes {
            if let Some(d) = dice_per_class(pred, gt, class)? {
                sums[class] += d;
                counts[class] += 1;
            }
        }
    }
    if n_images == 0 {
        return Err(Error::argument("aggregate_dsc", "no images"));
    }
    let per_class: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::argument("aggregate_dsc", "every mask is empty"));
    }
    Ok(EvalReport {
        per_class,
        mean_dsc: present.iter().sum::<f64>() / present.len() as f64,
        n_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, data: &[u8]) -> ClassMask {
        ClassMask::new(&[h, w], data.to_vec()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> ClassMask {
        ClassMask::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()
    }

    /// Coordinate-set oracle: Dice from explicit pixel index sets.
    fn dice_oracle(pred: &ClassMask, gt: &ClassMask, class: usize) -> Option<f64> {
        let set = |m: &ClassMask| -> std::collections::BTreeSet<usize> {
            m.data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v as usize == class)
                .map(|(i, _)| i)
                .collect()
        };
        let (a, b) = (set(pred), set(gt));
        if a.is_empty() && b.is_empty() {
            return None;
        }
        Some(2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64)
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(2, 3, &[0, 1, 1, 2, 0, 1]);
        for class in 0..3 {
            assert_eq!(dice_per_class(&m, &m, class).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn disjoint_equal_regions_score_zero() {
        let a = mask(2, 2, &[1, 1, 0, 0]);
        let b = mask(2, 2, &[0, 0, 1, 1]);
        assert_eq!(dice_per_class(&a, &b, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn half_overlap_with_equal_areas_scores_half() {
        // gt has 4 pixels of class 1; pred covers 2 of them and spends
        // its other 2 pixels elsewhere: 2*2 / (4+4).
        let gt = mask(2, 4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let pred = mask(2, 4, &[1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(dice_per_class(&pred, &gt, 1).unwrap(), Some(0.5));
    }

    #[test]
    fn class_in_neither_mask_is_absent() {
        let m = mask(1, 4, &[0, 0, 1, 1]);
        assert_eq!(dice_per_class(&m, &m, 3).unwrap(), None);
    }

    #[test]
    fn class_in_one_mask_scores_zero() {
        let a = mask(1, 4, &[2, 0, 0, 0]);
        let b = mask(1, 4, &[0, 0, 0, 0]);
        assert_eq!(dice_per_class(&a, &b, 2).unwrap(), Some(0.0));
        assert_eq!(dice_per_class(&b, &a, 2).unwrap(), Some(0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = mask(1, 4, &[0; 4]);
        let b = mask(2, 2, &[0; 4]);
        assert!(dice_per_class(&a, &b, 0).is_err());
    }

    #[test]
    fn matches_coordinate_set_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let a = random_mask(&mut rng, 5, 7, 4);
            let b = random_mask(&mut rng, 5, 7, 4);
            for class in 0..5 {
                let got = dice_per_class(&a, &b, class).unwrap();
                assert_eq!(got, dice_oracle(&a, &b, class));
                assert_eq!(got, dice_per_class(&b, &a, class).unwrap());
            }
        }
    }

    #[test]
    fn integer_upsampling_both_masks_preserves_scores() {
        let upsample = |m: &ClassMask, f: usize| -> ClassMask {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            ClassMask::new(
                &[h * f, w * f],
                (0..h * f * w * f)
                    .map(|i| {
                        let (r, c) = (i / (w * f) / f, i % (w * f) / f);
                        m.data()[r * w + c]
                    })
                    .collect(),
            )
            .unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mask(&mut rng, 4, 6, 3);
        let b = random_mask(&mut rng, 4, 6, 3);
        for class in 0..3 {
            assert_eq!(
                dice_per_class(&a, &b, class).unwrap(),
                dice_per_class(&upsample(&a, 3), &upsample(&b, 3), class).unwrap()
            );
        }
    }

    #[test]
    fn perfect_single_image_aggregates_to_one() {
        let m = mask(2, 3, &[0, 1, 2, 0, 1, 2]);
        let report = aggregate_dsc([(&m, &m)], 4).unwrap();
        assert_eq!(report.per_class[..3], [Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(report.per_class[3], None);
        assert_eq!(report.mean_dsc, 1.0);
        assert_eq!(report.n_images, 1);
    }

    #[test]
    fn per_class_mean_skips_images_without_the_class() {
        // Image 1 scores 1.0 on class 1; image 2 scores 0.5; image 3
        // lacks class 1 entirely and must not dilute the average.
        let gt1 = mask(1, 4, &[1, 1, 0, 0]);
        let gt2 = mask(1, 4, &[1, 1, 1, 1]);
        let pred2 = mask(1, 4, &[1, 1, 0, 0]);
        let blank = mask(1, 4, &[0; 4]);
        let pairs = [(&gt1, &gt1), (&pred2, &gt2), (&blank, &blank)];
        let report = aggregate_dsc(pairs, 2).unwrap();
        // pred2 vs gt2 on class 1: 2*2/(2+4) = 2/3.
        assert!((report.per_class[1].unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_image_average_is_arithmetic_mean() {
        // Class 1 scores 1.0 on the first image and 0.5 on the second.
        let gt_a = mask(1, 4, &[1, 1, 1, 1]);
        let gt_b = mask(2, 4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let pred_b = mask(2, 4, &[1, 1, 0, 0, 1, 1, 0, 0]);
        let report = aggregate_dsc([(&gt_a, &gt_a), (&pred_b, &gt_b)], 2).unwrap();
        assert!((report.per_class[1].unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images: Vec<(ClassMask, ClassMask)> = (0..6)
            .map(|_| (random_mask(&mut rng, 3, 3, 3), random_mask(&mut rng, 3, 3, 3)))
            .collect();
        let forward = aggregate_dsc(images.iter().map(|(a, b)| (a, b)), 3).unwrap();
        let backward = aggregate_dsc(images.iter().rev().map(|(a, b)| (a, b)), 3).unwrap();
        assert_eq!(forward.per_class, backward.per_class);
        assert_eq!(forward.mean_dsc, backward.mean_dsc);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(aggregate_dsc(std::iter::empty(), 3).is_err());
    }

    #[test]
    fn image_mean_covers_present_classes_only() {
        let pred = mask(1, 4, &[1, 1, 0, 0]);
        let gt = mask(1, 4, &[1, 0, 0, 0]);
        // class 0: 2*2/(2+3) = 0.8; class 1: 2*1/(2+1) = 2/3; class 2 absent.
        let got = image_mean_dsc(&pred, &gt, 3).unwrap().unwrap();
        assert!((got - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
