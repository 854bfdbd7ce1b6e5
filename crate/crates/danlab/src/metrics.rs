//! Volumetric segmentation metrics.
//!
//! Everything is defined on voxel centers with face adjacency and exact
//! integer squared distances, so every value here is reproducible to the
//! bit and checkable against brute-force reference implementations. Dice
//! rates overlap; the boundary metrics (average distance of boundaries,
//! Hausdorff) rate contours; the composite score folds all three into a
//! single higher-is-better number.

use crate::data::LabelVolume;
use crate::{Error, Result};

fn check_pair(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "metric needs equal shapes, got {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let classes = pred.classes().min(truth.classes());
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    Ok(())
}

/// Dice overlap for one class: `2|P∩T| / (|P|+|T|)`. Two empty sets agree
/// perfectly and score 1.0; an empty set against a nonempty one scores 0.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<f64> {
    check_pair(pred, truth, class)?;
    let c = class as u8;
    let mut p = 0usize;
    let mut t = 0usize;
    let mut both = 0usize;
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let in_p = *a == c;
        let in_t = *b == c;
        p += in_p as usize;
        t += in_t as usize;
        both += (in_p && in_t) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Voxels of `class` that touch anything else: a face-adjacent neighbor
/// (4-neighborhood in 2D, 6 in 3D) of a different class, or the volume
/// border. Returned as integer coordinates in scan order.
pub fn boundary_voxels(labels: &LabelVolume, class: usize) -> Result<Vec<Vec<usize>>> {
    if class >= labels.classes() {
        return Err(Error::LabelOutOfRange { label: class, classes: labels.classes() });
    }
    let shape = labels.shape();
    let rank = shape.len();
    let data = labels.data();
    let c = class as u8;
    let mut strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut out = Vec::new();
    let mut coords = vec![0usize; rank];
    for (v, &label) in data.iter().enumerate() {
        if label == c {
            let mut on_boundary = false;
            for d in 0..rank {
                if coords[d] == 0 || coords[d] == shape[d] - 1 {
                    on_boundary = true;
                    break;
                }
                if data[v - strides[d]] != c || data[v + strides[d]] != c {
                    on_boundary = true;
                    break;
                }
            }
            if on_boundary {
                out.push(coords.clone());
            }
        }
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Ok(out)
}

fn squared_distance(a: &[usize], b: &[usize]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum()
}

/// For each source point, the exact Euclidean distance to its nearest
/// target point (minimum taken over integer squared distances, square
/// root last).
fn nearest_distances(source: &[Vec<usize>], target: &[Vec<usize>]) -> Vec<f64> {
    source
        .iter()
        .map(|s| {
            let min2 = target.iter().map(|t| squared_distance(s, t)).min().expect("nonempty");
            (min2 as f64).sqrt()
        })
        .collect()
}

fn boundaries_for(
    pred: &LabelVolume,
    truth: &LabelVolume,
    class: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    check_pair(pred, truth, class)?;
    let pb = boundary_voxels(pred, class)?;
    let tb = boundary_voxels(truth, class)?;
    if pb.is_empty() {
        return Err(Error::EmptyBoundary { class, side: "prediction" });
    }
    if tb.is_empty() {
        return Err(Error::EmptyBoundary { class, side: "truth" });
    }
    Ok((pb, tb))
}

/// Average distance of boundaries, symmetric: the mean nearest-neighbor
/// distance from prediction boundary to truth boundary, averaged with
/// the reverse direction. Undefined (an error, never 0) when either
/// boundary is empty.
pub fn avg_boundary_distance(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<f64> {
    let (pb, tb) = boundaries_for(pred, truth, class)?;
    let pt = nearest_distances(&pb, &tb);
    let tp = nearest_distances(&tb, &pb);
    let mean_pt = pt.iter().sum::<f64>() / pt.len() as f64;
    let mean_tp = tp.iter().sum::<f64>() / tp.len() as f64;
    Ok((mean_pt + mean_tp) / 2.0)
}

/// Hausdorff distance between the two boundaries: the larger of the two
/// directed maximum nearest-neighbor distances. Same emptiness rules as
/// [`avg_boundary_distance`].
pub fn hausdorff(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<f64> {
    let (pb, tb) = boundaries_for(pred, truth, class)?;
    let pt = nearest_distances(&pb, &tb);
    let tp = nearest_distances(&tb, &pb);
    let directed_pt = pt.iter().cloned().fold(0.0f64, f64::max);
    let directed_tp = tp.iter().cloned().fold(0.0f64, f64::max);
    Ok(directed_pt.max(directed_tp))
}

/// Default weight of the normalized ADB penalty in the composite score.
pub const COMPOSITE_W1: f64 = 0.5;
/// Default weight of the normalized Hausdorff penalty.
pub const COMPOSITE_W2: f64 = 0.5;

/// Fold per-class metrics into one number: the mean over classes of
/// `dice − w1·adb/diag − w2·hdd/diag`, where `diag` is the volume
/// diagonal in voxels. Higher is better; a perfect prediction scores 1.
/// This is this repository's own reporting convention, applied
/// consistently to every comparison.
pub fn composite_score(
    dice: &[f64],
    adb: &[f64],
    hdd: &[f64],
    shape: &[usize],
    w1: f64,
    w2: f64,
) -> Result<f64> {
    if dice.is_empty() || dice.len() != adb.len() || dice.len() != hdd.len() {
        return Err(Error::InvalidArgument(format!(
            "per-class metric lists must align and be nonempty: {} dice, {} adb, {} hdd",
            dice.len(),
            adb.len(),
            hdd.len()
        )));
    }
    if shape.is_empty() {
        return Err(Error::ShapeMismatch("composite score needs the volume shape".into()));
    }
    let diag = shape.iter().map(|&s| (s * s) as f64).sum::<f64>().sqrt();
    let mut acc = 0.0;
    for i in 0..dice.len() {
        acc += dice[i] - w1 * adb[i] / diag - w2 * hdd[i] / diag;
    }
    Ok(acc / dice.len() as f64)
}

/// Metrics of one class in a full evaluation.
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub adb: f64,
    pub hdd: f64,
}

/// Per-class metrics plus the composite, for every non-background class.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub composite: f64,
}

/// Evaluate a prediction against the truth over all non-background
/// classes (class 0 is background by convention). Boundary-metric errors
/// (a class missing entirely from one side) propagate: an undefined
/// distance never silently becomes a number.
pub fn evaluate_volumes(pred: &LabelVolume, truth: &LabelVolume) -> Result<EvalReport> {
    let classes = truth.classes();
    let mut per_class = Vec::new();
    for c in 1..classes {
        per_class.push(ClassMetrics {
            class: c,
            dice: dice(pred, truth, c)?,
            adb: avg_boundary_distance(pred, truth, c)?,
            hdd: hausdorff(pred, truth, c)?,
        });
    }
    let d: Vec<f64> = per_class.iter().map(|m| m.dice).collect();
    let a: Vec<f64> = per_class.iter().map(|m| m.adb).collect();
    let h: Vec<f64> = per_class.iter().map(|m| m.hdd).collect();
    let composite = composite_score(&d, &a, &h, truth.shape(), COMPOSITE_W1, COMPOSITE_W2)?;
    Ok(EvalReport { per_class, composite })
}

/// Mean Dice over all non-background classes — the cheap score used for
/// validation tracking during training (no boundary extraction).
pub fn mean_foreground_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    let classes = truth.classes();
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least one foreground class".into()));
    }
    let mut acc = 0.0;
    for c in 1..classes {
        acc += dice(pred, truth, c)?;
    }
    Ok(acc / (classes - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use proptest::prelude::*;

    fn vol(shape: &[usize], classes: usize, data: Vec<u8>) -> LabelVolume {
        LabelVolume::from_parts(shape.to_vec(), classes, data).unwrap()
    }

    /// 20×20 volume with class 1 on rows `rows`.
    fn rows_vol(rows: std::ops::Range<usize>) -> LabelVolume {
        let mut data = vec![0u8; 400];
        for r in rows {
            for c in 0..20 {
                data[r * 20 + c] = 1;
            }
        }
        vol(&[20, 20], 2, data)
    }

    #[test]
    fn dice_trivial_cases() {
        let a = rows_vol(0..5);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = rows_vol(10..15);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // Both empty: agreement on absence.
        assert_eq!(dice(&a, &b, 0).is_ok(), true);
        let empty = vol(&[4], 3, vec![0, 0, 0, 0]);
        assert_eq!(dice(&empty, &empty, 2).unwrap(), 1.0);
        let one = vol(&[4], 3, vec![0, 2, 0, 0]);
        assert_eq!(dice(&empty, &one, 2).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap_is_half() {
        // |P| = |T| = 100, overlap 50 (spans of the flat scan).
        let mut p = vec![0u8; 400];
        let mut t = vec![0u8; 400];
        p[0..100].fill(1);
        t[50..150].fill(1);
        let p = vol(&[20, 20], 2, p);
        let t = vol(&[20, 20], 2, t);
        assert_eq!(dice(&p, &t, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_rejects_bad_inputs() {
        let a = rows_vol(0..5);
        let b = vol(&[4], 2, vec![0; 4]);
        assert!(dice(&a, &b, 1).is_err());
        assert!(dice(&a, &a, 2).is_err());
    }

    #[test]
    fn full_volume_boundary_is_the_border() {
        let a = vol(&[4, 4], 2, vec![1; 16]);
        let b = boundary_voxels(&a, 1).unwrap();
        assert_eq!(b.len(), 12); // all but the inner 2×2
        assert!(!b.contains(&vec![1, 1]));
        assert!(b.contains(&vec![0, 0]));
        assert!(b.contains(&vec![3, 2]));
    }

    #[test]
    fn isolated_voxel_is_its_own_boundary() {
        let mut data = vec![0u8; 49];
        data[3 * 7 + 4] = 1;
        let a = vol(&[7, 7], 2, data);
        assert_eq!(boundary_voxels(&a, 1).unwrap(), vec![vec![3, 4]]);
    }

    #[test]
    fn square_boundary_is_its_perimeter() {
        // 5×5 square of class 1 centered in a 9×9 grid.
        let mut data = vec![0u8; 81];
        for r in 2..7 {
            for c in 2..7 {
                data[r * 9 + c] = 1;
            }
        }
        let a = vol(&[9, 9], 2, data);
        let b = boundary_voxels(&a, 1).unwrap();
        assert_eq!(b.len(), 16);
        for coords in &b {
            let on_edge = coords[0] == 2 || coords[0] == 6 || coords[1] == 2 || coords[1] == 6;
            assert!(on_edge, "interior voxel {coords:?} flagged");
        }
    }

    #[test]
    fn identical_volumes_have_zero_distances() {
        let a = rows_vol(3..6);
        assert_eq!(avg_boundary_distance(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn parallel_lines_three_apart_measure_three() {
        let mut p = vec![0u8; 100];
        let mut t = vec![0u8; 100];
        for c in 2..8 {
            p[2 * 10 + c] = 1;
            t[5 * 10 + c] = 1;
        }
        let p = vol(&[10, 10], 2, p);
        let t = vol(&[10, 10], 2, t);
        assert_eq!(avg_boundary_distance(&p, &t, 1).unwrap(), 3.0);
        assert_eq!(hausdorff(&p, &t, 1).unwrap(), 3.0);
    }

    #[test]
    fn single_voxels_measure_pythagoras() {
        let mut p = vec![0u8; 64];
        let mut t = vec![0u8; 64];
        p[0] = 1; // (0,0)
        t[3 * 8 + 4] = 1; // (3,4)
        let p = vol(&[8, 8], 2, p);
        let t = vol(&[8, 8], 2, t);
        assert_eq!(hausdorff(&p, &t, 1).unwrap(), 5.0);
        assert_eq!(avg_boundary_distance(&p, &t, 1).unwrap(), 5.0);
    }

    #[test]
    fn shifted_square_matches_brute_force_oracle() {
        let mut p = vec![0u8; 144];
        let mut t = vec![0u8; 144];
        for r in 3..8 {
            for c in 3..8 {
                p[r * 12 + c] = 1;
                t[(r + 1) * 12 + c] = 1;
            }
        }
        let p = vol(&[12, 12], 2, p);
        let t = vol(&[12, 12], 2, t);
        let adb = avg_boundary_distance(&p, &t, 1).unwrap();
        let hdd = hausdorff(&p, &t, 1).unwrap();
        assert_eq!(adb, oracles::adb_brute_force(&p, &t, 1).unwrap());
        assert_eq!(hdd, oracles::hausdorff_brute_force(&p, &t, 1).unwrap());
        assert!(adb > 0.0 && hdd >= adb);
    }

    #[test]
    fn empty_boundaries_are_errors_not_zero() {
        let empty = vol(&[6, 6], 2, vec![0; 36]);
        let some = rows_vol(0..2);
        let shaped = vol(&[20, 20], 2, vec![0; 400]);
        match avg_boundary_distance(&shaped, &some, 1) {
            Err(Error::EmptyBoundary { class: 1, side: "prediction" }) => {}
            other => panic!("expected empty prediction boundary, got {other:?}"),
        }
        match hausdorff(&some, &shaped, 1) {
            Err(Error::EmptyBoundary { class: 1, side: "truth" }) => {}
            other => panic!("expected empty truth boundary, got {other:?}"),
        }
        assert!(avg_boundary_distance(&empty, &empty, 1).is_err());
    }

    #[test]
    fn composite_score_arithmetic() {
        // Perfect prediction scores exactly 1.
        assert_eq!(
            composite_score(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[20, 20], 0.5, 0.5).unwrap(),
            1.0
        );
        // Dice 0.8, ADB/diag 0.1, HDD/diag 0.2 → 0.8 − 0.05 − 0.1.
        let diag = (800f64).sqrt();
        let got =
            composite_score(&[0.8], &[0.1 * diag], &[0.2 * diag], &[20, 20], 0.5, 0.5).unwrap();
        assert!((got - 0.65).abs() < 1e-12);
        assert!(composite_score(&[0.8], &[0.1], &[], &[20, 20], 0.5, 0.5).is_err());
    }

    #[test]
    fn improving_hausdorff_strictly_improves_score() {
        let mut prev = f64::NEG_INFINITY;
        for hdd in [8.0, 4.0, 2.0, 1.0, 0.0] {
            let s = composite_score(&[0.7], &[1.0], &[hdd], &[16, 16], 0.5, 0.5).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn evaluation_report_covers_foreground_classes() {
        let spec = crate::data::SyntheticSpec { count: 1, ..Default::default() };
        let sample = &crate::data::generate(&spec).unwrap()[0];
        let report = evaluate_volumes(&sample.labels, &sample.labels).unwrap();
        assert_eq!(report.per_class.len(), 2);
        for m in &report.per_class {
            assert_eq!(m.dice, 1.0);
            assert_eq!(m.adb, 0.0);
            assert_eq!(m.hdd, 0.0);
        }
        assert_eq!(report.composite, 1.0);
        assert_eq!(mean_foreground_dice(&sample.labels, &sample.labels).unwrap(), 1.0);
    }

    /// Random 2-class mask of a given shape with ≥ 1 class-1 voxel.
    fn mask_with(h: usize, w: usize) -> impl Strategy<Value = LabelVolume> {
        (prop::collection::vec(0u8..2, h * w), 0..h * w).prop_map(move |(mut data, k)| {
            data[k] = 1;
            LabelVolume::from_parts(vec![h, w], 2, data).unwrap()
        })
    }

    fn mask_pair(max: usize) -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
        (2..=max, 2..=max).prop_flat_map(|(h, w)| (mask_with(h, w), mask_with(h, w)))
    }

    fn mask_triple(max: usize) -> impl Strategy<Value = (LabelVolume, LabelVolume, LabelVolume)> {
        (2..=max, 2..=max)
            .prop_flat_map(|(h, w)| (mask_with(h, w), mask_with(h, w), mask_with(h, w)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn distances_match_the_all_pairs_oracle_exactly((p, t) in mask_pair(20)) {
            let adb = avg_boundary_distance(&p, &t, 1).unwrap();
            let hdd = hausdorff(&p, &t, 1).unwrap();
            prop_assert_eq!(adb, oracles::adb_brute_force(&p, &t, 1).unwrap());
            prop_assert_eq!(hdd, oracles::hausdorff_brute_force(&p, &t, 1).unwrap());
            // Symmetry and ordering.
            prop_assert_eq!(hdd, hausdorff(&t, &p, 1).unwrap());
            let adb_rev = avg_boundary_distance(&t, &p, 1).unwrap();
            prop_assert_eq!(adb, adb_rev);
            prop_assert!(hdd >= adb - 1e-12);
        }

        #[test]
        fn dice_is_symmetric_bounded_and_reflexive((p, t) in mask_pair(14)) {
            let d = dice(&p, &t, 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&t, &p, 1).unwrap());
            prop_assert_eq!(dice(&p, &p, 1).unwrap(), 1.0);
        }

        #[test]
        fn hausdorff_triangle_inequality((a, b, c) in mask_triple(12)) {
            let ab = hausdorff(&a, &b, 1).unwrap();
            let bc = hausdorff(&b, &c, 1).unwrap();
            let ac = hausdorff(&a, &c, 1).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9, "{} > {} + {}", ac, ab, bc);
        }
    }

    #[test]
    fn three_dimensional_boundaries_use_six_neighbors() {
        // 3×3×3 cube of class 1 inside 5×5×5: every cube voxel except the
        // single center voxel touches a different class.
        let mut data = vec![0u8; 125];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    data[(z * 5 + y) * 5 + x] = 1;
                }
            }
        }
        let a = vol(&[5, 5, 5], 2, data);
        let b = boundary_voxels(&a, 1).unwrap();
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&vec![2, 2, 2]));
    }
}
