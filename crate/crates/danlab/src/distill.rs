//! Pseudo-label distillation: data distillation (one model, many
//! geometric views), model distillation (many models, one view), and
//! their hierarchical combination (views inside, models outside).
//!
//! All aggregation is hard voting by default — each prediction is
//! hardened to labels before the vote, at both stages — with mean
//! probability aggregation available behind a flag. Ties always break to
//! the smallest class index.

use crate::autodiff::Tensor;
use crate::data::LabelVolume;
use crate::metrics;
use crate::{Error, Result, Scalar};

/// Mirror flip accompanying a rotation, named by in-plane axis (the
/// volume's last two axes form the transform plane).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    /// Reverse the first in-plane axis (rows of the plane).
    First,
    /// Reverse the second in-plane axis (columns of the plane).
    Second,
}

/// A quarter-turn rotation plus an optional flip, acting on the last two
/// axes of a volume (2D: the whole image; 3D: each slice of the leading
/// axis, i.e. rotation about axis 0). Applied as rotate-then-flip.
///
/// The default list of 12 is the full product of 4 rotations and 3 flip
/// choices. As maps these overlap (a flipped rotation equals another
/// rotation of the other flip), which simply gives some orientations two
/// votes; the list, not the set, is what the distillation recipe
/// enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricTransform {
    rotation: u8,
    flip: Flip,
}

impl GeometricTransform {
    /// `rotation` counts 90° quarter turns, 0..=3.
    pub fn new(rotation: u8, flip: Flip) -> Result<Self> {
        if rotation > 3 {
            return Err(Error::InvalidArgument(format!(
                "rotation must be 0..=3 quarter turns, got {rotation}"
            )));
        }
        Ok(GeometricTransform { rotation, flip })
    }

    pub fn identity() -> Self {
        GeometricTransform { rotation: 0, flip: Flip::None }
    }

    /// The full 4 × 3 product, identity first.
    pub fn all12() -> Vec<Self> {
        let mut out = Vec::with_capacity(12);
        for flip in [Flip::None, Flip::First, Flip::Second] {
            for rotation in 0..4u8 {
                out.push(GeometricTransform { rotation, flip });
            }
        }
        out
    }

    pub fn rotation(&self) -> u8 {
        self.rotation
    }

    pub fn flip(&self) -> Flip {
        self.flip
    }

    /// Short stable name for manifests, e.g. `r90`, `r180_f0`.
    pub fn name(&self) -> String {
        let rot = format!("r{}", self.rotation as usize * 90);
        match self.flip {
            Flip::None => rot,
            Flip::First => format!("{rot}_f0"),
            Flip::Second => format!("{rot}_f1"),
        }
    }

    /// The inverse map. A pure rotation inverts to the complementary
    /// rotation; any rotate-then-flip is a reflection of the plane and
    /// therefore its own inverse.
    pub fn inverse(&self) -> Self {
        match self.flip {
            Flip::None => GeometricTransform { rotation: (4 - self.rotation) % 4, flip: Flip::None },
            _ => *self,
        }
    }

    fn transformed_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "geometric transforms need at least 2 axes, got {shape:?}"
            )));
        }
        let (a, b) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if self.rotation % 2 == 1 && a != b {
            return Err(Error::ShapeMismatch(format!(
                "90° rotations need square in-plane dims, got {a}×{b}"
            )));
        }
        let mut out = shape.to_vec();
        if self.rotation % 2 == 1 {
            let n = out.len();
            out.swap(n - 2, n - 1);
        }
        Ok(out)
    }

    /// Transform raw row-major data over the last two axes.
    fn apply_raw<T: Copy>(&self, data: &[T], shape: &[usize]) -> Result<(Vec<T>, Vec<usize>)> {
        let out_shape = self.transformed_shape(shape)?;
        let rank = shape.len();
        let (a, b) = (shape[rank - 2], shape[rank - 1]);
        let (oa, ob) = (out_shape[rank - 2], out_shape[rank - 1]);
        let outer: usize = shape[..rank - 2].iter().product();
        let plane = a * b;
        let mut out = Vec::with_capacity(data.len());
        for block in 0..outer {
            let src = &data[block * plane..(block + 1) * plane];
            // Rotate: rotated[i][j] over (ra, rb) = (oa, ob).
            let rot_at = |i: usize, j: usize| -> T {
                match self.rotation {
                    0 => src[i * b + j],
                    1 => src[j * b + (b - 1 - i)],
                    2 => src[(a - 1 - i) * b + (b - 1 - j)],
                    _ => src[(a - 1 - j) * b + i],
                }
            };
            for i in 0..oa {
                for j in 0..ob {
                    let (si, sj) = match self.flip {
                        Flip::None => (i, j),
                        Flip::First => (oa - 1 - i, j),
                        Flip::Second => (i, ob - 1 - j),
                    };
                    out.push(rot_at(si, sj));
                }
            }
        }
        Ok((out, out_shape))
    }

    pub fn apply_tensor<F: Scalar>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (data, shape) = self.apply_raw(x.data(), x.shape())?;
        Tensor::new(shape, data)
    }

    pub fn apply_labels(&self, labels: &LabelVolume) -> Result<LabelVolume> {
        let (data, shape) = self.apply_raw(labels.data(), labels.shape())?;
        LabelVolume::from_parts(shape, labels.classes(), data)
    }
}

/// Anything that can score a raw intensity volume (spatial dims only)
/// into per-class probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;

    /// Class probabilities, shape `[C, spatial…]`.
    fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Hard labels via channel argmax (first index wins ties).
    fn predict_hard(&self, x: &Tensor<f32>) -> Result<LabelVolume> {
        let probs = self.predict_probs(x)?;
        harden(&probs, self.num_classes())
    }
}

/// Argmax per voxel over the leading class axis, first index on ties.
pub fn harden<F: Scalar>(probs: &Tensor<F>, classes: usize) -> Result<LabelVolume> {
    let shape = probs.shape();
    if shape.is_empty() || shape[0] != classes {
        return Err(Error::ShapeMismatch(format!(
            "probabilities must be [C={classes}, spatial…], got {shape:?}"
        )));
    }
    if classes > 256 {
        return Err(Error::InvalidArgument(format!("{classes} classes exceed label range")));
    }
    let spatial = shape[1..].to_vec();
    let sp_len: usize = spatial.iter().product();
    let data = probs.data();
    let mut labels = Vec::with_capacity(sp_len);
    for v in 0..sp_len {
        let mut best = 0u8;
        let mut best_v = data[v];
        for c in 1..classes {
            let x = data[c * sp_len + v];
            if x > best_v {
                best_v = x;
                best = c as u8;
            }
        }
        labels.push(best);
    }
    LabelVolume::from_parts(spatial, classes.max(2), labels)
}

/// A committee of trained predictors with stable identifiers.
pub struct TeacherSet<'a> {
    members: Vec<(&'a dyn Predictor, String)>,
}

impl<'a> TeacherSet<'a> {
    pub fn new(members: Vec<(&'a dyn Predictor, String)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("a teacher set needs at least one member".into()));
        }
        let classes = members[0].0.num_classes();
        if members.iter().any(|(m, _)| m.num_classes() != classes) {
            return Err(Error::InvalidArgument("teachers disagree on the class count".into()));
        }
        Ok(TeacherSet { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees ≥ 1
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].0.num_classes()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&dyn Predictor, &str)> {
        self.members.iter().map(|(m, id)| (*m, id.as_str()))
    }
}

/// How multiple predictions are folded into one label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Harden every prediction, then take the per-voxel majority.
    #[default]
    HardVote,
    /// Average probability maps, then harden once.
    MeanProbability,
}

/// Per-voxel majority over equal-shaped label maps; ties break to the
/// smallest class index.
pub fn vote(maps: &[LabelVolume]) -> Result<LabelVolume> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("vote needs at least one label map".into()))?;
    if maps
        .iter()
        .any(|m| m.shape() != first.shape() || m.classes() != first.classes())
    {
        return Err(Error::ShapeMismatch("vote inputs must share shape and class count".into()));
    }
    let classes = first.classes();
    let mut counts = vec![0u32; classes];
    let mut out = Vec::with_capacity(first.numel());
    for v in 0..first.numel() {
        counts.fill(0);
        for m in maps {
            counts[m.data()[v] as usize] += 1;
        }
        let mut best = 0usize;
        for c in 1..classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        out.push(best as u8);
    }
    LabelVolume::from_parts(first.shape().to_vec(), classes, out)
}

/// Mean of a model's inverse-transformed probability maps over all
/// transforms (the soft inner stage shared by data and hierarchical
/// distillation).
fn mean_transformed_probs<P: Predictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    transforms: &[GeometricTransform],
) -> Result<Tensor<f32>> {
    let mut acc: Option<Tensor<f32>> = None;
    for t in transforms {
        let tx = t.apply_tensor(x)?;
        let probs = model.predict_probs(&tx)?;
        let back = t.inverse().apply_tensor(&probs)?;
        acc = Some(match acc {
            None => back,
            Some(mut a) => {
                if a.shape() != back.shape() {
                    return Err(Error::ShapeMismatch(
                        "transforms produced mismatched probability maps".into(),
                    ));
                }
                for (slot, v) in a.data_mut().iter_mut().zip(back.data()) {
                    *slot += *v;
                }
                a
            }
        });
    }
    let mut mean = acc.expect("transforms validated nonempty");
    let k = transforms.len() as f32;
    for v in mean.data_mut() {
        *v /= k;
    }
    Ok(mean)
}

/// Data distillation: predict on every geometric view, map each
/// prediction back through the inverse transform, and aggregate.
pub fn data_distill<P: Predictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    transforms: &[GeometricTransform],
    aggregation: Aggregation,
) -> Result<LabelVolume> {
    if transforms.is_empty() {
        return Err(Error::InvalidArgument("data distillation needs at least one transform".into()));
    }
    match aggregation {
        Aggregation::HardVote => {
            let mut maps = Vec::with_capacity(transforms.len());
            for t in transforms {
                let tx = t.apply_tensor(x)?;
                let hard = model.predict_hard(&tx)?;
                maps.push(t.inverse().apply_labels(&hard)?);
            }
            vote(&maps)
        }
        Aggregation::MeanProbability => {
            let mean = mean_transformed_probs(model, x, transforms)?;
            harden(&mean, model.num_classes())
        }
    }
}

/// Model distillation: aggregate the teachers' predictions on the
/// untransformed input.
pub fn model_distill(
    teachers: &TeacherSet<'_>,
    x: &Tensor<f32>,
    aggregation: Aggregation,
) -> Result<LabelVolume> {
    match aggregation {
        Aggregation::HardVote => {
            let maps: Vec<LabelVolume> = teachers
                .iter()
                .map(|(m, _)| m.predict_hard(x))
                .collect::<Result<_>>()?;
            vote(&maps)
        }
        Aggregation::MeanProbability => {
            let identity = [GeometricTransform::identity()];
            let mut acc: Option<Tensor<f32>> = None;
            for (m, _) in teachers.iter() {
                let p = mean_transformed_probs(m, x, &identity)?;
                acc = Some(match acc {
                    None => p,
                    Some(mut a) => {
                        for (slot, v) in a.data_mut().iter_mut().zip(p.data()) {
                            *slot += *v;
                        }
                        a
                    }
                });
            }
            let mut mean = acc.expect("teacher set nonempty");
            let t = teachers.len() as f32;
            for v in mean.data_mut() {
                *v /= t;
            }
            harden(&mean, teachers.num_classes())
        }
    }
}

/// Hierarchical distillation: data-distill each teacher over all views
/// (inner aggregation), then aggregate across teachers (outer). Two
/// stacked aggregations.
pub fn hierarchical_distill(
    teachers: &TeacherSet<'_>,
    x: &Tensor<f32>,
    transforms: &[GeometricTransform],
    aggregation: Aggregation,
) -> Result<LabelVolume> {
    if transforms.is_empty() {
        return Err(Error::InvalidArgument(
            "hierarchical distillation needs at least one transform".into(),
        ));
    }
    match aggregation {
        Aggregation::HardVote => {
            let maps: Vec<LabelVolume> = teachers
                .iter()
                .map(|(m, _)| data_distill(m, x, transforms, Aggregation::HardVote))
                .collect::<Result<_>>()?;
            vote(&maps)
        }
        Aggregation::MeanProbability => {
            let mut acc: Option<Tensor<f32>> = None;
            for (m, _) in teachers.iter() {
                let p = mean_transformed_probs(m, x, transforms)?;
                acc = Some(match acc {
                    None => p,
                    Some(mut a) => {
                        for (slot, v) in a.data_mut().iter_mut().zip(p.data()) {
                            *slot += *v;
                        }
                        a
                    }
                });
            }
            let mut mean = acc.expect("teacher set nonempty");
            let t = teachers.len() as f32;
            for v in mean.data_mut() {
                *v /= t;
            }
            harden(&mean, teachers.num_classes())
        }
    }
}

/// How good a pseudo-label map is against known truth.
#[derive(Debug, Clone)]
pub struct PseudoLabelQuality {
    /// Dice per class, indexed by class.
    pub dice: Vec<f64>,
    /// Fraction of voxels whose label differs from the truth.
    pub flip_rate: f64,
}

/// Score pseudo-labels against ground truth: per-class Dice plus the
/// plain fraction of differing voxels.
pub fn pseudo_label_quality(pseudo: &LabelVolume, truth: &LabelVolume) -> Result<PseudoLabelQuality> {
    if pseudo.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pseudo labels {:?} vs truth {:?}",
            pseudo.shape(),
            truth.shape()
        )));
    }
    if pseudo.classes() != truth.classes() {
        return Err(Error::InvalidArgument(format!(
            "class counts differ: {} vs {}",
            pseudo.classes(),
            truth.classes()
        )));
    }
    let mut dice = Vec::with_capacity(truth.classes());
    for c in 0..truth.classes() {
        dice.push(metrics::dice(pseudo, truth, c)?);
    }
    let flips = pseudo.data().iter().zip(truth.data()).filter(|(a, b)| a != b).count();
    Ok(PseudoLabelQuality { dice, flip_rate: flips as f64 / truth.numel() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_rng;
    use proptest::prelude::*;

    /// Always predicts one class, with probability 1.
    struct ConstantPredictor {
        class: usize,
        classes: usize,
    }

    impl Predictor for ConstantPredictor {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
            let sp: usize = x.shape().iter().product();
            let mut shape = vec![self.classes];
            shape.extend_from_slice(x.shape());
            let mut data = vec![0.0f32; self.classes * sp];
            data[self.class * sp..(self.class + 1) * sp].fill(1.0);
            Tensor::new(shape, data)
        }
    }

    /// Box-filter the input (replicate padding) and threshold the local
    /// mean into 3 classes. The box filter is isotropic and the
    /// thresholds pointwise, so the whole predictor commutes with every
    /// rotation and flip of a square input.
    struct SmoothedThresholdPredictor;

    impl Predictor for SmoothedThresholdPredictor {
        fn num_classes(&self) -> usize {
            3
        }

        fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
            let shape = x.shape();
            let (h, w) = (shape[0], shape[1]);
            let at = |r: isize, c: isize| -> f32 {
                let r = r.clamp(0, h as isize - 1) as usize;
                let c = c.clamp(0, w as isize - 1) as usize;
                x.data()[r * w + c]
            };
            let mut probs = vec![0.0f32; 3 * h * w];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            acc += at(r as isize + dr, c as isize + dc);
                        }
                    }
                    let mean = acc / 9.0;
                    let class = if mean < 0.35 {
                        0
                    } else if mean < 0.7 {
                        1
                    } else {
                        2
                    };
                    probs[class * h * w + r * w + c] = 1.0;
                }
            }
            Tensor::new(vec![3, h, w], probs)
        }
    }

    fn lv(shape: &[usize], classes: usize, data: Vec<u8>) -> LabelVolume {
        LabelVolume::from_parts(shape.to_vec(), classes, data).unwrap()
    }

    #[test]
    fn the_default_list_has_twelve_entries_and_leads_with_identity() {
        let all = GeometricTransform::all12();
        assert_eq!(all.len(), 12);
        assert_eq!(all[0], GeometricTransform::identity());
        assert!(GeometricTransform::new(4, Flip::None).is_err());
    }

    #[test]
    fn rotation_quarter_turn_moves_corners_counterclockwise() {
        // 2×2 marker: [[1,2],[3,4]] rotated one quarter turn → [[2,4],[1,3]].
        let x = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let t = GeometricTransform::new(1, Flip::None).unwrap();
        let y = t.apply_tensor(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0]);
        // Two quarter turns = 180°.
        let t2 = GeometricTransform::new(2, Flip::None).unwrap();
        let twice = t.apply_tensor(&y).unwrap();
        assert_eq!(twice.data(), t2.apply_tensor(&x).unwrap().data());
    }

    #[test]
    fn flips_reverse_the_named_plane_axis() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f0 = GeometricTransform::new(0, Flip::First).unwrap();
        assert_eq!(f0.apply_tensor(&x).unwrap().data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        let f1 = GeometricTransform::new(0, Flip::Second).unwrap();
        assert_eq!(f1.apply_tensor(&x).unwrap().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn non_square_planes_reject_quarter_turns_but_allow_the_rest() {
        let x = Tensor::new(vec![2, 3], vec![0.0f64; 6]).unwrap();
        assert!(GeometricTransform::new(1, Flip::None).unwrap().apply_tensor(&x).is_err());
        assert!(GeometricTransform::new(3, Flip::First).unwrap().apply_tensor(&x).is_err());
        assert!(GeometricTransform::new(2, Flip::Second).unwrap().apply_tensor(&x).is_ok());
    }

    #[test]
    fn three_dimensional_volumes_transform_each_leading_slice() {
        // [2,2,2]: two stacked 2×2 slices rotate independently.
        let x = Tensor::new(vec![2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let t = GeometricTransform::new(1, Flip::None).unwrap();
        let y = t.apply_tensor(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0, 6.0, 8.0, 5.0, 7.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// inverse ∘ apply is the identity, bit-exact, for every default
        /// transform, on square tensors and label volumes.
        #[test]
        fn every_transform_round_trips(
            side in 2usize..6,
            depth in 1usize..3,
            seed in 0u64..1000,
        ) {
            let mut rng = test_rng(seed);
            let shape = if depth == 1 { vec![side, side] } else { vec![depth, side, side] };
            let x = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng);
            let numel: usize = shape.iter().product();
            let labels = lv(&shape, 4, (0..numel).map(|i| (i % 4) as u8).collect());
            for t in GeometricTransform::all12() {
                let y = t.apply_tensor(&x).unwrap();
                let back = t.inverse().apply_tensor(&y).unwrap();
                prop_assert_eq!(back.shape(), x.shape());
                prop_assert_eq!(back.data(), x.data());
                let ly = t.apply_labels(&labels).unwrap();
                let lback = t.inverse().apply_labels(&ly).unwrap();
                prop_assert_eq!(&lback, &labels);
            }
        }

        /// Non-square round trips for the shape-preserving subset.
        #[test]
        fn rectangular_round_trips(h in 2usize..5, w in 5usize..8, seed in 0u64..1000) {
            let mut rng = test_rng(seed);
            let x = Tensor::<f64>::uniform(&[h, w], -1.0, 1.0, &mut rng);
            for rotation in [0u8, 2] {
                for flip in [Flip::None, Flip::First, Flip::Second] {
                    let t = GeometricTransform::new(rotation, flip).unwrap();
                    let back = t.inverse().apply_tensor(&t.apply_tensor(&x).unwrap()).unwrap();
                    prop_assert_eq!(back.data(), x.data());
                }
            }
        }

        /// Voting ignores the order of its inputs.
        #[test]
        fn vote_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = test_rng(seed);
            use rand::Rng;
            let maps: Vec<LabelVolume> = (0..5)
                .map(|_| lv(&[4, 4], 3, (0..16).map(|_| rng.gen_range(0..3u8)).collect()))
                .collect();
            let base = vote(&maps).unwrap();
            let mut shuffled = maps.clone();
            shuffled.reverse();
            shuffled.swap(0, 2);
            prop_assert_eq!(vote(&shuffled).unwrap(), base);
        }
    }

    #[test]
    fn vote_majority_tie_and_identity() {
        let a = lv(&[3], 3, vec![1, 0, 2]);
        let b = lv(&[3], 3, vec![1, 0, 2]);
        let c = lv(&[3], 3, vec![0, 1, 2]);
        assert_eq!(vote(&[a.clone(), b, c]).unwrap().data(), &[1, 0, 2]);
        assert_eq!(vote(&[a.clone()]).unwrap(), a);
        // 2–2 tie between classes 0 and 2 → 0.
        let t = [
            lv(&[1], 3, vec![0]),
            lv(&[1], 3, vec![0]),
            lv(&[1], 3, vec![2]),
            lv(&[1], 3, vec![2]),
        ];
        assert_eq!(vote(&t).unwrap().data(), &[0]);
        assert!(vote(&[]).is_err());
        let wrong = lv(&[4], 3, vec![0; 4]);
        assert!(vote(&[a, wrong]).is_err());
    }

    fn sample_volume(seed: u64, side: usize) -> Tensor<f32> {
        let mut rng = test_rng(seed);
        let t = Tensor::<f64>::uniform(&[side, side], 0.0, 1.0, &mut rng);
        t.cast()
    }

    #[test]
    fn identity_distillation_equals_plain_prediction() {
        let x = sample_volume(21, 8);
        let model = SmoothedThresholdPredictor;
        let plain = model.predict_hard(&x).unwrap();
        let identity = [GeometricTransform::identity()];
        for agg in [Aggregation::HardVote, Aggregation::MeanProbability] {
            assert_eq!(data_distill(&model, &x, &identity, agg).unwrap(), plain);
        }
    }

    #[test]
    fn constant_model_distills_to_a_constant_map() {
        let x = sample_volume(22, 6);
        let model = ConstantPredictor { class: 2, classes: 3 };
        let out = data_distill(&model, &x, &GeometricTransform::all12(), Aggregation::HardVote)
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 2));
    }

    #[test]
    fn equivariant_model_is_unchanged_by_data_distillation() {
        let x = sample_volume(23, 8);
        let model = SmoothedThresholdPredictor;
        let plain = model.predict_hard(&x).unwrap();
        let dd = data_distill(&model, &x, &GeometricTransform::all12(), Aggregation::HardVote)
            .unwrap();
        assert_eq!(dd, plain);
    }

    #[test]
    fn model_distillation_reduces_and_votes() {
        let x = sample_volume(24, 6);
        let m0 = ConstantPredictor { class: 0, classes: 3 };
        let m1 = ConstantPredictor { class: 0, classes: 3 };
        let m2 = ConstantPredictor { class: 1, classes: 3 };
        let solo = TeacherSet::new(vec![(&m2 as &dyn Predictor, "a".into())]).unwrap();
        assert_eq!(
            model_distill(&solo, &x, Aggregation::HardVote).unwrap(),
            m2.predict_hard(&x).unwrap()
        );
        let trio = TeacherSet::new(vec![
            (&m0 as &dyn Predictor, "a".into()),
            (&m1, "b".into()),
            (&m2, "c".into()),
        ])
        .unwrap();
        let out = model_distill(&trio, &x, Aggregation::HardVote).unwrap();
        assert!(out.data().iter().all(|&v| v == 0)); // majority 0,0,1 → 0
        assert!(TeacherSet::new(vec![]).is_err());
    }

    #[test]
    fn hierarchical_reduction_lattice_is_bit_exact() {
        let x = sample_volume(25, 8);
        let model = SmoothedThresholdPredictor;
        let c1 = ConstantPredictor { class: 1, classes: 3 };
        let c2 = ConstantPredictor { class: 2, classes: 3 };
        let transforms = GeometricTransform::all12();
        let identity = [GeometricTransform::identity()];

        // T = 1 → data distillation.
        let solo = TeacherSet::new(vec![(&model as &dyn Predictor, "m".into())]).unwrap();
        assert_eq!(
            hierarchical_distill(&solo, &x, &transforms, Aggregation::HardVote).unwrap(),
            data_distill(&model, &x, &transforms, Aggregation::HardVote).unwrap()
        );

        // K = 1 identity → model distillation.
        let trio = TeacherSet::new(vec![
            (&model as &dyn Predictor, "m".into()),
            (&c1, "c1".into()),
            (&c2, "c2".into()),
        ])
        .unwrap();
        assert_eq!(
            hierarchical_distill(&trio, &x, &identity, Aggregation::HardVote).unwrap(),
            model_distill(&trio, &x, Aggregation::HardVote).unwrap()
        );

        // Both reductions → plain prediction.
        assert_eq!(
            hierarchical_distill(&solo, &x, &identity, Aggregation::HardVote).unwrap(),
            model.predict_hard(&x).unwrap()
        );
    }

    #[test]
    fn distillation_is_deterministic() {
        let x = sample_volume(26, 8);
        let model = SmoothedThresholdPredictor;
        let teachers = TeacherSet::new(vec![(&model as &dyn Predictor, "m".into())]).unwrap();
        let transforms = GeometricTransform::all12();
        for agg in [Aggregation::HardVote, Aggregation::MeanProbability] {
            let a = hierarchical_distill(&teachers, &x, &transforms, agg).unwrap();
            let b = hierarchical_distill(&teachers, &x, &transforms, agg).unwrap();
            assert_eq!(a, b);
        }
    }

    /// A predictor with hand-set probabilities per voxel, to pin the
    /// difference between hard voting and probability averaging.
    struct TablePredictor {
        probs: Vec<Tensor<f32>>,
        cursor: std::cell::Cell<usize>,
    }

    impl Predictor for TablePredictor {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict_probs(&self, _x: &Tensor<f32>) -> Result<Tensor<f32>> {
            let i = self.cursor.get();
            self.cursor.set(i + 1);
            Ok(self.probs[i % self.probs.len()].clone())
        }
    }

    #[test]
    fn aggregation_mode_changes_close_calls() {
        // Two views of a single voxel: hard votes split {0, 1} and tie to
        // class 0; mean probabilities (0.35, 0.65) pick class 1.
        let x = Tensor::new(vec![1, 1], vec![0.0f32]).unwrap();
        let votes_zero = Tensor::new(vec![2, 1, 1], vec![0.6, 0.4]).unwrap();
        let votes_one = Tensor::new(vec![2, 1, 1], vec![0.1, 0.9]).unwrap();
        let transforms = [GeometricTransform::identity(), GeometricTransform::identity()];

        let hard_model =
            TablePredictor { probs: vec![votes_zero.clone(), votes_one.clone()], cursor: 0.into() };
        let hard = data_distill(&hard_model, &x, &transforms, Aggregation::HardVote).unwrap();
        assert_eq!(hard.data(), &[0]);

        let soft_model = TablePredictor { probs: vec![votes_zero, votes_one], cursor: 0.into() };
        let soft =
            data_distill(&soft_model, &x, &transforms, Aggregation::MeanProbability).unwrap();
        assert_eq!(soft.data(), &[1]);
    }

    #[test]
    fn pseudo_label_quality_counts_what_changed() {
        let truth = lv(&[2, 3], 2, vec![0, 1, 0, 1, 0, 1]);
        let same = pseudo_label_quality(&truth, &truth).unwrap();
        assert_eq!(same.dice, vec![1.0, 1.0]);
        assert_eq!(same.flip_rate, 0.0);

        let inverted = lv(&[2, 3], 2, vec![1, 0, 1, 0, 1, 0]);
        let flipped = pseudo_label_quality(&inverted, &truth).unwrap();
        assert_eq!(flipped.dice, vec![0.0, 0.0]);
        assert_eq!(flipped.flip_rate, 1.0);

        // Hand count: 2 of 6 voxels differ; class 0: |P|=5, |T|=3, ∩=3
        // → 6/8; class 1: |P|=1, |T|=3, ∩=1 → 2/4.
        let noisy = lv(&[2, 3], 2, vec![0, 1, 0, 0, 0, 0]);
        let q = pseudo_label_quality(&noisy, &truth).unwrap();
        assert!((q.flip_rate - 2.0 / 6.0).abs() < 1e-15);
        assert!((q.dice[0] - 2.0 * 3.0 / 8.0).abs() < 1e-15);
        assert!((q.dice[1] - 2.0 * 1.0 / 4.0).abs() < 1e-15);

        let bad = lv(&[3, 2], 2, vec![0; 6]);
        assert!(pseudo_label_quality(&bad, &truth).is_err());
    }
}
