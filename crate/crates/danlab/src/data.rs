//! Synthetic segmentation volumes and volume file I/O.
//!
//! Every sample is a nested-shell phantom: an ellipsoidal core (class 2)
//! inside a thicker shell (class 1) on background (class 0), with a
//! shared smooth angular perturbation wobbling both boundaries together
//! so the core always stays strictly inside the shell. Intensities are
//! per-class means plus Gaussian noise plus a smooth bias field. All
//! randomness flows from the spec's seed, so a dataset is a pure function
//! of its spec.

use crate::autodiff::Tensor;
use crate::{seeded_rng, Error, Result, Scalar};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use std::path::Path;

/// Integer class indices over a spatial grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Vec<usize>,
    classes: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn from_parts(shape: Vec<usize>, classes: usize, data: Vec<u8>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch(format!("label volume shape {shape:?} is degenerate")));
        }
        if !(2..=256).contains(&classes) {
            return Err(Error::InvalidArgument(format!(
                "label volume needs 2..=256 classes, got {classes}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "label volume shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: v as usize, classes });
        }
        Ok(LabelVolume { shape, classes, data })
    }

    pub fn filled(shape: &[usize], classes: usize, value: u8) -> Result<Self> {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), classes, vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Re-tag the class count (e.g. after reading from disk, where the
    /// count is not stored). Must cover every present label.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(&v) = self.data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: v as usize, classes });
        }
        if !(2..=256).contains(&classes) {
            return Err(Error::InvalidArgument(format!(
                "label volume needs 2..=256 classes, got {classes}"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Fraction of voxels carrying class `c`.
    pub fn class_fraction(&self, c: usize) -> f64 {
        let hits = self.data.iter().filter(|&&v| v as usize == c).count();
        hits as f64 / self.data.len() as f64
    }

    /// Labels as flat `usize` indices in scan order, for the loss.
    pub fn as_indices(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }
}

/// Background, shell, and core class indices of generated phantoms.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_SHELL: u8 = 1;
pub const CLASS_CORE: u8 = 2;

/// Per-class intensity means of generated phantoms.
pub const CLASS_MEANS: [f64; 3] = [0.2, 0.55, 0.85];

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of samples.
    pub count: usize,
    /// Spatial dims (2D or 3D), each ≥ 16.
    pub shape: Vec<usize>,
    /// Seed for the whole dataset.
    pub seed: u64,
    /// Standard deviation of the intensity noise; the smooth bias field
    /// shares this amplitude.
    pub noise_sigma: f64,
    /// Amplitude of the boundary perturbation as a fraction of the
    /// radius, in [0, 0.15]. The cap keeps the shell at least two voxels
    /// thick in every sample.
    pub deformation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            shape: vec![32, 32],
            seed: 7,
            noise_sigma: 0.05,
            deformation: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        let rank = self.shape.len();
        if rank != 2 && rank != 3 {
            return Err(Error::ShapeMismatch(format!(
                "synthetic volumes are 2D or 3D, got rank {rank}"
            )));
        }
        if let Some(&s) = self.shape.iter().find(|&&s| s < 16) {
            return Err(Error::InvalidArgument(format!(
                "every axis must be at least 16 voxels, got {s}"
            )));
        }
        if !(0.0..=0.15).contains(&self.deformation) {
            return Err(Error::InvalidArgument(format!(
                "deformation must lie in [0, 0.15] to keep the shell ≥ 2 voxels thick, got {}",
                self.deformation
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        3
    }
}

/// The sampled geometry of one phantom, kept for analytic checks.
#[derive(Debug, Clone)]
pub struct EllipsoidGeometry {
    pub center: Vec<f64>,
    pub core_semi: Vec<f64>,
    pub shell_semi: Vec<f64>,
}

/// One generated sample: raw intensities (spatial dims only; batching
/// adds the channel axis), clean labels, and the geometry they came from.
#[derive(Debug, Clone)]
pub struct Sample {
    pub intensity: Tensor<f32>,
    pub labels: LabelVolume,
    pub geometry: EllipsoidGeometry,
}

/// Band-limited sinusoidal field: a handful of random frequencies and
/// phases, normalized so values stay in [−1, 1].
struct SmoothField {
    dirs: Vec<Vec<f64>>,
    freqs: Vec<f64>,
    phases: Vec<f64>,
    amps: Vec<f64>,
    norm: f64,
}

impl SmoothField {
    fn sample(rng: &mut impl Rng, rank: usize, max_freq: f64) -> Self {
        let uni = Uniform::new(0.0, 1.0);
        let n = 3;
        let mut dirs = Vec::with_capacity(n);
        let mut freqs = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        let mut amps = Vec::with_capacity(n);
        for _ in 0..n {
            let mut d: Vec<f64> = (0..rank).map(|_| uni.sample(rng) * 2.0 - 1.0).collect();
            let len = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            d.iter_mut().for_each(|x| *x /= len);
            dirs.push(d);
            freqs.push(1.0 + uni.sample(rng) * (max_freq - 1.0));
            phases.push(uni.sample(rng) * std::f64::consts::TAU);
            amps.push(0.5 + uni.sample(rng) * 0.5);
        }
        let norm = amps.iter().sum();
        SmoothField { dirs, freqs, phases, amps, norm }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dirs.len() {
            let dot: f64 = self.dirs[i].iter().zip(x).map(|(d, v)| d * v).sum();
            acc += self.amps[i] * (self.freqs[i] * dot + self.phases[i]).sin();
        }
        acc / self.norm
    }
}

/// Generate `spec.count` phantoms. Bit-exact reproducible from the seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let rank = spec.shape.len();
    let mut rng = seeded_rng(spec.seed);
    let uni = Uniform::new(0.0, 1.0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    // Core semi-axis range as a fraction of each axis: sized so the core
    // occupies a few percent of the volume in 3D and ~5–20% in 2D even at
    // the deformation cap.
    let (frac_lo, frac_hi) = if rank == 2 { (0.15, 0.21) } else { (0.20, 0.235) };
    // Shell gap sized so (gap)·(1−deformation) ≥ 2.5 voxels radially.
    let gap = 2.5 / (1.0 - spec.deformation);

    let numel: usize = spec.shape.iter().product();
    let mut samples = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let center: Vec<f64> = spec
            .shape
            .iter()
            .map(|&s| s as f64 / 2.0 + (uni.sample(&mut rng) - 0.5) * s as f64 * 0.05)
            .collect();
        let core_semi: Vec<f64> = spec
            .shape
            .iter()
            .map(|&s| (frac_lo + uni.sample(&mut rng) * (frac_hi - frac_lo)) * s as f64)
            .collect();
        let shell_semi: Vec<f64> = core_semi.iter().map(|a| a + gap).collect();
        let wobble = SmoothField::sample(&mut rng, rank, 4.0);
        let bias = SmoothField::sample(&mut rng, rank, 3.0);

        let mut labels = vec![CLASS_BACKGROUND; numel];
        let mut intensity = vec![0.0f32; numel];
        let mut coords = vec![0usize; rank];
        for v in 0..numel {
            let pos: Vec<f64> = coords.iter().map(|&c| c as f64).collect();
            let delta: Vec<f64> = pos.iter().zip(&center).map(|(p, c)| p - c).collect();
            let dist = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            let threshold = if spec.deformation > 0.0 && dist > 1e-9 {
                let unit: Vec<f64> = delta.iter().map(|d| d / dist).collect();
                1.0 + spec.deformation * wobble.eval(&unit)
            } else {
                1.0
            };
            let s_core = delta
                .iter()
                .zip(&core_semi)
                .map(|(d, a)| (d / a) * (d / a))
                .sum::<f64>()
                .sqrt();
            let s_shell = delta
                .iter()
                .zip(&shell_semi)
                .map(|(d, b)| (d / b) * (d / b))
                .sum::<f64>()
                .sqrt();
            let class = if s_core <= threshold {
                CLASS_CORE
            } else if s_shell <= threshold {
                CLASS_SHELL
            } else {
                CLASS_BACKGROUND
            };
            labels[v] = class;

            let x_norm: Vec<f64> =
                coords.iter().zip(&spec.shape).map(|(&c, &s)| c as f64 / s as f64).collect();
            let value = CLASS_MEANS[class as usize]
                + spec.noise_sigma * noise.sample(&mut rng)
                + spec.noise_sigma * bias.eval(&x_norm);
            intensity[v] = value as f32;

            for d in (0..rank).rev() {
                coords[d] += 1;
                if coords[d] < spec.shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        samples.push(Sample {
            intensity: Tensor::new(spec.shape.clone(), intensity)?,
            labels: LabelVolume::from_parts(spec.shape.clone(), 3, labels)?,
            geometry: EllipsoidGeometry { center, core_semi, shell_semi },
        });
    }
    Ok(samples)
}

/// Stack selected samples' intensities into a `[B, 1, spatial…]` batch.
pub fn batch_intensity<F: Scalar>(samples: &[Sample], idx: &[usize]) -> Result<Tensor<F>> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let first = samples
        .get(idx[0])
        .ok_or_else(|| Error::InvalidArgument(format!("sample index {} out of range", idx[0])))?;
    let spatial = first.intensity.shape().to_vec();
    let sp_len: usize = spatial.iter().product();
    let mut data = Vec::with_capacity(idx.len() * sp_len);
    for &i in idx {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
        if s.intensity.shape() != spatial.as_slice() {
            return Err(Error::ShapeMismatch("batch mixes volume shapes".into()));
        }
        data.extend(s.intensity.data().iter().map(|&v| F::from_f64(v as f64)));
    }
    let mut shape = vec![idx.len(), 1];
    shape.extend_from_slice(&spatial);
    Tensor::new(shape, data)
}

/// Stack selected label volumes into flat loss targets, scan order.
pub fn batch_labels(labels: &[&LabelVolume], idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &i in idx {
        let l = labels
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("label index {i} out of range")))?;
        out.extend(l.as_indices());
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"DANVOL1\0";
const KIND_F32: u32 = 0;
const KIND_U8: u32 = 1;

/// A volume on disk: float intensities or integer labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Intensity(Tensor<f32>),
    Labels(LabelVolume),
}

/// Write a volume: magic `DANVOL1\0`, u32 LE kind (0 = f32, 1 = u8
/// labels), u32 LE rank, u32 LE dims outermost first, row-major LE
/// payload.
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let (kind, shape, payload): (u32, &[usize], Vec<u8>) = match volume {
        Volume::Intensity(t) => {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (KIND_F32, t.shape(), bytes)
        }
        Volume::Labels(l) => (KIND_U8, l.shape(), l.data().to_vec()),
    };
    let mut out = Vec::with_capacity(16 + 4 * shape.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a volume written by [`write_volume`]. Label volumes come back
/// with `classes = max(label)+1` (at least 2) since the format does not
/// store the class count; re-tag with
/// [`LabelVolume::with_classes`] when the true count is known.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let take = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(offset..offset + len)
            .ok_or(Error::Truncated { path: path.into(), offset: offset as u64 })
    };
    let magic = take(0, 8)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "DANVOL1" });
    }
    let u32_at = |offset: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(offset, 4)?.try_into().expect("4 bytes")))
    };
    let kind = u32_at(8)?;
    let rank = u32_at(12)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::InvalidArgument(format!("volume rank {rank} out of range in {path:?}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let dim = u32_at(16 + 4 * d)? as usize;
        if dim == 0 {
            return Err(Error::InvalidArgument(format!("zero-sized axis in {path:?}")));
        }
        shape.push(dim);
    }
    let header = 16 + 4 * rank;
    let numel: usize = shape.iter().product();
    let volume = match kind {
        KIND_F32 => {
            let payload = take(header, numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if bytes.len() != header + numel * 4 {
                return Err(Error::InvalidArgument(format!(
                    "{} trailing bytes after payload in {path:?}",
                    bytes.len() - header - numel * 4
                )));
            }
            Volume::Intensity(Tensor::new(shape, data)?)
        }
        KIND_U8 => {
            let payload = take(header, numel)?;
            if bytes.len() != header + numel {
                return Err(Error::InvalidArgument(format!(
                    "{} trailing bytes after payload in {path:?}",
                    bytes.len() - header - numel
                )));
            }
            let classes = payload.iter().map(|&v| v as usize + 1).max().unwrap_or(2).max(2);
            Volume::Labels(LabelVolume::from_parts(shape, classes, payload.to_vec())?)
        }
        other => return Err(Error::UnknownKind { path: path.into(), kind: other }),
    };
    Ok(volume)
}

/// Read a volume and insist it holds intensities.
pub fn read_intensity(path: &Path) -> Result<Tensor<f32>> {
    match read_volume(path)? {
        Volume::Intensity(t) => Ok(t),
        Volume::Labels(_) => Err(Error::InvalidArgument(format!(
            "{path:?} holds labels, expected an intensity volume"
        ))),
    }
}

/// Read a volume and insist it holds labels.
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Labels(l) => Ok(l),
        Volume::Intensity(_) => Err(Error::InvalidArgument(format!(
            "{path:?} holds intensities, expected a label volume"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> SyntheticSpec {
        SyntheticSpec {
            count: 2,
            shape: vec![24, 24],
            seed: 3,
            noise_sigma: 0.0,
            deformation: 0.0,
        }
    }

    #[test]
    fn undeformed_noiseless_phantoms_match_analytic_membership() {
        let samples = generate(&quiet_spec()).unwrap();
        for s in &samples {
            let g = &s.geometry;
            let shape = s.labels.shape().to_vec();
            for (v, &label) in s.labels.data().iter().enumerate() {
                let coords = [v / shape[1], v % shape[1]];
                let s_core: f64 = coords
                    .iter()
                    .zip(&g.center)
                    .zip(&g.core_semi)
                    .map(|((&c, ctr), a)| {
                        let d = c as f64 - ctr;
                        (d / a) * (d / a)
                    })
                    .sum::<f64>()
                    .sqrt();
                let s_shell: f64 = coords
                    .iter()
                    .zip(&g.center)
                    .zip(&g.shell_semi)
                    .map(|((&c, ctr), b)| {
                        let d = c as f64 - ctr;
                        (d / b) * (d / b)
                    })
                    .sum::<f64>()
                    .sqrt();
                let expect = if s_core <= 1.0 {
                    CLASS_CORE
                } else if s_shell <= 1.0 {
                    CLASS_SHELL
                } else {
                    CLASS_BACKGROUND
                };
                assert_eq!(label, expect, "voxel {coords:?}");
                // Intensity is exactly the class mean: σ = 0 silences
                // both the noise and the bias field.
                let want = CLASS_MEANS[label as usize] as f32;
                assert_eq!(s.intensity.data()[v], want);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bit_exactly() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            let xb: Vec<u32> = x.intensity.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.intensity.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let c = generate(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn core_fraction_stays_in_band_over_many_samples() {
        let spec = SyntheticSpec { count: 100, ..SyntheticSpec::default() };
        let samples = generate(&spec).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let f = s.labels.class_fraction(CLASS_CORE as usize);
            assert!((0.02..=0.30).contains(&f), "sample {i}: core fraction {f}");
            assert!(s.labels.class_fraction(CLASS_SHELL as usize) > 0.0);
        }
    }

    #[test]
    fn shell_separates_core_from_background_by_two_voxels() {
        let spec = SyntheticSpec { count: 4, deformation: 0.15, seed: 11, ..Default::default() };
        let samples = generate(&spec).unwrap();
        for s in &samples {
            let shape = s.labels.shape();
            let (h, w) = (shape[0], shape[1]);
            let at = |r: isize, c: isize| -> u8 {
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    CLASS_BACKGROUND
                } else {
                    s.labels.data()[r as usize * w + c as usize]
                }
            };
            for r in 0..h as isize {
                for c in 0..w as isize {
                    if at(r, c) != CLASS_CORE {
                        continue;
                    }
                    for (dr, dc) in [(0, 1), (0, -1), (1, 0), (-1, 0)] {
                        for step in 1..=2 {
                            assert_ne!(
                                at(r + dr * step, c + dc * step),
                                CLASS_BACKGROUND,
                                "background within 2 voxels of core at ({r},{c})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn three_dimensional_phantoms_generate() {
        let spec = SyntheticSpec {
            count: 2,
            shape: vec![18, 18, 18],
            seed: 5,
            noise_sigma: 0.05,
            deformation: 0.1,
        };
        let samples = generate(&spec).unwrap();
        for s in &samples {
            assert_eq!(s.labels.shape(), &[18, 18, 18]);
            let f = s.labels.class_fraction(CLASS_CORE as usize);
            assert!(f > 0.01 && f < 0.3, "core fraction {f}");
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let ok = SyntheticSpec::default();
        assert!(generate(&SyntheticSpec { shape: vec![32], ..ok.clone() }).is_err());
        assert!(generate(&SyntheticSpec { shape: vec![12, 32], ..ok.clone() }).is_err());
        assert!(generate(&SyntheticSpec { deformation: 0.2, ..ok.clone() }).is_err());
        assert!(generate(&SyntheticSpec { noise_sigma: -0.1, ..ok.clone() }).is_err());
        assert!(generate(&SyntheticSpec { count: 0, ..ok }).is_err());
    }

    #[test]
    fn batching_stacks_samples_and_labels() {
        let samples = generate(&quiet_spec()).unwrap();
        let batch = batch_intensity::<f64>(&samples, &[0, 1, 0]).unwrap();
        assert_eq!(batch.shape(), &[3, 1, 24, 24]);
        assert_eq!(batch.data()[0], samples[0].intensity.data()[0] as f64);
        let labels: Vec<&LabelVolume> = samples.iter().map(|s| &s.labels).collect();
        let flat = batch_labels(&labels, &[0, 1]).unwrap();
        assert_eq!(flat.len(), 2 * 24 * 24);
        assert_eq!(flat[0], samples[0].labels.data()[0] as usize);
        assert!(batch_intensity::<f64>(&samples, &[]).is_err());
        assert!(batch_intensity::<f64>(&samples, &[9]).is_err());
    }

    #[test]
    fn label_volume_validates() {
        assert!(LabelVolume::from_parts(vec![2, 2], 3, vec![0, 1, 2, 3]).is_err());
        assert!(LabelVolume::from_parts(vec![2, 2], 3, vec![0, 1, 2]).is_err());
        assert!(LabelVolume::from_parts(vec![0], 3, vec![]).is_err());
        assert!(LabelVolume::from_parts(vec![2], 1, vec![0, 0]).is_err());
        let l = LabelVolume::from_parts(vec![2, 2], 3, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(l.class_fraction(0), 0.5);
        assert!(l.clone().with_classes(2).is_err());
        assert_eq!(l.with_classes(5).unwrap().classes(), 5);
    }

    #[test]
    fn volume_files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("a.vol");
        let lpath = dir.path().join("a.lbl");

        let t = Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        write_volume(&ipath, &Volume::Intensity(t.clone())).unwrap();
        let back = read_intensity(&ipath).unwrap();
        assert_eq!(back.shape(), t.shape());
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        let l = LabelVolume::from_parts(vec![2, 2, 2], 3, vec![0, 1, 2, 0, 1, 2, 0, 0]).unwrap();
        write_volume(&lpath, &Volume::Labels(l.clone())).unwrap();
        let back = read_labels(&lpath).unwrap();
        assert_eq!(back, l);

        assert!(read_labels(&ipath).is_err());
        assert!(read_intensity(&lpath).is_err());
    }

    #[test]
    fn corrupted_files_report_precise_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");

        std::fs::write(&path, b"XXXXXXXX\0\0\0\0").unwrap();
        match read_volume(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }

        let t = Tensor::new(vec![4, 4], vec![1.0f32; 16]).unwrap();
        write_volume(&path, &Volume::Intensity(t)).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        match read_volume(&path) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut unknown = full.clone();
        unknown[8] = 9;
        std::fs::write(&path, &unknown).unwrap();
        match read_volume(&path) {
            Err(Error::UnknownKind { kind, .. }) => assert_eq!(kind, 9),
            other => panic!("expected unknown kind, got {other:?}"),
        }

        let mut trailing = full;
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn missing_file_reports_io_error() {
        match read_volume(Path::new("/nonexistent/nowhere.vol")) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
