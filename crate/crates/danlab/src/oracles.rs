//! Slow, independent reference implementations.
//!
//! Everything here recomputes a quantity the fast path also computes, but
//! by a deliberately different route (impulse propagation, exhaustive
//! scans over coordinate sets). `danlab selfcheck` runs these at startup
//! and the test suite pins the fast paths against them. None of this code
//! shares logic with the implementations it checks.

use crate::autodiff::{Tape, Tensor};
use crate::dan::{DanOptions, Mode, TwoStreamDan};
use crate::data::LabelVolume;
use crate::layers::{ArchitectureSpec, LayerSpec, VisitParams};
use crate::{Error, Result};

/// Dense feature stack used by the impulse oracle: `channels` planes of a
/// common spatial shape, all values non-negative.
struct Planes {
    channels: usize,
    spatial: Vec<usize>,
    data: Vec<f64>,
}

impl Planes {
    fn zeros(channels: usize, spatial: &[usize]) -> Self {
        let sp: usize = spatial.iter().product();
        Planes { channels, spatial: spatial.to_vec(), data: vec![0.0; channels * sp] }
    }

    fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; shape.len()];
    for _ in 0..numel {
        f(&coords);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

fn flat(coords: &[usize], shape: &[usize]) -> usize {
    coords.iter().zip(shape).fold(0, |acc, (c, s)| acc * s + c)
}

/// All-ones convolution of every input channel summed into one output
/// plane, replicated `out_channels` times. Support-exact for non-negative
/// inputs.
fn conv_ones(p: &Planes, out_channels: usize, k: usize, s: usize, pad: usize) -> Result<Planes> {
    let out_sp: Vec<usize> = p
        .spatial
        .iter()
        .map(|&i| {
            let padded = i + 2 * pad;
            if padded < k {
                return Err(Error::ShapeMismatch("oracle conv kernel too large".into()));
            }
            Ok((padded - k) / s + 1)
        })
        .collect::<Result<_>>()?;
    let mut out = Planes::zeros(out_channels, &out_sp);
    let in_len = p.spatial_len();
    let out_len = out.spatial_len();
    let kshape = vec![k; p.spatial.len()];
    let mut plane = vec![0.0f64; out_len];
    for_each_index(&out_sp, |oc| {
        let mut acc = 0.0;
        for_each_index(&kshape, |kc| {
            // Input coordinate o·s + k − pad, skipped when outside.
            let mut ic = Vec::with_capacity(oc.len());
            for d in 0..oc.len() {
                let v = (oc[d] * s + kc[d]) as isize - pad as isize;
                if v < 0 || v >= p.spatial[d] as isize {
                    return;
                }
                ic.push(v as usize);
            }
            let base = flat(&ic, &p.spatial);
            for ch in 0..p.channels {
                acc += p.data[ch * in_len + base];
            }
        });
        plane[flat(oc, &out_sp)] = acc;
    });
    for ch in 0..out_channels {
        out.data[ch * out_len..(ch + 1) * out_len].copy_from_slice(&plane);
    }
    Ok(out)
}

fn pool_ones(p: &Planes, window: usize, stride: usize, take_max: bool) -> Result<Planes> {
    let out_sp: Vec<usize> = p
        .spatial
        .iter()
        .map(|&i| {
            if i < window {
                return Err(Error::ShapeMismatch("oracle pool window too large".into()));
            }
            Ok((i - window) / stride + 1)
        })
        .collect::<Result<_>>()?;
    let mut out = Planes::zeros(p.channels, &out_sp);
    let in_len = p.spatial_len();
    let out_len: usize = out_sp.iter().product();
    let wshape = vec![window; p.spatial.len()];
    for ch in 0..p.channels {
        for_each_index(&out_sp, |oc| {
            let mut acc = 0.0f64;
            for_each_index(&wshape, |wc| {
                let ic: Vec<usize> = oc.iter().zip(wc).map(|(&o, &w)| o * stride + w).collect();
                let v = p.data[ch * in_len + flat(&ic, &p.spatial)];
                acc = if take_max { acc.max(v) } else { acc + v };
            });
            out.data[ch * out_len + flat(oc, &out_sp)] = acc;
        });
    }
    Ok(out)
}

fn upsample_ones(p: &Planes, factor: usize) -> Planes {
    let out_sp: Vec<usize> = p.spatial.iter().map(|&i| i * factor).collect();
    let mut out = Planes::zeros(p.channels, &out_sp);
    let in_len = p.spatial_len();
    let out_len: usize = out_sp.iter().product();
    for ch in 0..p.channels {
        for_each_index(&out_sp, |oc| {
            let ic: Vec<usize> = oc.iter().map(|&o| o / factor).collect();
            out.data[ch * out_len + flat(oc, &out_sp)] =
                p.data[ch * in_len + flat(&ic, &p.spatial)];
        });
    }
    out
}

/// Run the suffix of `arch` starting at `layer_index` on non-negative
/// planes. Batch norm is treated as identity (it is pointwise, so it never
/// moves support) and ReLU is identity on non-negative data.
fn run_suffix(arch: &ArchitectureSpec, layer_index: usize, mut p: Planes) -> Result<Planes> {
    for layer in &arch.layers[layer_index..] {
        p = match layer {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                conv_ones(&p, *out_channels, *kernel, *stride, *padding)?
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Site { .. } => p,
            LayerSpec::MaxPool { window, stride } => pool_ones(&p, *window, *stride, true)?,
            LayerSpec::AvgPool { window, stride } => pool_ones(&p, *window, *stride, false)?,
            LayerSpec::Upsample { factor } => upsample_ones(&p, *factor),
            LayerSpec::DenseBlock(db) => {
                let mut acc = p;
                for _ in 0..db.units {
                    let unit = conv_ones(&acc, db.growth, 3, 1, 1)?;
                    let sp_len = acc.spatial_len();
                    let mut merged = Planes::zeros(acc.channels + db.growth, &acc.spatial);
                    merged.data[..acc.channels * sp_len].copy_from_slice(&acc.data);
                    merged.data[acc.channels * sp_len..].copy_from_slice(&unit.data);
                    acc = merged;
                }
                acc
            }
        };
    }
    Ok(p)
}

/// Brute-force receptive field: for every position `x0` along the first
/// spatial axis of the feature map entering `layers[layer_index]`, fill
/// the hyperplane at `x0` (channel 0) with ones, propagate it through the
/// suffix of the network with all-ones weights, and measure the span
/// (max − min + 1) of positions that reach the canonical central output
/// unit with a non-zero value. A full hyperplane rather than a point
/// impulse so that the measurement isolates the first axis: the other
/// axes are always covered regardless of how strides shift alignment. Span rather than count, matching
/// the bounding-extent convention: a stride larger than the kernel leaves
/// interior holes, and those are deliberately bridged. Influence is taken
/// over the union of output channels, since a trailing concatenation
/// (dense block) gives its channels unequal fields and the quantity of
/// interest is the deepest path. Completely independent of the interval
/// arithmetic in [`ArchitectureSpec::receptive_field`].
pub fn receptive_field_brute_force(arch: &ArchitectureSpec, layer_index: usize) -> Result<usize> {
    arch.validate()?;
    if layer_index > arch.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "layer index {layer_index} out of range ({} layers)",
            arch.layers.len()
        )));
    }
    let shapes = arch.shapes()?;
    let (channels, spatial) = if layer_index == 0 {
        (arch.in_channels, arch.input_spatial.clone())
    } else {
        let (c, sp) = &shapes[layer_index - 1];
        (*c, sp.clone())
    };
    let (_, out_sp) = shapes.last().expect("validated non-empty");
    let mut target = Vec::with_capacity(out_sp.len());
    target.push(out_sp[0] / 2);
    target.extend(out_sp[1..].iter().map(|&s| s / 2));
    let out_len: usize = out_sp.iter().product();

    let mut lo: Option<usize> = None;
    let mut hi: Option<usize> = None;
    for x0 in 0..spatial[0] {
        let mut p = Planes::zeros(channels, &spatial);
        let rest: usize = spatial[1..].iter().product();
        for i in 0..rest {
            p.data[x0 * rest + i] = 1.0; // channel 0, whole hyperplane at x0
        }
        let out = run_suffix(arch, layer_index, p)?;
        debug_assert_eq!(&out.spatial, out_sp);
        let pos = flat(&target, out_sp);
        if (0..out.channels).any(|ch| out.data[ch * out_len + pos] > 0.0) {
            lo.get_or_insert(x0);
            hi = Some(x0);
        }
    }
    match (lo, hi) {
        (Some(a), Some(b)) => Ok(b - a + 1),
        _ => Ok(0),
    }
}

/// Boundary voxels by explicit neighbor-offset enumeration: decode every
/// flat index into coordinates, probe each signed unit offset, flag the
/// voxel when a probe leaves the volume or lands on another class.
/// Written against the definition, not the fast path's stride walk.
fn boundary_by_offsets(labels: &LabelVolume, class: usize) -> Vec<Vec<usize>> {
    let shape = labels.shape();
    let rank = shape.len();
    let mut offsets: Vec<Vec<isize>> = Vec::new();
    for d in 0..rank {
        for sign in [-1isize, 1] {
            let mut o = vec![0isize; rank];
            o[d] = sign;
            offsets.push(o);
        }
    }
    let decode = |mut v: usize| -> Vec<usize> {
        let mut coords = vec![0usize; rank];
        for d in (0..rank).rev() {
            coords[d] = v % shape[d];
            v /= shape[d];
        }
        coords
    };
    let at = |coords: &[usize]| -> u8 {
        let flat = coords.iter().zip(shape).fold(0usize, |acc, (&c, &s)| acc * s + c);
        labels.data()[flat]
    };
    let mut out = Vec::new();
    for v in 0..labels.numel() {
        if labels.data()[v] as usize != class {
            continue;
        }
        let coords = decode(v);
        let exposed = offsets.iter().any(|o| {
            let mut n = Vec::with_capacity(rank);
            for d in 0..rank {
                let x = coords[d] as isize + o[d];
                if x < 0 || x >= shape[d] as isize {
                    return true; // volume border counts
                }
                n.push(x as usize);
            }
            at(&n) as usize != class
        });
        if exposed {
            out.push(coords);
        }
    }
    out
}

/// All-pairs Euclidean distance matrix between two coordinate sets, one
/// square root per pair.
fn all_pairs(a: &[Vec<usize>], b: &[Vec<usize>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    p.iter()
                        .zip(q)
                        .map(|(&x, &y)| {
                            let d = x as f64 - y as f64;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

fn oracle_boundaries(
    pred: &LabelVolume,
    truth: &LabelVolume,
    class: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let pb = boundary_by_offsets(pred, class);
    let tb = boundary_by_offsets(truth, class);
    if pb.is_empty() {
        return Err(Error::EmptyBoundary { class, side: "prediction" });
    }
    if tb.is_empty() {
        return Err(Error::EmptyBoundary { class, side: "truth" });
    }
    Ok((pb, tb))
}

/// Average boundary distance via the full O(n·m) distance matrix.
pub fn adb_brute_force(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<f64> {
    let (pb, tb) = oracle_boundaries(pred, truth, class)?;
    let m = all_pairs(&pb, &tb);
    let mean_pt = m
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / pb.len() as f64;
    let mean_tp = (0..tb.len())
        .map(|j| (0..pb.len()).map(|i| m[i][j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / tb.len() as f64;
    Ok((mean_pt + mean_tp) / 2.0)
}

/// Hausdorff distance via the full distance matrix.
pub fn hausdorff_brute_force(pred: &LabelVolume, truth: &LabelVolume, class: usize) -> Result<f64> {
    let (pb, tb) = oracle_boundaries(pred, truth, class)?;
    let m = all_pairs(&pb, &tb);
    let directed_pt = m
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .fold(0.0f64, f64::max);
    let directed_tp = (0..tb.len())
        .map(|j| (0..pb.len()).map(|i| m[i][j]).fold(f64::INFINITY, f64::min))
        .fold(0.0f64, f64::max);
    Ok(directed_pt.max(directed_tp))
}

/// Outcome of a whole-network finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradientAudit {
    /// Parameter coordinates compared.
    pub checked: usize,
    /// Worst relative error between analytic and central-difference
    /// derivatives.
    pub max_rel_error: f64,
}

/// The 8×8 two-class fixture used for whole-network gradient audits:
/// small enough that perturbing every parameter stays fast, but with a
/// convolution, batch norm, a gated site and class logits all present.
pub fn miniature_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        name: "miniature".into(),
        in_channels: 1,
        num_classes: 2,
        input_spatial: vec![8, 8],
        layers: vec![
            LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Site { id: "site1".into() },
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
        ],
    }
}

/// Central-difference audit of every trainable parameter of a two-stream
/// network: the analytic loss gradient from one backward pass is compared
/// against `(L(w+h) − L(w−h)) / 2h` per coordinate. Loss attention must
/// be left out of `enabled_sites` — its weights are a hard, therefore
/// non-differentiable, function of the logits.
pub fn dan_gradient_audit(
    arch: &ArchitectureSpec,
    options: &DanOptions,
    enabled_sites: &[usize],
    seed: u64,
    h: f64,
) -> Result<GradientAudit> {
    use std::collections::HashMap;

    let dan = TwoStreamDan::<f64>::new(arch.clone(), seed, options)?.ablate(enabled_sites)?;
    let mut rng = crate::seeded_rng(seed.wrapping_add(101));
    let mut shape = vec![2, arch.in_channels];
    shape.extend_from_slice(&arch.input_spatial);
    let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let voxels = 2 * arch.input_spatial.iter().product::<usize>();
    let labels: Vec<usize> = {
        use rand::Rng;
        (0..voxels).map(|_| rng.gen_range(0..arch.num_classes)).collect()
    };

    let loss_of = |dan: &TwoStreamDan<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xb = tape.constant(&x);
        let pass = dan.forward_on_tape(&mut tape, xb, Mode::Train)?;
        let (loss, _) = dan.compute_loss(&mut tape, pass.p, pass.phat, &labels)?;
        Ok(tape.value(loss)[0])
    };

    let analytic: HashMap<String, Vec<f64>> = {
        let mut tape = Tape::new();
        let xb = tape.constant(&x);
        let pass = dan.forward_on_tape(&mut tape, xb, Mode::Train)?;
        let (loss, _) = dan.compute_loss(&mut tape, pass.p, pass.phat, &labels)?;
        tape.backward(loss)?;
        pass.handles.iter().map(|(name, v)| (name.clone(), tape.grad_or_zeros(*v))).collect()
    };

    let mut names = Vec::new();
    dan.visit("", &mut |name: String, t: &Tensor<f64>| {
        if t.requires_grad() {
            names.push((name, t.numel()));
        }
    });

    let mut probe = dan.clone();
    let mut audit = GradientAudit { checked: 0, max_rel_error: 0.0 };
    for (name, numel) in names {
        let grads = analytic.get(&name).ok_or_else(|| {
            Error::InvalidArgument(format!("parameter `{name}` produced no gradient"))
        })?;
        for j in 0..numel {
            let nudge = |probe: &mut TwoStreamDan<f64>, delta: f64| {
                probe.visit_mut("", &mut |n: String, t: &mut Tensor<f64>| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
            };
            nudge(&mut probe, h);
            let up = loss_of(&probe)?;
            nudge(&mut probe, -2.0 * h);
            let down = loss_of(&probe)?;
            nudge(&mut probe, h);
            let numeric = (up - down) / (2.0 * h);
            let rel =
                (grads[j] - numeric).abs() / grads[j].abs().max(numeric.abs()).max(1e-6);
            audit.max_rel_error = audit.max_rel_error.max(rel);
            audit.checked += 1;
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PLACEMENT_THRESHOLD;
    use crate::layers::DenseBlockSpec;
    use proptest::prelude::*;

    /// The whole-network audit agrees with central differences for both
    /// gate families (the threshold decides which family the site gets).
    #[test]
    fn network_gradient_audit_passes_for_both_gate_families() {
        for threshold in [PLACEMENT_THRESHOLD, 1e-9] {
            let options = DanOptions { threshold, ..DanOptions::default() };
            let audit =
                dan_gradient_audit(&miniature_arch(), &options, &[1], 23, 1e-5).unwrap();
            assert!(audit.checked > 200, "only {} coordinates audited", audit.checked);
            assert!(
                audit.max_rel_error < 1e-4,
                "gradient mismatch at threshold {threshold}: {}",
                audit.max_rel_error
            );
        }
    }

    fn fixture(layers: Vec<LayerSpec>, input: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            name: "oracle-fixture".into(),
            in_channels: 1,
            num_classes: 2,
            input_spatial: vec![input, input],
            layers,
        }
    }

    #[test]
    fn conv_pool_conv_fixture_agrees_at_eight() {
        let arch = fixture(
            vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::AvgPool { window: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            ],
            16,
        );
        assert_eq!(receptive_field_brute_force(&arch, 0).unwrap(), 8);
        assert_eq!(arch.receptive_field(0).unwrap(), 8);
    }

    #[test]
    fn preset_sites_agree_with_brute_force() {
        for name in ["small2d", "tiny2d"] {
            let arch = ArchitectureSpec::preset(name, 3).unwrap();
            for (idx, id) in arch.sites() {
                let fast = arch.receptive_field(idx).unwrap();
                let slow = receptive_field_brute_force(&arch, idx).unwrap();
                assert_eq!(fast, slow, "{name}/{id}");
            }
        }
    }

    /// Strategy for random small stacks that keep their shapes legal.
    fn random_layers() -> impl Strategy<Value = Vec<LayerSpec>> {
        let layer = prop_oneof![
            (prop_oneof![Just(1usize), Just(3), Just(5)], 1usize..=2, 0usize..=2).prop_map(
                |(k, s, p)| LayerSpec::Conv {
                    out_channels: 2,
                    kernel: k,
                    stride: s,
                    padding: p.min((k - 1) / 2),
                }
            ),
            Just(LayerSpec::MaxPool { window: 2, stride: 2 }),
            Just(LayerSpec::AvgPool { window: 2, stride: 2 }),
            Just(LayerSpec::Upsample { factor: 2 }),
            (1usize..=2, 1usize..=2).prop_map(|(units, growth)| {
                LayerSpec::DenseBlock(DenseBlockSpec { units, growth })
            }),
            Just(LayerSpec::BatchNorm),
            Just(LayerSpec::Relu),
        ];
        prop::collection::vec(layer, 1..=5)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The interval arithmetic matches impulse propagation on random
        /// stacks, at every readable depth.
        #[test]
        fn interval_arithmetic_matches_impulse_oracle(
            layers in random_layers(),
            input in 8usize..=14,
        ) {
            let arch = fixture(layers, input);
            // Discard stacks whose shapes collapse (pool too large etc.).
            prop_assume!(arch.shapes().is_ok());
            for idx in 0..=arch.layers.len() {
                let fast = arch.receptive_field(idx).unwrap();
                let slow = receptive_field_brute_force(&arch, idx).unwrap();
                prop_assert_eq!(fast, slow, "diverged at layer {}", idx);
            }
        }
    }
}
