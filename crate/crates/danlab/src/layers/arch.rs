//! Declarative network architectures and exact receptive-field analysis.
//!
//! An [`ArchitectureSpec`] is a linear stack of layers with named
//! attention sites marked inline. [`ArchitectureSpec::receptive_field`]
//! answers, for any layer, how wide the patch of units at that layer is
//! whose activations influence one central output unit — equivalently,
//! how many of that layer's units receive gradient from one output
//! voxel's loss term. That width is the ρ that the label-noise diffusion
//! model turns into a pollution probability per site.

use super::conv::ConvSpec;
use crate::{Error, Result};
use std::collections::HashSet;

/// Densely connected block: `units` rounds of BN → ReLU → 3×3 conv
/// producing `growth` channels each, every round consuming the
/// concatenation of the block input and all previous rounds. Output is
/// that concatenation: `in + units·growth` channels, spatial unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub units: usize,
    pub growth: usize,
}

impl DenseBlockSpec {
    /// Desk-scale default: 3 units of growth 4.
    pub fn desk() -> Self {
        DenseBlockSpec { units: 3, growth: 4 }
    }
}

/// One layer of an architecture. Convs are uniform (same kernel, stride
/// and padding on every spatial axis).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Upsample { factor: usize },
    DenseBlock(DenseBlockSpec),
    /// Attention attachment point; identity for shapes and receptive
    /// fields. The id names the site in reports and checkpoints.
    Site { id: String },
}

/// A complete network description: input geometry, class count, layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_spatial: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn spatial_rank(&self) -> usize {
        self.input_spatial.len()
    }

    /// (channels, spatial shape) after each layer, checking legality.
    pub fn shapes(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut c = self.in_channels;
        let mut sp = self.input_spatial.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    let spec =
                        ConvSpec::uniform(c, *out_channels, *kernel, *stride, *padding, sp.len())?;
                    sp = spec.out_spatial(&sp)?;
                    c = *out_channels;
                }
                LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Site { .. } => {}
                LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                    sp = sp
                        .iter()
                        .map(|&s| {
                            if *window == 0 || *stride == 0 || s < *window {
                                Err(Error::ShapeMismatch(format!(
                                    "layer {i}: pool window {window} does not fit extent {s}"
                                )))
                            } else {
                                Ok((s - window) / stride + 1)
                            }
                        })
                        .collect::<Result<_>>()?;
                }
                LayerSpec::Upsample { factor } => {
                    if *factor == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: upsample factor must be positive"
                        )));
                    }
                    sp = sp.iter().map(|&s| s * factor).collect();
                }
                LayerSpec::DenseBlock(db) => {
                    if db.units == 0 || db.growth == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: dense block units/growth must be positive"
                        )));
                    }
                    c += db.units * db.growth;
                }
            }
            if sp.iter().any(|&s| s == 0) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} reduces a spatial extent to zero"
                )));
            }
            out.push((c, sp.clone()));
        }
        Ok(out)
    }

    /// Structural validation: shapes are legal, site ids unique and
    /// non-empty, basic counts positive.
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidArgument("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        let d = self.spatial_rank();
        if !(d == 2 || d == 3) {
            return Err(Error::InvalidArgument(format!("spatial rank must be 2 or 3, got {d}")));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("architecture has no layers".into()));
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            if let LayerSpec::Site { id } = layer {
                if id.is_empty() {
                    return Err(Error::InvalidArgument("empty site id".into()));
                }
                if !seen.insert(id.clone()) {
                    return Err(Error::InvalidArgument(format!("duplicate site id `{id}`")));
                }
            }
        }
        self.shapes()?;
        Ok(())
    }

    /// Validation for use as a segmentation network: output must be
    /// per-voxel class logits at input resolution.
    pub fn validate_segmentation(&self) -> Result<()> {
        self.validate()?;
        let shapes = self.shapes()?;
        let (c, sp) = shapes.last().expect("non-empty layers");
        if *c != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "final layer yields {c} channels, expected {} class logits",
                self.num_classes
            )));
        }
        if sp != &self.input_spatial {
            return Err(Error::ShapeMismatch(format!(
                "final spatial shape {:?} does not match input {:?}",
                sp, self.input_spatial
            )));
        }
        Ok(())
    }

    /// Attention sites in layer order: (layer index, id).
    pub fn sites(&self) -> Vec<(usize, String)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::Site { id } => Some((i, id.clone())),
                _ => None,
            })
            .collect()
    }

    /// Receptive-field extent at the *input* of `layers[layer_index]`,
    /// along the first spatial axis, for the canonical central output
    /// unit (`layer_index == len()` asks about the output itself, which
    /// is trivially 1). For an attention site this is the width of the
    /// feature patch feeding one output voxel — the ρ of the label-noise
    /// diffusion model.
    ///
    /// Walks an index interval backward from the last layer using exact
    /// integer arithmetic per layer kind —
    ///   conv (k,s,p):   [a, b] → [a·s − p, b·s − p + k − 1]
    ///   pool (w,s):     [a, b] → [a·s, b·s + w − 1]
    ///   upsample (f):   [a, b] → [⌊a/f⌋, ⌊b/f⌋]
    ///   dense block:    [a, b] → [a − units, b + units]
    /// — clamping to the valid coordinate range at every step, so border
    /// clipping is accounted for exactly.
    pub fn receptive_field(&self, layer_index: usize) -> Result<usize> {
        if layer_index > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer index {layer_index} out of range ({} layers)",
                self.layers.len()
            )));
        }
        let shapes = self.shapes()?;
        // Extent of the first spatial axis after layer j (input for j = -1).
        let size_after = |j: isize| -> isize {
            if j < 0 {
                self.input_spatial[0] as isize
            } else {
                shapes[j as usize].1[0] as isize
            }
        };

        let out_size = size_after(self.layers.len() as isize - 1);
        let u = out_size / 2; // canonical central unit
        let (mut a, mut b) = (u, u);
        for j in (layer_index..self.layers.len()).rev() {
            match &self.layers[j] {
                LayerSpec::Conv { kernel, stride, padding, .. } => {
                    let (k, s, p) = (*kernel as isize, *stride as isize, *padding as isize);
                    a = a * s - p;
                    b = b * s - p + k - 1;
                }
                LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                    let (w, s) = (*window as isize, *stride as isize);
                    a *= s;
                    b = b * s + w - 1;
                }
                LayerSpec::Upsample { factor } => {
                    let f = *factor as isize;
                    a = a.div_euclid(f);
                    b = b.div_euclid(f);
                }
                LayerSpec::DenseBlock(db) => {
                    a -= db.units as isize;
                    b += db.units as isize;
                }
                LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Site { .. } => {}
            }
            let limit = size_after(j as isize - 1);
            a = a.clamp(0, limit - 1);
            b = b.clamp(0, limit - 1);
        }
        Ok((b - a + 1) as usize)
    }

    /// Named presets.
    ///
    /// * `small2d` — 32×32 encoder/decoder with two dense blocks, three
    ///   attention sites, class logits at full resolution.
    /// * `tiny2d` — 16×16 lighter variant for fast experiments.
    /// * `small3d` — 24³ volumetric variant.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        use LayerSpec::*;
        let site = |id: &str| Site { id: id.to_string() };
        let conv = |c: usize| Conv { out_channels: c, kernel: 3, stride: 1, padding: 1 };
        let spec = match name {
            "small2d" => ArchitectureSpec {
                name: name.to_string(),
                in_channels: 1,
                num_classes,
                input_spatial: vec![32, 32],
                layers: vec![
                    conv(8),
                    BatchNorm,
                    Relu,
                    site("site1"),
                    MaxPool { window: 2, stride: 2 },
                    DenseBlock(DenseBlockSpec::desk()),
                    site("site2"),
                    MaxPool { window: 2, stride: 2 },
                    DenseBlock(DenseBlockSpec::desk()),
                    conv(16),
                    BatchNorm,
                    Relu,
                    Upsample { factor: 2 },
                    conv(12),
                    BatchNorm,
                    Relu,
                    Upsample { factor: 2 },
                    conv(12),
                    BatchNorm,
                    Relu,
                    site("site3"),
                    conv(num_classes),
                ],
            },
            "tiny2d" => ArchitectureSpec {
                name: name.to_string(),
                in_channels: 1,
                num_classes,
                input_spatial: vec![16, 16],
                layers: vec![
                    conv(6),
                    BatchNorm,
                    Relu,
                    site("site1"),
                    MaxPool { window: 2, stride: 2 },
                    DenseBlock(DenseBlockSpec { units: 2, growth: 3 }),
                    site("site2"),
                    conv(10),
                    BatchNorm,
                    Relu,
                    Upsample { factor: 2 },
                    conv(8),
                    BatchNorm,
                    Relu,
                    site("site3"),
                    conv(num_classes),
                ],
            },
            "small3d" => ArchitectureSpec {
                name: name.to_string(),
                in_channels: 1,
                num_classes,
                input_spatial: vec![24, 24, 24],
                layers: vec![
                    conv(6),
                    BatchNorm,
                    Relu,
                    site("site1"),
                    MaxPool { window: 2, stride: 2 },
                    DenseBlock(DenseBlockSpec { units: 2, growth: 3 }),
                    site("site2"),
                    conv(10),
                    BatchNorm,
                    Relu,
                    Upsample { factor: 2 },
                    conv(8),
                    BatchNorm,
                    Relu,
                    site("site3"),
                    conv(num_classes),
                ],
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown architecture preset `{other}` (try small2d, tiny2d, small3d)"
                )))
            }
        };
        spec.validate_segmentation()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_segmentation_nets() {
        for name in ["small2d", "tiny2d", "small3d"] {
            let arch = ArchitectureSpec::preset(name, 3).unwrap();
            arch.validate_segmentation().unwrap();
            assert_eq!(arch.sites().len(), 3, "{name} must expose 3 sites");
        }
    }

    #[test]
    fn shapes_track_channels_and_resolution() {
        let arch = ArchitectureSpec::preset("small2d", 3).unwrap();
        let shapes = arch.shapes().unwrap();
        let (c, sp) = shapes.last().unwrap();
        assert_eq!(*c, 3);
        assert_eq!(sp, &vec![32, 32]);
        // Dense block grows channels by units × growth.
        let (c5, sp5) = &shapes[5];
        assert_eq!(*c5, 8 + 3 * 4);
        assert_eq!(sp5, &vec![16, 16]);
    }

    #[test]
    fn conv_pool_conv_receptive_field_is_eight() {
        // 3×3 conv → 2×2 stride-2 pool → 3×3 conv, whole chain seen from
        // the input: working back from one output unit, conv ±1 → 3 wide;
        // pool maps [a,b] to [2a, 2b+1] → 6 wide; conv ±1 → 8 wide.
        let arch = ArchitectureSpec {
            name: "rf-fixture".into(),
            in_channels: 1,
            num_classes: 2,
            input_spatial: vec![16, 16],
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::AvgPool { window: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            ],
        };
        assert_eq!(arch.receptive_field(0).unwrap(), 8);
        assert_eq!(arch.receptive_field(1).unwrap(), 6);
        assert_eq!(arch.receptive_field(2).unwrap(), 3);
        // Index len() asks about the output map itself.
        assert_eq!(arch.receptive_field(3).unwrap(), 1);
    }

    #[test]
    fn small2d_site_fields_shrink_toward_the_output() {
        let arch = ArchitectureSpec::preset("small2d", 3).unwrap();
        let sites = arch.sites();
        let rho: Vec<usize> =
            sites.iter().map(|(i, _)| arch.receptive_field(*i).unwrap()).collect();
        assert_eq!(rho, vec![32, 16, 3]);
        // Loss-level field is a single unit.
        assert_eq!(arch.receptive_field(arch.layers.len()).unwrap(), 1);
    }

    #[test]
    fn duplicate_site_ids_are_rejected() {
        let mut arch = ArchitectureSpec::preset("tiny2d", 3).unwrap();
        arch.layers.push(LayerSpec::Site { id: "site1".into() });
        assert!(arch.validate().is_err());
    }
}
