//! Zero-padded n-dimensional convolution (2 or 3 spatial axes) as a tape op.

use crate::autodiff::{Tape, Val};
use crate::{Error, Result, Scalar};

/// Geometry of a convolution: per-axis kernel/stride/padding plus channel
/// counts. Spatial rank is the kernel length (2 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    /// Same kernel/stride/padding on every spatial axis.
    pub fn uniform(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        spatial_rank: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel: vec![kernel; spatial_rank],
            stride: vec![stride; spatial_rank],
            padding: vec![padding; spatial_rank],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.kernel.len();
        if !(d == 2 || d == 3) {
            return Err(Error::InvalidArgument(format!(
                "convolution supports 2 or 3 spatial axes, got {d}"
            )));
        }
        if self.stride.len() != d || self.padding.len() != d {
            return Err(Error::InvalidArgument(
                "kernel/stride/padding must have the same length".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    /// Output spatial size: floor((in + 2·pad − kernel)/stride) + 1.
    pub fn out_spatial(&self, in_spatial: &[usize]) -> Result<Vec<usize>> {
        if in_spatial.len() != self.kernel.len() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} spatial axes, input has {}",
                self.kernel.len(),
                in_spatial.len()
            )));
        }
        in_spatial
            .iter()
            .zip(&self.kernel)
            .zip(&self.stride)
            .zip(&self.padding)
            .map(|(((&i, &k), &s), &p)| {
                let padded = i + 2 * p;
                if padded < k {
                    return Err(Error::ShapeMismatch(format!(
                        "conv kernel {k} larger than padded input {padded}"
                    )));
                }
                Ok((padded - k) / s + 1)
            })
            .collect()
    }

    /// Expected weight tensor shape `[out, in, kernel...]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }
}

fn ceil_div(a: isize, b: isize) -> isize {
    debug_assert!(b > 0);
    (a + b - 1).div_euclid(b)
}

/// Range of output positions whose input index `o·s + k − p` is in
/// `[0, in_len)`.
fn valid_out_range(k: usize, p: usize, s: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let (k, p, s) = (k as isize, p as isize, s as isize);
    let (il, ol) = (in_len as isize, out_len as isize);
    let lo = if k >= p { 0 } else { ceil_div(p - k, s).clamp(0, ol) };
    let hi = ceil_div(il - k + p, s).clamp(0, ol);
    (lo as usize, hi.max(lo) as usize)
}

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    in_sp: Vec<usize>,
    out_sp: Vec<usize>,
    kernel: Vec<usize>,
    stride: Vec<usize>,
    pad: Vec<usize>,
}

fn forward2<F: Scalar>(x: &[F], w: &[F], bias: &[F], g: &Geometry) -> Vec<F> {
    let (ih, iw) = (g.in_sp[0], g.in_sp[1]);
    let (oh, ow) = (g.out_sp[0], g.out_sp[1]);
    let (kh, kw) = (g.kernel[0], g.kernel[1]);
    let (sy, sx) = (g.stride[0], g.stride[1]);
    let (py, px) = (g.pad[0], g.pad[1]);
    let mut out = vec![F::zero(); g.batch * g.cout * oh * ow];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let ob = (b * g.cout + co) * oh * ow;
            out[ob..ob + oh * ow].fill(bias[co]);
            for ci in 0..g.cin {
                let xb = (b * g.cin + ci) * ih * iw;
                let wb = (co * g.cin + ci) * kh * kw;
                for ky in 0..kh {
                    let (ylo, yhi) = valid_out_range(ky, py, sy, ih, oh);
                    for kx in 0..kw {
                        let wv = w[wb + ky * kw + kx];
                        let (xlo, xhi) = valid_out_range(kx, px, sx, iw, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * sy + ky - py;
                            let orow = ob + oy * ow;
                            let xrow = xb + iy * iw;
                            if sx == 1 {
                                let x0 = xrow + xlo + kx - px;
                                let (outs, xs) =
                                    (&mut out[orow + xlo..orow + xhi], &x[x0..x0 + xhi - xlo]);
                                for (o, xv) in outs.iter_mut().zip(xs) {
                                    *o = *o + wv * *xv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ox * sx + kx - px;
                                    out[orow + ox] = out[orow + ox] + wv * x[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward2<F: Scalar>(
    up: &[F],
    x: &[F],
    w: &[F],
    g: &Geometry,
    gx: Option<&mut [F]>,
    gw: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let (ih, iw) = (g.in_sp[0], g.in_sp[1]);
    let (oh, ow) = (g.out_sp[0], g.out_sp[1]);
    let (kh, kw) = (g.kernel[0], g.kernel[1]);
    let (sy, sx) = (g.stride[0], g.stride[1]);
    let (py, px) = (g.pad[0], g.pad[1]);
    if let Some(gb) = gb {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let ob = (b * g.cout + co) * oh * ow;
                let mut acc = F::zero();
                for u in &up[ob..ob + oh * ow] {
                    acc = acc + *u;
                }
                gb[co] = gb[co] + acc;
            }
        }
    }
    if let Some(gx) = gx {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let ob = (b * g.cout + co) * oh * ow;
                for ci in 0..g.cin {
                    let xb = (b * g.cin + ci) * ih * iw;
                    let wb = (co * g.cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let (ylo, yhi) = valid_out_range(ky, py, sy, ih, oh);
                        for kx in 0..kw {
                            let wv = w[wb + ky * kw + kx];
                            let (xlo, xhi) = valid_out_range(kx, px, sx, iw, ow);
                            for oy in ylo..yhi {
                                let iy = oy * sy + ky - py;
                                let orow = ob + oy * ow;
                                let xrow = xb + iy * iw;
                                for ox in xlo..xhi {
                                    let ix = ox * sx + kx - px;
                                    gx[xrow + ix] = gx[xrow + ix] + wv * up[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let ob = (b * g.cout + co) * oh * ow;
                for ci in 0..g.cin {
                    let xb = (b * g.cin + ci) * ih * iw;
                    let wb = (co * g.cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let (ylo, yhi) = valid_out_range(ky, py, sy, ih, oh);
                        for kx in 0..kw {
                            let (xlo, xhi) = valid_out_range(kx, px, sx, iw, ow);
                            let mut acc = F::zero();
                            for oy in ylo..yhi {
                                let iy = oy * sy + ky - py;
                                let orow = ob + oy * ow;
                                let xrow = xb + iy * iw;
                                for ox in xlo..xhi {
                                    let ix = ox * sx + kx - px;
                                    acc = acc + up[orow + ox] * x[xrow + ix];
                                }
                            }
                            gw[wb + ky * kw + kx] = gw[wb + ky * kw + kx] + acc;
                        }
                    }
                }
            }
        }
    }
}

fn forward3<F: Scalar>(x: &[F], w: &[F], bias: &[F], g: &Geometry) -> Vec<F> {
    let (id, ih, iw) = (g.in_sp[0], g.in_sp[1], g.in_sp[2]);
    let (od, oh, ow) = (g.out_sp[0], g.out_sp[1], g.out_sp[2]);
    let (kd, kh, kw) = (g.kernel[0], g.kernel[1], g.kernel[2]);
    let (sz, sy, sx) = (g.stride[0], g.stride[1], g.stride[2]);
    let (pz, py, px) = (g.pad[0], g.pad[1], g.pad[2]);
    let mut out = vec![F::zero(); g.batch * g.cout * od * oh * ow];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let ob = (b * g.cout + co) * od * oh * ow;
            out[ob..ob + od * oh * ow].fill(bias[co]);
            for ci in 0..g.cin {
                let xb = (b * g.cin + ci) * id * ih * iw;
                let wb = (co * g.cin + ci) * kd * kh * kw;
                for kz in 0..kd {
                    let (zlo, zhi) = valid_out_range(kz, pz, sz, id, od);
                    for ky in 0..kh {
                        let (ylo, yhi) = valid_out_range(ky, py, sy, ih, oh);
                        for kx in 0..kw {
                            let wv = w[wb + (kz * kh + ky) * kw + kx];
                            let (xlo, xhi) = valid_out_range(kx, px, sx, iw, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            for oz in zlo..zhi {
                                let iz = oz * sz + kz - pz;
                                for oy in ylo..yhi {
                                    let iy = oy * sy + ky - py;
                                    let orow = ob + (oz * oh + oy) * ow;
                                    let xrow = xb + (iz * ih + iy) * iw;
                                    for ox in xlo..xhi {
                                        let ix = ox * sx + kx - px;
                                        out[orow + ox] = out[orow + ox] + wv * x[xrow + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward3<F: Scalar>(
    up: &[F],
    x: &[F],
    w: &[F],
    g: &Geometry,
    gx: Option<&mut [F]>,
    gw: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let (id, ih, iw) = (g.in_sp[0], g.in_sp[1], g.in_sp[2]);
    let (od, oh, ow) = (g.out_sp[0], g.out_sp[1], g.out_sp[2]);
    let (kd, kh, kw) = (g.kernel[0], g.kernel[1], g.kernel[2]);
    let (sz, sy, sx) = (g.stride[0], g.stride[1], g.stride[2]);
    let (pz, py, px) = (g.pad[0], g.pad[1], g.pad[2]);
    let osp = od * oh * ow;
    if let Some(gb) = gb {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let ob = (b * g.cout + co) * osp;
                let mut acc = F::zero();
                for u in &up[ob..ob + osp] {
                    acc = acc + *u;
                }
                gb[co] = gb[co] + acc;
            }
        }
    }
    let scatter = |to_x: bool, buf: &mut [F]| {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let ob = (b * g.cout + co) * osp;
                for ci in 0..g.cin {
                    let xb = (b * g.cin + ci) * id * ih * iw;
                    let wb = (co * g.cin + ci) * kd * kh * kw;
                    for kz in 0..kd {
                        let (zlo, zhi) = valid_out_range(kz, pz, sz, id, od);
                        for ky in 0..kh {
                            let (ylo, yhi) = valid_out_range(ky, py, sy, ih, oh);
                            for kx in 0..kw {
                                let (xlo, xhi) = valid_out_range(kx, px, sx, iw, ow);
                                // Only one of x/w is populated per call.
                                let wv = if to_x { w[wb + (kz * kh + ky) * kw + kx] } else { F::zero() };
                                let mut acc = F::zero();
                                for oz in zlo..zhi {
                                    let iz = oz * sz + kz - pz;
                                    for oy in ylo..yhi {
                                        let iy = oy * sy + ky - py;
                                        let orow = ob + (oz * oh + oy) * ow;
                                        let xrow = xb + (iz * ih + iy) * iw;
                                        for ox in xlo..xhi {
                                            let ix = ox * sx + kx - px;
                                            if to_x {
                                                buf[xrow + ix] =
                                                    buf[xrow + ix] + wv * up[orow + ox];
                                            } else {
                                                acc = acc + up[orow + ox] * x[xrow + ix];
                                            }
                                        }
                                    }
                                }
                                if !to_x {
                                    let wi = wb + (kz * kh + ky) * kw + kx;
                                    buf[wi] = buf[wi] + acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if let Some(gx) = gx {
        scatter(true, gx);
    }
    if let Some(gw) = gw {
        scatter(false, gw);
    }
}

impl<F: Scalar> Tape<F> {
    /// Convolution `x:[B, Cin, sp...] ⊛ w:[Cout, Cin, k...] + b:[Cout]`,
    /// zero padding, with gradients for input, weights and bias.
    pub fn conv(&mut self, x: Val, w: Val, b: Val, spec: &ConvSpec) -> Result<Val> {
        spec.validate()?;
        let d = spec.spatial_rank();
        let xsh = self.shape(x).to_vec();
        if xsh.len() != d + 2 {
            return Err(Error::ShapeMismatch(format!(
                "conv input must be [batch, channels, {d} spatial dims], got {xsh:?}"
            )));
        }
        if xsh[1] != spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                spec.in_channels, xsh[1]
            )));
        }
        if self.shape(w) != spec.weight_shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "conv weight shape {:?} does not match spec {:?}",
                self.shape(w),
                spec.weight_shape()
            )));
        }
        if self.shape(b) != [spec.out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias shape {:?}, expected [{}]",
                self.shape(b),
                spec.out_channels
            )));
        }
        let in_sp = xsh[2..].to_vec();
        let out_sp = spec.out_spatial(&in_sp)?;
        let geo = Geometry {
            batch: xsh[0],
            cin: spec.in_channels,
            cout: spec.out_channels,
            in_sp,
            out_sp: out_sp.clone(),
            kernel: spec.kernel.clone(),
            stride: spec.stride.clone(),
            pad: spec.padding.clone(),
        };
        let out = if d == 2 {
            forward2(self.value(x), self.value(w), self.value(b), &geo)
        } else {
            forward3(self.value(x), self.value(w), self.value(b), &geo)
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "conv" });
        }
        let mut out_shape = vec![geo.batch, geo.cout];
        out_shape.extend_from_slice(&out_sp);

        Ok(self.custom_op(
            out_shape,
            out,
            &[x, w, b],
            Box::new(move |up, ctx| {
                // Bias gradient is separable; input/weight share loops.
                if ctx.needs_grad(b) {
                    ctx.accumulate_with(b, |gb| {
                        if geo.kernel.len() == 2 {
                            backward2(up, &[], &[], &geo, None, None, Some(gb));
                        } else {
                            backward3(up, &[], &[], &geo, None, None, Some(gb));
                        }
                    });
                }
                if ctx.needs_grad(x) {
                    ctx.accumulate_using(x, w, |wv, gx| {
                        if geo.kernel.len() == 2 {
                            backward2(up, &[], wv, &geo, Some(gx), None, None);
                        } else {
                            backward3(up, &[], wv, &geo, Some(gx), None, None);
                        }
                    });
                }
                if ctx.needs_grad(w) {
                    ctx.accumulate_using(w, x, |xv, gw| {
                        if geo.kernel.len() == 2 {
                            backward2(up, xv, &[], &geo, None, Some(gw), None);
                        } else {
                            backward3(up, xv, &[], &geo, None, Some(gw), None);
                        }
                    });
                }
            }),
        ))
    }
}
