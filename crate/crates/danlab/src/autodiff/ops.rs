//! Core tape operations: broadcast elementwise arithmetic, activations,
//! reductions, softmax, reshape, concatenation, and gate application.

use super::tape::{Tape, Val};
use super::{GateHandle, GateMode};
use crate::{Error, Result, Scalar};

/// Elementwise operations available through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

impl EwOp {
    fn is_binary(self) -> bool {
        matches!(self, EwOp::Add | EwOp::Mul)
    }
}

/// Broadcast result shape: ranks must match and each dimension pair must be
/// equal or contain a 1. (No implicit rank extension — callers reshape.)
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "broadcast requires equal ranks, got {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

/// Strides of `shape` inside `out_shape`, with 0 on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out_shape[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Odometer walk over `out_shape`, yielding (out index, a index, b index).
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..numel {
        f(io, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

fn ensure_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Scalar> Tape<F> {
    /// Handle the next pushed node will get; lets ops capture their own
    /// output in the backward closure.
    pub(crate) fn next_id(&self) -> Val {
        Val(self.nodes.len())
    }

    /// Elementwise dispatch. Binary ops broadcast (equal rank, singleton
    /// dimensions stretch); unary ops take `b = None`.
    pub fn elementwise(&mut self, op: EwOp, a: Val, b: Option<Val>) -> Result<Val> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::InvalidArgument(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!("{op:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(EwOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary(EwOp::Mul, a, b)
    }

    pub fn relu(&mut self, a: Val) -> Result<Val> {
        self.unary(EwOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Val) -> Result<Val> {
        self.unary(EwOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Val) -> Result<Val> {
        self.unary(EwOp::Exp, a)
    }

    pub fn log(&mut self, a: Val) -> Result<Val> {
        self.unary(EwOp::Log, a)
    }

    fn binary(&mut self, op: EwOp, a: Val, b: Val) -> Result<Val> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&ash, &bsh)?;
        let sa = broadcast_strides(&ash, &out_shape);
        let sb = broadcast_strides(&bsh, &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); numel];
        {
            let (av, bv) = (self.value(a), self.value(b));
            match op {
                EwOp::Add => for_each_broadcast(&out_shape, &sa, &sb, |io, ia, ib| {
                    out[io] = av[ia] + bv[ib];
                }),
                EwOp::Mul => for_each_broadcast(&out_shape, &sa, &sb, |io, ia, ib| {
                    out[io] = av[ia] * bv[ib];
                }),
                _ => unreachable!("binary() only called for binary ops"),
            }
        }
        ensure_finite(if op == EwOp::Add { "add" } else { "mul" }, &out)?;
        let osh = out_shape.clone();
        Ok(self.custom_op(
            out_shape,
            out,
            &[a, b],
            Box::new(move |up, ctx| match op {
                EwOp::Add => {
                    ctx.accumulate_with(a, |ga| {
                        for_each_broadcast(&osh, &sa, &sb, |io, ia, _| {
                            ga[ia] = ga[ia] + up[io];
                        });
                    });
                    ctx.accumulate_with(b, |gb| {
                        for_each_broadcast(&osh, &sa, &sb, |io, _, ib| {
                            gb[ib] = gb[ib] + up[io];
                        });
                    });
                }
                EwOp::Mul => {
                    ctx.accumulate_using(a, b, |bv, ga| {
                        for_each_broadcast(&osh, &sa, &sb, |io, ia, ib| {
                            ga[ia] = ga[ia] + up[io] * bv[ib];
                        });
                    });
                    ctx.accumulate_using(b, a, |av, gb| {
                        for_each_broadcast(&osh, &sa, &sb, |io, ia, ib| {
                            gb[ib] = gb[ib] + up[io] * av[ia];
                        });
                    });
                }
                _ => unreachable!(),
            }),
        ))
    }

    fn unary(&mut self, op: EwOp, a: Val) -> Result<Val> {
        let shape = self.shape(a).to_vec();
        let out: Vec<F> = match op {
            EwOp::Relu => self.value(a).iter().map(|&x| x.max(F::zero())).collect(),
            EwOp::Sigmoid => self
                .value(a)
                .iter()
                .map(|&x| F::one() / (F::one() + (-x).exp()))
                .collect(),
            EwOp::Exp => self.value(a).iter().map(|&x| x.exp()).collect(),
            EwOp::Log => self.value(a).iter().map(|&x| x.ln()).collect(),
            _ => unreachable!("unary() only called for unary ops"),
        };
        // Relu and sigmoid of finite input are always finite; exp can
        // overflow and log rejects the non-positive domain.
        match op {
            EwOp::Exp => ensure_finite("exp", &out)?,
            EwOp::Log => ensure_finite("log", &out)?,
            _ => {}
        }
        let out_id = self.next_id();
        Ok(self.custom_op(
            shape,
            out,
            &[a],
            Box::new(move |up, ctx| {
                let src = match op {
                    EwOp::Relu | EwOp::Log => a,
                    EwOp::Sigmoid | EwOp::Exp => out_id,
                    _ => unreachable!(),
                };
                ctx.accumulate_using(a, src, |v, ga| {
                    for i in 0..up.len() {
                        match op {
                            EwOp::Relu => {
                                if v[i] > F::zero() {
                                    ga[i] = ga[i] + up[i];
                                }
                            }
                            EwOp::Sigmoid => {
                                ga[i] = ga[i] + up[i] * v[i] * (F::one() - v[i]);
                            }
                            EwOp::Exp => ga[i] = ga[i] + up[i] * v[i],
                            EwOp::Log => ga[i] = ga[i] + up[i] / v[i],
                            _ => unreachable!(),
                        }
                    }
                });
            }),
        ))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: Val, c: F) -> Result<Val> {
        if !c.is_finite() {
            return Err(Error::InvalidArgument(format!("scale factor {c} is not finite")));
        }
        let shape = self.shape(a).to_vec();
        let out: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        ensure_finite("scale", &out)?;
        Ok(self.custom_op(
            shape,
            out,
            &[a],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(a, |ga| {
                    for i in 0..up.len() {
                        ga[i] = ga[i] + up[i] * c;
                    }
                });
            }),
        ))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: Val) -> Result<Val> {
        let total: F = self.value(a).iter().copied().sum();
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "sum" });
        }
        Ok(self.custom_op(
            vec![],
            vec![total],
            &[a],
            Box::new(move |up, ctx| {
                let g = up[0];
                ctx.accumulate_with(a, |ga| {
                    for v in ga.iter_mut() {
                        *v = *v + g;
                    }
                });
            }),
        ))
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, a: Val) -> Result<Val> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Numerically stable softmax along `axis` (max-shifted).
    pub fn softmax(&mut self, a: Val, axis: usize) -> Result<Val> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let c = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * c * inner + i;
                let mut mx = x[base];
                for k in 1..c {
                    mx = mx.max(x[base + k * inner]);
                }
                let mut sum = F::zero();
                for k in 0..c {
                    let e = (x[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    sum = sum + e;
                }
                for k in 0..c {
                    out[base + k * inner] = out[base + k * inner] / sum;
                }
            }
        }
        let out_id = self.next_id();
        Ok(self.custom_op(
            shape,
            out,
            &[a],
            Box::new(move |up, ctx| {
                ctx.accumulate_using(a, out_id, |p, ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * c * inner + i;
                            let mut dot = F::zero();
                            for k in 0..c {
                                let idx = base + k * inner;
                                dot = dot + up[idx] * p[idx];
                            }
                            for k in 0..c {
                                let idx = base + k * inner;
                                ga[idx] = ga[idx] + p[idx] * (up[idx] - dot);
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// View with a new shape holding the same number of elements.
    pub fn reshape(&mut self, a: Val, new_shape: &[usize]) -> Result<Val> {
        let old: usize = self.shape(a).iter().product();
        let new: usize = new_shape.iter().product();
        if old != new {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count ({old} vs {new})",
                self.shape(a),
                new_shape
            )));
        }
        let value = self.value(a).to_vec();
        Ok(self.custom_op(
            new_shape.to_vec(),
            value,
            &[a],
            Box::new(move |up, ctx| {
                ctx.accumulate(a, up);
            }),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, parts: &[Val], axis: usize) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (&x, &y))| d != axis && x != y)
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat shapes {:?} and {:?} differ off-axis",
                    first, s
                )));
            }
            axis_lens.push(s[axis]);
        }
        let total: usize = axis_lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut out = vec![F::zero(); outer * total * inner];
        let mut offset = 0usize;
        for (k, &p) in parts.iter().enumerate() {
            let len_k = axis_lens[k];
            let v = self.value(p);
            for o in 0..outer {
                let src = &v[o * len_k * inner..(o + 1) * len_k * inner];
                let dst_start = o * total * inner + offset * inner;
                out[dst_start..dst_start + len_k * inner].copy_from_slice(src);
            }
            offset += len_k;
        }

        let parts_owned = parts.to_vec();
        Ok(self.custom_op(
            out_shape,
            out,
            parts,
            Box::new(move |up, ctx| {
                let mut offset = 0usize;
                for (k, &p) in parts_owned.iter().enumerate() {
                    let len_k = axis_lens[k];
                    ctx.accumulate_with(p, |gp| {
                        for o in 0..outer {
                            let src_start = o * total * inner + offset * inner;
                            let dst = &mut gp[o * len_k * inner..(o + 1) * len_k * inner];
                            for (d, u) in dst.iter_mut().zip(&up[src_start..src_start + len_k * inner]) {
                                *d = *d + *u;
                            }
                        }
                    });
                    offset += len_k;
                }
            }),
        ))
    }

    /// Attach a gradient-filter gate to `x`. The gate tensor is a constant
    /// for the tape (no gradient flows into the handle); its shape must
    /// broadcast into the shape of `x` without enlarging it.
    ///
    /// * `MultiplyForward`: `out = x ⊙ g`, so the backward pass sees the
    ///   same attenuation through the product rule.
    /// * `MultiplyBackwardOnly`: `out = x` unchanged; the backward pass
    ///   receives `upstream ⊙ g`. A gate of all ones is exactly identity
    ///   in both modes.
    pub fn apply_gate(&mut self, x: Val, handle: &GateHandle<F>) -> Result<Val> {
        let xsh = self.shape(x).to_vec();
        let gsh = handle.gate().shape().to_vec();
        let out_shape = broadcast_shape(&xsh, &gsh)?;
        if out_shape != xsh {
            return Err(Error::ShapeMismatch(format!(
                "gate `{}` shape {:?} would enlarge input {:?}",
                handle.site_id(),
                gsh,
                xsh
            )));
        }
        let sx = broadcast_strides(&xsh, &out_shape);
        let sg = broadcast_strides(&gsh, &out_shape);
        let g = handle.gate().data().to_vec();

        let out: Vec<F> = match handle.mode() {
            GateMode::MultiplyForward => {
                let xv = self.value(x);
                let mut out = vec![F::zero(); xv.len()];
                for_each_broadcast(&out_shape, &sx, &sg, |io, ix, ig| {
                    out[io] = xv[ix] * g[ig];
                });
                out
            }
            GateMode::MultiplyBackwardOnly => self.value(x).to_vec(),
        };

        Ok(self.custom_op(
            out_shape.clone(),
            out,
            &[x],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(x, |gx| {
                    for_each_broadcast(&out_shape, &sx, &sg, |io, ix, ig| {
                        gx[ix] = gx[ix] + up[io] * g[ig];
                    });
                });
            }),
        ))
    }
}
