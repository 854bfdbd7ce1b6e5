//! Pooling, nearest-neighbour upsampling, grid max-pooling and spatial
//! mean — all over the trailing spatial axes of `[B, C, spatial...]`.

use crate::autodiff::{Tape, Val};
use crate::{Error, Result, Scalar};

fn split_bc_sp<F: Scalar>(tape: &Tape<F>, x: Val, op: &str) -> Result<(usize, usize, Vec<usize>)> {
    let sh = tape.shape(x);
    if sh.len() < 3 || sh.len() > 5 {
        return Err(Error::ShapeMismatch(format!(
            "{op} input must be [batch, channels, 1-3 spatial dims], got {sh:?}"
        )));
    }
    Ok((sh[0], sh[1], sh[2..].to_vec()))
}

/// Output length without padding: floor((in − window)/stride) + 1.
/// Trailing elements that do not fill a window are dropped.
fn pool_out_len(i: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window/stride must be positive".into()));
    }
    if i < window {
        return Err(Error::ShapeMismatch(format!(
            "pool window {window} larger than input extent {i}"
        )));
    }
    Ok((i - window) / stride + 1)
}

/// Row-major odometer over an n-d shape.
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

fn flat_index(coords: &[usize], shape: &[usize]) -> usize {
    let mut idx = 0;
    for (c, s) in coords.iter().zip(shape) {
        idx = idx * s + c;
    }
    idx
}

impl<F: Scalar> Tape<F> {
    /// Max pooling with a cubic window. Ties go to the first element in
    /// scan order, and the backward pass routes the gradient to exactly
    /// that element.
    pub fn maxpool(&mut self, x: Val, window: usize, stride: usize) -> Result<Val> {
        let (bsz, c, in_sp) = split_bc_sp(self, x, "maxpool")?;
        let out_sp: Vec<usize> = in_sp
            .iter()
            .map(|&i| pool_out_len(i, window, stride))
            .collect::<Result<_>>()?;
        let in_len: usize = in_sp.iter().product();
        let out_len: usize = out_sp.iter().product();
        let win_shape = vec![window; in_sp.len()];

        let xv = self.value(x);
        let mut out = vec![F::zero(); bsz * c * out_len];
        let mut argmax = vec![0usize; bsz * c * out_len];
        for bc in 0..bsz * c {
            let xb = bc * in_len;
            let ob = bc * out_len;
            for_each_index(&out_sp, |oc| {
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for_each_index(&win_shape, |wc| {
                    let ic: Vec<usize> =
                        oc.iter().zip(wc).map(|(&o, &w)| o * stride + w).collect();
                    let idx = xb + flat_index(&ic, &in_sp);
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                });
                let o = ob + flat_index(oc, &out_sp);
                out[o] = best;
                argmax[o] = best_idx;
            });
        }

        let mut out_shape = vec![bsz, c];
        out_shape.extend_from_slice(&out_sp);
        Ok(self.custom_op(
            out_shape,
            out,
            &[x],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] = gx[src] + up[o];
                    }
                });
            }),
        ))
    }

    /// Average pooling with a cubic window (no padding, so every window
    /// is full).
    pub fn avgpool(&mut self, x: Val, window: usize, stride: usize) -> Result<Val> {
        let (bsz, c, in_sp) = split_bc_sp(self, x, "avgpool")?;
        let out_sp: Vec<usize> = in_sp
            .iter()
            .map(|&i| pool_out_len(i, window, stride))
            .collect::<Result<_>>()?;
        let in_len: usize = in_sp.iter().product();
        let out_len: usize = out_sp.iter().product();
        let win_shape = vec![window; in_sp.len()];
        let inv = F::one() / F::from_f64(win_shape.iter().product::<usize>() as f64);

        let xv = self.value(x);
        let mut out = vec![F::zero(); bsz * c * out_len];
        for bc in 0..bsz * c {
            let xb = bc * in_len;
            let ob = bc * out_len;
            for_each_index(&out_sp, |oc| {
                let mut acc = F::zero();
                for_each_index(&win_shape, |wc| {
                    let ic: Vec<usize> =
                        oc.iter().zip(wc).map(|(&o, &w)| o * stride + w).collect();
                    acc = acc + xv[xb + flat_index(&ic, &in_sp)];
                });
                out[ob + flat_index(oc, &out_sp)] = acc * inv;
            });
        }

        let mut out_shape = vec![bsz, c];
        out_shape.extend_from_slice(&out_sp);
        let (osp, isp) = (out_sp.clone(), in_sp.clone());
        Ok(self.custom_op(
            out_shape,
            out,
            &[x],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(x, |gx| {
                    let win_shape = vec![window; isp.len()];
                    for bc in 0..bsz * c {
                        let xb = bc * in_len;
                        let ob = bc * out_len;
                        for_each_index(&osp, |oc| {
                            let g = up[ob + flat_index(oc, &osp)] * inv;
                            for_each_index(&win_shape, |wc| {
                                let ic: Vec<usize> =
                                    oc.iter().zip(wc).map(|(&o, &w)| o * stride + w).collect();
                                let idx = xb + flat_index(&ic, &isp);
                                gx[idx] = gx[idx] + g;
                            });
                        });
                    }
                });
            }),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor on every spatial
    /// axis: `out[o] = in[o / factor]`.
    pub fn upsample_nearest(&mut self, x: Val, factor: usize) -> Result<Val> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let (bsz, c, in_sp) = split_bc_sp(self, x, "upsample")?;
        let out_sp: Vec<usize> = in_sp.iter().map(|&i| i * factor).collect();
        let in_len: usize = in_sp.iter().product();
        let out_len: usize = out_sp.iter().product();

        let xv = self.value(x);
        let mut out = vec![F::zero(); bsz * c * out_len];
        for bc in 0..bsz * c {
            let xb = bc * in_len;
            let ob = bc * out_len;
            for_each_index(&out_sp, |oc| {
                let ic: Vec<usize> = oc.iter().map(|&o| o / factor).collect();
                out[ob + flat_index(oc, &out_sp)] = xv[xb + flat_index(&ic, &in_sp)];
            });
        }

        let mut out_shape = vec![bsz, c];
        out_shape.extend_from_slice(&out_sp);
        let (osp, isp) = (out_sp.clone(), in_sp.clone());
        Ok(self.custom_op(
            out_shape,
            out,
            &[x],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(x, |gx| {
                    for bc in 0..bsz * c {
                        let xb = bc * in_len;
                        let ob = bc * out_len;
                        for_each_index(&osp, |oc| {
                            let ic: Vec<usize> = oc.iter().map(|&o| o / factor).collect();
                            let dst = xb + flat_index(&ic, &isp);
                            gx[dst] = gx[dst] + up[ob + flat_index(oc, &osp)];
                        });
                    }
                });
            }),
        ))
    }

    /// Grid max-pooling: each spatial axis of length S is split into
    /// `grid` cells of width ceil(S/grid) (last cell ragged), and each
    /// cell reduces to its maximum. Output is `[B, C, grid, ...]`.
    /// Errors if the split would leave an empty cell.
    pub fn grid_max(&mut self, x: Val, grid: usize) -> Result<Val> {
        if grid == 0 {
            return Err(Error::InvalidArgument("grid size must be positive".into()));
        }
        let (bsz, c, in_sp) = split_bc_sp(self, x, "grid_max")?;
        let cells: Vec<Vec<(usize, usize)>> = in_sp
            .iter()
            .map(|&s| {
                let ch = s.div_ceil(grid);
                (0..grid)
                    .map(|i| {
                        let start = i * ch;
                        let end = ((i + 1) * ch).min(s);
                        if start >= end {
                            return Err(Error::InvalidArgument(format!(
                                "grid_max: cell {i} is empty for extent {s} and grid {grid}"
                            )));
                        }
                        Ok((start, end))
                    })
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;

        let in_len: usize = in_sp.iter().product();
        let out_sp = vec![grid; in_sp.len()];
        let out_len: usize = out_sp.iter().product();

        let xv = self.value(x);
        let mut out = vec![F::zero(); bsz * c * out_len];
        let mut argmax = vec![0usize; bsz * c * out_len];
        for bc in 0..bsz * c {
            let xb = bc * in_len;
            let ob = bc * out_len;
            for_each_index(&out_sp, |oc| {
                let bounds: Vec<(usize, usize)> =
                    oc.iter().enumerate().map(|(d, &i)| cells[d][i]).collect();
                let extents: Vec<usize> = bounds.iter().map(|(a, b)| b - a).collect();
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for_each_index(&extents, |wc| {
                    let ic: Vec<usize> =
                        wc.iter().zip(&bounds).map(|(&w, (a, _))| a + w).collect();
                    let idx = xb + flat_index(&ic, &in_sp);
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                });
                let o = ob + flat_index(oc, &out_sp);
                out[o] = best;
                argmax[o] = best_idx;
            });
        }

        let mut out_shape = vec![bsz, c];
        out_shape.extend_from_slice(&out_sp);
        Ok(self.custom_op(
            out_shape,
            out,
            &[x],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] = gx[src] + up[o];
                    }
                });
            }),
        ))
    }

    /// Mean over all spatial positions: `[B, C, spatial...] -> [B, C]`.
    pub fn spatial_mean(&mut self, x: Val) -> Result<Val> {
        let (bsz, c, in_sp) = split_bc_sp(self, x, "spatial_mean")?;
        let sp: usize = in_sp.iter().product();
        let inv = F::one() / F::from_f64(sp as f64);
        let xv = self.value(x);
        let mut out = vec![F::zero(); bsz * c];
        for bc in 0..bsz * c {
            let mut acc = F::zero();
            for v in &xv[bc * sp..(bc + 1) * sp] {
                acc = acc + *v;
            }
            out[bc] = acc * inv;
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "spatial_mean" });
        }
        Ok(self.custom_op(
            vec![bsz, c],
            out,
            &[x],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(x, |gx| {
                    for bc in 0..bsz * c {
                        let g = up[bc] * inv;
                        for v in &mut gx[bc * sp..(bc + 1) * sp] {
                            *v = *v + g;
                        }
                    }
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};

    #[test]
    fn maxpool_routes_gradient_to_first_tie() {
        let mut tape = Tape::<f64>::new();
        // 2x2 window over a 2x2 plane of equal values: first in scan order wins.
        let x = tape.push_leaf(vec![1, 1, 2, 2], vec![5.0; 4], true);
        let y = tape.maxpool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[5.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradients_check_out() {
        // Distinct values so argmax is stable under the probe step.
        let data: Vec<f64> = (0..32).map(|i| ((i * 37 % 32) as f64) * 0.5).collect();
        let x = Tensor::new(vec![2, 1, 4, 4], data).unwrap();
        let err = grad_check(
            |tape, x| {
                let y = tape.maxpool(x, 2, 2)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn avgpool_then_upsample_roundtrips_block_constants() {
        // upsample(x, 2) then avgpool(·, 2, 2) is the identity.
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect(), false);
        let u = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 4, 4]);
        let back = tape.avgpool(u, 2, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn avgpool_and_upsample_gradients_check_out() {
        let mut rng = crate::test_rng(17);
        let x = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let u = tape.upsample_nearest(x, 2)?;
                let p = tape.avgpool(u, 2, 2)?;
                let sq = tape.mul(p, p)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn pool_drops_trailing_remainder() {
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![1, 1, 5, 5], (0..25).map(|v| v as f64).collect(), false);
        let y = tape.maxpool(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        // Last row/column (indices 4) never participate.
        assert_eq!(tape.value(y), &[6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn grid_max_handles_ragged_cells() {
        let mut tape = Tape::<f64>::new();
        // 5 wide, grid 2 -> cells [0,3) and [3,5).
        let x = tape.push_leaf(vec![1, 1, 5, 5], (0..25).map(|v| v as f64).collect(), false);
        let y = tape.grid_max(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[12.0, 14.0, 22.0, 24.0]);
    }

    #[test]
    fn grid_max_rejects_empty_cells() {
        let mut tape = Tape::<f64>::new();
        // Extent 4 with grid 3 gives cells [0,2),[2,4),[4,4) -> empty.
        let x = tape.push_leaf(vec![1, 1, 4, 4], vec![0.0; 16], false);
        assert!(tape.grid_max(x, 3).is_err());
    }

    #[test]
    fn spatial_mean_gradients_check_out() {
        let mut rng = crate::test_rng(19);
        let x = Tensor::<f64>::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let m = tape.spatial_mean(x)?;
                let sq = tape.mul(m, m)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grid_max_gradients_check_out_in_3d() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 23 % 64) as f64) * 0.25).collect();
        let x = Tensor::new(vec![1, 1, 4, 4, 4], data).unwrap();
        let err = grad_check(
            |tape, x| {
                let y = tape.grid_max(x, 2)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }
}
