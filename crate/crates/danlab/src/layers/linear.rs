//! Fully-connected layer `[B, in] -> [B, out]`.

use crate::autodiff::{Tape, Val};
use crate::{Error, Result, Scalar};

impl<F: Scalar> Tape<F> {
    /// `y = x·wᵀ + b` with `x:[B, in]`, `w:[out, in]`, `b:[out]`.
    pub fn linear(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 2 || wsh.len() != 2 || xsh[1] != wsh[1] {
            return Err(Error::ShapeMismatch(format!(
                "linear expects x:[B,in] and w:[out,in], got {xsh:?} and {wsh:?}"
            )));
        }
        let (bsz, cin, cout) = (xsh[0], xsh[1], wsh[0]);
        if self.shape(b) != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias shape {:?}, expected [{cout}]",
                self.shape(b)
            )));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![F::zero(); bsz * cout];
        for bi in 0..bsz {
            let xr = &xv[bi * cin..(bi + 1) * cin];
            for co in 0..cout {
                let wr = &wv[co * cin..(co + 1) * cin];
                let mut acc = bv[co];
                for (xi, wi) in xr.iter().zip(wr) {
                    acc = acc + *xi * *wi;
                }
                out[bi * cout + co] = acc;
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "linear" });
        }
        Ok(self.custom_op(
            vec![bsz, cout],
            out,
            &[x, w, b],
            Box::new(move |up, ctx| {
                ctx.accumulate_with(b, |gb| {
                    for bi in 0..bsz {
                        for co in 0..cout {
                            gb[co] = gb[co] + up[bi * cout + co];
                        }
                    }
                });
                ctx.accumulate_using(x, w, |wv, gx| {
                    for bi in 0..bsz {
                        for co in 0..cout {
                            let u = up[bi * cout + co];
                            let wr = &wv[co * cin..(co + 1) * cin];
                            let gr = &mut gx[bi * cin..(bi + 1) * cin];
                            for (g, w) in gr.iter_mut().zip(wr) {
                                *g = *g + u * *w;
                            }
                        }
                    }
                });
                ctx.accumulate_using(w, x, |xv, gw| {
                    for bi in 0..bsz {
                        let xr = &xv[bi * cin..(bi + 1) * cin];
                        for co in 0..cout {
                            let u = up[bi * cout + co];
                            let gr = &mut gw[co * cin..(co + 1) * cin];
                            for (g, x) in gr.iter_mut().zip(xr) {
                                *g = *g + u * *x;
                            }
                        }
                    }
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{grad_check_multi, Tape, Tensor};

    #[test]
    fn known_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![1, 2], vec![2.0, 3.0], false);
        let w = tape.push_leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let b = tape.push_leaf(vec![2], vec![10.0, 20.0], false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[12.0, 23.0]);
    }

    #[test]
    fn gradients_check_out() {
        let mut rng = crate::test_rng(23);
        let x = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2], -0.5, 0.5, &mut rng);
        let err = grad_check_multi(
            |tape, vals| {
                let y = tape.linear(vals[0], vals[1], vals[2])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }
}
