//! Batch normalization over the channel axis of `[B, C, spatial...]`.

use crate::autodiff::{Tape, Val};
use crate::{Error, Result, Scalar};

/// Per-channel batch statistics produced by a training-mode forward pass.
/// The caller folds them into running statistics *after* the optimizer
/// step; the forward pass itself never mutates state.
#[derive(Debug, Clone)]
pub struct BatchStats<F: Scalar> {
    pub mean: Vec<F>,
    /// Biased variance (divide by N, not N−1).
    pub var: Vec<F>,
}

/// Exponential moving average: `running = momentum·running + (1−momentum)·batch`.
pub fn update_running_stats<F: Scalar>(running: &mut [F], batch: &[F], momentum: F) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (F::one() - momentum) * *b;
    }
}

fn check_shapes<F: Scalar>(tape: &Tape<F>, x: Val, gamma: Val, beta: Val) -> Result<(usize, usize, usize)> {
    let xsh = tape.shape(x);
    if xsh.len() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm input must be [batch, channels, spatial...], got {xsh:?}"
        )));
    }
    let (b, c) = (xsh[0], xsh[1]);
    let sp: usize = xsh[2..].iter().product();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm gamma/beta must be [{c}], got {:?}/{:?}",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    Ok((b, c, sp))
}

impl<F: Scalar> Tape<F> {
    /// Training-mode batch norm: normalizes with the batch mean and biased
    /// batch variance, then applies the affine pair. Returns the output
    /// and the batch statistics for the caller's running-average update.
    pub fn batchnorm_train(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        eps: f64,
    ) -> Result<(Val, BatchStats<F>)> {
        let (bsz, c, sp) = check_shapes(self, x, gamma, beta)?;
        let n = bsz * sp;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm needs at least 2 values per channel, got {n}"
            )));
        }
        let epsf = F::from_f64(eps);
        let nf = F::from_f64(n as f64);

        let xv = self.value(x);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for b in 0..bsz {
                let base = (b * c + ch) * sp;
                for v in &xv[base..base + sp] {
                    s = s + *v;
                }
            }
            let m = s / nf;
            let mut q = F::zero();
            for b in 0..bsz {
                let base = (b * c + ch) * sp;
                for v in &xv[base..base + sp] {
                    let d = *v - m;
                    q = q + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = q / nf;
        }
        let ivar: Vec<F> = var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();

        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                let (m, iv, g, be) = (mean[ch], ivar[ch], gv[ch], bv[ch]);
                for i in base..base + sp {
                    out[i] = g * (xv[i] - m) * iv + be;
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "batchnorm" });
        }

        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let mean_c = mean;
        let ivar_c = ivar;
        let out_val = self.custom_op(
            self.shape(x).to_vec(),
            out,
            &[x, gamma, beta],
            Box::new(move |up, ctx| {
                // Per channel: with x̂ = (x−m)·ivar and N values,
                //   dβ = Σ up, dγ = Σ up·x̂,
                //   dx = (γ·ivar/N)·(N·up − Σup − x̂·Σ(up·x̂)).
                let gv = ctx.value(gamma).to_vec();
                let xvv = ctx.value(x).to_vec();
                let mut sum_dy = vec![F::zero(); c];
                let mut sum_dy_xhat = vec![F::zero(); c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        let (m, iv) = (mean_c[ch], ivar_c[ch]);
                        for i in base..base + sp {
                            let xhat = (xvv[i] - m) * iv;
                            sum_dy[ch] = sum_dy[ch] + up[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + up[i] * xhat;
                        }
                    }
                }
                ctx.accumulate_with(beta, |gb| {
                    for ch in 0..c {
                        gb[ch] = gb[ch] + sum_dy[ch];
                    }
                });
                ctx.accumulate_with(gamma, |gg| {
                    for ch in 0..c {
                        gg[ch] = gg[ch] + sum_dy_xhat[ch];
                    }
                });
                ctx.accumulate_with(x, |gx| {
                    let nf = F::from_f64((bsz * sp) as f64);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let (m, iv) = (mean_c[ch], ivar_c[ch]);
                            let k = gv[ch] * iv / nf;
                            for i in base..base + sp {
                                let xhat = (xvv[i] - m) * iv;
                                gx[i] = gx[i]
                                    + k * (nf * up[i] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                            }
                        }
                    }
                });
            }),
        );
        Ok((out_val, stats))
    }

    /// Inference-mode batch norm using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Result<Val> {
        let (bsz, c, sp) = check_shapes(self, x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "running stats must have {c} channels, got {}/{}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let epsf = F::from_f64(eps);
        if running_var.iter().any(|&v| v + epsf <= F::zero()) {
            return Err(Error::InvalidArgument(
                "running variance must keep var + eps positive".into(),
            ));
        }
        let ivar: Vec<F> = running_var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let mean = running_mean.to_vec();

        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                let (m, iv, g, be) = (mean[ch], ivar[ch], gv[ch], bv[ch]);
                for i in base..base + sp {
                    out[i] = g * (xv[i] - m) * iv + be;
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "batchnorm" });
        }

        Ok(self.custom_op(
            self.shape(x).to_vec(),
            out,
            &[x, gamma, beta],
            Box::new(move |up, ctx| {
                let gv = ctx.value(gamma).to_vec();
                ctx.accumulate_with(beta, |gb| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            for i in base..base + sp {
                                gb[ch] = gb[ch] + up[i];
                            }
                        }
                    }
                });
                ctx.accumulate_using(gamma, x, |xv, gg| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let (m, iv) = (mean[ch], ivar[ch]);
                            for i in base..base + sp {
                                gg[ch] = gg[ch] + up[i] * (xv[i] - m) * iv;
                            }
                        }
                    }
                });
                ctx.accumulate_with(x, |gx| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let k = gv[ch] * ivar[ch];
                            for i in base..base + sp {
                                gx[i] = gx[i] + up[i] * k;
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
    use super::*;
    use crate::autodiff::{grad_check_multi, Tensor};

    #[test]
    fn train_output_is_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![2, 1, 1, 4], (0..8).map(|v| v as f64).collect(), false);
        let gamma = tape.push_leaf(vec![1], vec![1.0], false);
        let beta = tape.push_leaf(vec![1], vec![0.0], false);
        let (y, stats) = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        assert!((stats.mean[0] - 3.5).abs() < 1e-12);
        // Biased variance of 0..7 is 5.25.
        assert!((stats.var[0] - 5.25).abs() < 1e-12);
        let out = tape.value(y);
        let m: f64 = out.iter().sum::<f64>() / 8.0;
        let v: f64 = out.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4); // eps shrinks it slightly
    }

    #[test]
    fn train_gradients_check_out() {
        let mut rng = crate::test_rng(3);
        let x = Tensor::<f64>::uniform(&[2, 3, 2, 2], -2.0, 2.0, &mut rng);
        let gamma = Tensor::<f64>::uniform(&[3], 0.5, 1.5, &mut rng);
        let beta = Tensor::<f64>::uniform(&[3], -0.5, 0.5, &mut rng);
        let err = grad_check_multi(
            |tape, vals| {
                let (y, _) = tape.batchnorm_train(vals[0], vals[1], vals[2], 1e-5)?;
                // Asymmetric weighting so mean/variance paths matter.
                let w = tape.push_leaf(
                    vec![2, 3, 2, 2],
                    (0..24).map(|i| ((i * 7 % 5) as f64) - 2.0).collect(),
                    false,
                );
                let wy = tape.mul(y, w)?;
                tape.sum(wy)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn eval_gradients_check_out() {
        let mut rng = crate::test_rng(5);
        let x = Tensor::<f64>::uniform(&[2, 2, 3], -2.0, 2.0, &mut rng);
        let gamma = Tensor::<f64>::uniform(&[2], 0.5, 1.5, &mut rng);
        let beta = Tensor::<f64>::uniform(&[2], -0.5, 0.5, &mut rng);
        let rm = vec![0.3, -0.2];
        let rv = vec![1.5, 0.7];
        let err = grad_check_multi(
            |tape, vals| {
                let y = tape.batchnorm_eval(vals[0], vals[1], vals[2], &rm, &rv, 1e-5)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn running_stats_update_is_an_ema() {
        let mut running = vec![1.0f64, 2.0];
        update_running_stats(&mut running, &[3.0, 4.0], 0.9);
        assert!((running[0] - 1.2).abs() < 1e-12);
        assert!((running[1] - 2.2).abs() < 1e-12);
    }
}
