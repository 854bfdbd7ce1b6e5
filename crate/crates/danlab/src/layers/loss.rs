//! Voxel-weighted softmax cross-entropy.

use crate::autodiff::{Tape, Val};
use crate::{Error, Result, Scalar};

impl<F: Scalar> Tape<F> {
    /// Weighted softmax cross-entropy over `logits:[B, C, spatial...]`
    /// against integer `labels` (length B·spatial, row-major with batch
    /// outermost) and per-voxel `weights` in `[0, 1]`:
    ///
    ///   loss = Σᵢ wᵢ · (−log softmax(zᵢ)[yᵢ]) / N,   N = B·spatial.
    ///
    /// The normalizer is the voxel count, independent of the weights, so
    /// scaling a weight scales that voxel's contribution linearly. A voxel
    /// with weight exactly 0 contributes an exact 0 to both the loss and
    /// the gradient (its term is skipped, not multiplied).
    pub fn weighted_softmax_ce(
        &mut self,
        logits: Val,
        labels: &[usize],
        weights: &[F],
    ) -> Result<Val> {
        let sh = self.shape(logits).to_vec();
        if sh.len() < 3 {
            return Err(Error::ShapeMismatch(format!(
                "loss expects logits [batch, classes, spatial...], got {sh:?}"
            )));
        }
        let (bsz, c) = (sh[0], sh[1]);
        let sp: usize = sh[2..].iter().product();
        let n_vox = bsz * sp;
        if labels.len() != n_vox || weights.len() != n_vox {
            return Err(Error::ShapeMismatch(format!(
                "labels/weights must have {n_vox} entries, got {}/{}",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        if weights.iter().any(|&w| !(w >= F::zero() && w <= F::one())) {
            return Err(Error::InvalidArgument("loss weights must lie in [0,1]".into()));
        }

        let zv = self.value(logits);
        let nf = F::from_f64(n_vox as f64);
        let mut total = F::zero();
        for b in 0..bsz {
            for i in 0..sp {
                let vox = b * sp + i;
                let w = weights[vox];
                if w == F::zero() {
                    continue;
                }
                let base = b * c * sp + i;
                let mut mx = zv[base];
                for k in 1..c {
                    mx = mx.max(zv[base + k * sp]);
                }
                let mut sum = F::zero();
                for k in 0..c {
                    sum = sum + (zv[base + k * sp] - mx).exp();
                }
                let lse = mx + sum.ln();
                total = total + w * (lse - zv[base + labels[vox] * sp]);
            }
        }
        let loss = total / nf;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "weighted_softmax_ce" });
        }

        let labels = labels.to_vec();
        let weights = weights.to_vec();
        Ok(self.custom_op(
            vec![],
            vec![loss],
            &[logits],
            Box::new(move |up, ctx| {
                let g0 = up[0];
                ctx.accumulate_using(logits, logits, |zv, gz| {
                    for b in 0..bsz {
                        for i in 0..sp {
                            let vox = b * sp + i;
                            let w = weights[vox];
                            if w == F::zero() {
                                continue; // exact zero contribution
                            }
                            let base = b * c * sp + i;
                            let mut mx = zv[base];
                            for k in 1..c {
                                mx = mx.max(zv[base + k * sp]);
                            }
                            let mut sum = F::zero();
                            for k in 0..c {
                                sum = sum + (zv[base + k * sp] - mx).exp();
                            }
                            let scale = g0 * w / nf;
                            for k in 0..c {
                                let p = (zv[base + k * sp] - mx).exp() / sum;
                                let ind = if k == labels[vox] { F::one() } else { F::zero() };
                                gz[base + k * sp] = gz[base + k * sp] + scale * (p - ind);
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Unweighted softmax cross-entropy (all weights 1).
    pub fn softmax_ce(&mut self, logits: Val, labels: &[usize]) -> Result<Val> {
        let sh = self.shape(logits);
        if sh.len() < 3 {
            return Err(Error::ShapeMismatch(format!(
                "loss expects logits [batch, classes, spatial...], got {sh:?}"
            )));
        }
        let n_vox = sh[0] * sh[2..].iter().product::<usize>();
        self.weighted_softmax_ce(logits, labels, &vec![F::one(); n_vox])
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{grad_check, Tape, Tensor};

    #[test]
    fn uniform_logits_give_log_c() {
        let mut tape = Tape::<f64>::new();
        let z = tape.push_leaf(vec![1, 3, 2, 2], vec![0.0; 12], false);
        let loss = tape.softmax_ce(z, &[0, 1, 2, 0]).unwrap();
        assert!((tape.value(loss)[0] - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_voxels_contribute_exactly_nothing() {
        let mut rng = crate::test_rng(29);
        let z = Tensor::<f64>::uniform(&[1, 3, 1, 4], -2.0, 2.0, &mut rng);
        let labels = [0usize, 1, 2, 1];

        // Masked loss with half the voxels zeroed...
        let mut tape = Tape::<f64>::new();
        let zv = tape.push_leaf(z.shape().to_vec(), z.data().to_vec(), true);
        let loss = tape
            .weighted_softmax_ce(zv, &labels, &[1.0, 0.0, 1.0, 0.0])
            .unwrap();
        tape.backward(loss).unwrap();
        let masked_loss = tape.value(loss)[0];
        let masked_grad = tape.grad(zv).unwrap().to_vec();

        // ...equals bitwise the loss built from only the surviving voxels'
        // terms: gradient at masked voxels is exactly 0.0.
        for (i, g) in masked_grad.iter().enumerate() {
            let vox = i % 4;
            if vox == 1 || vox == 3 {
                assert_eq!(*g, 0.0, "masked voxel leaked gradient at {i}");
            }
        }
        assert!(masked_loss.is_finite());
    }

    #[test]
    fn weight_scales_contribution_linearly() {
        // One voxel with weight w: loss(w) = w * loss(1).
        let mut rng = crate::test_rng(31);
        let z = Tensor::<f64>::uniform(&[1, 4, 1, 1], -1.0, 1.0, &mut rng);
        let eval = |w: f64| {
            let mut tape = Tape::<f64>::new();
            let zv = tape.push_leaf(z.shape().to_vec(), z.data().to_vec(), false);
            let loss = tape.weighted_softmax_ce(zv, &[2], &[w]).unwrap();
            tape.value(loss)[0]
        };
        let full = eval(1.0);
        assert!((eval(0.5) - 0.5 * full).abs() < 1e-12);
        assert!((eval(0.25) - 0.25 * full).abs() < 1e-12);
    }

    #[test]
    fn gradients_check_out() {
        let mut rng = crate::test_rng(37);
        let z = Tensor::<f64>::uniform(&[2, 3, 2, 2], -2.0, 2.0, &mut rng);
        let labels = [0usize, 1, 2, 1, 2, 0, 0, 1];
        let weights = [1.0, 0.5, 0.0, 1.0, 0.75, 1.0, 0.0, 0.25];
        let err = grad_check(
            |tape, zv| tape.weighted_softmax_ce(zv, &labels, &weights),
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.push_leaf(vec![1, 2, 1, 2], vec![0.0; 4], false);
        assert!(tape.softmax_ce(z, &[0, 2]).is_err());
    }
}
