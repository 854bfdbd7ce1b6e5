//! Finite-difference gradient verification.
//!
//! Builds the same scalar-valued graph twice: once for analytic adjoints
//! via the tape, once per perturbed coordinate for central differences.
//! Returns the worst relative error over every input coordinate.

use super::tape::{Tape, Val};
use super::Tensor;
use crate::{Error, Result};

/// Relative error between analytic and numeric derivatives, guarded
/// against division by ~0.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Check the gradient of a scalar function of one tensor. `build` receives
/// a fresh tape and the input leaf and must return a scalar output.
/// Returns the maximum relative error across all input coordinates.
pub fn grad_check<B>(build: B, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, Val) -> Result<Val>,
{
    grad_check_multi(|tape, vals| build(tape, vals[0]), &[x.clone()], eps)
}

/// Multi-input version of [`grad_check`]: every tensor in `inputs` is
/// treated as differentiable regardless of its flag.
pub fn grad_check_multi<B>(build: B, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Val]) -> Result<Val>,
{
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("grad_check needs at least one input".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be positive, got {eps}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vals: Vec<Val> = inputs
        .iter()
        .map(|t| tape.push_leaf(t.shape().to_vec(), t.data().to_vec(), true))
        .collect();
    let out = build(&mut tape, &vals)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check target must be scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vals.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    // Numeric pass: forward-only evaluation of the same graph.
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vals: Vec<Val> = perturbed
            .iter()
            .map(|t| tape.push_leaf(t.shape().to_vec(), t.data().to_vec(), false))
            .collect();
        let out = build(&mut tape, &vals)?;
        Ok(tape.value(out)[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[k][j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frozen reference: softmax([1,2,3]) computed independently from the
    /// stable formula e^(x-max) / Σ e^(x-max) with 64-bit arithmetic.
    const SOFTMAX_123: [f64; 3] = [
        0.09003057317038046,
        0.24472847105479764,
        0.6652409557748218,
    ];

    #[test]
    fn softmax_matches_frozen_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![3], vec![1.0, 2.0, 3.0], false);
        let s = tape.softmax(x, 0).unwrap();
        let got = tape.value(s);
        for (g, e) in got.iter().zip(SOFTMAX_123) {
            assert!((g - e).abs() < 1e-15, "got {g}, expected {e}");
        }
        let total: f64 = got.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chained_elementwise_gradients_check_out() {
        // f(x) = sum(sigmoid(x) * relu(x) + exp(log(x^2)))  on positive x
        let x = Tensor::new(vec![2, 3], vec![0.5, 1.25, 2.0, 0.75, 1.5, 3.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let s = tape.sigmoid(x)?;
                let r = tape.relu(x)?;
                let sr = tape.mul(s, r)?;
                let x2 = tape.mul(x, x)?;
                let lg = tape.log(x2)?;
                let e = tape.exp(lg)?;
                let t = tape.add(sr, e)?;
                tape.sum(t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn broadcast_mul_reduces_gradient_onto_singleton_dims() {
        // a: [2,3], b: [2,1] -> every b element sees the sum over axis 1.
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let err = grad_check_multi(
            |tape, vals| {
                let m = tape.mul(vals[0], vals[1])?;
                tape.sum(m)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");

        // And the exact values: d/db = sum of a over the broadcast axis.
        let mut tape = Tape::new();
        let av = tape.push_leaf(vec![2, 3], a.data().to_vec(), true);
        let bv = tape.push_leaf(vec![2, 1], b.data().to_vec(), true);
        let m = tape.mul(av, bv).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(bv).unwrap(), &[6.0, 15.0]);
        assert_eq!(tape.grad(av).unwrap(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn fanout_accumulates_additively() {
        // y = sum(x*x + x*x) -> dy/dx = 4x
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![3], vec![1.0, -2.0, 3.0], true);
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0, 12.0]);
    }

    #[test]
    fn softmax_gradient_checks_out() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.2, 2.0, 0.0, 1.0, 1.0, -0.5, 0.25]).unwrap();
        let err = grad_check(
            |tape, x| {
                let p = tape.softmax(x, 1)?;
                // Weighted sum so the gradient is not trivially zero.
                let w = tape.push_leaf(vec![2, 4], (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect(), false);
                let wp = tape.mul(p, w)?;
                tape.sum(wp)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn concat_and_reshape_gradients_check_out() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.5, -0.5, 1.5, 2.5, -1.0, 0.0]).unwrap();
        let err = grad_check_multi(
            |tape, vals| {
                let cat = tape.concat(&[vals[0], vals[1]], 1)?;
                let flat = tape.reshape(cat, &[10])?;
                let sq = tape.mul(flat, flat)?;
                tape.sum(sq)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.push_leaf(vec![1], vec![1.0e20], false);
        let e2 = tape.exp(x);
        assert!(matches!(e2, Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![2], vec![1.0, -1.0], false);
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.push_leaf(vec![2], vec![1.0, 2.0], true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::InvalidArgument(_))));
    }
}
