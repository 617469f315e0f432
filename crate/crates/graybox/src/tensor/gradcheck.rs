//! Central finite-difference oracles for verifying tape gradients.
//!
//! Kept in the library (rather than a test file) because every layer of the
//! crate checks its gradients against the same oracle: raw ops, the sealed
//! backbone path, and the end-to-end training pipelines.

use super::{Scalar, Tape, Tensor, VarId};

/// Tolerances and step size for one gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    pub h: f64,
}

impl Tolerance {
    /// The float64 contract: h = 1e-5, rtol 1e-6, atol 1e-9.
    pub fn strict_f64() -> Self {
        Tolerance {
            rtol: 1e-6,
            atol: 1e-9,
            h: 1e-5,
        }
    }

    /// The float32 contract: rtol 1e-3 with a step large enough to ride
    /// above single-precision rounding noise. The atol floor covers the
    /// irreducible difference-quotient noise `|f| * eps_f32 / (2h)`.
    pub fn loose_f32() -> Self {
        Tolerance {
            rtol: 1e-3,
            atol: 2e-4,
            h: 1e-2,
        }
    }
}

/// Central finite difference of a scalar-valued function with respect to
/// every element of `x`.
pub fn central_diff<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    h: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::from_f64(h);
        let fp = f(&probe);
        probe.data_mut()[i] = orig - T::from_f64(h);
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Elementwise `|a - b| <= atol + rtol * max(|a|, |b|)`, reporting the worst
/// offender on failure.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: Tolerance) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let bound = tol.atol + tol.rtol * a.abs().max(n.abs());
        if err > bound {
            let ratio = err / bound;
            if worst.map(|(_, _, _, r)| ratio > r).unwrap_or(true) {
                worst = Some((i, a, n, ratio));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((i, a, n, _)) => Err(format!(
            "gradient mismatch at flat index {i}: analytic {a:.9e}, finite-difference {n:.9e} \
             (rtol {:.1e}, atol {:.1e}, h {:.1e})",
            tol.rtol, tol.atol, tol.h
        )),
    }
}

/// Builds the tape from `inputs` (all marked as leaves), asserts the final
/// node is scalar, and checks every leaf gradient against central
/// differences of the rebuilt function.
pub fn check_scalar_fn<T: Scalar>(
    build: impl Fn(&mut Tape<T>, &[VarId]) -> VarId,
    inputs: &[Tensor<T>],
    tol: Tolerance,
) -> Result<(), String> {
    let eval = |inputs: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).numel(), 1, "gradcheck output must be scalar");
        tape.value(out).data()[0].to_f64()
    };

    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(tape.value(out).numel(), 1, "gradcheck output must be scalar");
    let grads = tape
        .backward_seeded(vec![(out, Tensor::scalar(T::ONE))])
        .map_err(|e| e.to_string())?;

    for (slot, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic: Vec<f64> = grads.get(var).data().iter().map(|v| v.to_f64()).collect();
        let numeric = central_diff(
            |probe| {
                let mut all: Vec<Tensor<T>> = inputs.to_vec();
                all[slot] = probe.clone();
                eval(&all)
            },
            input,
            tol.h,
        );
        compare(&analytic, &numeric, tol).map_err(|e| format!("input {slot}: {e}"))?;
    }
    Ok(())
}
