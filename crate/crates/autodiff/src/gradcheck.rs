//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-input maximum relative error from [`grad_check_many`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: Vec<f64>,
    /// (input, component) of the worst component per input.
    pub worst: Vec<usize>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the gradient of a scalar function of one tensor.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)` where the
/// numeric estimate is the central difference with step `h`.
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, h: f64) -> Result<f64>
where
    F: Real,
    Fun: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_err[0])
}

/// Gradient check over several inputs at once. `f` receives one leaf per
/// input, in order, and must be deterministic.
pub fn grad_check_many<F, Fun>(f: Fun, inputs: &[Tensor<F>], h: f64) -> Result<GradCheckReport>
where
    F: Real,
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let hf = F::from_f64_lossy(h);
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut worst = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf requires grad");
        let mut best = (0.0f64, 0usize);
        for k in 0..inputs[which].numel() {
            let orig = work[which].data()[k];
            work[which].data_mut()[k] = orig + hf;
            let plus = eval(&work)?;
            work[which].data_mut()[k] = orig - hf;
            let minus = eval(&work)?;
            work[which].data_mut()[k] = orig;
            // Use the actual step after rounding to F.
            let step = (orig + hf).as_f64() - (orig - hf).as_f64();
            let numeric = (plus - minus) / step;
            let a = analytic.data()[k].as_f64();
            if numeric.is_nan() || a.is_nan() {
                return Err(TensorError::GradCheckNan { input: which, index: k });
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > best.0 {
                best = (err, k);
            }
        }
        max_rel_err.push(best.0);
        worst.push(best.1);
    }
    Ok(GradCheckReport { max_rel_err, worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::<f64>::from_f64(&[5], &[0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn nan_is_reported_with_index() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 1.0]).unwrap();
        // 0/0 at evaluation -> tape refuses non-finite -> error surfaces.
        let r = grad_check(
            |t, x| {
                let z = t.sub(x, x)?;
                let q = t.div(z, z)?;
                t.sum(q)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
