//! Central finite-difference verification of recorded gradients.

use super::{Array, DiffError, Result, Tape, Var};

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - central| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks the reverse-mode gradient of the scalar produced by `build`
/// against central finite differences with step `eps`, for every coordinate
/// of every input. Inputs are treated as gradient targets regardless of
/// their `requires_grad` flag. `f64` only: the tolerances involved are not
/// meaningful in single precision.
pub fn grad_check<F>(build: F, inputs: &[Array<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    for a in inputs {
        if !a.is_finite() {
            return Err(DiffError::NonFinite { op: "grad_check input" });
        }
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone().with_grad())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(DiffError::NonScalarOutput { shape: tape.value(out).shape().to_vec() });
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get(v).expect("grad for forced input").to_vec()).collect()
    };

    let value_only = |points: &[Array<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|a| tape.input(a.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(DiffError::NonScalarOutput { shape: tape.value(out).shape().to_vec() });
        }
        Ok(tape.scalar_value(out))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_coord: 0, analytic: 0.0, numeric: 0.0 };
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let base = input.data()[c];
            work[ii].data_mut()[c] = base + eps;
            let fp = value_only(&work)?;
            work[ii].data_mut()[c] = base - eps;
            let fm = value_only(&work)?;
            work[ii].data_mut()[c] = base;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(DiffError::NonFinite { op: "grad_check central difference" });
            }
            let a = analytic[ii][c];
            let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst_input: ii, worst_coord: c, analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper returning just the max relative error.
pub fn max_rel_err<F>(build: F, inputs: &[Array<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check(build, inputs, eps)?.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_gradient() {
        // f(x) = x . x at x = 3 has gradient 6
        let x = Array::from_vec(vec![3.0]).with_grad();
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[6.0]);
    }

    #[test]
    fn log_sum_exp_gradient_is_softmax() {
        let data = vec![0.3, -1.2, 2.0, 0.5];
        let mut tape = Tape::new();
        let x = tape.input(Array::new(vec![1, 4], data.clone()).unwrap().with_grad());
        let lse = tape.log_sum_exp_rows(x).unwrap();
        let out = tape.sum_all(lse).unwrap();
        let grads = tape.backward(out).unwrap();

        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (g, e) in grads.get(x).unwrap().iter().zip(&exps) {
            assert!((g - e / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let w = Array::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = Array::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                tape.sum_all(y)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-10, "linear map err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let logits = Array::new(vec![2, 5], vec![0.3, -0.7, 1.2, 0.05, -1.4, 2.0, 0.1, -0.3, 0.8, -0.9]).unwrap();
        let targets = [2usize, 0];
        let report = grad_check(
            |tape, vars| {
                let x = vars[0];
                let lse = tape.log_sum_exp_rows(x)?;
                let logp = tape.sub_row_broadcast(x, lse)?;
                let map: Vec<Option<usize>> = targets.iter().enumerate().map(|(i, &t)| Some(i * 5 + t)).collect();
                let picked = tape.gather(logp, map)?;
                let s = tape.sum_all(picked)?;
                tape.scale(s, -0.5)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "xent err {}", report.max_rel_err);
    }

    #[test]
    fn random_five_node_graph() {
        let a = Array::new(vec![2, 3], vec![0.4, -0.8, 1.3, 0.2, 0.7, -0.5]).unwrap();
        let b = Array::new(vec![3, 2], vec![1.1, -0.2, 0.3, 0.9, -0.6, 0.5]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let p = tape.matmul(vars[0], vars[1])?;
                let s = tape.softmax_rows(p)?;
                let e = tape.exp(s)?;
                let l = tape.log_sum_exp_rows(e)?;
                tape.sum_all(l)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "graph err {}", report.max_rel_err);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let a = Array::new(vec![2, 2], vec![1.0; 4]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.input(a);
        let err = tape.backward(v).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarOutput { .. }));
    }
}
