//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Central differences of a scalar function for every element of every input.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares supplied analytic gradients with central differences of `f`.
pub fn compare_gradients<F>(
    f: F,
    analytic: &[Vec<f64>],
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let numeric = numeric_gradient(f, inputs, h)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = relative_error(av, nv);
            report.checked += 1;
            if e > report.max_rel_error || e.is_nan() {
                report.max_rel_error = e;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Builds `f` on a fresh tape, backpropagates, and checks every input
/// element against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };
    compare_gradients(eval, &analytic, inputs, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![3], vec![1.5, 2.0, -0.5]).unwrap();
        let r = grad_check(
            |tape, v| {
                let p = tape.mul(v[0], v[1])?;
                Ok(tape.mean(p))
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // f(x) = x^2, analytic deliberately doubled
        let x = Tensor::new(vec![2], vec![1.5, -0.7]).unwrap();
        let wrong = vec![x.data().iter().map(|v| 4.0 * v).collect::<Vec<_>>()];
        let r = compare_gradients(
            |xs| Ok(xs[0].data().iter().map(|v| v * v).sum()),
            &wrong,
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
        assert!(!r.passes(1e-4));
    }
}
