//! Central finite-difference verification of reverse-mode gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates whose analytic and numeric derivatives are both below this
/// magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn compare_with_central_differences(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::shape("grad_check", &[x.len()], &[analytic.len()]));
    }
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
    })
}

/// Checks the tape gradient of the scalar `f(x)` against central
/// differences with step `h`, returning the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let param = x.detached().into_param();
    let mut tape = Tape::new();
    let xv = tape.leaf(&param);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let shape = x.shape().to_vec();
    compare_with_central_differences(
        |probe| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(&shape, probe.to_vec())?);
            let out = f(&mut tape, v)?;
            Ok(tape.scalar(out))
        },
        x.data(),
        &analytic,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7]).unwrap();
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        for (a, xv) in report.analytic.iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * xv);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let z = t.scale(v, 0.0);
                Ok(t.sum(z))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.analytic.iter().all(|&g| g == 0.0));
        assert!(report.numeric.iter().all(|&g| g == 0.0));
    }
}
