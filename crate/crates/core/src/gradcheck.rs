//! Central finite-difference verification of reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Default perturbation for [`grad_check`]. Large enough that rounding in
/// the function value stays far below the extrapolated truncation error.
pub const DEFAULT_EPS: f64 = 4e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Input and element index where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    /// Number of scalar entries checked.
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        bail!(Shape, "grad_check needs a scalar function, got shape {:?}", g.shape(out));
    }
    Ok((g, vars, out))
}

/// Compares the reverse-mode gradient of scalar `f` at `inputs` against
/// central differences with steps `eps`, `eps/2` and `eps/4`, combined by
/// two rounds of Richardson extrapolation, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval_scalar(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], Tensor::into_data))
        .collect();
    drop(g);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + h;
                let (gp, _, op) = eval_scalar(&f, &probe, false)?;
                let fp = gp.value(op).data()[0];
                probe[i].data_mut()[j] = x0 - h;
                let (gm, _, om) = eval_scalar(&f, &probe, false)?;
                let fm = gm.value(om).data()[0];
                probe[i].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let d1 = central(eps)?;
            let d2 = central(eps / 2.0)?;
            let d4 = central(eps / 4.0)?;
            // First round cancels the h² term, the second the h⁴ term.
            let r1 = (4.0 * d2 - d1) / 3.0;
            let r2 = (4.0 * d4 - d2) / 3.0;
            let numeric = (16.0 * r2 - r1) / 15.0;
            let err = relative_error(analytic[i][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.worst_values = (analytic[i][j], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_enough() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.7, 0.1, -0.4]]).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-7, "{}", r.max_rel_error);
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn softmax_then_pick() {
        let x = Tensor::row(&[0.2, -1.0, 0.7, 1.5]);
        let pick = Tensor::row(&[0.0, 0.0, 1.0, 0.0]);
        let r = grad_check(
            |g, v| {
                let s = g.softmax(v[0], 1)?;
                let p = g.constant(pick.clone())?;
                let m = g.mul(s, p)?;
                g.sum(m)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row(&[1.0, 2.0]);
        let r = grad_check(|g, _| g.constant(Tensor::scalar(3.0)), &[x], DEFAULT_EPS).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-12);
    }
}
