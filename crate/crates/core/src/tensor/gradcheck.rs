//! Central-difference validation of analytic gradients.

use super::params::ParamSet;
use crate::{Error, Result};

/// Magnitudes below this floor are compared against the floor itself, so
/// near-zero gradients are held to an absolute rather than relative bar.
pub const REL_FLOOR: f64 = 1e-4;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over every checked element.
    pub max_rel_err: f64,
    /// Parameter name, element index, analytic value, and central-difference
    /// value at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Number of scalar elements checked.
    pub elements: usize,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares `analytic` gradients against central differences of `loss_fn`.
///
/// `analytic` must be laid out entry by entry like `params`. Every element
/// is perturbed by `+step` and `-step` in turn and the loss re-evaluated;
/// the relative error uses `max(|analytic|, |fd|, REL_FLOOR)` as the
/// denominator. A non-finite loss at any evaluation is an error.
pub fn finite_difference_check<F>(
    params: &mut ParamSet<f64>,
    analytic: &[Vec<f64>],
    mut loss_fn: F,
    step: f64,
) -> Result<FdReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Config(format!(
            "analytic gradient has {} entries, params have {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        elements: 0,
    };
    for entry_idx in 0..params.len() {
        if analytic[entry_idx].len() != params.get(entry_idx).data.len() {
            return Err(Error::Config(format!(
                "analytic gradient entry {} has wrong length",
                params.get(entry_idx).name
            )));
        }
        for i in 0..params.get(entry_idx).data.len() {
            let original = params.get(entry_idx).data[i];
            params.get_mut(entry_idx).data[i] = original + step;
            let plus = loss_fn(params)?;
            params.get_mut(entry_idx).data[i] = original - step;
            let minus = loss_fn(params)?;
            params.get_mut(entry_idx).data[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss while perturbing {}", params.get(entry_idx).name),
                    step: None,
                });
            }
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic[entry_idx][i];
            let denom = a.abs().max(fd.abs()).max(REL_FLOOR);
            let rel = (a - fd).abs() / denom;
            report.elements += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.get(entry_idx).name.clone(), i, a, fd));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn quadratic_loss_passes_and_corrupted_gradient_fails() {
        let mut params = ParamSet::<f64>::new();
        params
            .push("w", vec![3], vec![0.5, -1.25, 2.0])
            .unwrap();
        let loss_fn = |p: &ParamSet<f64>| -> crate::Result<f64> {
            let mut g = Graph::<f64>::new();
            let w = g.leaf(1, 3, p.get(0).data.clone(), true)?;
            let prod = g.mul(w, w)?;
            let s = g.sum(prod)?;
            Ok(g.scalar(s))
        };
        // d/dw sum(w^2) = 2w
        let analytic = vec![vec![1.0, -2.5, 4.0]];
        let report =
            finite_difference_check(&mut params, &analytic, loss_fn, 1e-5).unwrap();
        assert!(report.passes(1e-6), "max err {}", report.max_rel_err);
        assert_eq!(report.elements, 3);

        let corrupted = vec![vec![1.0, -2.5, 4.5]];
        let report =
            finite_difference_check(&mut params, &corrupted, loss_fn, 1e-5).unwrap();
        assert!(!report.passes(1e-4));
        let (name, idx, _, _) = report.worst.unwrap();
        assert_eq!((name.as_str(), idx), ("w", 2));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamSet::<f64>::new();
        params.push("w", vec![1], vec![1.0]).unwrap();
        let analytic = vec![vec![0.0]];
        let loss_fn = |_: &ParamSet<f64>| -> crate::Result<f64> { Ok(f64::NAN) };
        assert!(matches!(
            finite_difference_check(&mut params, &analytic, loss_fn, 1e-5),
            Err(Error::NonFinite { .. })
        ));
    }
}
