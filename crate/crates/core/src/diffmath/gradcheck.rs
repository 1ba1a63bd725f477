use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(tensor index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Every coordinate of every tensor.
pub fn all_coordinates(params: &[Tensor]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |e| (t, e)))
        .collect()
}

/// `count` coordinates drawn uniformly over the flattened parameter vector.
pub fn sample_coordinates<R: Rng>(
    params: &[Tensor],
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        for (t, p) in params.iter().enumerate() {
            if flat < p.len() {
                out.push((t, flat));
                break;
            }
            flat -= p.len();
        }
    }
    out
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    mut f: F,
    epsilon: f64,
    tolerance: f64,
    coordinates: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len()
        || params.iter().zip(analytic).any(|(p, a)| !p.same_shape(a))
    {
        return Err(Error::Dimension(
            "analytic gradients do not match parameter shapes".into(),
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        tolerance,
    };
    for &(t, e) in coordinates {
        let original = work[t].data()[e];
        work[t].data_mut()[e] = original + epsilon;
        let plus = f(&work)?;
        work[t].data_mut()[e] = original - epsilon;
        let minus = f(&work)?;
        work[t].data_mut()[e] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite objective at perturbed coordinate ({t}, {e})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let exact = analytic[t].data()[e];
        let abs = (numeric - exact).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((t, e));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;

    fn quadratic(params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let w = tape.param(params[0].clone());
        let sq = tape.row_sq_norm(w)?;
        let s = tape.sum(sq)?;
        let loss = tape.scale(s, 0.5)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, vec![grads.get_or_zeros(w, params[0].shape())]))
    }

    #[test]
    fn quadratic_passes_tightly() {
        let params = vec![Tensor::matrix(2, 3, vec![0.3, -0.2, 0.9, 1.5, -0.7, 0.1]).unwrap()];
        let (_, grads) = quadratic(&params).unwrap();
        let report = finite_diff_check(
            &params,
            &grads,
            |p| quadratic(p).map(|r| r.0),
            1e-5,
            1e-6,
            &all_coordinates(&params),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn constant_function_has_tiny_abs_error() {
        let params = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[2]).unwrap()];
        let eps = 1e-5;
        let report = finite_diff_check(
            &params,
            &grads,
            |_| Ok(3.25),
            eps,
            1e-4,
            &all_coordinates(&params),
        )
        .unwrap();
        assert!(report.max_abs_err < eps);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let params = vec![Tensor::vector(vec![1.0]).unwrap()];
        let r = finite_diff_check(&params, &params, |_| Ok(0.0), 0.1, 1e-4, &[(0, 0)]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_objective_is_an_evaluation_error() {
        let params = vec![Tensor::vector(vec![1.0]).unwrap()];
        let r = finite_diff_check(&params, &params, |_| Ok(f64::NAN), 1e-5, 1e-4, &[(0, 0)]);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
