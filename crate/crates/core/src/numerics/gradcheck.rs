use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous range of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Coordinate (within the group) where `max_rel_err` occurred.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest `|analytic|` in the group.
    pub max_abs_analytic: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub eps: f64,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference gradient of `f` at `params`.
pub fn numeric_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        theta[i] = params[i] + eps;
        let plus = f(&theta);
        theta[i] = params[i] - eps;
        let minus = f(&theta);
        theta[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation {
                group: String::new(),
                coordinate: i,
            });
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `f` group by group.
///
/// Groups must tile `params` exactly; every coordinate is probed.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    groups: &[ParamGroup],
    eps: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} params", params.len()),
            format!("{} analytic gradients", analytic.len()),
        ));
    }
    let covered: usize = groups.iter().map(|g| g.len).sum();
    if covered != params.len() || groups.iter().any(|g| g.offset + g.len > params.len()) {
        return Err(Error::shape(
            "grad_check",
            format!("{} params", params.len()),
            format!("groups covering {covered}"),
        ));
    }

    let mut theta = params.to_vec();
    let mut reports = Vec::with_capacity(groups.len());
    for group in groups {
        let mut report = GroupReport {
            name: group.name.clone(),
            coordinates: group.len,
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            max_abs_analytic: 0.0,
            passed: true,
        };
        for local in 0..group.len {
            let i = group.offset + local;
            theta[i] = params[i] + eps;
            let plus = f(&theta);
            theta[i] = params[i] - eps;
            let minus = f(&theta);
            theta[i] = params[i];
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Evaluation {
                    group: group.name.clone(),
                    coordinate: local,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.max_abs_analytic = report.max_abs_analytic.max(analytic[i].abs());
            if err > report.max_rel_err || local == 0 {
                report.max_rel_err = err;
                report.worst_index = local;
                report.worst_analytic = analytic[i];
                report.worst_numeric = numeric;
            }
        }
        report.passed = report.max_rel_err < tolerance;
        reports.push(report);
    }
    Ok(GradReport {
        tolerance,
        eps,
        groups: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(len: usize) -> Vec<ParamGroup> {
        vec![ParamGroup {
            name: "theta".into(),
            offset: 0,
            len,
        }]
    }

    #[test]
    fn quadratic_at_three() {
        let g = numeric_gradient(|t| t[0] * t[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = numeric_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn report_flags_wrong_gradient() {
        let f = |t: &[f64]| t[0] * t[0] + 3.0 * t[1];
        let good = grad_check(f, &[2.0, 1.0], &[4.0, 3.0], &single(2), 1e-4, 1e-6).unwrap();
        assert!(good.passed());
        let bad = grad_check(f, &[2.0, 1.0], &[4.0, 2.5], &single(2), 1e-4, 1e-6).unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.groups[0].worst_index, 1);
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        let f = |t: &[f64]| if t[1] > 1.0 { f64::NAN } else { t[0] };
        let err = grad_check(f, &[0.0, 1.0], &[1.0, 0.0], &single(2), 1e-4, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Evaluation { coordinate: 1, .. }));
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
