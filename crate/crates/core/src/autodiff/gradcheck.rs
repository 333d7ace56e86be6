//! Central finite-difference verification of analytic gradients.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar function of a parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Label for coordinate `i` in reports.
    fn coordinate_name(&self, i: usize) -> String {
        format!("theta[{i}]")
    }
}

/// Objective assembled from two closures.
pub struct FnObjective<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok((self.value)(theta))
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.value)(theta), (self.gradient)(theta)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Relative step; coordinate `i` is perturbed by `fd_step · max(1, |θᵢ|)`.
    pub fd_step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Coordinates whose analytic and numeric gradients are both at or below
    /// this magnitude are reported but not judged.
    pub sensitivity_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            tol: 1e-3,
            sensitivity_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub identifiable: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub value: f64,
    pub passed: bool,
    pub coordinates: Vec<CoordinateCheck>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn gradcheck(f: &dyn Objective, theta: &[f64], opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (value, analytic) = f.value_and_gradient(theta)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective { coordinate: None });
    }
    if analytic.len() != theta.len() {
        return Err(Error::ParamLength {
            len: analytic.len(),
            labels: theta.len(),
            expected: theta.len(),
        });
    }
    let mut coordinates = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        let h = opts.fd_step * theta[i].abs().max(1.0);
        probe[i] = theta[i] + h;
        let plus = f.value(&probe)?;
        probe[i] = theta[i] - h;
        let minus = f.value(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteObjective { coordinate: Some(i) });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel_error = relative_error(a, numeric);
        let identifiable = a.abs().max(numeric.abs()) > opts.sensitivity_floor;
        coordinates.push(CoordinateCheck {
            index: i,
            name: f.coordinate_name(i),
            analytic: a,
            numeric,
            rel_error,
            identifiable,
            pass: !identifiable || rel_error <= opts.tol,
        });
    }
    Ok(GradcheckReport {
        options: opts,
        value,
        passed: coordinates.iter().all(|c| c.pass),
        coordinates,
    })
}

impl GradcheckReport {
    /// Judged coordinates sorted by decreasing relative error.
    pub fn worst(&self, n: usize) -> Vec<&CoordinateCheck> {
        let mut judged: Vec<&CoordinateCheck> = self.coordinates.iter().filter(|c| c.identifiable).collect();
        judged.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        judged.truncate(n);
        judged
    }

    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| c.identifiable)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "gradcheck: {} (tol {:e}, fd_step {:e}, value {:.9e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.options.tol,
            self.options.fd_step,
            self.value
        )
        .unwrap();
        writeln!(out, "{:>4}  {:<20} {:>16} {:>16} {:>10}  status", "idx", "name", "analytic", "numeric", "rel_err").unwrap();
        for c in &self.coordinates {
            let status = match (c.identifiable, c.pass) {
                (false, _) => "skip",
                (true, true) => "ok",
                (true, false) => "FAIL",
            };
            writeln!(
                out,
                "{:>4}  {:<20} {:>16.9e} {:>16.9e} {:>10.3e}  {status}",
                c.index, c.name, c.analytic, c.numeric, c.rel_error
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
