//! Estimators of the skull conductivity from the scan's error coefficient
//! and source estimate.

mod factory;
mod gp;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{BaeError, Result};
use crate::forward::{radial_direction, Point};
use crate::inversion::{standard_dipole_scan, NoiseModel, ScanResult};
use crate::training::{ConductivityPrior, ErrorStats};

pub use factory::{ExactFactory, ForwardFactory, TabulatedFactory};
pub use gp::{gp_estimate, gp_fit, GpModel, GpParams, GpStore, KernelInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Cg,
    CgIter,
    Gp,
    MapA2,
    Alternating,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cg,
        Method::CgIter,
        Method::Gp,
        Method::MapA2,
        Method::Alternating,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Cg => "cg",
            Method::CgIter => "cg-iter",
            Method::Gp => "gp",
            Method::MapA2 => "map-a2",
            Method::Alternating => "alt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = BaeError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| BaeError::Config(format!("unknown calibration method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Estimate clamped to the prior support.
    pub sigma_hat: f64,
    pub unclamped: f64,
    pub method: Method,
    pub iterations: usize,
    pub converged: bool,
    /// Conductivity after every iteration, starting with the initial value.
    pub trace: Vec<f64>,
    /// Predictive variance, for the regressor.
    pub variance: Option<f64>,
    pub note: Option<String>,
}

impl CalibrationResult {
    pub(crate) fn single(method: Method, value: f64, prior: &ConductivityPrior) -> Self {
        CalibrationResult {
            sigma_hat: prior.clamp(value),
            unclamped: value,
            method,
            iterations: 0,
            converged: true,
            trace: Vec::new(),
            variance: None,
            note: None,
        }
    }
}

/// Conditional-Gaussian estimate `sigma_* + Gamma_sigma_alpha Gamma_alpha^{-1} alpha`.
pub fn cg_estimate(
    alpha_hat: &DVector<f64>,
    stats: &ErrorStats,
    prior: &ConductivityPrior,
) -> Result<CalibrationResult> {
    if alpha_hat.len() != stats.p {
        return Err(BaeError::Shape(format!(
            "alpha has {} entries, rank is {}",
            alpha_hat.len(),
            stats.p
        )));
    }
    let mut value = stats.sigma_star;
    for k in 0..stats.p {
        let lam = stats.eigvals[k];
        if !(lam > 0.0) {
            return Err(BaeError::Statistics(format!(
                "eigenvalue {k} is {lam}, must be positive"
            )));
        }
        value += stats.sigma_alpha[k] / lam * alpha_hat[k];
    }
    Ok(CalibrationResult::single(Method::Cg, value, prior))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterOptions {
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for IterOptions {
    fn default() -> Self {
        IterOptions {
            max_iter: 50,
            tolerance: 1e-6,
        }
    }
}

fn vec2(x: [f64; 2]) -> Vector2<f64> {
    Vector2::new(x[0], x[1])
}

fn degenerate(g: &DVector<f64>, jac: &DMatrix<f64>, x: [f64; 2]) -> bool {
    let scale = jac.norm() * vec2(x).norm();
    !(g.norm() > 1e-14 * scale) || scale == 0.0
}

/// Iterative relinearization: starting from `sigma_init`, repeatedly solves
/// `min |b - J x (sigma - sigma_t)|` with
/// `b = W^p alpha + eps_* - (A^l(sigma_t) - A0^l) x`.
#[allow(clippy::too_many_arguments)]
pub fn cg_iter_estimate(
    alpha_hat: &DVector<f64>,
    x_hat: [f64; 2],
    location: usize,
    a0_block: &DMatrix<f64>,
    factory: &dyn ForwardFactory,
    stats: &ErrorStats,
    prior: &ConductivityPrior,
    sigma_init: f64,
    options: &IterOptions,
) -> Result<CalibrationResult> {
    let x = vec2(x_hat);
    let target = stats.basis() * alpha_hat + &stats.eps_mean;
    let mut sigma = prior.clamp(sigma_init);
    let mut trace = vec![sigma];
    let mut unclamped = sigma;
    for it in 1..=options.max_iter {
        let (a, jac) = factory.block_and_jacobian(location, sigma)?;
        let g = &jac * x;
        if degenerate(&g, &jac, x_hat) {
            return Err(BaeError::DegenerateSensitivity(format!(
                "|J x| vanishes at location {location}"
            )));
        }
        let b = &target - (a - a0_block) * x;
        unclamped = sigma + g.dot(&b) / g.norm_squared();
        let next = prior.clamp(unclamped);
        trace.push(next);
        let step = (next - sigma).abs();
        sigma = next;
        if step < options.tolerance {
            return Ok(CalibrationResult {
                sigma_hat: sigma,
                unclamped,
                method: Method::CgIter,
                iterations: it,
                converged: true,
                trace,
                variance: None,
                note: None,
            });
        }
    }
    Ok(CalibrationResult {
        sigma_hat: sigma,
        unclamped,
        method: Method::CgIter,
        iterations: options.max_iter,
        converged: false,
        trace,
        variance: None,
        note: Some("iteration limit reached".into()),
    })
}

/// Closed-form linearized MAP `sigma_* + (alpha + c) / (k_l sqrt(2) gamma)`
/// with `k_l = w_1^T J n` and `c = w_1^T eps_*`.
pub fn map_closed_form(
    alpha_hat: f64,
    stats: &ErrorStats,
    jacobian: &DMatrix<f64>,
    position: Point,
    gamma: f64,
    prior: &ConductivityPrior,
) -> Result<CalibrationResult> {
    let n = radial_direction(position);
    let jn = jacobian * Vector2::new(n[0], n[1]);
    let k = stats.eigvecs.column(0).dot(&jn);
    if !(k.abs() > 1e-14 * jn.norm()) || jn.norm() == 0.0 {
        return Err(BaeError::DegenerateSensitivity(format!(
            "w_1^T J n vanishes at location {}",
            stats.location
        )));
    }
    let c = stats.mean_offset();
    let value = stats.sigma_star + (alpha_hat + c) / (k * std::f64::consts::SQRT_2 * gamma);
    Ok(CalibrationResult::single(Method::MapA2, value, prior))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlternatingOptions {
    pub max_outer: usize,
    pub tolerance: f64,
    /// Step halvings tried before an update is abandoned.
    pub max_halvings: usize,
}

impl Default for AlternatingOptions {
    fn default() -> Self {
        AlternatingOptions {
            max_outer: 25,
            tolerance: 1e-6,
            max_halvings: 5,
        }
    }
}

/// Whitened residual of the best moment for one block.
fn block_residual(v: &DVector<f64>, block: &DMatrix<f64>, noise: &NoiseModel) -> f64 {
    let l = noise.whitener();
    let y = l * (v - &noise.mean);
    let b = l * block;
    match b.clone().svd(true, true).solve(&y, 1e-14) {
        Ok(z) => (y - b * z).norm_squared(),
        Err(_) => f64::INFINITY,
    }
}

/// Alternates a standard scan at the current conductivity with a damped
/// linearized conductivity update at the selected location.
pub fn alternating_scan(
    v: &DVector<f64>,
    factory: &dyn ForwardFactory,
    noise: &NoiseModel,
    prior: &ConductivityPrior,
    sigma_init: f64,
    options: &AlternatingOptions,
) -> Result<(ScanResult, CalibrationResult)> {
    let mut sigma = prior.clamp(sigma_init);
    let mut trace = vec![sigma];
    let mut scan = standard_dipole_scan(v, &factory.leadfield(sigma)?, noise)?;
    let mut unclamped = sigma;
    let mut note = None;
    let mut converged = false;
    let mut iterations = 0;
    let l = noise.whitener();
    for it in 1..=options.max_outer {
        iterations = it;
        let loc = scan.location;
        let (a, jac) = factory.block_and_jacobian(loc, sigma)?;
        let x = vec2(scan.x_hat);
        let g = l * (&jac * x);
        let r = l * (v - &noise.mean - &a * x);
        if !(g.norm_squared() > 0.0) {
            note = Some("vanishing sensitivity at the selected location".into());
            break;
        }
        let delta = g.dot(&r) / g.norm_squared();
        unclamped = sigma + delta;
        if (prior.clamp(sigma + delta) - sigma).abs() < options.tolerance {
            converged = true;
            break;
        }
        let current = scan.functional_value;
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = prior.clamp(sigma + step);
            if (candidate - sigma).abs() < options.tolerance {
                break;
            }
            if block_residual(v, &factory.block(loc, candidate)?, noise) <= current {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            note = Some("no step decreased the residual".into());
            break;
        };
        let change = (next - sigma).abs();
        sigma = next;
        trace.push(sigma);
        scan = standard_dipole_scan(v, &factory.leadfield(sigma)?, noise)?;
        if change < options.tolerance {
            converged = true;
            break;
        }
        let n = trace.len();
        if n >= 3 && (trace[n - 1] - trace[n - 3]).abs() < options.tolerance {
            note = Some("conductivity oscillates between two values".into());
            break;
        }
    }
    if !converged && note.is_none() {
        note = Some("outer iteration limit reached".into());
    }
    Ok((
        scan,
        CalibrationResult {
            sigma_hat: sigma,
            unclamped,
            method: Method::Alternating,
            iterations,
            converged,
            trace,
            variance: None,
            note,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with(lam: f64, cross: f64) -> ErrorStats {
        let m = 3;
        ErrorStats {
            location: 0,
            eps_mean: DVector::from_column_slice(&[0.5, -0.25, 0.1]),
            eigvecs: DMatrix::identity(m, m),
            eigvals: DVector::from_column_slice(&[lam, 0.1 * lam, 0.0]),
            p: 1,
            residual_cov: DMatrix::zeros(m, m),
            sigma_alpha: DVector::from_element(1, cross),
            sigma_star: 0.0103,
            gp_triplets: Vec::new(),
        }
    }

    #[test]
    fn cg_formula_cases() {
        let prior = ConductivityPrior::default();
        let st = stats_with(2.0, -1e-5);
        let zero = cg_estimate(&DVector::zeros(1), &st, &prior).unwrap();
        assert_eq!(zero.sigma_hat, 0.0103);
        let r = cg_estimate(&DVector::from_element(1, 100.0), &st, &prior).unwrap();
        assert!((r.sigma_hat - 0.0098).abs() < 1e-15);
        let bad = stats_with(0.0, -1e-5);
        assert!(matches!(
            cg_estimate(&DVector::zeros(1), &bad, &prior),
            Err(BaeError::Statistics(_))
        ));
    }

    #[test]
    fn map_zero_at_negative_offset() {
        let prior = ConductivityPrior::default();
        let st = stats_with(2.0, -1e-5);
        let jac = DMatrix::from_row_slice(3, 2, &[-3.0, -4.0, 1.0, 0.5, 0.2, 0.1]);
        let r = map_closed_form(-st.mean_offset(), &st, &jac, [0.6, 0.8], 1.85, &prior).unwrap();
        assert_eq!(r.sigma_hat, st.sigma_star);
        let flat = DMatrix::zeros(3, 2);
        assert!(map_closed_form(1.0, &st, &flat, [0.6, 0.8], 1.85, &prior).is_err());
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
