//! Single-dipole scanning with a fixed standard model, with and without the
//! learned approximation-error term.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{BaeError, Result};
use crate::training::ErrorStats;

/// Relative pivot below which a covariance is treated as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-13;

/// Eigenvalues at or below this fraction of the largest one pin their
/// coefficient to zero.
pub const PINNED_VARIANCE: f64 = 1e-14;

/// Returns `L = R^{-1}` where `Gamma = R R^T`, so `L^T L = Gamma^{-1}`.
pub fn whitener(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = gamma.nrows();
    if gamma.ncols() != n {
        return Err(BaeError::Shape("covariance must be square".into()));
    }
    let scale = gamma.diagonal().amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(BaeError::Factorization(
            "covariance has no positive diagonal".into(),
        ));
    }
    let chol = Cholesky::new(gamma.clone())
        .ok_or_else(|| BaeError::Factorization("covariance is not positive definite".into()))?;
    let r = chol.l();
    let min_pivot = r.diagonal().min();
    if min_pivot * min_pivot <= PIVOT_THRESHOLD * scale {
        return Err(BaeError::Factorization(format!(
            "covariance pivot {min_pivot:e} is below the threshold"
        )));
    }
    r.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| BaeError::Factorization("singular Cholesky factor".into()))
}

/// Gaussian measurement noise `e ~ N(mean, cov)` with a cached whitener.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    whitener: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if mean.len() != cov.nrows() {
            return Err(BaeError::Shape("noise mean and covariance disagree".into()));
        }
        let whitener = whitener(&cov)?;
        Ok(NoiseModel {
            mean,
            cov,
            whitener,
        })
    }

    /// Zero-mean white noise with standard deviation `scale`.
    pub fn white(m: usize, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(BaeError::Measurement(format!(
                "noise scale {scale} must be positive"
            )));
        }
        Self::new(DVector::zeros(m), DMatrix::identity(m, m) * (scale * scale))
    }

    /// White noise at the measurement's scale, floored at `floor * |v| / sqrt(m)`
    /// so that noise-free data still gives a usable whitener.
    pub fn for_data(v: &DVector<f64>, scale: f64, floor: f64) -> Result<Self> {
        let m = v.len();
        let min = floor * v.norm() / (m as f64).sqrt();
        let s = scale.max(min);
        let s = if s > 0.0 {
            s
        } else {
            floor.max(f64::MIN_POSITIVE.sqrt())
        };
        Self::white(m, s)
    }

    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn m(&self) -> usize {
        self.mean.len()
    }
}

/// Per-location estimate kept for goodness-of-fit maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationEstimate {
    pub x: [f64; 2],
    pub alpha: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub location: usize,
    pub x_hat: [f64; 2],
    pub alpha_hat: Option<DVector<f64>>,
    pub functional_value: f64,
    /// Objective per location; skipped locations hold `+inf`.
    pub per_location_values: Vec<f64>,
    pub estimates: Vec<LocationEstimate>,
    /// `W^p alpha_hat` at the chosen location.
    pub eps_prime_hat: Option<DVector<f64>>,
    pub warnings: Vec<String>,
}

impl ScanResult {
    pub fn amplitude(&self) -> f64 {
        self.x_hat[0].hypot(self.x_hat[1])
    }

    /// First error coefficient at the chosen location (zero for standard
    /// scans).
    pub fn alpha1(&self) -> f64 {
        self.alpha_hat.as_ref().map_or(0.0, |a| a[0])
    }
}

struct Fit {
    x: [f64; 2],
    alpha: Option<DVector<f64>>,
    value: f64,
}

/// Least squares `min |b - M z|` by Householder QR; `None` if the system is
/// numerically rank deficient.
fn least_squares(mat: DMatrix<f64>, rhs: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let scale = mat.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let qr = mat.clone().qr();
    let r = qr.r();
    let min_diag = r
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min_diag <= 1e-12 * scale {
        return None;
    }
    let qtb = qr.q().tr_mul(rhs);
    let z = r.solve_upper_triangular(&qtb)?;
    let res = (rhs - mat * &z).norm_squared();
    Some((z, res))
}

/// Best location, functional values, estimates and warnings.
type Selection = (usize, Vec<f64>, Vec<LocationEstimate>, Vec<String>);

fn select(fits: Vec<Option<Fit>>, warn: &str) -> Result<Selection> {
    let mut values = Vec::with_capacity(fits.len());
    let mut estimates = Vec::with_capacity(fits.len());
    let mut warnings = Vec::new();
    let mut best: Option<usize> = None;
    for (i, fit) in fits.into_iter().enumerate() {
        match fit {
            Some(f) => {
                if best.is_none_or(|b| f.value < values[b]) {
                    best = Some(i);
                }
                values.push(f.value);
                estimates.push(LocationEstimate {
                    x: f.x,
                    alpha: f.alpha,
                });
            }
            None => {
                warnings.push(format!("location {i} skipped: {warn}"));
                values.push(f64::INFINITY);
                estimates.push(LocationEstimate {
                    x: [0.0; 2],
                    alpha: None,
                });
            }
        }
    }
    let best = best.ok_or_else(|| BaeError::Data("every location was skipped".into()))?;
    Ok((best, values, estimates, warnings))
}

fn check_leadfield(v: &DVector<f64>, a0: &DMatrix<f64>, noise: &NoiseModel) -> Result<usize> {
    let m = v.len();
    if a0.nrows() != m || noise.m() != m || !a0.ncols().is_multiple_of(2) || a0.ncols() == 0 {
        return Err(BaeError::Shape(format!(
            "data has {m} entries, leadfield is {}x{}, noise has {}",
            a0.nrows(),
            a0.ncols(),
            noise.m()
        )));
    }
    Ok(a0.ncols() / 2)
}

/// Scans every location with `min_x |L_e (v - e_* - A0^i x)|^2`.
pub fn standard_dipole_scan(
    v: &DVector<f64>,
    a0: &DMatrix<f64>,
    noise: &NoiseModel,
) -> Result<ScanResult> {
    let n = check_leadfield(v, a0, noise)?;
    let l = noise.whitener();
    let y = l * (v - &noise.mean);
    let fits: Vec<Option<Fit>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let b = l * a0.columns(2 * i, 2);
            least_squares(b, &y).map(|(z, value)| Fit {
                x: [z[0], z[1]],
                alpha: None,
                value,
            })
        })
        .collect();
    let (best, values, estimates, warnings) = select(fits, "rank-deficient leadfield block")?;
    Ok(ScanResult {
        location: best,
        x_hat: estimates[best].x,
        alpha_hat: None,
        functional_value: values[best],
        per_location_values: values,
        estimates,
        eps_prime_hat: None,
        warnings,
    })
}

/// Whiteners of `Gamma_eps''_i + Gamma_e` for every location, reusable across
/// scans with the same noise model.
#[derive(Debug, Clone)]
pub struct BaeWhiteners {
    factors: Vec<Option<DMatrix<f64>>>,
}

impl BaeWhiteners {
    pub fn new(stats: &[ErrorStats], noise: &NoiseModel) -> Self {
        BaeWhiteners {
            factors: stats
                .par_iter()
                .map(|st| {
                    if st.m() != noise.m() {
                        return None;
                    }
                    whitener(&(&st.residual_cov + &noise.cov)).ok()
                })
                .collect(),
        }
    }
}

/// Joint `(x_i, alpha_i)` estimate at one location; `None` for a singular
/// stacked system.
fn bae_location_fit(
    v: &DVector<f64>,
    a0_i: DMatrix<f64>,
    st: &ErrorStats,
    l: &DMatrix<f64>,
    noise_mean: &DVector<f64>,
) -> Option<Fit> {
    let m = v.len();
    let lam_max = st.eigvals.amax();
    let free: Vec<usize> = (0..st.p)
        .filter(|&k| st.eigvals[k] > PINNED_VARIANCE * lam_max && st.eigvals[k] > 0.0)
        .collect();
    let q = free.len();
    let mut mat = DMatrix::zeros(m + q, 2 + q);
    mat.view_mut((0, 0), (m, 2)).copy_from(&(l * a0_i));
    for (c, &k) in free.iter().enumerate() {
        mat.view_mut((0, 2 + c), (m, 1))
            .copy_from(&(l * st.eigvecs.column(k)));
        mat[(m + c, 2 + c)] = 1.0 / st.eigvals[k].sqrt();
    }
    let mut rhs = DVector::zeros(m + q);
    rhs.rows_mut(0, m)
        .copy_from(&(l * (v - &st.eps_mean - noise_mean)));
    let (z, value) = least_squares(mat, &rhs)?;
    let mut alpha = DVector::zeros(st.p);
    for (c, &k) in free.iter().enumerate() {
        alpha[k] = z[2 + c];
    }
    Some(Fit {
        x: [z[0], z[1]],
        alpha: Some(alpha),
        value,
    })
}

/// Scans every location with the joint source and error-coefficient
/// estimate and returns the minimiser of the posterior functional.
pub fn bae_dipole_scan(
    v: &DVector<f64>,
    a0: &DMatrix<f64>,
    stats: &[ErrorStats],
    noise: &NoiseModel,
) -> Result<ScanResult> {
    let whiteners = BaeWhiteners::new(stats, noise);
    bae_dipole_scan_with(v, a0, stats, noise, &whiteners)
}

pub fn bae_dipole_scan_with(
    v: &DVector<f64>,
    a0: &DMatrix<f64>,
    stats: &[ErrorStats],
    noise: &NoiseModel,
    whiteners: &BaeWhiteners,
) -> Result<ScanResult> {
    let n = check_leadfield(v, a0, noise)?;
    if stats.len() != n || whiteners.factors.len() != n {
        return Err(BaeError::Config(format!(
            "statistics cover {} locations, the leadfield has {n}",
            stats.len()
        )));
    }
    if let Some(st) = stats.iter().find(|s| s.p != stats[0].p) {
        return Err(BaeError::Config(format!(
            "location {} has a different rank",
            st.location
        )));
    }
    let fits: Vec<Option<Fit>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let l = whiteners.factors[i].as_ref()?;
            bae_location_fit(
                v,
                a0.columns(2 * i, 2).into_owned(),
                &stats[i],
                l,
                &noise.mean,
            )
        })
        .collect();
    let (best, values, estimates, warnings) = select(fits, "singular stacked system")?;
    let alpha = estimates[best].alpha.clone();
    let eps_prime = alpha.as_ref().map(|a| stats[best].basis() * a);
    Ok(ScanResult {
        location: best,
        x_hat: estimates[best].x,
        alpha_hat: alpha,
        functional_value: values[best],
        per_location_values: values,
        estimates,
        eps_prime_hat: eps_prime,
        warnings,
    })
}

/// `1 - |v - A0^i x_i - W^p alpha_i - eps_i*| / |v|` per location; the error
/// terms are omitted when `stats` is `None`.
pub fn goodness_of_fit_map(
    result: &ScanResult,
    v: &DVector<f64>,
    a0: &DMatrix<f64>,
    stats: Option<&[ErrorStats]>,
) -> Result<Vec<f64>> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(BaeError::Data(
            "goodness of fit is undefined for zero data".into(),
        ));
    }
    result
        .estimates
        .iter()
        .enumerate()
        .map(|(i, est)| {
            if !result.per_location_values[i].is_finite() {
                return Ok(f64::NEG_INFINITY);
            }
            let mut r = v - a0.columns(2 * i, 2) * nalgebra::Vector2::new(est.x[0], est.x[1]);
            if let Some(stats) = stats {
                let st = stats
                    .get(i)
                    .ok_or_else(|| BaeError::Config(format!("no statistics for location {i}")))?;
                r -= &st.eps_mean;
                if let Some(a) = &est.alpha {
                    r -= st.basis() * a;
                }
            }
            Ok(1.0 - r.norm() / norm)
        })
        .collect()
}
