use nalgebra::{DMatrix, DVector, Vector2, SVD};
use rand::Rng;

use crate::error::{BaeError, Result};
use crate::forward::{Dipole, Point};
use crate::training::prior::{sample_dipole, DipolePrior};

/// Leadfield block (`m x 2`) of one sample model at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub sigma: f64,
    pub block: DMatrix<f64>,
}

/// Monte-Carlo approximation-error samples at one location.
///
/// Column `s = j + J k` pairs dipole `j` with sample model `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSamples {
    pub location: usize,
    pub eps: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub moments: Vec<[f64; 2]>,
}

impl ErrorSamples {
    pub fn len(&self) -> usize {
        self.eps.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.ncols() == 0
    }
}

/// One approximation error `A(sigma) x - A0 x`.
pub fn approximation_error(
    block: &DMatrix<f64>,
    a0: &DMatrix<f64>,
    moment: [f64; 2],
) -> DVector<f64> {
    let x = Vector2::new(moment[0], moment[1]);
    block * x - a0 * x
}

/// Error samples for explicit dipoles against every sample block.
pub fn error_samples_for(
    location: usize,
    blocks: &[SampleBlock],
    a0: &DMatrix<f64>,
    dipoles: &[Dipole],
) -> Result<ErrorSamples> {
    let m = a0.nrows();
    if a0.ncols() != 2 {
        return Err(BaeError::Shape(format!(
            "standard block has {} columns, expected 2",
            a0.ncols()
        )));
    }
    if let Some(b) = blocks.iter().find(|b| b.block.shape() != (m, 2)) {
        return Err(BaeError::Shape(format!(
            "sample block is {}x{}, standard block is {m}x2",
            b.block.nrows(),
            b.block.ncols()
        )));
    }
    let s = blocks.len() * dipoles.len();
    let mut eps = DMatrix::zeros(m, s);
    let mut sigma = Vec::with_capacity(s);
    let mut moments = Vec::with_capacity(s);
    for b in blocks {
        for d in dipoles {
            eps.set_column(sigma.len(), &approximation_error(&b.block, a0, d.moment));
            sigma.push(b.sigma);
            moments.push(d.moment);
        }
    }
    Ok(ErrorSamples {
        location,
        eps,
        sigma,
        moments,
    })
}

/// Draws `dipole_count` radial dipoles at `position` and pairs each with
/// every sample block.
pub fn generate_error_samples<R: Rng + ?Sized>(
    location: usize,
    position: Point,
    blocks: &[SampleBlock],
    a0: &DMatrix<f64>,
    dipole_count: usize,
    prior: &DipolePrior,
    rng: &mut R,
) -> Result<ErrorSamples> {
    let dipoles: Vec<Dipole> = (0..dipole_count)
        .map(|_| sample_dipole(location, position, prior, rng))
        .collect();
    error_samples_for(location, blocks, a0, &dipoles)
}

/// Held-out sample used to train the conductivity regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub alpha: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

/// Approximation-error statistics of one source location.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub location: usize,
    pub eps_mean: DVector<f64>,
    /// Orthonormal eigenvectors, columns ordered by descending eigenvalue.
    pub eigvecs: DMatrix<f64>,
    pub eigvals: DVector<f64>,
    /// Retained rank.
    pub p: usize,
    /// Covariance of the discarded part, `sum_{j>p} lambda_j w_j w_j^T`.
    pub residual_cov: DMatrix<f64>,
    /// Cross-covariance of `sigma` with each retained coefficient; never
    /// positive.
    pub sigma_alpha: DVector<f64>,
    pub sigma_star: f64,
    pub gp_triplets: Vec<Triplet>,
}

impl ErrorStats {
    pub fn m(&self) -> usize {
        self.eps_mean.len()
    }

    /// Retained basis `W^p` (`m x p`).
    pub fn basis(&self) -> DMatrix<f64> {
        self.eigvecs.columns(0, self.p).into_owned()
    }

    /// Discarded basis `Q` (`m x (m - p)`).
    pub fn complement(&self) -> DMatrix<f64> {
        self.eigvecs.columns(self.p, self.m() - self.p).into_owned()
    }

    /// Prior variances of the retained coefficients.
    pub fn alpha_variances(&self) -> DVector<f64> {
        self.eigvals.rows(0, self.p).into_owned()
    }

    /// Full covariance `W Lambda W^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.eigvecs * DMatrix::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }

    /// `k = w_1^T eps_*`, the mean projected on the first basis vector.
    pub fn mean_offset(&self) -> f64 {
        self.eigvecs.column(0).dot(&self.eps_mean)
    }

    /// Coefficients `(alpha, beta)` of `eps - eps_*` in the retained and
    /// discarded bases.
    pub fn coefficients(&self, eps: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let c = eps - &self.eps_mean;
        (self.basis().tr_mul(&c), self.complement().tr_mul(&c))
    }
}

fn unbiased_covariance(centred: &DMatrix<f64>) -> DMatrix<f64> {
    let s = centred.ncols();
    let mut cov = centred * centred.transpose() / (s as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    cov
}

/// Mean, eigen-decomposed covariance and conductivity cross-covariance of
/// the samples, with retained rank `p`.
pub fn estimate_error_stats(
    samples: &ErrorSamples,
    p: usize,
    sigma_star: f64,
) -> Result<ErrorStats> {
    let m = samples.eps.nrows();
    let s = samples.len();
    if p == 0 || p > m {
        return Err(BaeError::Statistics(format!(
            "rank p = {p} must lie in 1..={m}"
        )));
    }
    if s < m + 1 {
        return Err(BaeError::Statistics(format!(
            "{s} samples are too few for {m} electrodes (need at least {})",
            m + 1
        )));
    }
    if samples.sigma.len() != s {
        return Err(BaeError::Shape(
            "one conductivity per sample is required".into(),
        ));
    }
    if samples
        .eps
        .iter()
        .chain(&samples.sigma)
        .any(|v| !v.is_finite())
    {
        return Err(BaeError::Data(
            "error samples contain non-finite values".into(),
        ));
    }
    let eps_mean = samples.eps.column_mean();
    let mut centred = samples.eps.clone();
    for mut col in centred.column_iter_mut() {
        col -= &eps_mean;
    }
    let cov = unbiased_covariance(&centred);

    // The covariance is positive semi-definite, so its SVD is an
    // eigendecomposition. The symmetric QR solver loses accuracy on some of
    // these matrices (residuals near 1e-6), the SVD does not.
    let svd = SVD::new(cov, true, false);
    let u = svd
        .u
        .as_ref()
        .expect("left singular vectors were requested");
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let mut eigvecs = DMatrix::zeros(m, m);
    let mut eigvals = DVector::zeros(m);
    for (dst, &src) in order.iter().enumerate() {
        eigvecs.set_column(dst, &u.column(src));
        eigvals[dst] = svd.singular_values[src];
    }

    let sigma_mean = samples.sigma.iter().sum::<f64>() / s as f64;
    let dsigma = DVector::from_iterator(s, samples.sigma.iter().map(|v| v - sigma_mean));
    let mut sigma_alpha = DVector::zeros(p);
    for k in 0..m {
        let w = eigvecs.column(k).into_owned();
        let alpha = centred.tr_mul(&w);
        let cross = alpha.dot(&dsigma) / (s as f64 - 1.0);
        let flip = if cross != 0.0 {
            cross > 0.0
        } else {
            let imax = w.iamax();
            w[imax] < 0.0
        };
        if flip {
            eigvecs.column_mut(k).neg_mut();
        }
        if k < p {
            sigma_alpha[k] = -cross.abs();
        }
    }

    let mut residual_cov = DMatrix::zeros(m, m);
    for k in p..m {
        let w = eigvecs.column(k);
        residual_cov += eigvals[k] * w * w.transpose();
    }
    Ok(ErrorStats {
        location: samples.location,
        eps_mean,
        eigvecs,
        eigvals,
        p,
        residual_cov,
        sigma_alpha,
        sigma_star,
        gp_triplets: Vec::new(),
    })
}

/// First-order covariance model `gamma var(sigma) J J^T`.
pub fn semi_analytic_covariance(
    jacobian: &DMatrix<f64>,
    var_sigma: f64,
    gamma: f64,
) -> DMatrix<f64> {
    jacobian * jacobian.transpose() * (gamma * var_sigma)
}

/// Both sides of the noise-versus-approximation-error comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BenefitCheck {
    /// `|e_*|^2 + trace Gamma_e`.
    pub noise_side: f64,
    /// `|eps_*|^2 + trace Gamma_eps`.
    pub error_side: f64,
    pub verdict: bool,
    /// Electrodes where the approximation error dominates the noise.
    pub components: Vec<usize>,
}

pub fn bae_benefit_check(
    stats: &ErrorStats,
    noise_cov: &DMatrix<f64>,
    noise_mean: &DVector<f64>,
) -> BenefitCheck {
    let cov = stats.covariance();
    let noise_side = noise_mean.norm_squared() + noise_cov.trace();
    let error_side = stats.eps_mean.norm_squared() + stats.eigvals.sum();
    let components = (0..stats.m())
        .filter(|&k| {
            noise_mean[k].powi(2) + noise_cov[(k, k)] < stats.eps_mean[k].powi(2) + cov[(k, k)]
        })
        .collect();
    BenefitCheck {
        noise_side,
        error_side,
        verdict: noise_side < error_side,
        components,
    }
}
