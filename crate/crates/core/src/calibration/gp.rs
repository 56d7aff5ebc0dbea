use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{BaeError, Result};
use crate::store::Container;
use crate::training::{ConductivityPrior, Triplet};

use super::{CalibrationResult, Method};

/// Input of the squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelInput {
    /// `(alpha + k) / |x|`, the same variable as the mean polynomial.
    Offset,
    /// `alpha / |x|`; indistinguishable from `Offset` only when `k` is
    /// negligible next to `alpha`.
    Ratio,
}

impl std::str::FromStr for KernelInput {
    type Err = BaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offset" => Ok(KernelInput::Offset),
            "ratio" => Ok(KernelInput::Ratio),
            _ => Err(BaeError::Config(format!(
                "unknown kernel input `{s}` (offset or ratio)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpParams {
    /// Degree of the mean polynomial.
    pub degree: usize,
    pub s_f: f64,
    pub length: f64,
    /// Fraction of the triplets used for the mean polynomial.
    pub split: f64,
    /// Diagonal regularizer in units of `s_f^2`.
    pub jitter: f64,
    pub amplitude_floor: f64,
    pub max_condition: f64,
    pub input: KernelInput,
}

impl Default for GpParams {
    fn default() -> Self {
        GpParams {
            degree: 2,
            s_f: 0.001,
            length: 10.0,
            split: 0.5,
            jitter: 1e-10,
            amplitude_floor: 0.05,
            max_condition: 1e10,
            input: KernelInput::Offset,
        }
    }
}

/// Regressor of the conductivity on `(alpha, |x|)` with a polynomial mean in
/// `y = (alpha + k) / |x|` and a squared-exponential kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub params: GpParams,
    /// `k = w_1^T eps_*`.
    pub offset: f64,
    pub coeffs: DVector<f64>,
    /// Kernel inputs of the training set.
    pub inputs: Vec<f64>,
    pub outputs: Vec<f64>,
    /// `(K + jitter I)^{-1} (f - m)`.
    weights: DVector<f64>,
    chol: Option<DMatrix<f64>>,
}

fn kernel(params: &GpParams, a: f64, b: f64) -> f64 {
    let d = (a - b) / params.length;
    params.s_f * params.s_f * (-d * d).exp()
}

fn feature(params: &GpParams, offset: f64, alpha: f64, amplitude: f64) -> f64 {
    match params.input {
        KernelInput::Offset => (alpha + offset) / amplitude,
        KernelInput::Ratio => alpha / amplitude,
    }
}

fn powers(y: f64, degree: usize) -> impl Iterator<Item = f64> {
    (0..=degree).scan(1.0, move |acc, _| {
        let v = *acc;
        *acc *= y;
        Some(v)
    })
}

fn canonical(triplets: &[Triplet]) -> Vec<Triplet> {
    let mut t = triplets.to_vec();
    t.sort_by(|a, b| {
        a.sigma
            .total_cmp(&b.sigma)
            .then(a.amplitude.total_cmp(&b.amplitude))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    t
}

/// Fits the mean polynomial on the first subset and conditions the process
/// on the second. Triplets are put in canonical order and interleaved
/// between the subsets, so the fit does not depend on input order.
pub fn gp_fit(triplets: &[Triplet], offset: f64, params: &GpParams) -> Result<GpModel> {
    if triplets.len() < 20 {
        return Err(BaeError::Statistics(format!(
            "{} triplets are too few to fit the regressor (need 20)",
            triplets.len()
        )));
    }
    if triplets.iter().any(|t| !(t.amplitude > 0.0)) {
        return Err(BaeError::Data("triplet amplitudes must be positive".into()));
    }
    if !(params.split > 0.0 && params.split < 1.0) {
        return Err(BaeError::Config(
            "split must lie strictly between 0 and 1".into(),
        ));
    }
    let sorted = canonical(triplets);
    let mut mean_set = Vec::new();
    let mut gp_set = Vec::new();
    for (i, t) in sorted.into_iter().enumerate() {
        let before = (i as f64 * params.split).floor();
        let after = ((i + 1) as f64 * params.split).floor();
        if after > before {
            mean_set.push(t);
        } else {
            gp_set.push(t);
        }
    }
    let coeffs = fit_mean(&mean_set, offset, params)?;
    GpModel::new(params, offset, coeffs, &gp_set)
}

fn fit_mean(set: &[Triplet], offset: f64, params: &GpParams) -> Result<DVector<f64>> {
    let cols = params.degree + 1;
    if set.len() < cols {
        return Err(BaeError::Statistics(
            "too few triplets for the mean polynomial".into(),
        ));
    }
    let v = DMatrix::from_fn(set.len(), cols, |r, c| {
        let t = set[r];
        ((t.alpha + offset) / t.amplitude).powi(c as i32)
    });
    let f = DVector::from_iterator(set.len(), set.iter().map(|t| t.sigma));
    let svd = v.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(cond <= params.max_condition) {
        return Err(BaeError::IllConditioned { condition: cond });
    }
    svd.solve(&f, 0.0)
        .map_err(|e| BaeError::Statistics(format!("mean polynomial fit failed: {e}")))
}

impl GpModel {
    /// Conditions the process with the given mean polynomial on `set`.
    pub fn new(
        params: &GpParams,
        offset: f64,
        coeffs: DVector<f64>,
        set: &[Triplet],
    ) -> Result<GpModel> {
        let inputs: Vec<f64> = set
            .iter()
            .map(|t| feature(params, offset, t.alpha, t.amplitude))
            .collect();
        let outputs: Vec<f64> = set.iter().map(|t| t.sigma).collect();
        let mut model = GpModel {
            params: *params,
            offset,
            coeffs,
            inputs,
            outputs,
            weights: DVector::zeros(0),
            chol: None,
        };
        let n = set.len();
        if n == 0 {
            return Ok(model);
        }
        let jitter = params.jitter * params.s_f * params.s_f;
        let k = DMatrix::from_fn(n, n, |r, c| {
            kernel(params, model.inputs[r], model.inputs[c]) + if r == c { jitter } else { 0.0 }
        });
        let chol = Cholesky::new(k).ok_or_else(|| {
            BaeError::Factorization("kernel matrix is not positive definite".into())
        })?;
        let resid = DVector::from_iterator(
            n,
            set.iter()
                .map(|t| t.sigma - model.mean(t.alpha, t.amplitude)),
        );
        model.weights = chol.solve(&resid);
        model.chol = Some(chol.l());
        Ok(model)
    }

    /// Mean polynomial at `(alpha, |x|)`.
    pub fn mean(&self, alpha: f64, amplitude: f64) -> f64 {
        let y = (alpha + self.offset) / amplitude;
        powers(y, self.coeffs.len() - 1)
            .zip(self.coeffs.iter())
            .map(|(p, c)| p * c)
            .sum()
    }

    /// Predictive mean and variance.
    pub fn predict(&self, alpha: f64, amplitude: f64) -> (f64, f64) {
        let z = feature(&self.params, self.offset, alpha, amplitude);
        let kstar = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|&s| kernel(&self.params, z, s)),
        );
        let mean = self.mean(alpha, amplitude) + kstar.dot(&self.weights);
        let prior_var = kernel(&self.params, z, z);
        let var = match &self.chol {
            Some(l) => {
                let w = l
                    .solve_lower_triangular(&kstar)
                    .expect("Cholesky factor is non-singular");
                (prior_var - w.norm_squared()).max(0.0)
            }
            None => prior_var,
        };
        (mean, var)
    }

    fn to_arrays(&self, c: &mut Container, prefix: &str) {
        let p = &self.params;
        c.push_array(
            &format!("{prefix}.params"),
            DMatrix::from_row_slice(
                1,
                9,
                &[
                    p.degree as f64,
                    p.s_f,
                    p.length,
                    p.split,
                    p.jitter,
                    p.amplitude_floor,
                    p.max_condition,
                    self.offset,
                    match p.input {
                        KernelInput::Offset => 0.0,
                        KernelInput::Ratio => 1.0,
                    },
                ],
            ),
        );
        c.push_array(
            &format!("{prefix}.coeffs"),
            DMatrix::from_column_slice(self.coeffs.len(), 1, self.coeffs.as_slice()),
        );
        let n = self.inputs.len();
        let data = DMatrix::from_fn(2, n, |r, s| {
            if r == 0 {
                self.inputs[s]
            } else {
                self.outputs[s]
            }
        });
        c.push_array(&format!("{prefix}.data"), data);
        c.push_array(
            &format!("{prefix}.weights"),
            DMatrix::from_column_slice(n, 1, self.weights.as_slice()),
        );
        let chol = self.chol.clone().unwrap_or_else(|| DMatrix::zeros(0, 0));
        c.push_array(&format!("{prefix}.chol"), chol);
    }

    fn from_arrays(c: &Container, prefix: &str) -> Result<Self> {
        let q = c.array_shaped(&format!("{prefix}.params"), 1, 9)?;
        let params = GpParams {
            degree: q[0] as usize,
            s_f: q[1],
            length: q[2],
            split: q[3],
            jitter: q[4],
            amplitude_floor: q[5],
            max_condition: q[6],
            input: if q[8] == 0.0 {
                KernelInput::Offset
            } else {
                KernelInput::Ratio
            },
        };
        let coeffs = c
            .array_shaped(&format!("{prefix}.coeffs"), params.degree + 1, 1)?
            .column(0)
            .into_owned();
        let data = c.array(&format!("{prefix}.data"))?;
        if data.nrows() != 2 {
            return Err(BaeError::Store(format!("{prefix}.data needs two rows")));
        }
        let n = data.ncols();
        let weights = c
            .array_shaped(&format!("{prefix}.weights"), n, 1)?
            .column(0)
            .into_owned();
        let chol = c.array(&format!("{prefix}.chol"))?;
        let chol = match chol.shape() {
            (0, 0) if n == 0 => None,
            (r, cc) if r == n && cc == n => Some(chol.clone()),
            _ => {
                return Err(BaeError::Store(format!(
                    "{prefix}.chol has the wrong shape"
                )))
            }
        };
        Ok(GpModel {
            params,
            offset: q[7],
            coeffs,
            inputs: data.row(0).iter().copied().collect(),
            outputs: data.row(1).iter().copied().collect(),
            weights,
            chol,
        })
    }
}

/// Predictive mean of the regressor, clamped to the prior support.
pub fn gp_estimate(
    alpha_hat: f64,
    x_hat: [f64; 2],
    model: &GpModel,
    prior: &ConductivityPrior,
) -> Result<CalibrationResult> {
    let amplitude = x_hat[0].hypot(x_hat[1]);
    if !(amplitude >= model.params.amplitude_floor) {
        return Err(BaeError::LowAmplitude {
            amplitude,
            floor: model.params.amplitude_floor,
        });
    }
    let (mean, var) = model.predict(alpha_hat, amplitude);
    let mut r = CalibrationResult::single(Method::Gp, mean, prior);
    r.variance = Some(var);
    Ok(r)
}

/// One fitted regressor per source location.
#[derive(Debug, Clone, PartialEq)]
pub struct GpStore {
    pub models: Vec<GpModel>,
}

const GP_KIND: &str = "gp-models";

impl GpStore {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(GP_KIND);
        c.set_meta("locations", self.models.len());
        for (i, m) in self.models.iter().enumerate() {
            m.to_arrays(&mut c, &format!("loc{i}"));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != GP_KIND {
            return Err(BaeError::Store(format!(
                "expected a `{GP_KIND}` store, found `{}`",
                c.kind
            )));
        }
        let n: usize = c.meta_parse("locations")?;
        let models = (0..n)
            .map(|i| GpModel::from_arrays(c, &format!("loc{i}")))
            .collect::<Result<_>>()?;
        Ok(GpStore { models })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly_triplets(n: usize) -> Vec<Triplet> {
        (0..n)
            .map(|i| {
                let amp = 0.5 + (i % 7) as f64 * 0.4;
                let alpha = -40.0 + 3.0 * i as f64;
                let y = (alpha + 2.0) / amp;
                Triplet {
                    alpha,
                    amplitude: amp,
                    sigma: 0.01 - 1e-4 * y + 2e-7 * y * y,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_exact_polynomial() {
        let model = gp_fit(&poly_triplets(40), 2.0, &GpParams::default()).unwrap();
        let expect = [0.01, -1e-4, 2e-7];
        for (c, e) in model.coeffs.iter().zip(expect) {
            assert!((c - e).abs() < 1e-8, "{c} vs {e}");
        }
        for &(a, x) in &[(-10.0, 1.0), (5.0, 2.5)] {
            let (mean, _) = model.predict(a, x);
            assert!((mean - model.mean(a, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_mean_for_degree_zero() {
        let t = poly_triplets(30);
        let params = GpParams {
            degree: 0,
            ..Default::default()
        };
        let model = gp_fit(&t, 2.0, &params).unwrap();
        let sorted = canonical(&t);
        let first: Vec<f64> = sorted.iter().skip(1).step_by(2).map(|t| t.sigma).collect();
        let avg = first.iter().sum::<f64>() / first.len() as f64;
        assert!(
            (model.coeffs[0] - avg).abs() < 1e-14 * avg.abs(),
            "{} vs {avg}",
            model.coeffs[0]
        );
    }

    #[test]
    fn low_amplitude_rejected() {
        let model = gp_fit(&poly_triplets(40), 2.0, &GpParams::default()).unwrap();
        let err = gp_estimate(1.0, [0.01, 0.0], &model, &ConductivityPrior::default()).unwrap_err();
        assert!(matches!(err, BaeError::LowAmplitude { .. }));
    }

    #[test]
    fn too_few_triplets_rejected() {
        assert!(gp_fit(&poly_triplets(10), 0.0, &GpParams::default()).is_err());
    }
}
