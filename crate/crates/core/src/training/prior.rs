use rand::distributions::Open01;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{fmt_list, KeyValues};
use crate::error::{BaeError, Result};
use crate::forward::{Dipole, Point};

/// Truncated Gaussian prior of the skull conductivity (S/m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConductivityPrior {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for ConductivityPrior {
    fn default() -> Self {
        ConductivityPrior {
            mean: 0.0103,
            std: 0.0035,
            lower: 0.0041,
            upper: 0.033,
        }
    }
}

impl ConductivityPrior {
    pub fn new(mean: f64, std: f64, lower: f64, upper: f64) -> Result<Self> {
        let prior = ConductivityPrior {
            mean,
            std,
            lower,
            upper,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.mean && self.mean < self.upper && self.std > 0.0 && self.lower > 0.0)
        {
            return Err(BaeError::Config(format!(
                "conductivity prior needs 0 < lower < mean < upper and std > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, sigma: f64) -> f64 {
        sigma.clamp(self.lower, self.upper)
    }

    /// Mean and variance of the truncated density by composite Simpson
    /// quadrature.
    pub fn moments(&self) -> (f64, f64) {
        let n = 4000;
        let h = (self.upper - self.lower) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in 0..=n {
            let s = self.lower + k as f64 * h;
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let d = w * (-0.5 * ((s - self.mean) / self.std).powi(2)).exp();
            z += d;
            m1 += d * s;
            m2 += d * s * s;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }
}

/// Draws from the truncated Gaussian by rejection.
pub fn sample_conductivity<R: Rng + ?Sized>(prior: &ConductivityPrior, rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let s = prior.mean + prior.std * z;
        if s >= prior.lower && s <= prior.upper {
            return s;
        }
    }
}

/// Radial dipoles with Rayleigh-distributed amplitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipolePrior {
    /// Amplitude variance parameter; the Rayleigh scale (and mode) is
    /// `sqrt(2) * gamma`.
    pub gamma: f64,
}

impl Default for DipolePrior {
    fn default() -> Self {
        DipolePrior { gamma: 1.85 }
    }
}

impl DipolePrior {
    pub fn rayleigh_scale(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.gamma
    }

    /// Second moment of the amplitude, `E|x|^2 = 2 s^2`.
    pub fn amplitude_second_moment(&self) -> f64 {
        2.0 * self.rayleigh_scale().powi(2)
    }
}

/// Radial dipole at `position` with a Rayleigh amplitude (inverse-CDF draw).
pub fn sample_dipole<R: Rng + ?Sized>(
    location_index: usize,
    position: Point,
    prior: &DipolePrior,
    rng: &mut R,
) -> Dipole {
    let u: f64 = rng.sample(Open01);
    let amplitude = prior.rayleigh_scale() * (-2.0 * u.ln()).sqrt();
    Dipole::radial(location_index, position, amplitude)
}

/// Reads `sigma_mean`, `sigma_std`, `sigma_bounds` and `gamma`.
pub fn priors_from_kv(kv: &KeyValues) -> Result<(ConductivityPrior, DipolePrior)> {
    let mut c = ConductivityPrior::default();
    let mut d = DipolePrior::default();
    if let Some(v) = kv.get::<f64>("sigma_mean")? {
        c.mean = v;
    }
    if let Some(v) = kv.get::<f64>("sigma_std")? {
        c.std = v;
    }
    if let Some(v) = kv.get_list::<f64>("sigma_bounds")? {
        if v.len() != 2 {
            return Err(BaeError::Config("`sigma_bounds` needs two values".into()));
        }
        c.lower = v[0];
        c.upper = v[1];
    }
    if let Some(v) = kv.get::<f64>("gamma")? {
        d.gamma = v;
    }
    c.validate()?;
    if !(d.gamma > 0.0) {
        return Err(BaeError::Config("`gamma` must be positive".into()));
    }
    Ok((c, d))
}

pub const PRIOR_KEYS: &[&str] = &["sigma_mean", "sigma_std", "sigma_bounds", "gamma"];

pub fn priors_to_kv(c: &ConductivityPrior, d: &DipolePrior) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("sigma_mean", format!("{:?}", c.mean));
    kv.set("sigma_std", format!("{:?}", c.std));
    kv.set("sigma_bounds", fmt_list(&[c.lower, c.upper]));
    kv.set("gamma", format!("{:?}", d.gamma));
    kv
}
