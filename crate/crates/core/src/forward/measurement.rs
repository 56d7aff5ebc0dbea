use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{BaeError, Result};

use super::Dipole;

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub sigma: f64,
    pub dipole: Dipole,
}

/// Average-referenced electrode potentials with the noise scale that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub values: DVector<f64>,
    /// `s_c` in `e = s_c * e_bar`; zero for noise-free data.
    pub noise_scale: f64,
    /// Target SNR in dB; `f64::INFINITY` for noise-free data.
    pub snr_db: f64,
    pub truth: Option<Truth>,
}

/// Draws `v = A x + s_c e_bar` with `e_bar` standard normal and `s_c` chosen
/// so that `10 log10(|A x|^2 / |s_c e_bar|^2)` equals `snr_db` for the drawn
/// `e_bar`. Pass `f64::INFINITY` for noise-free data.
pub fn simulate_measurement<R: Rng + ?Sized>(
    leadfield: &DMatrix<f64>,
    dipole: &Dipole,
    snr_db: f64,
    rng: &mut R,
) -> Result<Measurement> {
    let i = dipole.location_index;
    if leadfield.ncols() < 2 * i + 2 {
        return Err(BaeError::Shape(format!(
            "leadfield has {} columns, location {i} needs {}",
            leadfield.ncols(),
            2 * i + 2
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(BaeError::Measurement(format!("invalid SNR {snr_db}")));
    }
    let x = DVector::from_column_slice(&dipole.moment);
    let clean = leadfield.columns(2 * i, 2) * x;
    if snr_db == f64::INFINITY {
        return Ok(Measurement {
            values: clean,
            noise_scale: 0.0,
            snr_db,
            truth: None,
        });
    }
    let signal = clean.norm();
    if signal == 0.0 {
        return Err(BaeError::Measurement(
            "noise-free signal is zero, SNR undefined".into(),
        ));
    }
    let m = leadfield.nrows();
    let e_bar = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise_scale = signal / (e_bar.norm() * 10f64.powf(snr_db / 20.0));
    Ok(Measurement {
        values: clean + &e_bar * noise_scale,
        noise_scale,
        snr_db,
        truth: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leadfield() -> DMatrix<f64> {
        DMatrix::from_fn(8, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0)
    }

    #[test]
    fn realized_snr_matches_target() {
        let a = leadfield();
        let d = Dipole {
            location_index: 1,
            moment: [0.4, -1.1],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meas = simulate_measurement(&a, &d, 40.0, &mut rng).unwrap();
        let clean = a.columns(2, 2) * DVector::from_column_slice(&d.moment);
        let noise = &meas.values - &clean;
        let snr = 10.0 * (clean.norm_squared() / noise.norm_squared()).log10();
        assert!((snr - 40.0).abs() < 1e-9);
    }

    #[test]
    fn infinite_snr_is_noise_free() {
        let a = leadfield();
        let d = Dipole {
            location_index: 0,
            moment: [1.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meas = simulate_measurement(&a, &d, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(meas.noise_scale, 0.0);
        assert_eq!(meas.values, a.column(0).into_owned());
    }

    #[test]
    fn zero_signal_with_finite_snr_fails() {
        let a = leadfield();
        let d = Dipole {
            location_index: 0,
            moment: [0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(simulate_measurement(&a, &d, 30.0, &mut rng).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_noise() {
        let a = leadfield();
        let d = Dipole {
            location_index: 1,
            moment: [1.0, 1.0],
        };
        let m1 = simulate_measurement(&a, &d, 30.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let m2 = simulate_measurement(&a, &d, 30.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(m1, m2);
    }
}
