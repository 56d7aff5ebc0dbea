//! Acceptance checks at the default desk-scale settings.
//!
//! Runs every criterion once against a shared fixture (default training,
//! quick experiment), prints one line per criterion and exits non-zero
//! when any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use bae_core::calibration::{gp_fit, map_closed_form, GpParams, Method};
use bae_core::forward::{build_model, radial_direction, Dipole};
use bae_core::harness::{
    aggregate, run_experiment_with, sign_test_worse, ExperimentConfig, ExperimentReport, Profile,
    Summary,
};
use bae_core::rng::{stream, Stream};
use bae_core::training::{
    bae_benefit_check, build_sample_models, generate_error_samples, radial_jacobian,
    train_from_samples, SampleModels, StatsStore,
};
use bae_core::Result;
use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

struct Fixture {
    experiment: ExperimentConfig,
    samples: SampleModels,
    store: StatsStore,
    /// Sample-grid Jacobian at the prior mean (`m x 2n`).
    jacobian: DMatrix<f64>,
    train_secs: f64,
    report: ExperimentReport,
    summary: Summary,
    run_secs: f64,
    dir: tempfile::TempDir,
}

impl Fixture {
    fn build() -> Result<Self> {
        let experiment = ExperimentConfig::profile(Profile::Quick);
        let tc = &experiment.training;
        let t = Instant::now();
        let space = tc.source_space()?;
        let a0 = build_model(&tc.standard)?.leadfield(&space.candidates)?;
        let samples = build_sample_models(tc, &space.candidates)?;
        let store = train_from_samples(tc, &space.candidates, &a0, &samples)?;
        let train_secs = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let report = run_experiment_with(&experiment, &store)?;
        let run_secs = t.elapsed().as_secs_f64();
        let summary = aggregate(&report)?;
        let (_, jacobian) = build_model(&tc.sample.with_skull(tc.prior.mean))?
            .leadfield_with_jacobian(&store.positions)?;
        let dir = tempfile::tempdir().map_err(|e| bae_core::BaeError::io("tempdir", e))?;
        store.save(dir.path().join("stats.bae"))?;
        Ok(Fixture {
            experiment,
            samples,
            store,
            jacobian,
            train_secs,
            report,
            summary,
            run_secs,
            dir,
        })
    }

    fn jacobian_at(&self, l: usize) -> DMatrix<f64> {
        self.jacobian.columns(2 * l, 2).into_owned()
    }

    fn mode(&self) -> f64 {
        self.experiment.training.dipole.rayleigh_scale()
    }
}

type Check = Result<(bool, String)>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (DVector::from_vec(ranks(a)), DVector::from_vec(ranks(b)));
    let ca = ra.add_scalar(-ra.mean());
    let cb = rb.add_scalar(-rb.mean());
    ca.dot(&cb) / (ca.norm() * cb.norm())
}

fn jacobian_matches_finite_differences(fx: &Fixture) -> Check {
    let t = Instant::now();
    let tc = &fx.experiment.training;
    let base = build_model(&tc.sample)?;
    let mut rng = stream(tc.seed, Stream::Checks, &[1]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let l = rng.gen_range(0..fx.store.len());
        let sigma = rng.gen_range(tc.prior.lower..tc.prior.upper);
        let p = fx.store.positions[l];
        let (_, jac) = base
            .with_skull_conductivity(sigma)?
            .leadfield_and_jacobian(p)?;
        let h = 1e-5 * sigma;
        let plus = base
            .with_skull_conductivity(sigma + h)?
            .leadfield_block(p)?;
        let minus = base
            .with_skull_conductivity(sigma - h)?
            .leadfield_block(p)?;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((&jac - &fd).norm() / fd.norm());
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} over 20 pairs in {secs:.1} s"),
    ))
}

fn eigen_identities_hold(fx: &Fixture) -> Check {
    let tc = &fx.experiment.training;
    let (mut worst_cov, mut worst_alpha) = (0.0f64, 0.0f64);
    for (l, st) in fx.store.stats.iter().enumerate() {
        let blocks = fx.samples.blocks(l, 0..tc.stats_models);
        let mut rng = stream(tc.seed, Stream::Dipoles, &[l as u64]);
        let es = generate_error_samples(
            l,
            fx.store.positions[l],
            &blocks,
            &fx.store.block(l),
            tc.dipoles,
            &tc.dipole,
            &mut rng,
        )?;
        let s = es.len() as f64;
        let mean = es.eps.column_mean();
        let mut centred = es.eps.clone();
        for mut col in centred.column_iter_mut() {
            col -= &mean;
        }
        let gamma = &centred * centred.transpose() / (s - 1.0);
        worst_cov = worst_cov.max((&gamma - st.covariance()).norm() / gamma.norm());
        let alpha = st.basis().tr_mul(&centred);
        let cov_alpha = &alpha * alpha.transpose() / (s - 1.0);
        let lam = DMatrix::from_diagonal(&st.alpha_variances());
        worst_alpha = worst_alpha.max((cov_alpha - lam).norm() / st.eigvals[0]);
    }
    Ok((
        worst_cov < 1e-10 && worst_alpha < 1e-8,
        format!(
            "max covariance residual {worst_cov:.1e}, max coefficient residual {worst_alpha:.1e} at {} locations",
            fx.store.len()
        ),
    ))
}

fn leading_eigenvector_follows_the_jacobian(fx: &Fixture) -> Check {
    let cosines: Vec<f64> = (0..fx.store.len())
        .map(|l| {
            let j1 = radial_jacobian(&fx.jacobian_at(l), fx.store.positions[l]);
            fx.store.stats[l].eigvecs.column(0).dot(&j1.column(0)).abs() / j1.norm()
        })
        .collect();
    let good = cosines.iter().filter(|&&c| c > 0.95).count();
    let min = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        good * 10 >= cosines.len() * 9,
        format!(
            "|cos| > 0.95 at {good}/{} locations, min {min:.4}",
            cosines.len()
        ),
    ))
}

fn alpha_is_monotone_in_sigma(fx: &Fixture) -> Check {
    let sigma0 = fx.store.sigma0();
    let dsigma: Vec<f64> = fx.samples.sigmas.iter().map(|s| s - sigma0).collect();
    let mut worst = f64::INFINITY;
    for (l, st) in fx.store.stats.iter().enumerate() {
        let x = Dipole::radial(l, fx.store.positions[l], fx.mode()).moment;
        let x = Vector2::new(x[0], x[1]);
        let a0x = fx.store.block(l) * x;
        let w = st.eigvecs.column(0);
        let alpha: Vec<f64> = (0..fx.samples.sigmas.len())
            .map(|k| {
                let eps = fx.samples.leadfields[k].columns(2 * l, 2) * x - &a0x;
                w.dot(&(eps - &st.eps_mean))
            })
            .collect();
        worst = worst.min(spearman(&dsigma, &alpha).abs());
    }
    Ok((
        worst > 0.95,
        format!(
            "min |Spearman| {worst:.4} over {} samples at {} locations",
            dsigma.len(),
            fx.store.len()
        ),
    ))
}

fn bae_improves_localization(fx: &Fixture) -> Check {
    let rows: Vec<_> = fx.report.rows.iter().filter(|r| r.snr_db == 40.0).collect();
    let dx: Vec<f64> = rows.iter().filter_map(|r| r.dx_bae()).collect();
    let positive = dx.iter().filter(|&&d| d > 0.0).count();
    let frac = positive as f64 / rows.len() as f64;
    let (low, high) = (fx.experiment.sigma_true[0], fx.experiment.sigma_true[1]);
    let med = |s: f64| {
        median(
            rows.iter()
                .filter(|r| r.sigma_true == s)
                .filter_map(|r| r.dx_bae())
                .collect(),
        )
    };
    let (med_low, med_high) = (med(low), med(high));
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.sigma_true == low)
        .filter_map(|r| {
            let twin = rows.iter().find(|h| {
                h.sigma_true == high
                    && h.test_location == r.test_location
                    && h.amplitude == r.amplitude
                    && h.realization == r.realization
            })?;
            Some((r.dx_bae()?, twin.dx_bae()?))
        })
        .collect();
    let p = sign_test_worse(&pairs);
    let secs = fx.train_secs + fx.run_secs;
    Ok((
        frac >= 0.6 && med_low >= 0.0 && med_high >= 0.0 && p >= 0.05 && secs < 300.0,
        format!(
            "dX > 0 in {positive}/{} ({:.1}%), median dX {med_low:.3} / {med_high:.3} mm, sign-test p {p:.3} over {} pairs, {secs:.0} s",
            rows.len(),
            100.0 * frac,
            pairs.len()
        ),
    ))
}

fn group_median(
    fx: &Fixture,
    sigma: Option<f64>,
    amplitude: Option<f64>,
    snr: Option<f64>,
    metric: &str,
) -> f64 {
    fx.summary
        .group(sigma, amplitude, snr)
        .and_then(|g| g.metric(metric))
        .map_or(f64::NAN, |m| m.median)
}

fn cg_shows_the_amplitude_artifact(fx: &Fixture) -> Check {
    let sigma = fx.experiment.sigma_true[0];
    let mut ok = true;
    let mut parts = Vec::new();
    let mut previous = f64::INFINITY;
    for &a in &fx.experiment.amplitudes {
        let at = |m: Method| {
            group_median(
                fx,
                Some(sigma),
                Some(a),
                Some(40.0),
                &format!("sigma_{}", m.tag()),
            )
        };
        let (cg, it, gp) = (at(Method::Cg), at(Method::CgIter), at(Method::Gp));
        ok &= cg < previous;
        ok &= (it - sigma).abs() <= 0.15 * sigma && (gp - sigma).abs() <= 0.15 * sigma;
        previous = cg;
        parts.push(format!("a={a}: cg {cg:.5} iter {it:.5} gp {gp:.5}"));
    }
    Ok((ok, parts.join("; ")))
}

fn estimators_are_ranked(fx: &Fixture) -> Check {
    let err = |m: Method| format!("err_pct_{}", m.tag());
    let all = |m: Method| group_median(fx, None, None, None, &err(m));
    let (gp, it, cg) = (all(Method::Gp), all(Method::CgIter), all(Method::Cg));
    let gp30 = group_median(fx, None, None, Some(30.0), &err(Method::Gp));
    Ok((
        gp <= it && it <= cg && gp30 <= 15.0,
        format!("median error gp {gp:.2}% cg-iter {it:.2}% cg {cg:.2}%, gp at 30 dB {gp30:.2}%"),
    ))
}

fn log_posterior(sigma: f64, alpha: f64, c: f64, k: f64, sigma_star: f64, gamma: f64) -> f64 {
    let u = (alpha + c) / (k * (sigma - sigma_star));
    if u.is_nan() || u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    u.ln() - u * u / (4.0 * gamma * gamma)
}

/// Two-level grid arg-max of the linearized posterior over `[lo, hi]`.
fn grid_map(alpha: f64, c: f64, k: f64, sigma_star: f64, gamma: f64, lo: f64, hi: f64) -> f64 {
    let n = 10_000;
    let arg = |a: f64, b: f64| {
        (0..=n)
            .map(|i| a + (b - a) * i as f64 / n as f64)
            .max_by(|&x, &y| {
                log_posterior(x, alpha, c, k, sigma_star, gamma)
                    .total_cmp(&log_posterior(y, alpha, c, k, sigma_star, gamma))
            })
            .unwrap()
    };
    let coarse = arg(lo, hi);
    let h = (hi - lo) / n as f64;
    arg((coarse - h).max(lo), (coarse + h).min(hi))
}

fn map_matches_grid_search_and_favours_the_mode(fx: &Fixture) -> Check {
    let tc = &fx.experiment.training;
    let prior = &tc.prior;
    let gamma = tc.dipole.gamma;
    let mut rng = stream(tc.seed, Stream::Checks, &[8]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.gen_range(0..fx.store.len());
        let st = &fx.store.stats[l];
        let p = fx.store.positions[l];
        let jac = fx.jacobian_at(l);
        let alpha = rng.sample::<f64, _>(StandardNormal) * st.eigvals[0].sqrt();
        let r = map_closed_form(alpha, st, &jac, p, gamma, prior)?;
        let n = radial_direction(p);
        let k = st.eigvecs.column(0).dot(&(&jac * Vector2::new(n[0], n[1])));
        let g = grid_map(
            alpha,
            st.mean_offset(),
            k,
            st.sigma_star,
            gamma,
            prior.lower,
            prior.upper,
        );
        worst = worst.max((r.sigma_hat - g).abs());
    }

    // Noise-free coefficients from the accurate model at the candidates.
    let mut amplitudes = fx.experiment.amplitudes.clone();
    amplitudes.push(fx.mode());
    amplitudes.sort_by(f64::total_cmp);
    let base = build_model(&tc.sample)?;
    let mut mode_wins = true;
    let mut parts = Vec::new();
    for &sigma in &fx.experiment.sigma_true {
        let lf = base
            .with_skull_conductivity(sigma)?
            .leadfield(&fx.store.positions)?;
        let errors: Vec<f64> = amplitudes
            .iter()
            .map(|&a| {
                let e: Vec<f64> = (0..fx.store.len())
                    .map(|l| {
                        let st = &fx.store.stats[l];
                        let pos = fx.store.positions[l];
                        let x = Dipole::radial(l, pos, a).moment;
                        let x = Vector2::new(x[0], x[1]);
                        let eps = lf.columns(2 * l, 2) * x - fx.store.block(l) * x;
                        let alpha = st.eigvecs.column(0).dot(&(eps - &st.eps_mean));
                        map_closed_form(alpha, st, &fx.jacobian_at(l), pos, gamma, prior)
                            .map_or(f64::INFINITY, |r| (r.sigma_hat - sigma).abs())
                    })
                    .collect();
                median(e)
            })
            .collect();
        let best = (0..amplitudes.len())
            .min_by(|&a, &b| errors[a].total_cmp(&errors[b]))
            .unwrap();
        mode_wins &= amplitudes[best] == fx.mode();
        let listed: Vec<String> = amplitudes
            .iter()
            .zip(&errors)
            .map(|(a, e)| format!("{a:.3}:{e:.5}"))
            .collect();
        parts.push(format!("sigma {sigma}: {}", listed.join(" ")));
    }
    // Conductivity shift the linearization attributes to the grid mismatch
    // `w_1^T (A(sigma_*) - A0) n / k`; it is zero when both models share a grid.
    let at_star = base
        .with_skull_conductivity(prior.mean)?
        .leadfield(&fx.store.positions)?;
    let shifts: Vec<f64> = (0..fx.store.len())
        .map(|l| {
            let st = &fx.store.stats[l];
            let n = radial_direction(fx.store.positions[l]);
            let n = Vector2::new(n[0], n[1]);
            let w = st.eigvecs.column(0);
            let d = w.dot(&((at_star.columns(2 * l, 2) - fx.store.block(l)) * n));
            d / w.dot(&(fx.jacobian_at(l) * n))
        })
        .collect();
    Ok((
        worst < 1e-6 && mode_wins,
        format!(
            "max grid deviation {worst:.1e} S/m over 100 cases; median |error| by amplitude {}; median grid-mismatch shift {:.5} S/m",
            parts.join("; "),
            median(shifts)
        ),
    ))
}

fn gp_matches_a_dense_reference(fx: &Fixture) -> Check {
    let params = GpParams::default();
    let kern =
        |a: f64, b: f64| params.s_f * params.s_f * (-((a - b) / params.length).powi(2)).exp();
    let mut rng = stream(fx.experiment.training.seed, Stream::Checks, &[9]);
    let (mut worst_query, mut worst_train) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let l = rng.gen_range(0..fx.store.len());
        let st = &fx.store.stats[l];
        let offset = st.mean_offset();
        let model = gp_fit(&st.gp_triplets, offset, &params)?;
        let n = model.inputs.len();
        let k = DMatrix::from_fn(n, n, |r, c| {
            kern(model.inputs[r], model.inputs[c])
                + if r == c {
                    params.jitter * params.s_f * params.s_f
                } else {
                    0.0
                }
        });
        // mean polynomial evaluated at unit amplitude, where alpha = z - offset
        let resid = DVector::from_iterator(
            n,
            model
                .inputs
                .iter()
                .zip(&model.outputs)
                .map(|(&z, &f)| f - model.mean(z - offset, 1.0)),
        );
        let w = k.lu().solve(&resid).unwrap();
        let amp: f64 = 0.3 + 4.0 * rng.gen::<f64>();
        let alpha = rng.sample::<f64, _>(StandardNormal) * st.eigvals[0].sqrt();
        let z = (alpha + offset) / amp;
        let kstar = DVector::from_iterator(n, model.inputs.iter().map(|&s| kern(z, s)));
        let expect = model.mean(alpha, amp) + kstar.dot(&w);
        worst_query = worst_query.max((model.predict(alpha, amp).0 - expect).abs());
        for (&zi, &fi) in model.inputs.iter().zip(&model.outputs) {
            worst_train = worst_train.max((model.predict(zi - offset, 1.0).0 - fi).abs());
        }
    }
    Ok((
        worst_query < 1e-8 && worst_train < 1e-6,
        format!(
            "max query deviation {worst_query:.1e}, max training residual {worst_train:.1e} S/m"
        ),
    ))
}

fn benefit_check_tracks_the_noise_level(fx: &Fixture) -> Check {
    let m = fx.store.electrode_count();
    let verdicts = |snr_db: f64| -> usize {
        (0..fx.store.len())
            .filter(|&l| {
                let x = Dipole::radial(l, fx.store.positions[l], fx.mode()).moment;
                let signal = (fx.store.block(l) * Vector2::new(x[0], x[1])).norm_squared();
                let var = signal / (m as f64 * 10f64.powf(snr_db / 10.0));
                bae_benefit_check(
                    &fx.store.stats[l],
                    &(DMatrix::identity(m, m) * var),
                    &DVector::zeros(m),
                )
                .verdict
            })
            .count()
    };
    let (at40, at0) = (verdicts(40.0), verdicts(0.0));
    let n = fx.store.len();
    Ok((
        at40 == n && at0 == 0,
        format!("true at {at40}/{n} locations for 40 dB, {at0}/{n} for 0 dB"),
    ))
}

fn experiment_is_deterministic(fx: &Fixture) -> Check {
    let run = |name: &str| -> Vec<u8> {
        let out = fx.dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_bae"))
            .args(["experiment", "--profile", "quick", "--out"])
            .arg(&out)
            .arg("--stats-cache")
            .arg(fx.dir.path().join("stats.bae"))
            .output()
            .expect("bae runs");
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        std::fs::read(out.join("trials.csv")).expect("trials.csv written")
    };
    let (a, b) = (run("first"), run("second"));
    Ok((
        a == b && !a.is_empty(),
        format!(
            "trials.csv {} and {} bytes, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    ))
}

type Criterion = fn(&Fixture) -> Check;

fn main() -> ExitCode {
    let fixture = match Fixture::build() {
        Ok(f) => f,
        Err(e) => {
            println!("fixture failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "fixture: {} locations, {} trials, training {:.0} s, experiment {:.0} s",
        fixture.store.len(),
        fixture.report.rows.len(),
        fixture.train_secs,
        fixture.run_secs
    );
    let criteria: [(&str, Criterion); 11] = [
        (
            "jacobian vs finite differences",
            jacobian_matches_finite_differences,
        ),
        ("eigen-statistics identities", eigen_identities_hold),
        (
            "semi-analytic covariance direction",
            leading_eigenvector_follows_the_jacobian,
        ),
        ("monotone sign link", alpha_is_monotone_in_sigma),
        ("localization benefit", bae_improves_localization),
        ("cg amplitude artifact", cg_shows_the_amplitude_artifact),
        ("estimator ranking", estimators_are_ranked),
        (
            "closed-form map",
            map_matches_grid_search_and_favours_the_mode,
        ),
        ("gp oracle equivalence", gp_matches_a_dense_reference),
        ("benefit diagnostic", benefit_check_tracks_the_noise_level),
        ("determinism", experiment_is_deterministic),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(|| check(&fixture))) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:2} {name}: {} ({detail})",
            i + 1,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
