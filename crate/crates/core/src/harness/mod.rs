//! End-to-end experiments: training, synthetic test data on the accurate
//! model, all scans and calibrations, and report tables.

mod report;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::calibration::{
    alternating_scan, cg_estimate, cg_iter_estimate, gp_estimate, gp_fit, map_closed_form,
    AlternatingOptions, CalibrationResult, ExactFactory, ForwardFactory, GpModel, GpParams,
    IterOptions, KernelInput, Method, TabulatedFactory,
};
use crate::config::{fmt_list, KeyValues};
use crate::error::{BaeError, Result};
use crate::forward::{build_model, simulate_measurement, Dipole, Point};
use crate::inversion::{bae_dipole_scan_with, standard_dipole_scan, BaeWhiteners, NoiseModel};
use crate::rng::{stream, Stream};
use crate::training::{train, StatsStore, TrainingConfig};

pub use report::{
    aggregate, emit_report, prepare_output_dir, quantile, read_trials, sign_test_worse,
    GroupSummary, MetricSummary, Summary, TrialRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Quick,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = BaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Profile::Quick),
            "full" => Ok(Profile::Full),
            _ => Err(BaeError::Config(format!(
                "unknown profile `{s}` (quick or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactoryKind {
    /// Hermite interpolation between exact leadfields on a fixed node set.
    Tabulated,
    /// A fresh discrete model per requested conductivity.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub training: TrainingConfig,
    pub sigma_true: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub realizations: usize,
    pub test_locations: usize,
    pub methods: Vec<Method>,
    pub noise_seed: u64,
    /// Millimetres per disk unit.
    pub mm_scale: f64,
    pub thresholds_mm: Vec<f64>,
    pub factory: FactoryKind,
    pub table_nodes: usize,
    /// Relative noise floor for noise-free data.
    pub noise_floor: f64,
    pub gp: GpParams,
    pub iter: IterOptions,
    pub alternating: AlternatingOptions,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let (test_locations, realizations) = match profile {
            Profile::Quick => (40, 1),
            Profile::Full => (88, 5),
        };
        ExperimentConfig {
            training: TrainingConfig::default(),
            sigma_true: vec![0.00601, 0.0139],
            amplitudes: vec![0.3, 1.3, 2.5, 4.2],
            snr_db: vec![40.0, 30.0],
            realizations,
            test_locations,
            methods: Method::ALL.to_vec(),
            noise_seed: 1,
            mm_scale: 85.0,
            thresholds_mm: vec![2.0, 6.0],
            factory: FactoryKind::Tabulated,
            table_nodes: 25,
            noise_floor: 1e-6,
            gp: GpParams::default(),
            iter: IterOptions::default(),
            alternating: AlternatingOptions::default(),
        }
    }

    const KEYS: &'static [&'static str] = &[
        "profile",
        "sigma_true",
        "amplitudes",
        "snr_db",
        "realizations",
        "test_locations",
        "methods",
        "noise_seed",
        "mm_scale",
        "thresholds_mm",
        "factory",
        "table_nodes",
        "noise_floor",
        "max_iter",
        "iter_tolerance",
        "max_outer",
        "gp.degree",
        "gp.s_f",
        "gp.length",
        "gp.split",
        "gp.jitter",
        "gp.amplitude_floor",
        "gp.input",
    ];

    /// Reads an experiment file; `profile` (default `quick`) picks the base
    /// values and every other key overrides them.
    pub fn from_kv(kv: &KeyValues, profile: Option<Profile>) -> Result<Self> {
        for key in kv.keys() {
            if !Self::KEYS.contains(&key) && !TrainingConfig::is_known_key(key) {
                return Err(BaeError::Config(format!("unknown key `{key}`")));
            }
        }
        let profile = match profile {
            Some(p) => p,
            None => kv.get::<Profile>("profile")?.unwrap_or(Profile::Quick),
        };
        let mut c = Self::profile(profile);
        c.training = TrainingConfig::from_kv(kv)?;
        if let Some(v) = kv.get_list("sigma_true")? {
            c.sigma_true = v;
        }
        if let Some(v) = kv.get_list("amplitudes")? {
            c.amplitudes = v;
        }
        if let Some(v) = kv.get_list("snr_db")? {
            c.snr_db = v;
        }
        if let Some(v) = kv.get("realizations")? {
            c.realizations = v;
        }
        if let Some(v) = kv.get("test_locations")? {
            c.test_locations = v;
        }
        if let Some(v) = kv.get_list::<Method>("methods")? {
            c.methods = v;
        }
        c.noise_seed = kv.get("noise_seed")?.unwrap_or(c.training.seed);
        if let Some(v) = kv.get("mm_scale")? {
            c.mm_scale = v;
        }
        if let Some(v) = kv.get_list("thresholds_mm")? {
            c.thresholds_mm = v;
        }
        if let Some(v) = kv.get_str("factory") {
            c.factory = match v {
                "tabulated" => FactoryKind::Tabulated,
                "exact" => FactoryKind::Exact,
                _ => return Err(BaeError::Config(format!("unknown factory `{v}`"))),
            };
        }
        if let Some(v) = kv.get("table_nodes")? {
            c.table_nodes = v;
        }
        if let Some(v) = kv.get("noise_floor")? {
            c.noise_floor = v;
        }
        if let Some(v) = kv.get("max_iter")? {
            c.iter.max_iter = v;
        }
        if let Some(v) = kv.get::<f64>("iter_tolerance")? {
            c.iter.tolerance = v;
            c.alternating.tolerance = v;
        }
        if let Some(v) = kv.get("max_outer")? {
            c.alternating.max_outer = v;
        }
        let gp = kv.section("gp.");
        if let Some(v) = gp.get("degree")? {
            c.gp.degree = v;
        }
        if let Some(v) = gp.get("s_f")? {
            c.gp.s_f = v;
        }
        if let Some(v) = gp.get("length")? {
            c.gp.length = v;
        }
        if let Some(v) = gp.get("split")? {
            c.gp.split = v;
        }
        if let Some(v) = gp.get("jitter")? {
            c.gp.jitter = v;
        }
        if let Some(v) = gp.get("amplitude_floor")? {
            c.gp.amplitude_floor = v;
        }
        if let Some(v) = gp.get("input")? {
            c.gp.input = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>, profile: Option<Profile>) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?, profile)
    }

    /// Sets the master seed, which drives training and, unless given
    /// separately, the noise.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self.noise_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.sigma_true.is_empty() || self.amplitudes.is_empty() || self.snr_db.is_empty() {
            return Err(BaeError::Config(
                "sigma_true, amplitudes and snr_db need values".into(),
            ));
        }
        if self.realizations == 0 || self.test_locations == 0 {
            return Err(BaeError::Config(
                "realizations and test_locations must be positive".into(),
            ));
        }
        if self.sigma_true.iter().any(|&s| !(s > 0.0))
            || self.amplitudes.iter().any(|&a| !(a > 0.0))
        {
            return Err(BaeError::Config(
                "conductivities and amplitudes must be positive".into(),
            ));
        }
        if self
            .snr_db
            .iter()
            .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return Err(BaeError::Config("SNR values must be finite or inf".into()));
        }
        if self.factory == FactoryKind::Tabulated && self.table_nodes < 2 {
            return Err(BaeError::Config("table_nodes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn trial_count(&self) -> usize {
        self.test_locations
            * self.sigma_true.len()
            * self.amplitudes.len()
            * self.snr_db.len()
            * self.realizations
    }

    /// Every setting as `key = value` entries; reading them back with
    /// [`ExperimentConfig::from_kv`] gives an equal configuration.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.training.to_kv();
        kv.set("sigma_true", fmt_list(&self.sigma_true));
        kv.set("amplitudes", fmt_list(&self.amplitudes));
        kv.set("snr_db", fmt_list(&self.snr_db));
        kv.set("realizations", self.realizations);
        kv.set("test_locations", self.test_locations);
        kv.set(
            "methods",
            self.methods
                .iter()
                .map(|m| m.tag())
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv.set("noise_seed", self.noise_seed);
        kv.set("mm_scale", format!("{:?}", self.mm_scale));
        kv.set("thresholds_mm", fmt_list(&self.thresholds_mm));
        kv.set(
            "factory",
            match self.factory {
                FactoryKind::Tabulated => "tabulated",
                FactoryKind::Exact => "exact",
            },
        );
        kv.set("table_nodes", self.table_nodes);
        kv.set("noise_floor", format!("{:?}", self.noise_floor));
        kv.set("max_iter", self.iter.max_iter);
        kv.set("iter_tolerance", format!("{:?}", self.iter.tolerance));
        kv.set("max_outer", self.alternating.max_outer);
        kv.set("gp.degree", self.gp.degree);
        kv.set("gp.s_f", format!("{:?}", self.gp.s_f));
        kv.set("gp.length", format!("{:?}", self.gp.length));
        kv.set("gp.split", format!("{:?}", self.gp.split));
        kv.set("gp.jitter", format!("{:?}", self.gp.jitter));
        kv.set(
            "gp.amplitude_floor",
            format!("{:?}", self.gp.amplitude_floor),
        );
        kv.set(
            "gp.input",
            match self.gp.input {
                KernelInput::Offset => "offset",
                KernelInput::Ratio => "ratio",
            },
        );
        kv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<TrialRow>,
    pub mm_scale: f64,
    pub thresholds_mm: Vec<f64>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

/// Distance in millimetres between two locations given in disk units.
pub fn localization_error(truth: Point, estimate: Point, mm_scale: f64) -> f64 {
    (truth[0] - estimate[0]).hypot(truth[1] - estimate[1]) * mm_scale
}

/// Prepared state shared by all trials.
struct Setup<'a> {
    config: &'a ExperimentConfig,
    store: &'a StatsStore,
    tests: Vec<(usize, Point)>,
    /// Accurate leadfields at the test locations, one per true conductivity.
    truth_leadfields: Vec<DMatrix<f64>>,
    fine: Box<dyn ForwardFactory + Send + Sync>,
    coarse: Box<dyn ForwardFactory + Send + Sync>,
    /// Sample-grid Jacobians at the prior mean for every candidate.
    jacobian_star: DMatrix<f64>,
    gp: Vec<std::result::Result<GpModel, String>>,
}

fn factory(
    kind: FactoryKind,
    spec: &crate::forward::ModelSpec,
    positions: &[Point],
    config: &ExperimentConfig,
) -> Result<Box<dyn ForwardFactory + Send + Sync>> {
    let base = build_model(spec)?;
    let prior = &config.training.prior;
    Ok(match kind {
        FactoryKind::Exact => Box::new(ExactFactory::new(base, positions.to_vec())),
        FactoryKind::Tabulated => Box::new(TabulatedFactory::build(
            &base,
            positions,
            prior.lower,
            prior.upper,
            config.table_nodes,
        )?),
    })
}

/// Picks `count` distinct test locations with the test-location stream.
pub fn pick_test_locations(config: &ExperimentConfig, available: usize) -> Result<Vec<usize>> {
    if config.test_locations > available {
        return Err(BaeError::Config(format!(
            "{} test locations requested, {available} available",
            config.test_locations
        )));
    }
    let mut rng = stream(config.training.seed, Stream::TestLocations, &[]);
    let mut picked = sample(&mut rng, available, config.test_locations).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn prepare<'a>(config: &'a ExperimentConfig, store: &'a StatsStore) -> Result<Setup<'a>> {
    let tc = &config.training;
    let space = tc.source_space()?;
    if !space.is_disjoint() {
        return Err(BaeError::Config(
            "test locations overlap the candidates".into(),
        ));
    }
    if space.candidates != store.positions {
        return Err(BaeError::Config(
            "statistics were trained on a different source space".into(),
        ));
    }
    if let Some(s) = config
        .sigma_true
        .iter()
        .find(|s| store.sample_sigmas.contains(s))
    {
        return Err(BaeError::Config(format!(
            "true conductivity {s} is part of the training draws"
        )));
    }
    let tests: Vec<(usize, Point)> = pick_test_locations(config, space.tests.len())?
        .into_iter()
        .map(|i| (i, space.tests[i]))
        .collect();
    let positions: Vec<Point> = tests.iter().map(|t| t.1).collect();
    let accurate = build_model(&tc.sample)?;
    let truth_leadfields = config
        .sigma_true
        .iter()
        .map(|&s| accurate.with_skull_conductivity(s)?.leadfield(&positions))
        .collect::<Result<Vec<_>>>()?;
    let (_, jacobian_star) = accurate
        .with_skull_conductivity(tc.prior.mean)?
        .leadfield_with_jacobian(&store.positions)?;
    let uses = |m: Method| config.methods.contains(&m);
    let fine = factory(
        if uses(Method::CgIter) {
            config.factory
        } else {
            FactoryKind::Exact
        },
        &tc.sample,
        &store.positions,
        config,
    )?;
    let coarse = factory(
        if uses(Method::Alternating) {
            config.factory
        } else {
            FactoryKind::Exact
        },
        &tc.standard,
        &store.positions,
        config,
    )?;
    let gp = store
        .stats
        .par_iter()
        .map(|st| gp_fit(&st.gp_triplets, st.mean_offset(), &config.gp).map_err(|e| e.to_string()))
        .collect();
    Ok(Setup {
        config,
        store,
        tests,
        truth_leadfields,
        fine,
        coarse,
        jacobian_star,
        gp,
    })
}

#[derive(Debug, Clone, Copy)]
struct TrialKey {
    test: usize,
    sigma: usize,
    amplitude: usize,
    snr: usize,
    realization: usize,
}

fn trial_keys(config: &ExperimentConfig) -> Vec<TrialKey> {
    let mut keys = Vec::with_capacity(config.trial_count());
    for sigma in 0..config.sigma_true.len() {
        for amplitude in 0..config.amplitudes.len() {
            for snr in 0..config.snr_db.len() {
                for test in 0..config.test_locations {
                    for realization in 0..config.realizations {
                        keys.push(TrialKey {
                            test,
                            sigma,
                            amplitude,
                            snr,
                            realization,
                        });
                    }
                }
            }
        }
    }
    keys
}

/// Per-trial seed, a pure function of the noise seed and the trial indices.
fn noise_seed(config: &ExperimentConfig, key: &TrialKey) -> u64 {
    let idx = [key.test, key.sigma, key.amplitude, key.snr, key.realization].map(|i| i as u64);
    stream(config.noise_seed, Stream::Noise, &idx).gen()
}

fn record(row: &mut TrialRow, method: Method, result: Result<CalibrationResult>) {
    match result {
        Ok(r) => {
            row.set_sigma(method, Some(r.sigma_hat));
            match method {
                Method::CgIter => row.converged_cg_iter = Some(r.converged),
                Method::Alternating => row.converged_alt = Some(r.converged),
                _ => {}
            }
        }
        Err(e) => row.errors.push(format!("{}: {e}", method.tag())),
    }
}

fn run_trial(setup: &Setup<'_>, key: TrialKey) -> TrialRow {
    let c = setup.config;
    let (test_index, position) = setup.tests[key.test];
    let seed = noise_seed(c, &key);
    let mut row = TrialRow::new(
        test_index,
        position,
        c.sigma_true[key.sigma],
        c.amplitudes[key.amplitude],
        c.snr_db[key.snr],
        key.realization,
        seed,
    );
    if let Err(e) = run_trial_inner(setup, key, &mut row) {
        row.status = format!("failed: {e}");
    }
    row
}

fn run_trial_inner(setup: &Setup<'_>, key: TrialKey, row: &mut TrialRow) -> Result<()> {
    let c = setup.config;
    let store = setup.store;
    let prior = &c.training.prior;
    let a_true = setup.truth_leadfields[key.sigma]
        .columns(2 * key.test, 2)
        .into_owned();
    let dipole = Dipole::radial(0, row.position, row.amplitude);
    let mut rng = stream(row.noise_seed, Stream::Noise, &[]);
    let meas = simulate_measurement(&a_true, &dipole, row.snr_db, &mut rng)?;
    let v = &meas.values;
    let noise = NoiseModel::for_data(v, meas.noise_scale, c.noise_floor)?;

    let st = standard_dipole_scan(v, &store.a0, &noise)?;
    row.loc_st = Some(st.location);
    row.x_st = Some(localization_error(
        row.position,
        store.positions[st.location],
        c.mm_scale,
    ));
    let whiteners = BaeWhiteners::new(&store.stats, &noise);
    let bae = bae_dipole_scan_with(v, &store.a0, &store.stats, &noise, &whiteners)?;
    let l = bae.location;
    row.loc_bae = Some(l);
    row.x_bae = Some(localization_error(
        row.position,
        store.positions[l],
        c.mm_scale,
    ));
    let alpha = bae.alpha_hat.clone().unwrap_or_else(|| DVector::zeros(1));
    row.alpha_hat = Some(alpha[0]);
    row.amplitude_hat = Some(bae.amplitude());
    let stats = &store.stats[l];

    let cg_sigma = cg_estimate(&alpha, stats, prior).map(|r| r.sigma_hat).ok();
    for &method in &c.methods {
        let result = match method {
            Method::Cg => cg_estimate(&alpha, stats, prior),
            Method::CgIter => cg_iter_estimate(
                &alpha,
                bae.x_hat,
                l,
                &store.block(l),
                setup.fine.as_ref(),
                stats,
                prior,
                cg_sigma.unwrap_or(prior.mean),
                &c.iter,
            ),
            Method::Gp => match &setup.gp[l] {
                Ok(model) => gp_estimate(alpha[0], bae.x_hat, model, prior),
                Err(e) => Err(BaeError::Statistics(format!(
                    "no regressor at location {l}: {e}"
                ))),
            },
            Method::MapA2 => map_closed_form(
                alpha[0],
                stats,
                &setup.jacobian_star.columns(2 * l, 2).into_owned(),
                store.positions[l],
                c.training.dipole.gamma,
                prior,
            ),
            Method::Alternating => alternating_scan(
                v,
                setup.coarse.as_ref(),
                &noise,
                prior,
                store.sigma0(),
                &c.alternating,
            )
            .map(|(scan, cal)| {
                row.loc_alt = Some(scan.location);
                row.x_alt = Some(localization_error(
                    row.position,
                    store.positions[scan.location],
                    c.mm_scale,
                ));
                cal
            }),
        };
        record(row, method, result);
    }
    Ok(())
}

/// Runs every configured trial against `store` (trained with
/// `config.training`).
pub fn run_experiment_with(
    config: &ExperimentConfig,
    store: &StatsStore,
) -> Result<ExperimentReport> {
    config.validate()?;
    if store.config != config.training {
        return Err(BaeError::Config(
            "statistics store was trained with a different configuration".into(),
        ));
    }
    let setup = prepare(config, store)?;
    let rows = trial_keys(config)
        .into_par_iter()
        .map(|key| run_trial(&setup, key))
        .collect();
    Ok(ExperimentReport {
        rows,
        mm_scale: config.mm_scale,
        thresholds_mm: config.thresholds_mm.clone(),
    })
}

/// Trains, then runs every configured trial.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let store = train(&config.training)?;
    run_experiment_with(config, &store)
}
