//! `bae`: train approximation-error statistics, scan measurements,
//! calibrate the skull conductivity and run experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bae_core::calibration::{
    alternating_scan, cg_estimate, cg_iter_estimate, gp_estimate, gp_fit, map_closed_form,
    AlternatingOptions, CalibrationResult, ExactFactory, GpParams, GpStore, IterOptions, Method,
};
use bae_core::config::KeyValues;
use bae_core::forward::{build_model, simulate_measurement, Dipole, ModelSpec};
use bae_core::harness::{
    aggregate, emit_report, prepare_output_dir, run_experiment_with, ExperimentConfig, Profile,
};
use bae_core::inversion::{bae_dipole_scan, standard_dipole_scan, NoiseModel, ScanResult};
use bae_core::rng::{stream, Stream};
use bae_core::training::{train, StatsStore, TrainingConfig};
use bae_core::{BaeError, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

#[derive(Parser)]
#[command(
    name = "bae",
    version,
    about = "Approximation-error dipole imaging with skull-conductivity calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanMethod {
    Standard,
    Bae,
}

#[derive(Subcommand)]
enum Command {
    /// Build a disk model and print (or write) its description.
    BuildModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train error statistics and the per-location regressors.
    Train {
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        prior_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the regressors; defaults to `<out>.gp`.
        #[arg(long)]
        gp_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate electrode data for a test location on the accurate model.
    Simulate {
        #[arg(long)]
        stats: PathBuf,
        /// Index into the test-location set.
        #[arg(long)]
        location: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 1.3)]
        amplitude: f64,
        /// SNR in dB; `inf` for noise-free data.
        #[arg(long, default_value_t = 40.0)]
        snr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-dipole scan of a measurement.
    Scan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, value_enum, default_value = "bae")]
        method: ScanMethod,
        /// Noise standard deviation; omitted means a relative floor.
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the skull conductivity from a BAE scan.
    Calibrate {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        gp: Option<PathBuf>,
        /// One of cg, cg-iter, gp, map-a2, alt.
        #[arg(long)]
        method: Method,
        /// Measurement file, needed by `alt`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment and write the report tables.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_profile)]
        profile: Option<Profile>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse statistics from this file when they match the
        /// configuration; otherwise train and save them here.
        #[arg(long)]
        stats_cache: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: BaeError| e.to_string())
}

const NOISE_FLOOR: f64 = 1e-6;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::BuildModel { config, out } => {
            let kv = KeyValues::load(&config)?;
            kv.check_known(ModelSpec::KEYS)?;
            let spec = ModelSpec::from_kv(&kv, &ModelSpec::default())?;
            let text = build_model(&spec)?.describe();
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| BaeError::io(&path, e))?,
                None => print!("{text}"),
            }
        }
        Command::Train {
            model_config,
            prior_config,
            out,
            gp_out,
            seed,
        } => {
            let mut kv = KeyValues::default();
            for path in model_config.iter().chain(&prior_config) {
                kv.merge(&KeyValues::load(path)?)?;
            }
            let gp_kv = kv.section("gp.");
            let training_kv = without_prefix(&kv, "gp.");
            for key in training_kv.keys() {
                if !TrainingConfig::is_known_key(key) {
                    return Err(BaeError::Config(format!("unknown key `{key}`")));
                }
            }
            let mut config = TrainingConfig::from_kv(&training_kv)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let params = gp_params(&gp_kv)?;
            eprintln!(
                "training {} candidate locations",
                config.source_space()?.len()
            );
            let store = train(&config)?;
            store.save(&out)?;
            let models = store
                .stats
                .iter()
                .map(|st| gp_fit(&st.gp_triplets, st.mean_offset(), &params))
                .collect::<Result<Vec<_>>>()?;
            let gp_path = gp_out.unwrap_or_else(|| with_suffix(&out, ".gp"));
            GpStore { models }.save(&gp_path)?;
            eprintln!("wrote {} and {}", out.display(), gp_path.display());
        }
        Command::Simulate {
            stats,
            location,
            sigma,
            amplitude,
            snr,
            seed,
            out,
        } => {
            let store = StatsStore::load(&stats)?;
            let space = store.config.source_space()?;
            let position = *space.tests.get(location).ok_or_else(|| {
                BaeError::Config(format!("test location {location} out of range"))
            })?;
            let model = build_model(&store.config.sample.with_skull(sigma))?;
            let a = model.leadfield(&[position])?;
            let dipole = Dipole::radial(0, position, amplitude);
            let mut rng = stream(seed, Stream::Noise, &[location as u64]);
            let meas = simulate_measurement(&a, &dipole, snr, &mut rng)?;
            write_measurement(&out, &meas.values, meas.noise_scale)?;
        }
        Command::Scan {
            data,
            stats,
            method,
            noise_std,
            out,
        } => {
            let store = StatsStore::load(&stats)?;
            let (v, file_std) = read_measurement(&data)?;
            let noise =
                NoiseModel::for_data(&v, noise_std.or(file_std).unwrap_or(0.0), NOISE_FLOOR)?;
            let result = match method {
                ScanMethod::Standard => standard_dipole_scan(&v, &store.a0, &noise)?,
                ScanMethod::Bae => bae_dipole_scan(&v, &store.a0, &store.stats, &noise)?,
            };
            write_scan(&out, &store, &result, method)?;
        }
        Command::Calibrate {
            scan,
            stats,
            gp,
            method,
            data,
            noise_std,
            out,
        } => {
            let store = StatsStore::load(&stats)?;
            let scan = read_scan(&scan)?;
            let result = calibrate(
                &store,
                &scan,
                method,
                gp.as_deref(),
                data.as_deref(),
                noise_std,
            )?;
            write_calibration(&out, &result)?;
        }
        Command::Experiment {
            config,
            out,
            profile,
            seed,
            stats_cache,
            overwrite,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path, profile)?,
                None => ExperimentConfig::profile(profile.unwrap_or(Profile::Quick)),
            };
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            prepare_output_dir(&out, overwrite)?;
            let store = cached_store(&cfg.training, stats_cache.as_deref())?;
            eprintln!("running {} trials", cfg.trial_count());
            let report = run_experiment_with(&cfg, &store)?;
            emit_report(&report, &out, overwrite)?;
            let config_path = out.join("config.txt");
            std::fs::write(&config_path, cfg.to_kv().to_text())
                .map_err(|e| BaeError::io(&config_path, e))?;
            if let Some(all) = aggregate(&report)?.group(None, None, None) {
                if let Some(m) = all.metric("dx_bae_mm") {
                    eprintln!(
                        "median improvement {:.3} mm over {} trials",
                        m.median, m.count
                    );
                }
            }
            let failures = report.failures();
            if failures > 0 {
                eprintln!("{failures} trials failed");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn without_prefix(kv: &KeyValues, prefix: &str) -> KeyValues {
    let mut out = KeyValues::default();
    for (k, v) in kv.iter().filter(|(k, _)| !k.starts_with(prefix)) {
        out.set(k, v);
    }
    out
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gp_params(kv: &KeyValues) -> Result<GpParams> {
    kv.check_known(&[
        "degree",
        "s_f",
        "length",
        "split",
        "jitter",
        "amplitude_floor",
        "input",
    ])?;
    let mut p = GpParams::default();
    if let Some(v) = kv.get("degree")? {
        p.degree = v;
    }
    if let Some(v) = kv.get("s_f")? {
        p.s_f = v;
    }
    if let Some(v) = kv.get("length")? {
        p.length = v;
    }
    if let Some(v) = kv.get("split")? {
        p.split = v;
    }
    if let Some(v) = kv.get("jitter")? {
        p.jitter = v;
    }
    if let Some(v) = kv.get("amplitude_floor")? {
        p.amplitude_floor = v;
    }
    if let Some(v) = kv.get("input")? {
        p.input = v;
    }
    Ok(p)
}

fn cached_store(config: &TrainingConfig, cache: Option<&Path>) -> Result<StatsStore> {
    if let Some(path) = cache.filter(|p| p.exists()) {
        let store = StatsStore::load(path)?;
        if &store.config == config {
            eprintln!("using cached statistics {}", path.display());
            return Ok(store);
        }
        eprintln!(
            "cached statistics {} do not match the configuration, retraining",
            path.display()
        );
    }
    let store = train(config)?;
    if let Some(path) = cache {
        store.save(path)?;
    }
    Ok(store)
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> BaeError {
    BaeError::Report(format!("{}: {e}", path.display()))
}

/// Measurement CSV: `electrode_index,value` rows, optionally preceded by a
/// `# noise_std = s` comment line.
fn write_measurement(path: &Path, v: &DVector<f64>, noise_std: f64) -> Result<()> {
    let mut text = format!("# noise_std = {noise_std:?}\nelectrode_index,value\n");
    for (i, x) in v.iter().enumerate() {
        text.push_str(&format!("{i},{x:?}\n"));
    }
    std::fs::write(path, text).map_err(|e| BaeError::io(path, e))
}

fn read_measurement(path: &Path) -> Result<(DVector<f64>, Option<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| BaeError::io(path, e))?;
    let mut noise = None;
    let mut body = String::new();
    for line in text.lines() {
        match line.trim().strip_prefix('#') {
            Some(c) => {
                if let Some(v) = c.split_once('=').filter(|(k, _)| k.trim() == "noise_std") {
                    noise = Some(
                        v.1.trim()
                            .parse()
                            .map_err(|_| csv_error(path, "bad noise_std comment"))?,
                    );
                }
            }
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut values: Vec<(usize, f64)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse_err = || csv_error(path, format!("bad row {:?}", rec));
        let i: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(parse_err)?;
        let x: f64 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(parse_err)?;
        values.push((i, x));
    }
    values.sort_by_key(|p| p.0);
    if values.iter().enumerate().any(|(k, p)| p.0 != k) {
        return Err(csv_error(
            path,
            "electrode indices must be 0..m without gaps",
        ));
    }
    Ok((
        DVector::from_iterator(values.len(), values.into_iter().map(|p| p.1)),
        noise,
    ))
}

/// Scan fields needed to calibrate.
struct ScanRecord {
    location: usize,
    x_hat: [f64; 2],
    alpha: DVector<f64>,
}

const SCAN_COLUMNS: [&str; 8] = [
    "method",
    "location",
    "x",
    "y",
    "moment_x",
    "moment_y",
    "alpha",
    "functional_value",
];

fn write_scan(path: &Path, store: &StatsStore, r: &ScanResult, method: ScanMethod) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(SCAN_COLUMNS)
        .map_err(|e| csv_error(path, e))?;
    let p = store.positions[r.location];
    let alpha = r
        .alpha_hat
        .as_ref()
        .map(|a| {
            a.iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .unwrap_or_default();
    let tag = match method {
        ScanMethod::Standard => "standard",
        ScanMethod::Bae => "bae",
    };
    w.write_record([
        tag.to_string(),
        r.location.to_string(),
        format!("{:?}", p[0]),
        format!("{:?}", p[1]),
        format!("{:?}", r.x_hat[0]),
        format!("{:?}", r.x_hat[1]),
        alpha,
        format!("{:?}", r.functional_value),
    ])
    .map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| csv_error(path, e))
}

fn read_scan(path: &Path) -> Result<ScanRecord> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let rec = reader
        .records()
        .next()
        .ok_or_else(|| csv_error(path, "no scan row"))?
        .map_err(|e| csv_error(path, e))?;
    let field = |name: &str| -> Result<&str> {
        let i = SCAN_COLUMNS
            .iter()
            .position(|c| *c == name)
            .expect("known column");
        rec.get(i)
            .ok_or_else(|| csv_error(path, format!("missing {name}")))
    };
    let num = |name: &str| -> Result<f64> {
        field(name)?
            .parse()
            .map_err(|_| csv_error(path, format!("bad {name}")))
    };
    if field("method")? != "bae" {
        return Err(BaeError::Config("calibration needs a bae scan".into()));
    }
    let alpha: Vec<f64> = field("alpha")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| csv_error(path, "bad alpha")))
        .collect::<Result<_>>()?;
    Ok(ScanRecord {
        location: field("location")?
            .parse()
            .map_err(|_| csv_error(path, "bad location"))?,
        x_hat: [num("moment_x")?, num("moment_y")?],
        alpha: DVector::from_vec(alpha),
    })
}

fn calibrate(
    store: &StatsStore,
    scan: &ScanRecord,
    method: Method,
    gp: Option<&Path>,
    data: Option<&Path>,
    noise_std: Option<f64>,
) -> Result<CalibrationResult> {
    let l = scan.location;
    let stats = store.stats.get(l).ok_or_else(|| {
        BaeError::Config(format!("scan location {l} is not in the statistics store"))
    })?;
    let prior = &store.config.prior;
    let fine = || -> Result<ExactFactory> {
        Ok(ExactFactory::new(
            build_model(&store.config.sample)?,
            store.positions.clone(),
        ))
    };
    match method {
        Method::Cg => cg_estimate(&scan.alpha, stats, prior),
        Method::CgIter => {
            let init = cg_estimate(&scan.alpha, stats, prior)?.sigma_hat;
            cg_iter_estimate(
                &scan.alpha,
                scan.x_hat,
                l,
                &store.block(l),
                &fine()?,
                stats,
                prior,
                init,
                &IterOptions::default(),
            )
        }
        Method::Gp => {
            let path = gp.ok_or_else(|| BaeError::Config("the gp method needs --gp".into()))?;
            let models = GpStore::load(path)?;
            let model = models
                .models
                .get(l)
                .ok_or_else(|| BaeError::Config(format!("no regressor for location {l}")))?;
            gp_estimate(scan.alpha[0], scan.x_hat, model, prior)
        }
        Method::MapA2 => {
            let model = build_model(&store.config.sample.with_skull(prior.mean))?;
            let (_, jac) = model.leadfield_and_jacobian(store.positions[l])?;
            map_closed_form(
                scan.alpha[0],
                stats,
                &jac,
                store.positions[l],
                store.config.dipole.gamma,
                prior,
            )
        }
        Method::Alternating => {
            let path =
                data.ok_or_else(|| BaeError::Config("the alt method needs --data".into()))?;
            let (v, file_std) = read_measurement(path)?;
            let std = noise_std.or(file_std).unwrap_or(0.0);
            let noise = NoiseModel::for_data(&v, std, NOISE_FLOOR)?;
            let factory = ExactFactory::new(
                build_model(&store.config.standard)?,
                store.positions.clone(),
            );
            let (_, result) = alternating_scan(
                &v,
                &factory,
                &noise,
                prior,
                store.sigma0(),
                &AlternatingOptions::default(),
            )?;
            Ok(result)
        }
    }
}

fn write_calibration(path: &Path, r: &CalibrationResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let row = [
        r.method.tag().to_string(),
        format!("{:?}", r.sigma_hat),
        format!("{:?}", r.unclamped),
        r.iterations.to_string(),
        r.converged.to_string(),
        r.variance.map(|v| format!("{v:?}")).unwrap_or_default(),
        r.note.clone().unwrap_or_default(),
    ];
    w.write_record([
        "method",
        "sigma_hat",
        "unclamped",
        "iterations",
        "converged",
        "variance",
        "note",
    ])
    .and_then(|_| w.write_record(&row))
    .map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| csv_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn small_training() -> TrainingConfig {
        let mut c = TrainingConfig::default();
        c.standard.grid_size = 33;
        c.sample.grid_size = 65;
        c.source.band = [0.5, 0.7];
        c.source.spacing = 0.0625;
        c.stats_models = 40;
        c.gp_models = 10;
        c.dipoles = 40;
        c
    }

    fn bae(args: &[&str]) -> Result<ExitCode> {
        run(
            Cli::try_parse_from(std::iter::once("bae").chain(args.iter().copied()))
                .expect("valid arguments"),
        )
    }

    fn path(p: &Path) -> &str {
        p.to_str().expect("utf-8 temp path")
    }

    /// Directory holding `model.cfg`, `stats.bae` and `stats.bae.gp`.
    fn trained() -> &'static tempfile::TempDir {
        static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
        DIR.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = dir.path().join("model.cfg");
            std::fs::write(&cfg, small_training().to_kv().to_text()).unwrap();
            let stats = dir.path().join("stats.bae");
            bae(&["train", "--model-config", path(&cfg), "--out", path(&stats)]).unwrap();
            dir
        })
    }

    fn read_field(file: &Path, column: &str) -> String {
        let mut r = csv::Reader::from_path(file).unwrap();
        let i = r
            .headers()
            .unwrap()
            .iter()
            .position(|h| h == column)
            .unwrap();
        r.records().next().unwrap().unwrap()[i].to_string()
    }

    #[test]
    fn train_writes_matching_stores() {
        let dir = trained().path();
        let store = StatsStore::load(dir.join("stats.bae")).unwrap();
        assert_eq!(store.config, small_training());
        assert_eq!(
            GpStore::load(dir.join("stats.bae.gp"))
                .unwrap()
                .models
                .len(),
            store.len()
        );
    }

    #[test]
    fn pipeline_from_simulation_to_calibration() {
        let dir = trained().path();
        let work = tempfile::tempdir().unwrap();
        let w = |name: &str| work.path().join(name);
        let stats = dir.join("stats.bae");
        let gp = dir.join("stats.bae.gp");
        bae(&[
            "simulate",
            "--stats",
            path(&stats),
            "--location",
            "2",
            "--sigma",
            "0.007",
            "--amplitude",
            "2.5",
            "--out",
            path(&w("v.csv")),
        ])
        .unwrap();
        let (v, std) = read_measurement(&w("v.csv")).unwrap();
        assert_eq!(v.len(), 32);
        assert!(std.unwrap() > 0.0);
        for method in ["standard", "bae"] {
            let out = w(&format!("{method}.csv"));
            bae(&[
                "scan",
                "--data",
                path(&w("v.csv")),
                "--stats",
                path(&stats),
                "--method",
                method,
                "--out",
                path(&out),
            ])
            .unwrap();
            assert_eq!(read_field(&out, "method"), method);
        }
        let store = StatsStore::load(&stats).unwrap();
        let prior = store.config.prior;
        for method in ["cg", "cg-iter", "gp", "map-a2", "alt"] {
            let out = w(&format!("{method}.cal"));
            bae(&[
                "calibrate",
                "--scan",
                path(&w("bae.csv")),
                "--stats",
                path(&stats),
                "--gp",
                path(&gp),
                "--method",
                method,
                "--data",
                path(&w("v.csv")),
                "--out",
                path(&out),
            ])
            .unwrap();
            assert_eq!(read_field(&out, "method"), method);
            let s: f64 = read_field(&out, "sigma_hat").parse().unwrap();
            assert!(s >= prior.lower && s <= prior.upper, "{method}: {s}");
        }
        let standard = bae(&[
            "calibrate",
            "--scan",
            path(&w("standard.csv")),
            "--stats",
            path(&stats),
            "--method",
            "cg",
            "--out",
            path(&w("x.cal")),
        ]);
        assert!(matches!(standard, Err(BaeError::Config(_))));
        let no_gp = bae(&[
            "calibrate",
            "--scan",
            path(&w("bae.csv")),
            "--stats",
            path(&stats),
            "--method",
            "gp",
            "--out",
            path(&w("x.cal")),
        ]);
        assert!(matches!(no_gp, Err(BaeError::Config(_))));
    }

    #[test]
    fn experiment_output_is_reproducible() {
        let dir = trained().path();
        let work = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::profile(Profile::Quick);
        cfg.training = small_training();
        cfg.test_locations = 2;
        cfg.amplitudes = vec![1.3];
        cfg.snr_db = vec![40.0];
        let cfg_path = work.path().join("exp.cfg");
        std::fs::write(&cfg_path, cfg.to_kv().to_text()).unwrap();
        let cache = dir.join("stats.bae");
        let run_into = |name: &str, extra: &[&str]| {
            let out = work.path().join(name);
            let mut args = vec![
                "experiment",
                "--config",
                path(&cfg_path),
                "--stats-cache",
                path(&cache),
                "--out",
                path(&out),
            ];
            args.extend_from_slice(extra);
            bae(&args).map(|code| (code, out))
        };
        let (code, first) = run_into("a", &[]).unwrap();
        assert_eq!(code, ExitCode::SUCCESS);
        let (_, second) = run_into("b", &[]).unwrap();
        let read = |d: &Path| std::fs::read(d.join("trials.csv")).unwrap();
        assert_eq!(read(&first), read(&second));
        assert!(first.join("config.txt").exists());
        assert!(matches!(run_into("a", &[]), Err(BaeError::Report(_))));
        assert!(run_into("a", &["--overwrite"]).is_ok());
        assert_eq!(read(&first), read(&second));
    }

    #[test]
    fn build_model_rejects_unknown_keys() {
        let work = tempfile::tempdir().unwrap();
        let good = work.path().join("good.cfg");
        std::fs::write(&good, "grid_size = 33\n").unwrap();
        let out = work.path().join("model.txt");
        bae(&["build-model", "--config", path(&good), "--out", path(&out)]).unwrap();
        assert!(!std::fs::read_to_string(&out).unwrap().is_empty());
        let bad = work.path().join("bad.cfg");
        std::fs::write(&bad, "grid_sise = 33\n").unwrap();
        assert!(matches!(
            bae(&["build-model", "--config", path(&bad)]),
            Err(BaeError::Config(_))
        ));
    }

    #[test]
    fn measurement_files_round_trip() {
        let work = tempfile::tempdir().unwrap();
        let p = work.path().join("v.csv");
        let v = DVector::from_vec(vec![0.1, -2.5, 1e-17]);
        write_measurement(&p, &v, 0.25).unwrap();
        assert_eq!(read_measurement(&p).unwrap(), (v, Some(0.25)));
    }
}
