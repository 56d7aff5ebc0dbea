//! Monte-Carlo approximation-error statistics per source location.

mod prior;
mod stats;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{BaeError, Result};
use crate::forward::{
    build_model, radial_direction, Dipole, ModelSpec, Point, SourceSpace, SourceSpaceSpec,
};
use crate::rng::{stream, Stream};
use crate::store::Container;

pub use prior::{
    priors_from_kv, priors_to_kv, sample_conductivity, sample_dipole, ConductivityPrior,
    DipolePrior, PRIOR_KEYS,
};
pub use stats::{
    approximation_error, bae_benefit_check, error_samples_for, estimate_error_stats,
    generate_error_samples, semi_analytic_covariance, BenefitCheck, ErrorSamples, ErrorStats,
    SampleBlock, Triplet,
};

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Model used for inversion, at the reference conductivity.
    pub standard: ModelSpec,
    /// Model on which the sample leadfields are built.
    pub sample: ModelSpec,
    pub source: SourceSpaceSpec,
    pub prior: ConductivityPrior,
    pub dipole: DipolePrior,
    /// Sample models used for the statistics.
    pub stats_models: usize,
    /// Held-out sample models used for the regressor triplets.
    pub gp_models: usize,
    /// Dipoles per location paired with every statistics model.
    pub dipoles: usize,
    /// Dipoles per location and held-out model.
    pub gp_dipoles: usize,
    pub rank: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            standard: ModelSpec::default(),
            sample: ModelSpec::fine(),
            source: SourceSpaceSpec::default(),
            prior: ConductivityPrior::default(),
            dipole: DipolePrior::default(),
            stats_models: 150,
            gp_models: 50,
            dipoles: 100,
            gp_dipoles: 4,
            rank: 1,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub const KEYS: &'static [&'static str] = &[
        "stats_models",
        "gp_models",
        "dipoles",
        "gp_dipoles",
        "rank",
        "seed",
    ];

    /// Reads `standard.*`, `sample.*`, `source.*`, the prior keys and the
    /// counts; `sample.grid_size = same` selects the standard grid.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainingConfig::default();
        let standard = kv.section("standard.");
        standard.check_known(ModelSpec::KEYS)?;
        c.standard = ModelSpec::from_kv(&standard, &c.standard)?;
        let mut sample = kv.section("sample.");
        if sample.get_str("grid_size") == Some("same") {
            sample.set("grid_size", c.standard.grid_size);
        }
        sample.check_known(ModelSpec::KEYS)?;
        let base = ModelSpec {
            grid_size: c.sample.grid_size,
            ..c.standard.clone()
        };
        c.sample = ModelSpec::from_kv(&sample, &base)?;
        let source = kv.section("source.");
        source.check_known(SourceSpaceSpec::KEYS)?;
        c.source = SourceSpaceSpec::from_kv(&source, &c.source)?;
        let (prior, dipole) = priors_from_kv(kv)?;
        c.prior = prior;
        c.dipole = dipole;
        let counts = [
            ("stats_models", &mut c.stats_models),
            ("gp_models", &mut c.gp_models),
            ("dipoles", &mut c.dipoles),
            ("gp_dipoles", &mut c.gp_dipoles),
            ("rank", &mut c.rank),
        ];
        for (key, slot) in counts {
            if let Some(v) = kv.get::<usize>(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.get::<u64>("seed")? {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Whether `from_kv` understands `key`.
    pub fn is_known_key(key: &str) -> bool {
        [
            ("standard.", ModelSpec::KEYS),
            ("sample.", ModelSpec::KEYS),
            ("source.", SourceSpaceSpec::KEYS),
        ]
        .iter()
        .any(|(p, keys)| key.strip_prefix(p).is_some_and(|r| keys.contains(&r)))
            || PRIOR_KEYS.contains(&key)
            || Self::KEYS.contains(&key)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        for (prefix, sub) in [
            ("standard.", self.standard.to_kv()),
            ("sample.", self.sample.to_kv()),
            ("source.", self.source.to_kv()),
            ("", priors_to_kv(&self.prior, &self.dipole)),
        ] {
            for (k, v) in sub.iter() {
                kv.set(&format!("{prefix}{k}"), v);
            }
        }
        kv.set("stats_models", self.stats_models);
        kv.set("gp_models", self.gp_models);
        kv.set("dipoles", self.dipoles);
        kv.set("gp_dipoles", self.gp_dipoles);
        kv.set("rank", self.rank);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.stats_models == 0 || self.dipoles == 0 || self.rank == 0 {
            return Err(BaeError::Config(
                "stats_models, dipoles and rank must be positive".into(),
            ));
        }
        if self.standard.electrode_count != self.sample.electrode_count {
            return Err(BaeError::Config(
                "standard and sample models need the same electrode count".into(),
            ));
        }
        Ok(())
    }

    pub fn source_space(&self) -> Result<SourceSpace> {
        SourceSpace::build(&self.source, &self.standard, &self.sample)
    }

    /// The reference conductivity of the standard model.
    pub fn sigma0(&self) -> f64 {
        self.standard.conductivities.skull
    }
}

/// Leadfields of the sample models at the candidate locations.
#[derive(Debug, Clone)]
pub struct SampleModels {
    pub sigmas: Vec<f64>,
    /// One `m x 2n` leadfield per sample model.
    pub leadfields: Vec<DMatrix<f64>>,
    /// How many leading models feed the statistics; the rest are held out.
    pub stats_models: usize,
}

impl SampleModels {
    pub fn blocks(&self, location: usize, range: std::ops::Range<usize>) -> Vec<SampleBlock> {
        range
            .map(|k| SampleBlock {
                sigma: self.sigmas[k],
                block: self.leadfields[k].columns(2 * location, 2).into_owned(),
            })
            .collect()
    }
}

/// Conductivities of the sample models, one independent stream per model.
pub fn draw_sample_conductivities(config: &TrainingConfig) -> Vec<f64> {
    (0..config.stats_models + config.gp_models)
        .map(|k| {
            sample_conductivity(
                &config.prior,
                &mut stream(config.seed, Stream::Conductivity, &[k as u64]),
            )
        })
        .collect()
}

pub fn build_sample_models(config: &TrainingConfig, candidates: &[Point]) -> Result<SampleModels> {
    let sigmas = draw_sample_conductivities(config);
    let base = build_model(&config.sample)?;
    let leadfields = sigmas
        .par_iter()
        .map(|&s| base.with_skull_conductivity(s)?.leadfield(candidates))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleModels {
        sigmas,
        leadfields,
        stats_models: config.stats_models,
    })
}

/// Trained statistics together with the standard leadfield they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsStore {
    pub config: TrainingConfig,
    pub positions: Vec<Point>,
    /// Standard leadfield `A0` (`m x 2n`).
    pub a0: DMatrix<f64>,
    pub stats: Vec<ErrorStats>,
    pub sample_sigmas: Vec<f64>,
}

const STATS_KIND: &str = "error-statistics";

impl StatsStore {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn electrode_count(&self) -> usize {
        self.a0.nrows()
    }

    pub fn block(&self, location: usize) -> DMatrix<f64> {
        self.a0.columns(2 * location, 2).into_owned()
    }

    pub fn sigma0(&self) -> f64 {
        self.config.sigma0()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(STATS_KIND);
        for (k, v) in self.config.to_kv().iter() {
            c.set_meta(&format!("config.{k}"), v);
        }
        c.set_meta("locations", self.stats.len());
        c.set_meta("electrodes", self.electrode_count());
        let pos = DMatrix::from_fn(2, self.positions.len(), |r, i| self.positions[i][r]);
        c.push_array("positions", pos);
        c.push_array("a0", self.a0.clone());
        c.push_array(
            "sample_sigmas",
            DMatrix::from_row_slice(1, self.sample_sigmas.len(), &self.sample_sigmas),
        );
        for (i, st) in self.stats.iter().enumerate() {
            let scalars = DMatrix::from_row_slice(1, 2, &[st.p as f64, st.sigma_star]);
            c.push_array(&format!("loc{i}.scalars"), scalars);
            c.push_array(
                &format!("loc{i}.eps_mean"),
                DMatrix::from_column_slice(st.m(), 1, st.eps_mean.as_slice()),
            );
            c.push_array(&format!("loc{i}.eigvecs"), st.eigvecs.clone());
            c.push_array(
                &format!("loc{i}.eigvals"),
                DMatrix::from_column_slice(st.m(), 1, st.eigvals.as_slice()),
            );
            c.push_array(&format!("loc{i}.residual_cov"), st.residual_cov.clone());
            c.push_array(
                &format!("loc{i}.sigma_alpha"),
                DMatrix::from_column_slice(st.p, 1, st.sigma_alpha.as_slice()),
            );
            let t = DMatrix::from_fn(3, st.gp_triplets.len(), |r, s| {
                let tr = st.gp_triplets[s];
                [tr.alpha, tr.amplitude, tr.sigma][r]
            });
            c.push_array(&format!("loc{i}.triplets"), t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != STATS_KIND {
            return Err(BaeError::Store(format!(
                "expected a `{STATS_KIND}` store, found `{}`",
                c.kind
            )));
        }
        let mut kv = KeyValues::default();
        for (k, v) in c.meta_entries() {
            if let Some(key) = k.strip_prefix("config.") {
                kv.set(key, v);
            }
        }
        let config = TrainingConfig::from_kv(&kv)?;
        let n: usize = c.meta_parse("locations")?;
        let m: usize = c.meta_parse("electrodes")?;
        let pos = c.array_shaped("positions", 2, n)?;
        let positions = (0..n).map(|i| [pos[(0, i)], pos[(1, i)]]).collect();
        let a0 = c.array_shaped("a0", m, 2 * n)?.clone();
        let sample_sigmas = c.array("sample_sigmas")?.iter().copied().collect();
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let scalars = c.array_shaped(&format!("loc{i}.scalars"), 1, 2)?;
            let p = scalars[0] as usize;
            if p == 0 || p > m || scalars[0] != p as f64 {
                return Err(BaeError::Store(format!(
                    "location {i}: invalid rank {}",
                    scalars[0]
                )));
            }
            let t = c.array(&format!("loc{i}.triplets"))?;
            if t.nrows() != 3 {
                return Err(BaeError::Store(format!(
                    "location {i}: triplets need three rows"
                )));
            }
            stats.push(ErrorStats {
                location: i,
                eps_mean: c
                    .array_shaped(&format!("loc{i}.eps_mean"), m, 1)?
                    .column(0)
                    .into_owned(),
                eigvecs: c.array_shaped(&format!("loc{i}.eigvecs"), m, m)?.clone(),
                eigvals: c
                    .array_shaped(&format!("loc{i}.eigvals"), m, 1)?
                    .column(0)
                    .into_owned(),
                p,
                residual_cov: c
                    .array_shaped(&format!("loc{i}.residual_cov"), m, m)?
                    .clone(),
                sigma_alpha: c
                    .array_shaped(&format!("loc{i}.sigma_alpha"), p, 1)?
                    .column(0)
                    .into_owned(),
                sigma_star: scalars[1],
                gp_triplets: t
                    .column_iter()
                    .map(|col| Triplet {
                        alpha: col[0],
                        amplitude: col[1],
                        sigma: col[2],
                    })
                    .collect(),
            });
        }
        Ok(StatsStore {
            config,
            positions,
            a0,
            stats,
            sample_sigmas,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Statistics and regressor triplets for every candidate from prebuilt
/// sample leadfields.
pub fn train_from_samples(
    config: &TrainingConfig,
    positions: &[Point],
    a0: &DMatrix<f64>,
    samples: &SampleModels,
) -> Result<StatsStore> {
    let m = a0.nrows();
    if a0.ncols() != 2 * positions.len() {
        return Err(BaeError::Shape(
            "standard leadfield does not match the locations".into(),
        ));
    }
    if let Some(l) = samples.leadfields.iter().find(|l| l.shape() != a0.shape()) {
        return Err(BaeError::Shape(format!(
            "sample leadfield is {}x{}, standard is {m}x{}",
            l.nrows(),
            l.ncols(),
            a0.ncols()
        )));
    }
    let k_stats = samples.stats_models.min(samples.sigmas.len());
    let stats = positions
        .par_iter()
        .enumerate()
        .map(|(i, &pos)| {
            let a0_i = a0.columns(2 * i, 2).into_owned();
            let blocks = samples.blocks(i, 0..k_stats);
            let mut rng = stream(config.seed, Stream::Dipoles, &[i as u64]);
            let es = generate_error_samples(
                i,
                pos,
                &blocks,
                &a0_i,
                config.dipoles,
                &config.dipole,
                &mut rng,
            )?;
            let mut st = estimate_error_stats(&es, config.rank, config.prior.mean)?;
            st.gp_triplets = gp_triplets(
                config,
                i,
                pos,
                &a0_i,
                &samples.blocks(i, k_stats..samples.sigmas.len()),
                &st,
            );
            Ok(st)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StatsStore {
        config: config.clone(),
        positions: positions.to_vec(),
        a0: a0.clone(),
        stats,
        sample_sigmas: samples.sigmas.clone(),
    })
}

fn gp_triplets(
    config: &TrainingConfig,
    location: usize,
    position: Point,
    a0: &DMatrix<f64>,
    held_out: &[SampleBlock],
    st: &ErrorStats,
) -> Vec<Triplet> {
    let mut rng = stream(config.seed, Stream::GpDipoles, &[location as u64]);
    let w = st.eigvecs.column(0);
    let mut out = Vec::with_capacity(held_out.len() * config.gp_dipoles);
    for b in held_out {
        for _ in 0..config.gp_dipoles {
            let d: Dipole = sample_dipole(location, position, &config.dipole, &mut rng);
            let eps: DVector<f64> = approximation_error(&b.block, a0, d.moment);
            out.push(Triplet {
                alpha: w.dot(&(eps - &st.eps_mean)),
                amplitude: d.amplitude(),
                sigma: b.sigma,
            });
        }
    }
    out
}

/// Builds the models, the sample leadfields and the statistics.
pub fn train(config: &TrainingConfig) -> Result<StatsStore> {
    config.validate()?;
    let space = config.source_space()?;
    let standard = build_model(&config.standard)?;
    let a0 = standard.leadfield(&space.candidates)?;
    let samples = build_sample_models(config, &space.candidates)?;
    train_from_samples(config, &space.candidates, &a0, &samples)
}

/// Jacobian contracted with the radial direction at `position` (`m x 1`).
pub fn radial_jacobian(jacobian: &DMatrix<f64>, position: Point) -> DMatrix<f64> {
    let n = radial_direction(position);
    let col = jacobian.column(0) * n[0] + jacobian.column(1) * n[1];
    DMatrix::from_column_slice(jacobian.nrows(), 1, col.as_slice())
}
