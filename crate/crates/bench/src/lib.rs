//! Shared fixtures for the benchmarks.

use bae_core::training::{train, StatsStore, TrainingConfig};

/// A reduced configuration that trains in well under a second.
pub fn small_config() -> TrainingConfig {
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

pub fn small_store() -> StatsStore {
    train(&small_config()).expect("small configuration trains")
}
