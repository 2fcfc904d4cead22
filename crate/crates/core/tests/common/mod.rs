#![allow(dead_code)]

pub mod oracles;

use srdet::data::{synth_dataset, Dataset, Split, SynthConfig};
use srdet::detect::DetectorConfig;
use srdet::sr::{RdbConfig, SrNetConfig};
use srdet::{ExperimentConfig, ModelConfig};

/// Seconds-scale experiment: `n_train`/`n_test` scenes at 64 px HR, alpha 4.
pub fn small_config(n_train: usize, n_test: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.dataset.synth.train_count = n_train;
    c.dataset.synth.test_count = n_test;
    c.model = tiny_model();
    c
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        alpha: 4,
        sr: SrNetConfig { num_blocks: 1, base_channels: 8, rdb: RdbConfig { num_layers: 2, growth: 4 } },
        detector: DetectorConfig::tiny(),
    }
}

pub fn data(c: &ExperimentConfig, split: Split) -> Dataset<f32> {
    synth_dataset(&c.dataset.synth, split, c.dataset.alpha).unwrap()
}

pub fn synth(c: &ExperimentConfig) -> &SynthConfig {
    &c.dataset.synth
}
