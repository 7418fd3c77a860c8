//! Shared fixtures for the benchmarks.

use asc_core::data::{self, Dataset, Episode};
use asc_core::rng::{self, Purpose};
use asc_core::{ClassPrior, Encoder, LinearHead, PretrainConfig, PriorParams, ShiftParams, Tensor, DEFAULT_DIMS};
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, Purpose::SampleNoise, &[]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A small pretrained encoder with its source data and one 5-way 5-shot episode.
pub struct Fixture {
    pub source: Dataset,
    pub encoder: Encoder,
    pub episode: Episode,
}

pub fn fixture() -> Fixture {
    let prior = ClassPrior::new(1, PriorParams::default()).unwrap();
    let source = data::generate_source(&prior, 2, 16, 40).unwrap();
    let encoder = Encoder::new(&DEFAULT_DIMS, 3).unwrap();
    let head = LinearHead::new(16, 64, &mut rng::stream(3, Purpose::HeadInit, &[])).unwrap();
    let cfg = PretrainConfig {
        epochs: 5,
        ..PretrainConfig::default()
    };
    let encoder = asc_core::train::pretrain(&source, encoder, head, &cfg, 4).unwrap().encoder;
    let target = data::generate_target(&prior, 5, 10, 30, 0.4, ShiftParams::default(), None, "bench").unwrap();
    let episode = data::sample_episode(&target, 6, 5, 5, 15).unwrap();
    Fixture {
        source,
        encoder,
        episode,
    }
}
