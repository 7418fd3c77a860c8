//! Episodic evaluation: finetune on each sampled task, score its queries.

use sha2::{Digest, Sha256};

use crate::data::{self, Dataset};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{self, FinetuneConfig, FinetuneContext};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub finetune: FinetuneConfig,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; 1 runs inline. Results do not depend on this.
    pub jobs: usize,
}

impl EvalConfig {
    pub fn new(finetune: FinetuneConfig, k_shot: usize, episodes: usize, seed: u64) -> Self {
        Self {
            finetune,
            n_way: 5,
            k_shot,
            queries_per_class: 15,
            episodes,
            seed,
            jobs: 1,
        }
    }

    /// Hash of everything that determines the result (all fields but `jobs`).
    pub fn fingerprint(&self) -> String {
        let key = format!(
            "{:?}|{}|{}|{}|{}|{}",
            self.finetune, self.n_way, self.k_shot, self.queries_per_class, self.episodes, self.seed
        );
        let digest = Sha256::digest(key.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub accuracy: f64,
    pub block_change: Vec<f64>,
    pub source_batches: usize,
    pub source_intact: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    /// Per-block parameter change averaged over episodes.
    pub mean_block_change: Vec<f64>,
    pub source_intact: bool,
    pub fingerprint: String,
}

/// Mean and 95% half-width `1.96·s/√T` (sample std; zero when `T = 1` or
/// all values are equal).
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::contract("no accuracies to summarise"));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let t = values.len() as f64;
    let mean = values.iter().sum::<f64>() / t;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
    Ok((mean, 1.96 * var.sqrt() / t.sqrt()))
}

/// Seed for episode `index`; independent of thread scheduling.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, &[index as u64])
}

pub fn run_episode(ctx: &FinetuneContext<'_>, target: &Dataset, cfg: &EvalConfig, index: usize) -> Result<EpisodeResult> {
    let seed = episode_seed(cfg.seed, index);
    let episode = data::sample_episode(target, seed, cfg.n_way, cfg.k_shot, cfg.queries_per_class)?;
    let out = train::finetune_episode(ctx, &episode, &cfg.finetune, seed)?;
    let preds = train::classify_queries(
        &out.encoder,
        &episode,
        &cfg.finetune.loss,
        out.head.as_ref(),
        cfg.finetune.inference,
    )?;
    Ok(EpisodeResult {
        accuracy: train::accuracy(&preds, &episode.query_labels),
        block_change: out.diagnostics.block_change,
        source_batches: out.diagnostics.source_batches,
        source_intact: out.diagnostics.source_intact,
    })
}

pub fn evaluate(pretrained: &Encoder, source: &Dataset, target: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::contract("episodes must be positive"));
    }
    let ctx = FinetuneContext::new(pretrained, source);
    let checksum = pretrained.checksum();
    let results: Vec<EpisodeResult> = if cfg.jobs <= 1 {
        (0..cfg.episodes)
            .map(|i| run_episode(&ctx, target, cfg, i))
            .collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..cfg.episodes)
                .into_par_iter()
                .map(|i| run_episode(&ctx, target, cfg, i))
                .collect::<Result<_>>()
        })?
    };
    let accuracies: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, ci95) = mean_ci95(&accuracies)?;
    let nb = pretrained.num_blocks();
    let mut mean_block_change = vec![0.0; nb];
    for r in &results {
        mean_block_change.iter_mut().zip(&r.block_change).for_each(|(m, c)| *m += c);
    }
    mean_block_change.iter_mut().for_each(|m| *m /= results.len() as f64);
    log::info!(
        "{} {}-shot: {:.4} ± {:.4} over {} episodes",
        cfg.finetune.loss.name(),
        cfg.k_shot,
        mean_accuracy,
        ci95,
        cfg.episodes
    );
    Ok(EvalReport {
        accuracies,
        mean_accuracy,
        ci95,
        episodes: cfg.episodes,
        mean_block_change,
        source_intact: results.iter().all(|r| r.source_intact) && pretrained.checksum() == checksum,
        fingerprint: cfg.fingerprint(),
    })
}
