//! Adaptive semantic consistency.
//!
//! Source samples are weighted by how close their frozen-model features lie
//! to the support prototype, `w = softmax(−d)·B`, and the finetuned model is
//! penalised by the weighted mean squared feature drift
//! `(1/B)·Σ wᵢ‖f_s(xᵢ) − f_t(xᵢ)‖²`. Prototype and weights are constants
//! with respect to the gradient.

use crate::autodiff::{Reduction, Tape, Var};
use crate::data::Dataset;
use crate::encoder::{BoundEncoder, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Which encoder output the consistency term constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizedBlock {
    /// Final block output (the semantic features).
    Semantic,
    /// One block, 1-based.
    Block(usize),
    /// Uniform average of every block's loss.
    All,
}

impl std::fmt::Display for RegularizedBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegularizedBlock::Semantic => f.write_str("semantic"),
            RegularizedBlock::Block(b) => write!(f, "{b}"),
            RegularizedBlock::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for RegularizedBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Self::Semantic),
            "all" => Ok(Self::All),
            n => n
                .parse()
                .ok()
                .filter(|b| *b >= 1)
                .map(Self::Block)
                .ok_or_else(|| Error::contract(format!("bad regularized block {s:?}"))),
        }
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for RegularizedBlock {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for RegularizedBlock {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which images feed the consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum RegularizationInputs {
    Source,
    /// Support images with uniform weights (the feature-map regularisation
    /// style of DELTA).
    Target,
}

/// Encoder used to embed the support set for the prototype.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum PrototypeEncoder {
    /// The model being finetuned, with its current parameters.
    Target,
    /// The frozen source model, so both sides of the distance share a space.
    Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub regularized_block: RegularizedBlock,
    pub inputs: RegularizationInputs,
    pub top_m: Option<usize>,
    pub weights_enabled: bool,
    pub prototype_encoder: PrototypeEncoder,
}

impl Default for AscConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            batch_size: 64,
            regularized_block: RegularizedBlock::Semantic,
            inputs: RegularizationInputs::Source,
            top_m: None,
            weights_enabled: true,
            prototype_encoder: PrototypeEncoder::Target,
        }
    }
}

impl AscConfig {
    pub fn validate(&self, num_blocks: usize, source_classes: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::contract(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("source batch size must be ≥ 1"));
        }
        if let RegularizedBlock::Block(b) = self.regularized_block {
            if b == 0 || b > num_blocks {
                return Err(Error::contract(format!("block {b} outside 1..={num_blocks}")));
            }
        }
        if let Some(m) = self.top_m {
            if m == 0 || m > source_classes {
                return Err(Error::contract(format!("top_m {m} outside 1..={source_classes}")));
            }
        }
        Ok(())
    }
}

/// Mean feature of the support set under `encoder`.
pub fn support_prototype(encoder: &Encoder, support: &Tensor) -> Result<Vec<f64>> {
    if support.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::contract("empty support set"));
    }
    Ok(row_mean(&encoder.infer(support)?))
}

pub(crate) fn row_mean(t: &Tensor) -> Vec<f64> {
    let w = *t.shape().last().unwrap_or(&1);
    let mut acc = vec![0.0; w];
    let mut n = 0usize;
    for row in t.rows() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Euclidean distance from each feature row to `prototype`.
pub fn distances_to_prototype(features: &Tensor, prototype: &[f64]) -> Result<Vec<f64>> {
    let (_, w) = features.dims2()?;
    if w != prototype.len() {
        return Err(Error::contract(format!(
            "feature width {w} vs prototype length {}",
            prototype.len()
        )));
    }
    Ok(features
        .rows()
        .map(|r| kernels::squared_distance(r, prototype).sqrt())
        .collect())
}

/// `‖f_s(xᵢ) − z_supp‖₂` for each source row.
pub fn source_target_distances(source_model: &Encoder, inputs: &Tensor, prototype: &[f64]) -> Result<Vec<f64>> {
    distances_to_prototype(&source_model.infer(inputs)?, prototype)
}

/// `softmax(−d)·B`, or all ones when weighting is disabled.
pub fn adaptive_weights(distances: &[f64], enabled: bool) -> Vec<f64> {
    let b = distances.len() as f64;
    if !enabled {
        return vec![1.0; distances.len()];
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|d| (min - d).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| b * v / total).collect()
}

/// Weighted consistency loss on precomputed block outputs.
///
/// `source_blocks` are the frozen model's per-block outputs (constants) and
/// `target_blocks` the matching tape variables of the trainable model.
pub fn consistency_from_blocks(
    tape: &mut Tape,
    source_blocks: &[Tensor],
    target_blocks: &[Var],
    weights: &[f64],
    block: RegularizedBlock,
) -> Result<Var> {
    if source_blocks.len() != target_blocks.len() || source_blocks.is_empty() {
        return Err(Error::contract("source and target block counts differ"));
    }
    let chosen: Vec<usize> = match block {
        RegularizedBlock::Semantic => vec![source_blocks.len() - 1],
        RegularizedBlock::Block(b) if (1..=source_blocks.len()).contains(&b) => vec![b - 1],
        RegularizedBlock::Block(b) => {
            return Err(Error::contract(format!(
                "block {b} outside 1..={}",
                source_blocks.len()
            )))
        }
        RegularizedBlock::All => (0..source_blocks.len()).collect(),
    };
    let rows = source_blocks[0].shape()[0];
    if weights.len() != rows {
        return Err(Error::contract(format!(
            "{} weights for a batch of {rows}",
            weights.len()
        )));
    }
    let w = tape.constant(Tensor::vector(weights.to_vec())?);
    let mut losses = Vec::with_capacity(chosen.len());
    for b in chosen {
        let reference = tape.constant(source_blocks[b].clone());
        let diff = tape.sub(target_blocks[b], reference)?;
        let sq = tape.square(diff)?;
        let per_sample = tape.reduce(Reduction::Sum, sq, Some(1))?;
        let weighted = tape.mul(per_sample, w)?;
        losses.push(tape.mean(weighted)?);
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let count = losses.len() as f64;
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    tape.scale(total, 1.0 / count)
}

/// `(1/B)·Σ wᵢ‖f_s(xᵢ) − f_t(xᵢ)‖²` at the selected block; gradients reach
/// only the bound target model.
pub fn consistency_loss(
    tape: &mut Tape,
    source_model: &Encoder,
    target_model: &BoundEncoder,
    inputs: &Tensor,
    weights: &[f64],
    block: RegularizedBlock,
) -> Result<Var> {
    let source_blocks = source_model.infer_blocks(inputs)?;
    let x = tape.constant(inputs.clone());
    let target_blocks = target_model.forward_blocks(tape, x)?;
    consistency_from_blocks(tape, &source_blocks, &target_blocks, weights, block)
}

/// `l_cls + λ·l_con`.
pub fn total_loss(tape: &mut Tape, l_cls: Var, l_con: Var, lambda: f64) -> Result<Var> {
    let scaled = tape.scale(l_con, lambda)?;
    tape.add(l_cls, scaled)
}

/// Consistency on the support images themselves with uniform weights.
pub fn target_consistency_variant(
    tape: &mut Tape,
    source_model: &Encoder,
    target_model: &BoundEncoder,
    support: &Tensor,
    block: RegularizedBlock,
) -> Result<Var> {
    let ones = vec![1.0; support.shape()[0]];
    consistency_loss(tape, source_model, target_model, support, &ones, block)
}

/// Per-class feature prototypes of the source set under `encoder`.
pub fn source_class_prototypes(source: &Dataset, encoder: &Encoder) -> Result<Vec<Vec<f64>>> {
    let features = encoder.infer(source.inputs())?;
    (0..source.num_classes())
        .map(|c| Ok(row_mean(&features.select_rows(source.class_indices(c))?)))
        .collect()
}

/// Class ids ordered by ascending prototype distance (ties by id).
pub fn rank_classes(class_prototypes: &[Vec<f64>], support_prototype: &[f64]) -> Vec<usize> {
    let dist: Vec<f64> = class_prototypes
        .iter()
        .map(|p| kernels::squared_distance(p, support_prototype).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// The `m` source classes whose pretrained prototypes lie closest to the
/// support prototype.
pub fn select_top_m_classes(
    source: &Dataset,
    pretrained: &Encoder,
    support: &Tensor,
    m: usize,
) -> Result<Vec<usize>> {
    if m == 0 || m > source.num_classes() {
        return Err(Error::contract(format!(
            "m = {m} outside 1..={}",
            source.num_classes()
        )));
    }
    let protos = source_class_prototypes(source, pretrained)?;
    let z = support_prototype(pretrained, support)?;
    let mut ranked = rank_classes(&protos, &z);
    ranked.truncate(m);
    Ok(ranked)
}
