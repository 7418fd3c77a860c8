//! Pretraining on the source domain and per-episode finetuning.

use std::sync::OnceLock;

use rand::seq::{index, SliceRandom};
#[cfg(test)]
use rand::Rng;

use crate::asc::{self, AscConfig, PrototypeEncoder, RegularizationInputs};
use crate::autodiff::{Tape, Var};
use crate::data::{self, Dataset, Episode};
use crate::encoder::{block_parameter_change, Encoder, LinearHead};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{self, Purpose};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// L2 penalty coefficient added to every parameter gradient.
    pub weight_decay: f64,
    /// If set, the last block is rescaled after training so source features
    /// have this mean norm; the head is scaled inversely.
    pub feature_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
            weight_decay: 0.0,
            feature_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: Encoder,
    pub head: LinearHead,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Minibatch cross-entropy training of `encoder` + `head` on `source`.
pub fn pretrain(
    source: &Dataset,
    mut encoder: Encoder,
    mut head: LinearHead,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    if head.num_classes() != source.num_classes() {
        return Err(Error::contract(format!(
            "head has {} classes, source has {}",
            head.num_classes(),
            source.num_classes()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng::stream(seed, Purpose::Minibatch, &[epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = source.inputs().select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| source.labels()[i]).collect();
            let mut tape = Tape::new();
            let bound = encoder.bind(&mut tape);
            let hv = head.bind(&mut tape);
            let xv = tape.constant(x);
            let feats = bound.forward(&mut tape, xv)?;
            let loss = losses::cross_entropy_loss(&mut tape, hv, feats, &y)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss {value} at epoch {epoch}")));
            }
            total += value * chunk.len() as f64;
            tape.backward(loss)?;
            let mut vars = bound.param_vars();
            vars.extend([hv.0, hv.1]);
            let mut grads = collect_grads(&tape, &vars);
            let mut params = encoder.params_mut();
            params.extend(head.params_mut());
            if cfg.weight_decay != 0.0 {
                for (g, p) in grads.iter_mut().zip(&params) {
                    g.iter_mut().zip(p.iter()).for_each(|(g, p)| *g += cfg.weight_decay * p);
                }
            }
            opt.step(&mut params, &grads.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        }
        let mean = total / source.len() as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if let Some(target) = cfg.feature_norm {
        rescale_features(&mut encoder, &mut head, source.inputs(), target)?;
    }
    let train_accuracy = head_accuracy(&encoder, &head, source.inputs(), source.labels())?;
    Ok(Pretrained {
        encoder,
        head,
        epoch_losses,
        train_accuracy,
    })
}

/// Rescales the encoder so the mean feature norm over `x` equals `target`.
///
/// Every block's weights are scaled by the same factor `β` and block `l`'s
/// bias by `β^l`, so block outputs scale by `β^l` and features by `β^L`.
/// The head weights are divided by `β^L`, leaving its logits unchanged.
/// Returns the feature scale factor `β^L`.
pub fn rescale_features(encoder: &mut Encoder, head: &mut LinearHead, x: &Tensor, target: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::contract(format!("feature norm must be positive, got {target}")));
    }
    let current = mean_row_norm(&encoder.infer(x)?);
    if !(current > 0.0 && current.is_finite()) {
        return Err(Error::Numeric(format!("mean feature norm is {current}")));
    }
    let alpha = target / current;
    let beta = alpha.powf(1.0 / encoder.num_blocks() as f64);
    for (i, p) in encoder.params_mut().into_iter().enumerate() {
        let factor = if i % 2 == 0 { beta } else { beta.powi(i as i32 / 2 + 1) };
        p.iter_mut().for_each(|v| *v *= factor);
    }
    head.weight.data_mut().iter_mut().for_each(|v| *v /= alpha);
    Ok(alpha)
}

pub fn mean_row_norm(t: &Tensor) -> f64 {
    let n = t.rows().count().max(1) as f64;
    t.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / n
}

fn collect_grads(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect()
}

fn head_accuracy(encoder: &Encoder, head: &LinearHead, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = argmax_rows(&head.logits(&encoder.infer(x)?)?);
    Ok(accuracy(&preds, labels))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Query-time decision rule for prototype-based methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum InferenceRule {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub loss: LossKind,
    /// `None` runs the plain baseline method.
    pub asc: Option<AscConfig>,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Jittered copies of the support set per epoch.
    pub aug_views: usize,
    /// Jitter std; defaults to [`data::augmentation_sigma`] of the domain shift.
    pub aug_sigma: Option<f64>,
    pub inference: InferenceRule,
}

impl FinetuneConfig {
    /// Desk-scale defaults: SGD for cross-entropy, Adam and two views for the
    /// contrastive losses.
    pub fn for_loss(loss: LossKind) -> Self {
        let (optimizer, aug_views) = match loss {
            LossKind::CrossEntropy => (OptimizerConfig::sgd(0.05), 1),
            _ => (OptimizerConfig::adam(5e-3), 2),
        };
        Self {
            loss,
            asc: None,
            epochs: 30,
            optimizer,
            aug_views,
            aug_sigma: None,
            inference: InferenceRule::Euclidean,
        }
    }

    pub fn with_asc(mut self, asc: AscConfig) -> Self {
        self.asc = Some(asc);
        self
    }
}

/// Shared, read-only inputs for finetuning many episodes from one
/// pretrained model.
#[derive(Debug)]
pub struct FinetuneContext<'a> {
    pub pretrained: &'a Encoder,
    pub source: &'a Dataset,
    class_prototypes: OnceLock<Vec<Vec<f64>>>,
}

impl<'a> FinetuneContext<'a> {
    pub fn new(pretrained: &'a Encoder, source: &'a Dataset) -> Self {
        Self {
            pretrained,
            source,
            class_prototypes: OnceLock::new(),
        }
    }

    /// Source class prototypes under the pretrained encoder, computed once.
    pub fn class_prototypes(&self) -> Result<&[Vec<f64>]> {
        if let Some(p) = self.class_prototypes.get() {
            return Ok(p);
        }
        let protos = asc::source_class_prototypes(self.source, self.pretrained)?;
        Ok(self.class_prototypes.get_or_init(|| protos))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub cls_loss: Vec<f64>,
    pub con_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    pub source_batches: usize,
    /// Per-block mean squared parameter change versus the pretrained model.
    pub block_change: Vec<f64>,
    pub selected_classes: Option<Vec<usize>>,
    pub source_intact: bool,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub encoder: Encoder,
    pub head: Option<LinearHead>,
    pub diagnostics: Diagnostics,
}

pub fn finetune_episode(
    ctx: &FinetuneContext<'_>,
    episode: &Episode,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    finetune_episode_observed(ctx, episode, cfg, seed, |_, _, _| {})
}

/// Like [`finetune_episode`], calling `observe(epoch, encoder, head)` after
/// every optimiser step.
pub fn finetune_episode_observed(
    ctx: &FinetuneContext<'_>,
    episode: &Episode,
    cfg: &FinetuneConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &Encoder, Option<&LinearHead>),
) -> Result<FinetuneOutcome> {
    cfg.loss.validate()?;
    let pretrained = ctx.pretrained;
    if pretrained.input_dim() != episode.support.shape()[1] {
        return Err(Error::dim(
            "finetune",
            episode.support.shape(),
            &[0, pretrained.input_dim()],
        ));
    }
    if let Some(a) = &cfg.asc {
        a.validate(pretrained.num_blocks(), ctx.source.num_classes())?;
    }
    if cfg.aug_views == 0 {
        return Err(Error::contract("aug_views must be ≥ 1"));
    }
    let source_checksum = pretrained.checksum();
    let source_model = pretrained.clone_frozen();
    let mut target = source_model.thaw();
    let mut head = match cfg.loss {
        LossKind::CrossEntropy => Some(LinearHead::new(
            episode.n_way,
            pretrained.feature_dim(),
            &mut rng::stream(seed, Purpose::HeadInit, &[]),
        )?),
        _ => None,
    };
    let sigma = cfg
        .aug_sigma
        .unwrap_or_else(|| data::augmentation_sigma(episode.domain_shift));

    let selected_classes = match &cfg.asc {
        Some(AscConfig {
            top_m: Some(m),
            inputs: RegularizationInputs::Source,
            ..
        }) => {
            let z = asc::support_prototype(pretrained, &episode.support)?;
            let mut ranked = asc::rank_classes(ctx.class_prototypes()?, &z);
            ranked.truncate(*m);
            Some(ranked)
        }
        _ => None,
    };
    let source_pool: Option<Vec<usize>> = selected_classes.as_ref().map(|classes| {
        classes
            .iter()
            .flat_map(|&c| ctx.source.class_indices(c).iter().copied())
            .collect()
    });
    let mut diag = Diagnostics {
        selected_classes,
        ..Diagnostics::default()
    };
    let mut opt = Optimizer::new(cfg.optimizer);
    let n_support = episode.support.shape()[0];

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut aug_rng = rng::stream(seed, Purpose::Augmentation, &[e]);
        let views: Vec<Tensor> = (0..cfg.aug_views)
            .map(|_| data::jitter(&episode.support, sigma, &mut aug_rng))
            .collect();
        let labels: Vec<usize> = (0..cfg.aug_views)
            .flat_map(|_| episode.support_labels.iter().copied())
            .collect();

        let mut tape = Tape::new();
        let bound = target.bind(&mut tape);
        let head_vars = head.as_ref().map(|h| h.bind(&mut tape));
        let view_vars: Vec<Var> = views.into_iter().map(|v| tape.constant(v)).collect();
        let x = if view_vars.len() == 1 {
            view_vars[0]
        } else {
            tape.concat_rows(&view_vars)?
        };
        let feats = bound.forward(&mut tape, x)?;
        let l_cls = match cfg.loss {
            LossKind::CrossEntropy => {
                losses::cross_entropy_loss(&mut tape, head_vars.expect("head"), feats, &labels)?
            }
            LossKind::Supcon {
                temperature,
                include_self_in_denominator,
                normalize,
            } => losses::supcon_loss(
                &mut tape,
                feats,
                &labels,
                temperature,
                include_self_in_denominator,
                normalize,
            )?,
            LossKind::ConFt {
                temperature,
                n_distractors,
                anchor_fraction,
                normalize,
            } => {
                let dist_seed = rng::derive(seed, &[Purpose::Distractors as u64, e]);
                let batch = data::sample_source_batch(ctx.source, dist_seed, n_distractors)?;
                let dv = tape.constant(batch.inputs);
                let dfeats = bound.forward(&mut tape, dv)?;
                let rows = labels.len();
                let anchors: Vec<usize> = if anchor_fraction >= 1.0 {
                    (0..rows).collect()
                } else {
                    let k = ((anchor_fraction * rows as f64).ceil() as usize).clamp(1, rows);
                    let mut a = index::sample(&mut aug_rng, rows, k).into_vec();
                    a.sort_unstable();
                    a
                };
                losses::conft_loss(&mut tape, feats, &labels, &anchors, Some(dfeats), temperature, normalize)?
            }
        };
        diag.cls_loss.push(tape.value(l_cls).item()?);

        let total = match &cfg.asc {
            None => l_cls,
            Some(a) => {
                let (inputs, weights) = match a.inputs {
                    RegularizationInputs::Source => {
                        let batch_seed = rng::derive(seed, &[Purpose::SourceBatch as u64, e]);
                        let batch = match &source_pool {
                            Some(pool) => {
                                data::sample_source_batch_from(ctx.source, pool, batch_seed, a.batch_size)?
                            }
                            None => data::sample_source_batch(ctx.source, batch_seed, a.batch_size)?,
                        };
                        diag.source_batches += 1;
                        (batch.inputs, None)
                    }
                    RegularizationInputs::Target => (episode.support.clone(), Some(vec![1.0; n_support])),
                };
                let source_blocks = source_model.infer_blocks(&inputs)?;
                let weights = match weights {
                    Some(w) => w,
                    None if !a.weights_enabled => vec![1.0; inputs.shape()[0]],
                    None => {
                        let proto_model = match a.prototype_encoder {
                            PrototypeEncoder::Target => &target,
                            PrototypeEncoder::Source => &*source_model,
                        };
                        let z = asc::support_prototype(proto_model, &episode.support)?;
                        let d = asc::distances_to_prototype(source_blocks.last().expect("blocks"), &z)?;
                        asc::adaptive_weights(&d, true)
                    }
                };
                let xv = tape.constant(inputs);
                let target_blocks = bound.forward_blocks(&mut tape, xv)?;
                let l_con = asc::consistency_from_blocks(
                    &mut tape,
                    &source_blocks,
                    &target_blocks,
                    &weights,
                    a.regularized_block,
                )?;
                diag.con_loss.push(tape.value(l_con).item()?);
                asc::total_loss(&mut tape, l_cls, l_con, a.lambda)?
            }
        };
        let total_value = tape.value(total).item()?;
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!("finetuning loss {total_value} at epoch {epoch}")));
        }
        diag.total_loss.push(total_value);

        tape.backward(total)?;
        let mut vars = bound.param_vars();
        if let Some((w, b)) = head_vars {
            vars.extend([w, b]);
        }
        let grads = collect_grads(&tape, &vars);
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = target.params_mut();
        if let Some(h) = head.as_mut() {
            params.extend(h.params_mut());
        }
        opt.step(&mut params, &grad_refs)?;
        observe(epoch, &target, head.as_ref());
    }

    diag.block_change = block_parameter_change(pretrained, &target)?;
    diag.source_intact = source_model.checksum() == source_checksum;
    Ok(FinetuneOutcome {
        encoder: target,
        head,
        diagnostics: diag,
    })
}

/// Predicted labels for the episode's query set.
///
/// Cross-entropy models use their linear head; contrastive models use the
/// nearest support-class prototype in feature space.
pub fn classify_queries(
    encoder: &Encoder,
    episode: &Episode,
    loss: &LossKind,
    head: Option<&LinearHead>,
    rule: InferenceRule,
) -> Result<Vec<usize>> {
    let query_feats = encoder.infer(&episode.query)?;
    match loss {
        LossKind::CrossEntropy => {
            let head = head.ok_or_else(|| Error::contract("cross-entropy inference needs a head"))?;
            Ok(argmax_rows(&head.logits(&query_feats)?))
        }
        _ => {
            let support_feats = encoder.infer(&episode.support)?;
            let protos = class_prototypes(&support_feats, &episode.support_labels, episode.n_way)?;
            Ok(nearest_prototype(&query_feats, &protos, rule))
        }
    }
}

/// Mean feature per label in `0..n_classes`.
pub fn class_prototypes(features: &Tensor, labels: &[usize], n_classes: usize) -> Result<Vec<Vec<f64>>> {
    let (_, w) = features.dims2()?;
    let mut sums = vec![vec![0.0; w]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in features.rows().zip(labels) {
        let slot = sums
            .get_mut(l)
            .ok_or_else(|| Error::contract(format!("label {l} ≥ {n_classes}")))?;
        slot.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::contract("a class has no support samples"));
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *c as f64);
    }
    Ok(sums)
}

/// Index of the closest prototype per row; ties go to the lower index.
pub fn nearest_prototype(features: &Tensor, prototypes: &[Vec<f64>], rule: InferenceRule) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    features
        .rows()
        .map(|row| {
            let score = |p: &Vec<f64>| match rule {
                InferenceRule::Euclidean => kernels::squared_distance(row, p),
                InferenceRule::Cosine => {
                    let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                    -dot / (norm(row) * norm(p)).max(f64::MIN_POSITIVE)
                }
            };
            prototypes
                .iter()
                .enumerate()
                .map(|(i, p)| (i, score(p)))
                .fold((0, f64::INFINITY), |best, (i, s)| if s < best.1 { (i, s) } else { best })
                .0
        })
        .collect()
}
