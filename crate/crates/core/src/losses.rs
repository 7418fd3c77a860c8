//! Classification losses used during finetuning: cross-entropy through a
//! linear head, the distractor-contrastive ConFT loss, and supervised
//! contrastive (Supcon) loss.
//!
//! Both contrastive losses are written as `Σ c_r·(lse_r − s_r)` where `s_r`
//! is a gathered anchor–positive similarity and `lse_r` a masked
//! log-sum-exp over that anchor's denominator set.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which classification loss drives finetuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    ConFt {
        temperature: f64,
        n_distractors: usize,
        /// Fraction of support rows drawn as anchors each epoch.
        anchor_fraction: f64,
        normalize: bool,
    },
    Supcon {
        temperature: f64,
        include_self_in_denominator: bool,
        normalize: bool,
    },
}

impl LossKind {
    pub fn conft(temperature: f64, n_distractors: usize) -> Self {
        LossKind::ConFt {
            temperature,
            n_distractors,
            anchor_fraction: 1.0,
            normalize: true,
        }
    }

    pub fn supcon(temperature: f64) -> Self {
        LossKind::Supcon {
            temperature,
            include_self_in_denominator: true,
            normalize: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "finetune",
            LossKind::ConFt { .. } => "conft",
            LossKind::Supcon { .. } => "supcon",
        }
    }

    pub fn is_contrastive(&self) -> bool {
        !matches!(self, LossKind::CrossEntropy)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::CrossEntropy => Ok(()),
            LossKind::ConFt {
                temperature,
                n_distractors,
                anchor_fraction,
                ..
            } => {
                check_temperature(temperature)?;
                if n_distractors == 0 {
                    return Err(Error::contract("ConFT needs at least one distractor"));
                }
                if !(anchor_fraction > 0.0 && anchor_fraction <= 1.0) {
                    return Err(Error::contract("anchor_fraction must be in (0, 1]"));
                }
                Ok(())
            }
            LossKind::Supcon { temperature, .. } => check_temperature(temperature),
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("temperature must be > 0, got {t}")))
    }
}

fn check_labels(labels: &[usize], rows: usize, n_classes: Option<usize>) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::contract(format!(
            "{} labels for {rows} feature rows",
            labels.len()
        )));
    }
    if let Some(n) = n_classes {
        if let Some(bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::contract(format!("label {bad} outside [0, {n})")));
        }
    }
    Ok(())
}

fn rows_of(tape: &Tape, v: Var) -> Result<usize> {
    match tape.shape(v) {
        [r, _] => Ok(*r),
        s => Err(Error::dim("loss features", s, &[0, 0])),
    }
}

/// Mean cross-entropy of `head(features)` against `labels`.
pub fn cross_entropy_loss(tape: &mut Tape, head: (Var, Var), features: Var, labels: &[usize]) -> Result<Var> {
    let logits = tape.linear(features, head.0, head.1)?;
    cross_entropy_from_logits(tape, logits, labels)
}

pub fn cross_entropy_from_logits(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = match tape.shape(logits) {
        [n, c] => (*n, *c),
        s => return Err(Error::dim("cross_entropy", s, &[0, 0])),
    };
    check_labels(labels, n, Some(c))?;
    let rows: Vec<usize> = (0..n).collect();
    let lse = tape.masked_logsumexp(logits, &rows, &vec![true; n * c])?;
    let picked_idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let picked = tape.gather(logits, &picked_idx)?;
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll)
}

fn maybe_normalize(tape: &mut Tape, v: Var, normalize: bool) -> Result<Var> {
    if normalize {
        tape.l2_normalize(v)
    } else {
        Ok(v)
    }
}

fn positives(labels: &[usize], i: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&p| p != i && labels[p] == labels[i])
        .collect()
}

/// Supervised contrastive loss over one labelled batch.
pub fn supcon_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    temperature: f64,
    include_self_in_denominator: bool,
    normalize: bool,
) -> Result<Var> {
    check_temperature(temperature)?;
    let n = rows_of(tape, features)?;
    check_labels(labels, n, None)?;
    let pos: Vec<Vec<usize>> = (0..n).map(|i| positives(labels, i)).collect();
    if let Some(i) = pos.iter().position(Vec::is_empty) {
        return Err(Error::DegenerateEpisode(format!(
            "anchor {i} has no positive; use at least two augmented views per sample"
        )));
    }
    let z = maybe_normalize(tape, features, normalize)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;

    let mut pairs = Vec::new();
    let mut coef = Vec::new();
    for (i, p_i) in pos.iter().enumerate() {
        for &p in p_i {
            pairs.push(i * n + p);
            coef.push(1.0 / (n as f64 * p_i.len() as f64));
        }
    }
    let mut mask = vec![true; n * n];
    if !include_self_in_denominator {
        (0..n).for_each(|i| mask[i * n + i] = false);
    }
    let rows: Vec<usize> = (0..n).collect();
    let lse = tape.masked_logsumexp(sim, &rows, &mask)?;
    let lse_mean = tape.mean(lse)?;
    let picked = tape.gather(sim, &pairs)?;
    let coef = tape.constant(Tensor::vector(coef)?);
    let weighted = tape.mul(picked, coef)?;
    let attraction = tape.sum(weighted)?;
    tape.sub(lse_mean, attraction)
}

/// ConFT loss: support anchors contrasted against different-label support
/// samples and unlabelled distractors.
pub fn conft_loss(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    anchors: &[usize],
    distractors: Option<Var>,
    temperature: f64,
    normalize: bool,
) -> Result<Var> {
    check_temperature(temperature)?;
    let distractors = distractors.ok_or_else(|| Error::contract("ConFT needs a distractor set"))?;
    let n = rows_of(tape, support)?;
    let n_dist = rows_of(tape, distractors)?;
    check_labels(labels, n, None)?;
    if anchors.is_empty() || anchors.iter().any(|&a| a >= n) {
        return Err(Error::contract("anchor subset must be non-empty and within the support set"));
    }
    let zs = maybe_normalize(tape, support, normalize)?;
    let zd = maybe_normalize(tape, distractors, normalize)?;
    let all = tape.concat_rows(&[zs, zd])?;
    let all_t = tape.transpose(all)?;
    let sim = tape.matmul(zs, all_t)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;
    let width = n + n_dist;

    let mut rows = Vec::new();
    let mut picks = Vec::new();
    let mut mask = Vec::new();
    let mut coef = Vec::new();
    for &i in anchors {
        let p_i = positives(labels, i);
        if p_i.is_empty() {
            return Err(Error::DegenerateEpisode(format!(
                "ConFT anchor {i} has no positive; use at least two augmented views per sample"
            )));
        }
        for &p in &p_i {
            rows.push(i);
            picks.push(i * width + p);
            mask.extend((0..width).map(|j| j == p || j >= n || labels[j] != labels[i]));
            coef.push(1.0 / (anchors.len() as f64 * p_i.len() as f64));
        }
    }
    let lse = tape.masked_logsumexp(sim, &rows, &mask)?;
    let picked = tape.gather(sim, &picks)?;
    let neg_log = tape.sub(lse, picked)?;
    let coef = tape.constant(Tensor::vector(coef)?);
    let weighted = tape.mul(neg_log, coef)?;
    tape.sum(weighted)
}
