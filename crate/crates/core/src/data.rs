//! Synthetic source/target domains and few-shot samplers.
//!
//! Classes are Gaussians whose means live in a low-dimensional "semantic"
//! subspace of the input space; the orthogonal complement carries larger
//! nuisance noise. A pretrained encoder learns to suppress the nuisance
//! directions, which is the transferable knowledge the target tasks need.
//!
//! Target domains apply a seeded transform `y = D·R_s·x + s·β` plus extra
//! noise, where `R_s = exp(s·A)` for a fixed skew-symmetric `A` and
//! `D = diag(1 + s·u)`, `u ∈ [-1, 1]`. At `s = 0` the transform is exactly
//! the identity.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};
use crate::tensor::{kernels, Tensor};

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub const DATA_MAGIC: &str = "ASCDATA";
pub const DATA_VERSION: &str = "v1";

/// Shape of the class-conditional generative family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorParams {
    pub input_dim: usize,
    /// Dimension of the subspace holding class means.
    pub semantic_dim: usize,
    /// Std of class-mean coordinates inside the semantic subspace.
    pub mean_scale: f64,
    pub signal_noise: f64,
    pub nuisance_noise: f64,
    /// Class means cluster around this many family centres.
    pub families: usize,
    /// Std of family-centre coordinates inside the semantic subspace.
    pub family_scale: f64,
    /// Offset between consecutive families' semantic subspaces, in basis
    /// columns; 0 shares one subspace, `semantic_dim` makes them disjoint.
    pub family_stride: usize,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            input_dim: 32,
            semantic_dim: 8,
            mean_scale: 1.0,
            signal_noise: 0.6,
            nuisance_noise: 1.0,
            families: 1,
            family_scale: 0.0,
            family_stride: 0,
        }
    }
}

/// Magnitudes of the domain transform per unit of shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftParams {
    /// Frobenius-scale of the rotation generator at `s = 1`.
    pub rotation: f64,
    pub bias: f64,
    pub noise: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            rotation: 1.5,
            bias: 0.5,
            noise: 0.3,
        }
    }
}

/// A seeded class prior shared by the source and every target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    params: PriorParams,
    /// Orthonormal basis, row-major `[d × d]`; column `j` is basis vector `j`.
    basis: Vec<f64>,
    /// Family centres in semantic coordinates.
    centers: Vec<Vec<f64>>,
}

impl ClassPrior {
    pub fn new(seed: u64, params: PriorParams) -> Result<Self> {
        let d = params.input_dim;
        if d == 0 || params.semantic_dim == 0 || params.semantic_dim > d {
            return Err(Error::contract(format!(
                "semantic_dim {} must be in 1..={d}",
                params.semantic_dim
            )));
        }
        if params.families == 0 {
            return Err(Error::contract("a prior needs at least one family"));
        }
        let mut rng = rng::stream(seed, Purpose::Prior, &[]);
        let basis = random_orthogonal(d, &mut rng);
        let centers = (0..params.families)
            .map(|_| {
                (0..params.semantic_dim)
                    .map(|_| params.family_scale * normal(&mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { params, basis, centers })
    }

    pub fn families(&self) -> usize {
        self.params.families
    }

    pub fn params(&self) -> &PriorParams {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim
    }

    /// Basis columns spanning family `f`'s semantic subspace, wrapping
    /// around the basis.
    fn semantic_columns(&self, family: usize) -> impl Iterator<Item = usize> + '_ {
        let (d, k) = (self.params.input_dim, self.params.semantic_dim);
        let start = family * self.params.family_stride;
        (0..k).map(move |j| (start + j) % d)
    }

    fn draw_mean(&self, family: usize, rng: &mut Rng) -> Vec<f64> {
        let d = self.params.input_dim;
        let mut coords = vec![0.0; d];
        for (col, c) in self.semantic_columns(family).zip(&self.centers[family]) {
            coords[col] = c + self.params.mean_scale * normal(rng);
        }
        self.embed(&coords)
    }

    fn draw_sample(&self, mean: &[f64], family: usize, rng: &mut Rng) -> Vec<f64> {
        let d = self.params.input_dim;
        let mut sd = vec![self.params.nuisance_noise; d];
        for col in self.semantic_columns(family) {
            sd[col] = self.params.signal_noise;
        }
        let coords: Vec<f64> = sd.iter().map(|s| s * normal(rng)).collect();
        self.embed(&coords)
            .into_iter()
            .zip(mean)
            .map(|(x, m)| x + m)
            .collect()
    }

    fn embed(&self, coords: &[f64]) -> Vec<f64> {
        let d = self.params.input_dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.basis[i * d + j] * coords[j]).sum())
            .collect()
    }
}

/// Gram–Schmidt on a Gaussian matrix; columns are orthonormal.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    let mut out = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            out[i * d + j] = c[i];
        }
    }
    out
}

/// `exp(m)` for a square row-major matrix by scaling and squaring.
fn matrix_exp(m: &[f64], d: usize) -> Vec<f64> {
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let a: Vec<f64> = m.iter().map(|v| v * scale).collect();
    let mut result = identity(d);
    let mut term = identity(d);
    for k in 1..=24 {
        term = kernels::matmul(d, d, d, &term, &a);
        term.iter_mut().for_each(|v| *v /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = kernels::matmul(d, d, d, &result, &result);
    }
    result
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    (0..d).for_each(|i| m[i * d + i] = 1.0);
    m
}

/// Seeded affine domain transform with a single shift knob `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    dim: usize,
    shift: f64,
    rotation: Vec<f64>,
    scales: Vec<f64>,
    bias: Vec<f64>,
    noise_std: f64,
}

impl DomainTransform {
    pub fn new(seed: u64, dim: usize, shift: f64, params: ShiftParams) -> Result<Self> {
        if !(shift.is_finite() && shift >= 0.0) {
            return Err(Error::contract(format!("shift magnitude must be ≥ 0, got {shift}")));
        }
        let mut rng = rng::stream(seed, Purpose::DomainTransform, &[]);
        // skew generator with Frobenius norm ≈ params.rotation
        let mut gen = vec![0.0; dim * dim];
        let sd = params.rotation / (dim as f64).sqrt();
        for i in 0..dim {
            for j in (i + 1)..dim {
                let v: f64 = sd * normal(&mut rng);
                gen[i * dim + j] = v * shift;
                gen[j * dim + i] = -v * shift;
            }
        }
        let rotation = if shift == 0.0 { identity(dim) } else { matrix_exp(&gen, dim) };
        let scales = (0..dim)
            .map(|_| 1.0 + shift * rng.gen_range(-1.0..=1.0))
            .collect();
        let bias = (0..dim)
            .map(|_| shift * params.bias * normal(&mut rng))
            .collect();
        Ok(Self {
            dim,
            shift,
            rotation,
            scales,
            bias,
            noise_std: shift * params.noise,
        })
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn rotation(&self) -> &[f64] {
        &self.rotation
    }

    /// Deterministic part `D·R·x + bias`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let r: f64 = (0..d).map(|j| self.rotation[i * d + j] * x[j]).sum();
                self.scales[i] * r + self.bias[i]
            })
            .collect()
    }

    /// Inverse of [`apply`](Self::apply): `Rᵀ·D⁻¹·(y − bias)`.
    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|i| (y[i] - self.bias[i]) / self.scales[i]).collect();
        (0..d)
            .map(|j| (0..d).map(|i| self.rotation[i * d + j] * z[i]).sum())
            .collect()
    }
}

/// Labelled samples from one domain, stored class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    per_class: usize,
    domain_tag: String,
    shift_magnitude: f64,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        domain_tag: impl Into<String>,
        shift_magnitude: f64,
    ) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if labels.len() != n {
            return Err(Error::contract("label count differs from sample count"));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &c) in labels.iter().enumerate() {
            class_index
                .get_mut(c)
                .ok_or_else(|| Error::contract(format!("class id {c} ≥ {num_classes}")))?
                .push(i);
        }
        let per_class = class_index.first().map(Vec::len).unwrap_or(0);
        if class_index.iter().any(|c| c.len() != per_class || c.is_empty()) {
            return Err(Error::contract("every class needs the same positive sample count"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            per_class,
            domain_tag: domain_tag.into(),
            shift_magnitude,
            class_index,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn shift_magnitude(&self) -> f64 {
        self.shift_magnitude
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    /// Writes the `ASCDATA v1` text format.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{DATA_MAGIC} {DATA_VERSION} {} {} {} {}",
            self.num_classes,
            self.per_class,
            self.input_dim(),
            self.shift_magnitude
        )?;
        for (row, label) in self.inputs.rows().zip(&self.labels) {
            write!(w, "{label}")?;
            for v in row {
                write!(w, " {v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads the `ASCDATA v1` text format.
    pub fn read_from<R: BufRead>(r: R, domain_tag: &str) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))?
            .map_err(|e| Error::Format(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != DATA_MAGIC || fields[1] != DATA_VERSION {
            return Err(Error::Format(format!("bad dataset header: {header:?}")));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let (num_classes, per_class, dim) = (num(fields[2])?, num(fields[3])?, num(fields[4])?);
        let shift: f64 = fields[5]
            .parse()
            .map_err(|_| Error::Format(format!("bad shift {:?}", fields[5])))?;
        let mut data = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let label = num(parts.next().unwrap_or_default())?;
            let before = data.len();
            for p in parts {
                data.push(p.parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: bad real {p:?}", lineno + 2))
                })?);
            }
            if data.len() - before != dim {
                return Err(Error::Format(format!(
                    "line {}: expected {dim} values",
                    lineno + 2
                )));
            }
            labels.push(label);
        }
        if labels.len() != num_classes * per_class {
            return Err(Error::Format(format!(
                "expected {} samples, found {}",
                num_classes * per_class,
                labels.len()
            )));
        }
        let ds = Dataset::new(
            Tensor::matrix(labels.len(), dim, data)?,
            labels,
            num_classes,
            domain_tag,
            shift,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        if ds.per_class != per_class {
            return Err(Error::Format("per-class count disagrees with header".into()));
        }
        Ok(ds)
    }
}

fn generate(
    prior: &ClassPrior,
    seed: u64,
    num_classes: usize,
    per_class: usize,
    family_of: impl Fn(usize) -> usize,
    mut post: impl FnMut(Vec<f64>, &mut Rng) -> Vec<f64>,
) -> Result<(Tensor, Vec<usize>)> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::contract("class and sample counts must be positive"));
    }
    let mut mean_rng = rng::stream(seed, Purpose::ClassMeans, &[]);
    let mut noise_rng = rng::stream(seed, Purpose::SampleNoise, &[]);
    let mut shift_rng = rng::stream(seed, Purpose::ShiftNoise, &[]);
    let d = prior.input_dim();
    let mut data = Vec::with_capacity(num_classes * per_class * d);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let family = family_of(c);
        let mean = prior.draw_mean(family, &mut mean_rng);
        for _ in 0..per_class {
            let x = prior.draw_sample(&mean, family, &mut noise_rng);
            data.extend(post(x, &mut shift_rng));
            labels.push(c);
        }
    }
    Ok((Tensor::matrix(labels.len(), d, data)?, labels))
}

/// Source domain: untransformed draws from the prior.
pub fn generate_source(
    prior: &ClassPrior,
    seed: u64,
    num_classes: usize,
    per_class: usize,
) -> Result<Dataset> {
    let families = prior.families();
    let (inputs, labels) = generate(prior, seed, num_classes, per_class, |c| c % families, |x, _| x)?;
    Dataset::new(inputs, labels, num_classes, "source", 0.0)
}

/// Target domain: fresh class means from `prior`, then the seeded domain
/// transform at `shift_magnitude` plus inflated noise.
///
/// With `family = Some(f)` every class is drawn around family centre `f`;
/// otherwise classes cycle through the families like the source does.
#[allow(clippy::too_many_arguments)]
pub fn generate_target(
    prior: &ClassPrior,
    seed: u64,
    num_classes: usize,
    per_class: usize,
    shift_magnitude: f64,
    shift_params: ShiftParams,
    family: Option<usize>,
    domain_tag: &str,
) -> Result<Dataset> {
    let families = prior.families();
    if let Some(f) = family.filter(|&f| f >= families) {
        return Err(Error::contract(format!("family {f} outside 0..{families}")));
    }
    let transform = DomainTransform::new(seed, prior.input_dim(), shift_magnitude, shift_params)?;
    let sd = transform.noise_std();
    let family_of = |c: usize| family.unwrap_or(c % families);
    let (inputs, labels) = generate(prior, seed, num_classes, per_class, family_of, |x, rng| {
        let mut y = transform.apply(&x);
        for v in y.iter_mut() {
            *v += sd * normal(rng);
        }
        y
    })?;
    Dataset::new(inputs, labels, num_classes, domain_tag, shift_magnitude)
}

/// One N-way K-shot task with labels re-indexed to `0..n_way`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    /// Original class id of each new label.
    pub classes: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    /// Shift magnitude of the domain the episode was drawn from.
    pub domain_shift: f64,
}

pub fn sample_episode(ds: &Dataset, seed: u64, n_way: usize, k_shot: usize, queries: usize) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || queries == 0 {
        return Err(Error::contract("N, K and Q must be positive"));
    }
    if ds.num_classes() < n_way {
        return Err(Error::Capacity(format!(
            "{n_way}-way episode from {} classes",
            ds.num_classes()
        )));
    }
    if ds.per_class() < k_shot + queries {
        return Err(Error::Capacity(format!(
            "{} samples per class cannot cover K+Q = {}",
            ds.per_class(),
            k_shot + queries
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Episode, &[]);
    let classes: Vec<usize> = index::sample(&mut rng, ds.num_classes(), n_way).into_vec();
    let mut support_indices = Vec::with_capacity(n_way * k_shot);
    let mut query_indices = Vec::with_capacity(n_way * queries);
    let mut support_labels = Vec::with_capacity(n_way * k_shot);
    let mut query_labels = Vec::with_capacity(n_way * queries);
    for (label, &c) in classes.iter().enumerate() {
        let pool = ds.class_indices(c);
        let picks = index::sample(&mut rng, pool.len(), k_shot + queries);
        for (t, p) in picks.iter().enumerate() {
            if t < k_shot {
                support_indices.push(pool[p]);
                support_labels.push(label);
            } else {
                query_indices.push(pool[p]);
                query_labels.push(label);
            }
        }
    }
    Ok(Episode {
        support: ds.inputs().select_rows(&support_indices)?,
        support_labels,
        query: ds.inputs().select_rows(&query_indices)?,
        query_labels,
        n_way,
        k_shot,
        queries_per_class: queries,
        classes,
        support_indices,
        query_indices,
        domain_shift: ds.shift_magnitude(),
    })
}

/// Unlabelled source rows for one finetuning epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
}

impl SourceBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn sample_source_batch(ds: &Dataset, seed: u64, batch: usize) -> Result<SourceBatch> {
    let pool: Vec<usize> = (0..ds.len()).collect();
    sample_source_batch_from(ds, &pool, seed, batch)
}

/// Samples `batch` distinct rows from `pool` (indices into `ds`).
pub fn sample_source_batch_from(ds: &Dataset, pool: &[usize], seed: u64, batch: usize) -> Result<SourceBatch> {
    if batch == 0 {
        return Err(Error::contract("source batch size must be positive"));
    }
    if batch > pool.len() {
        return Err(Error::Capacity(format!(
            "source batch of {batch} from {} samples",
            pool.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::SourceBatch, &[]);
    let indices: Vec<usize> = index::sample(&mut rng, pool.len(), batch)
        .iter()
        .map(|i| pool[i])
        .collect();
    Ok(SourceBatch {
        inputs: ds.inputs().select_rows(&indices)?,
        indices,
    })
}

/// Default augmentation jitter for a domain of shift `s`.
pub fn augmentation_sigma(shift: f64) -> f64 {
    0.05 * shift + 0.02
}

/// Gaussian jitter, the vector-space stand-in for image augmentation.
pub fn jitter(x: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += sigma * normal(rng);
    }
    out
}
