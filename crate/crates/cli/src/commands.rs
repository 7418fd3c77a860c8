//! The four subcommands, plus the in-memory pieces they are built from.

use std::path::Path;
use std::time::Instant;

use asc_core::asc::{RegularizationInputs, RegularizedBlock};
use asc_core::data::{self, ClassPrior, Dataset};
use asc_core::rng::{self, Purpose};
use asc_core::train::{self, Pretrained};
use asc_core::{AscConfig, Encoder, EvalConfig, EvalReport, LinearHead};

use crate::checkpoint;
use crate::config::{ExperimentConfig, MethodConfig};
use crate::error::{CliError, CliResult};
use crate::report::{self, ResultRow};

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub jobs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.episodes {
            cfg.episodes.count = t;
        }
    }

    fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }
}

pub fn load_config(path: &Path, ov: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Source and target datasets, all derived from the config seed.
#[derive(Clone, Debug)]
pub struct World {
    pub prior: ClassPrior,
    pub source: Dataset,
    pub targets: Vec<Dataset>,
}

impl World {
    pub fn generate(cfg: &ExperimentConfig) -> CliResult<Self> {
        let d = &cfg.data;
        let prior = ClassPrior::new(rng::derive(cfg.seed, &[1]), cfg.prior_params())?;
        let source = data::generate_source(&prior, rng::derive(cfg.seed, &[2]), d.source_classes, d.source_per_class)?;
        let targets = d
            .domains
            .iter()
            .enumerate()
            .map(|(i, dom)| {
                data::generate_target(
                    &prior,
                    rng::derive(cfg.seed, &[3, i as u64]),
                    d.target_classes,
                    d.target_per_class,
                    dom.shift,
                    cfg.shift_params(),
                    dom.family,
                    &dom.tag,
                )
            })
            .collect::<asc_core::Result<_>>()?;
        Ok(Self { prior, source, targets })
    }
}

pub fn pretrain(cfg: &ExperimentConfig, world: &World) -> CliResult<Pretrained> {
    let encoder = Encoder::new(&cfg.encoder.dims, rng::derive(cfg.seed, &[4]))?;
    let mut head_rng = rng::stream(cfg.seed, Purpose::HeadInit, &[]);
    let head = LinearHead::new(world.source.num_classes(), encoder.feature_dim(), &mut head_rng)?;
    let out = train::pretrain(&world.source, encoder, head, &cfg.pretrain_config(), rng::derive(cfg.seed, &[5]))?;
    Ok(out)
}

/// Loads a checkpoint and checks it matches the configured architecture.
pub fn load_encoder(cfg: &ExperimentConfig, path: &Path) -> CliResult<Encoder> {
    let enc = checkpoint::load(path)?;
    if enc.dims() != cfg.encoder.dims {
        return Err(CliError::Usage(format!(
            "checkpoint dims {:?} do not match config dims {:?}",
            enc.dims(),
            cfg.encoder.dims
        )));
    }
    Ok(enc)
}

/// Episode seed shared by every method and variant evaluated on the same
/// (domain, shot) cell, so comparisons are paired.
pub fn cell_seed(cfg: &ExperimentConfig, domain: usize, k_shot: usize) -> u64 {
    rng::derive(cfg.seed, &[6, domain as u64, k_shot as u64])
}

/// One cell of an experiment grid.
#[derive(Clone, Debug)]
pub struct Cell<'a> {
    pub method: &'a MethodConfig,
    /// `off`, `on`, `uniform` or `target`; see [`ResultRow`].
    pub variant: &'static str,
    pub asc: Option<AscConfig>,
    pub domain: usize,
    pub k_shot: usize,
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    world: &World,
    encoder: &Encoder,
    cell: &Cell<'_>,
    jobs: usize,
) -> CliResult<(ResultRow, EvalReport)> {
    let target = &world.targets[cell.domain];
    let ft = cfg.finetune_config(cell.method, cell.asc.clone())?;
    let eval_cfg = EvalConfig {
        finetune: ft,
        n_way: cfg.episodes.n_way,
        k_shot: cell.k_shot,
        queries_per_class: cfg.episodes.queries,
        episodes: cfg.episodes.count,
        seed: cell_seed(cfg, cell.domain, cell.k_shot),
        jobs,
    };
    let start = Instant::now();
    let rep = asc_core::evaluate(encoder, &world.source, target, &eval_cfg)?;
    let wall = start.elapsed().as_secs_f64();
    if !rep.mean_accuracy.is_finite() {
        return Err(CliError::Numeric(format!("non-finite accuracy in {}", target.domain_tag())));
    }
    let asc = cell.asc.as_ref();
    let row = ResultRow {
        method: cell.method.loss()?.name().to_string(),
        asc: cell.variant.to_string(),
        domain: target.domain_tag().to_string(),
        shift: target.shift_magnitude(),
        n_way: eval_cfg.n_way,
        k_shot: cell.k_shot,
        episodes: rep.episodes,
        mean_acc: rep.mean_accuracy,
        ci95: rep.ci95,
        lambda: asc.map(|a| a.lambda),
        batch_b: asc.map(|a| a.batch_size),
        top_m: asc.map(|a| a.top_m.map_or_else(|| "all".to_string(), |m| m.to_string())),
        reg_block: asc.map(|a| a.regularized_block.to_string()),
        seed: cfg.seed,
        wall_time_s: wall,
    };
    log::info!(
        "{} {} {} {}-shot: {:.4} ± {:.4} ({:.1}s)",
        row.method,
        row.asc,
        row.domain,
        row.k_shot,
        row.mean_acc,
        row.ci95,
        wall
    );
    Ok((row, rep))
}

/// Every method × {off, on} × domain × shot.
pub fn evaluate_grid(cfg: &ExperimentConfig, world: &World, encoder: &Encoder, jobs: usize) -> CliResult<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for method in &cfg.methods {
        for &k in &cfg.episodes.shots {
            for (variant, asc) in [("off", None), ("on", Some(cfg.asc_for(method)))] {
                for domain in 0..world.targets.len() {
                    let cell = Cell {
                        method,
                        variant,
                        asc: asc.clone(),
                        domain,
                        k_shot: k,
                    };
                    rows.push(run_cell(cfg, world, encoder, &cell, jobs)?.0);
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Weights,
    Block,
    BatchSize,
    TopM,
    TargetReg,
}

impl Study {
    /// Whether the study also writes per-block parameter change.
    pub fn tracks_param_change(self) -> bool {
        matches!(self, Study::Block | Study::TargetReg)
    }

    /// The `(variant, config)` pairs swept by the study.
    pub fn variants(self, cfg: &ExperimentConfig) -> CliResult<Vec<(&'static str, AscConfig)>> {
        let base = cfg.asc_for(cfg.ablation_method()?);
        let with = |f: &dyn Fn(&mut AscConfig)| {
            let mut a = base.clone();
            f(&mut a);
            a
        };
        Ok(match self {
            Study::Weights => vec![
                ("on", with(&|a| a.weights_enabled = true)),
                ("uniform", with(&|a| a.weights_enabled = false)),
            ],
            Study::Block => {
                let nb = cfg.encoder.dims.len() - 1;
                (1..=nb)
                    .map(RegularizedBlock::Block)
                    .chain([RegularizedBlock::All, RegularizedBlock::Semantic])
                    .map(|b| ("on", with(&|a| a.regularized_block = b)))
                    .collect()
            }
            Study::BatchSize => cfg
                .ablation
                .batch_sizes
                .iter()
                .map(|&b| ("on", with(&|a| a.batch_size = b)))
                .collect(),
            Study::TopM => cfg
                .ablation
                .top_m
                .iter()
                .map(|&m| Some(m))
                .chain([None])
                .map(|m| ("on", with(&|a| a.top_m = m)))
                .collect(),
            Study::TargetReg => vec![
                ("on", with(&|a| a.inputs = RegularizationInputs::Source)),
                ("target", with(&|a| a.inputs = RegularizationInputs::Target)),
            ],
        })
    }
}

/// Result rows of a study, each with its mean per-block parameter change.
pub fn ablate(
    cfg: &ExperimentConfig,
    world: &World,
    encoder: &Encoder,
    study: Study,
    jobs: usize,
) -> CliResult<Vec<(ResultRow, Vec<f64>)>> {
    let method = cfg.ablation_method()?;
    let nb = encoder.num_blocks();
    let mut out = Vec::new();
    for domain in 0..world.targets.len() {
        for (variant, asc) in study.variants(cfg)? {
            asc.validate(nb, world.source.num_classes())?;
            let cell = Cell {
                method,
                variant,
                asc: Some(asc),
                domain,
                k_shot: cfg.ablation.shot,
            };
            let (row, rep) = run_cell(cfg, world, encoder, &cell, jobs)?;
            out.push((row, rep.mean_block_change));
        }
    }
    Ok(out)
}

pub fn cmd_pretrain(config: &Path, out: &Path, ov: &Overrides) -> CliResult<Pretrained> {
    let cfg = load_config(config, ov)?;
    let world = World::generate(&cfg)?;
    let start = Instant::now();
    let pre = pretrain(&cfg, &world)?;
    checkpoint::save(&pre.encoder, out)?;
    println!(
        "source train accuracy {:.4} after {} epochs ({:.1}s); checkpoint {}",
        pre.train_accuracy,
        cfg.pretrain.epochs,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(pre)
}

pub fn cmd_evaluate(config: &Path, ckpt: &Path, out: &Path, ov: &Overrides) -> CliResult<Vec<ResultRow>> {
    let cfg = load_config(config, ov)?;
    let encoder = load_encoder(&cfg, ckpt)?;
    let world = World::generate(&cfg)?;
    let rows = evaluate_grid(&cfg, &world, &encoder, ov.jobs())?;
    report::write_rows(&rows, out)?;
    Ok(rows)
}

/// Path of the parameter-change file written next to `out`.
pub fn param_change_path(out: &Path) -> std::path::PathBuf {
    let stem = out.file_stem().map_or_else(|| "ablation".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_param_change.csv"))
}

pub fn cmd_ablate(config: &Path, ckpt: &Path, study: Study, out: &Path, ov: &Overrides) -> CliResult<Vec<ResultRow>> {
    let cfg = load_config(config, ov)?;
    let encoder = load_encoder(&cfg, ckpt)?;
    let world = World::generate(&cfg)?;
    let results = ablate(&cfg, &world, &encoder, study, ov.jobs())?;
    let rows: Vec<ResultRow> = results.iter().map(|r| r.0.clone()).collect();
    report::write_rows(&rows, out)?;
    if study.tracks_param_change() {
        report::write_param_change(&results, &param_change_path(out))?;
    }
    Ok(rows)
}

pub fn cmd_report(paths: &[std::path::PathBuf]) -> CliResult<String> {
    if paths.is_empty() {
        return Err(CliError::Usage("report needs at least one CSV".into()));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(report::read_rows(p)?);
    }
    Ok(report::render_table(&report::build_table(&rows)))
}
