//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as part of `cargo test`; the benchmark criterion dominates the
//! runtime (a few minutes on one core).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use asc_cli::commands::{self, Cell, World};
use asc_cli::config::{ExperimentConfig, MethodName};
use asc_cli::{checkpoint, report};
use asc_core::asc::{adaptive_weights, RegularizationInputs, RegularizedBlock};
use asc_core::data::{self, Dataset};
use asc_core::eval::mean_ci95;
use asc_core::losses::{conft_loss, supcon_loss};
use asc_core::train::{self, FinetuneContext};
use asc_core::{Encoder, LinearHead, Tape, Tensor};
use common::*;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut cases = 0;
    for seed in 0..100 {
        for case in gradient_cases(seed) {
            let err = gradient_error(&case.inputs, &case.build);
            if err.is_nan() || err > worst.0 {
                worst = (err, case.name);
            }
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-4 && secs < 30.0,
        format!("{cases} checks over 100 seeds, worst {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn weight_law() -> Outcome {
    let mut r = rng(7);
    let mut worst_sum = 0.0f64;
    let mut antitone = true;
    for _ in 0..1000 {
        let b = r.gen_range(1..=256);
        let scale = 10f64.powf(r.gen_range(-2.0..2.0));
        let d: Vec<f64> = (0..b).map(|_| r.gen_range(0.0..scale)).collect();
        let w = adaptive_weights(&d, true);
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - b as f64).abs());
        for i in 0..b {
            for j in 0..b {
                if d[i] < d[j] && w[i] < w[j] {
                    antitone = false;
                }
            }
        }
    }
    let equal = (1..=64).all(|b| adaptive_weights(&vec![3.7; b], true).iter().all(|&w| w == 1.0));
    let hand = adaptive_weights(&[0.0, 1.0], true);
    let hand_ok = (hand[0] - 1.46212).abs() <= 1e-5 && (hand[1] - 0.53788).abs() <= 1e-5;
    outcome(
        worst_sum <= 1e-9 && antitone && equal && hand_ok,
        format!(
            "max |Σw-B| {worst_sum:.1e}, antitone {antitone}, equal→1 {equal}, hand [{:.5}, {:.5}]",
            hand[0], hand[1]
        ),
    )
}

fn snapshot(enc: &Encoder, head: Option<&LinearHead>) -> Vec<u64> {
    let mut bits: Vec<u64> = enc.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect();
    if let Some(h) = head {
        bits.extend(h.weight.data().iter().chain(h.bias.data()).map(|v| v.to_bits()));
    }
    bits
}

fn zero_lambda(cfg: &ExperimentConfig, world: &World, encoder: &Encoder) -> Outcome {
    let ctx = FinetuneContext::new(encoder, &world.source);
    let mut details = Vec::new();
    let mut pass = true;
    for method in &cfg.methods {
        let mut asc = cfg.asc_for(method);
        asc.lambda = 0.0;
        let base = cfg.finetune_config(method, None).unwrap();
        let with = cfg.finetune_config(method, Some(asc)).unwrap();
        let mut identical = base.epochs == 30;
        for (i, k) in [(0u64, 1usize), (1, 5)] {
            let ep = data::sample_episode(&world.targets[i as usize], 100 + i, 5, k, 15).unwrap();
            let mut a = Vec::new();
            let mut b = Vec::new();
            train::finetune_episode_observed(&ctx, &ep, &base, 9 + i, |_, e, h| a.push(snapshot(e, h))).unwrap();
            train::finetune_episode_observed(&ctx, &ep, &with, 9 + i, |_, e, h| b.push(snapshot(e, h))).unwrap();
            identical &= a.len() == 30 && a == b;
        }
        pass &= identical;
        details.push(format!("{:?} {}", method.name, if identical { "identical" } else { "DIFFERS" }));
    }
    outcome(pass, format!("30 epochs: {}", details.join(", ")))
}

fn loss_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let (f, labels, d, anchors, tau) = loss_instance(seed);
        for include_self in [true, false] {
            for normalize in [true, false] {
                let mut tape = Tape::new();
                let v = tape.constant(f.clone());
                let l = supcon_loss(&mut tape, v, &labels, tau, include_self, normalize).unwrap();
                let want = brute_supcon(&rows_of(&f), &labels, tau, include_self, normalize);
                worst = worst.max((tape.value(l).item().unwrap() - want).abs() / want.abs().max(1.0));
            }
        }
        for normalize in [true, false] {
            let mut tape = Tape::new();
            let v = tape.constant(f.clone());
            let dv = tape.constant(d.clone());
            let l = conft_loss(&mut tape, v, &labels, &anchors, Some(dv), tau, normalize).unwrap();
            let want = brute_conft(&rows_of(&f), &labels, &anchors, &rows_of(&d), tau, normalize);
            worst = worst.max((tape.value(l).item().unwrap() - want).abs() / want.abs().max(1.0));
        }
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let l = supcon_loss(&mut tape, v, &[0, 0], 1.0, true, true).unwrap();
    let ln2 = (tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs();
    outcome(
        worst <= 1e-9 && ln2 <= 1e-9,
        format!("200 instances, worst error {worst:.1e}; ln 2 case off by {ln2:.1e}"),
    )
}

/// Mean over `episodes` of the per-block parameter change.
fn block_change(
    cfg: &ExperimentConfig,
    world: &World,
    encoder: &Encoder,
    asc: Option<asc_core::AscConfig>,
    episodes: usize,
) -> Vec<f64> {
    let method = cfg.method(MethodName::Supcon).unwrap();
    let ft = cfg.finetune_config(method, asc).unwrap();
    let ctx = FinetuneContext::new(encoder, &world.source);
    let mut total = vec![0.0; encoder.num_blocks()];
    for i in 0..episodes as u64 {
        let ep = data::sample_episode(&world.targets[2], 500 + i, 5, 5, 15).unwrap();
        let out = train::finetune_episode(&ctx, &ep, &ft, 700 + i).unwrap();
        total.iter_mut().zip(&out.diagnostics.block_change).for_each(|(t, c)| *t += c);
    }
    total.iter_mut().for_each(|t| *t /= episodes as f64);
    total
}

fn monotone_in_lambda(cfg: &ExperimentConfig, world: &World, encoder: &Encoder) -> Outcome {
    let totals: Vec<f64> = [0.0, 1.0, 10.0, 100.0]
        .iter()
        .map(|&l| {
            let mut a = cfg.asc_config();
            a.lambda = l;
            block_change(cfg, world, encoder, Some(a), 20).iter().sum()
        })
        .collect();
    let pass = totals.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = totals.iter().map(|t| format!("{t:.3e}")).collect();
    outcome(pass, format!("total change at λ = 0, 1, 10, 100: {}", shown.join(" > ")))
}

fn block_regularization(cfg: &ExperimentConfig, world: &World, encoder: &Encoder) -> Outcome {
    let with = |f: &dyn Fn(&mut asc_core::AscConfig)| {
        let mut a = cfg.asc_config();
        f(&mut a);
        block_change(cfg, world, encoder, Some(a), 20)
    };
    let semantic = with(&|a| a.regularized_block = RegularizedBlock::Semantic);
    let mut pass = true;
    let mut details = Vec::new();
    for b in 1..=3 {
        let run = with(&|a| a.regularized_block = RegularizedBlock::Block(b));
        let ratios: Vec<f64> = (0..b).map(|j| run[j] / semantic[j]).collect();
        let worst = ratios.iter().cloned().fold(0.0, f64::max);
        pass &= worst <= 0.25;
        details.push(format!("block {b}: worst ratio {worst:.3}"));
    }
    let source: f64 = semantic.iter().sum();
    let target: f64 = with(&|a| a.inputs = RegularizationInputs::Target).iter().sum();
    pass &= target < source;
    details.push(format!("target-input total {target:.3e} vs source-input {source:.3e}"));
    outcome(pass, details.join("; "))
}

struct Benchmark {
    base: Vec<report::ResultRow>,
    on: Vec<report::ResultRow>,
    uniform: Vec<report::ResultRow>,
    reports: Vec<asc_core::EvalReport>,
    seconds: f64,
    checksum_before: String,
    checksum_after: String,
}

fn benchmark(cfg: &ExperimentConfig, world: &World, encoder: &Encoder, pretrain_secs: f64) -> Benchmark {
    let start = Instant::now();
    let checksum_before = encoder.checksum();
    let method = cfg.method(MethodName::Supcon).unwrap();
    let mut bench = Benchmark {
        base: Vec::new(),
        on: Vec::new(),
        uniform: Vec::new(),
        reports: Vec::new(),
        seconds: 0.0,
        checksum_before,
        checksum_after: String::new(),
    };
    for domain in 0..world.targets.len() {
        for (variant, asc) in [
            ("off", None),
            ("on", Some(cfg.asc_for(method))),
            ("uniform", Some(asc_core::AscConfig { weights_enabled: false, ..cfg.asc_for(method) })),
        ] {
            let cell = Cell {
                method,
                variant,
                asc,
                domain,
                k_shot: 5,
            };
            let (row, rep) = commands::run_cell(cfg, world, encoder, &cell, 1).unwrap();
            eprintln!("  {} {} {}: {:.4} ± {:.4}", row.method, row.asc, row.domain, row.mean_acc, row.ci95);
            match variant {
                "off" => bench.base.push(row),
                "on" => bench.on.push(row),
                _ => bench.uniform.push(row),
            }
            bench.reports.push(rep);
        }
    }
    bench.seconds = pretrain_secs + start.elapsed().as_secs_f64();
    bench.checksum_after = encoder.checksum();
    bench
}

fn frozen_source(bench: &Benchmark) -> Outcome {
    let intact = bench.reports.iter().all(|r| r.source_intact && r.episodes == 600);
    outcome(
        intact && bench.checksum_before == bench.checksum_after,
        format!(
            "checksum {}… before and {}… after {} evaluations of 600 episodes",
            &bench.checksum_before[..12],
            &bench.checksum_after[..12],
            bench.reports.len()
        ),
    )
}

fn directional(bench: &Benchmark) -> Outcome {
    let wins = |a: &[report::ResultRow], b: &[report::ResultRow]| {
        a.iter().zip(b).filter(|(x, y)| x.mean_acc >= y.mean_acc).count()
    };
    let asc_wins = wins(&bench.on, &bench.base);
    let weight_wins = wins(&bench.on, &bench.uniform);
    let cells: Vec<String> = (0..bench.base.len())
        .map(|i| {
            format!(
                "{} {:.4}/{:.4}/{:.4}",
                bench.base[i].domain, bench.base[i].mean_acc, bench.on[i].mean_acc, bench.uniform[i].mean_acc
            )
        })
        .collect();
    outcome(
        asc_wins >= 3 && weight_wins >= 3 && bench.seconds < 600.0,
        format!(
            "ASC ≥ baseline on {asc_wins}/4, weights ≥ uniform on {weight_wins}/4, {:.0}s [base/asc/uniform: {}]",
            bench.seconds,
            cells.join(", ")
        ),
    )
}

fn statistics(bench: &Benchmark) -> Outcome {
    let worst = bench
        .reports
        .iter()
        .map(|r| {
            let (m, h) = mean_ci95(&r.accuracies).unwrap();
            let t = r.accuracies.len() as f64;
            let mean = r.accuracies.iter().sum::<f64>() / t;
            let sd = (r.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (t - 1.0)).sqrt();
            (m - r.mean_accuracy).abs().max((h - r.ci95).abs()).max((1.96 * sd / t.sqrt() - r.ci95).abs())
        })
        .fold(0.0, f64::max);
    let constant = mean_ci95(&vec![0.6; 600]).unwrap().1;
    outcome(
        worst <= 1e-12 && constant == 0.0,
        format!("worst recompute gap {worst:.1e} over {} cells; constant ci95 {constant}", bench.reports.len()),
    )
}

fn drop_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn run_asc(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_asc"))
        .args(args)
        .env("ASC_LOG", "quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn persistence(cfg: &ExperimentConfig, world: &World, encoder: &Encoder, dir: &Path) -> Outcome {
    let mut notes = Vec::new();
    let cfg_path = dir.join("desk.toml");
    std::fs::write(&cfg_path, cfg.render().unwrap()).unwrap();
    let config_ok = ExperimentConfig::load(&cfg_path).unwrap() == *cfg;
    notes.push(format!("config {config_ok}"));

    let mut dataset_ok = true;
    for ds in std::iter::once(&world.source).chain(&world.targets) {
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice(), ds.domain_tag()).unwrap();
        let bits = |d: &Dataset| d.inputs().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        dataset_ok &= back.labels() == ds.labels() && bits(&back) == bits(ds) && back == *ds;
    }
    notes.push(format!("datasets {dataset_ok}"));

    let ckpt = dir.join("enc.ckpt");
    checkpoint::save(encoder, &ckpt).unwrap();
    let loaded = checkpoint::load(&ckpt).unwrap();
    let probe = world.targets[0].inputs();
    let ckpt_ok = loaded.checksum() == encoder.checksum()
        && loaded.infer(probe).unwrap().data().iter().map(|v| v.to_bits()).eq(encoder
            .infer(probe)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits()));
    notes.push(format!("checkpoint {ckpt_ok}"));

    let cli_ckpt = dir.join("cli.ckpt");
    let cfg_s = cfg_path.to_str().unwrap();
    let cli_pretrain_ok = run_asc(&["pretrain", "--config", cfg_s, "--out", cli_ckpt.to_str().unwrap()])
        .map(|_| checkpoint::load(&cli_ckpt).unwrap().checksum() == encoder.checksum());
    notes.push(format!("cli pretrain reproduces {:?}", cli_pretrain_ok));

    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("eval_{run}.csv"));
        let res = run_asc(&[
            "evaluate",
            "--config",
            cfg_s,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--episodes",
            "3",
            "--jobs",
            if run == "a" { "1" } else { "2" },
        ]);
        csvs.push(res.map(|_| std::fs::read_to_string(&out).unwrap()));
    }
    let rerun_ok = match (&csvs[0], &csvs[1]) {
        (Ok(a), Ok(b)) => {
            let rows = a.lines().count() - 1;
            notes.push(format!("{rows} rows"));
            a.starts_with(report::HEADER) && drop_wall_time(a) == drop_wall_time(b) && rows == 48
        }
        (a, b) => {
            notes.push(format!("evaluate failed: {a:?} {b:?}"));
            false
        }
    };
    notes.push(format!("rerun identical {rerun_ok}"));
    outcome(
        config_ok && dataset_ok && ckpt_ok && cli_pretrain_ok == Ok(true) && rerun_ok,
        notes.join(", "),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let world = World::generate(&cfg).unwrap();
    let start = Instant::now();
    let pretrained = commands::pretrain(&cfg, &world).unwrap();
    let pretrain_secs = start.elapsed().as_secs_f64();
    let encoder = pretrained.encoder;
    eprintln!("pretrained in {pretrain_secs:.1}s, source accuracy {:.4}", pretrained.train_accuracy);

    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "weight law", weight_law()),
        (3, "zero-λ reduction", zero_lambda(&cfg, &world, &encoder)),
        (5, "loss oracles", loss_oracles()),
        (6, "λ monotonicity", monotone_in_lambda(&cfg, &world, &encoder)),
        (7, "block regularization", block_regularization(&cfg, &world, &encoder)),
    ];
    let bench = benchmark(&cfg, &world, &encoder, pretrain_secs);
    results.push((4, "frozen source", frozen_source(&bench)));
    results.push((8, "directional benchmark", directional(&bench)));
    results.push((9, "evaluation statistics", statistics(&bench)));
    results.push((10, "persistence", persistence(&cfg, &world, &encoder, dir.path())));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
