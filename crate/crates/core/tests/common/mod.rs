//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use asc_core::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Entries bounded away from zero, so ReLU kinks stay out of the
/// finite-difference stencil.
pub fn random_matrix_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Max relative error between reverse-mode gradients and central finite
/// differences of the scalar built by `build` over `inputs`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, (input, grad)) in inputs.iter().zip(&analytic).enumerate() {
        for (j, &a) in grad.iter().enumerate().take(input.numel()) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any tensor into a scalar with
/// non-trivial adjoints.
pub fn random_projection(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let coef = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let c = tape.constant(coef);
    let prod = tape.mul(out, c)?;
    tape.sum(prod)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loop-by-loop supervised contrastive loss.
pub fn brute_supcon(features: &[Vec<f64>], labels: &[usize], tau: f64, include_self: bool, normalize_features: bool) -> f64 {
    let z: Vec<Vec<f64>> = if normalize_features {
        features.iter().map(|f| normalize(f)).collect()
    } else {
        features.to_vec()
    };
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let denom: f64 = (0..n)
            .filter(|&j| include_self || j != i)
            .map(|j| (dot(&z[i], &z[j]) / tau).exp())
            .sum();
        let mut anchor = 0.0;
        for &p in &positives {
            anchor += -((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += anchor / positives.len() as f64;
    }
    total / n as f64
}

/// Loop-by-loop ConFT loss over the given anchors.
pub fn brute_conft(
    support: &[Vec<f64>],
    labels: &[usize],
    anchors: &[usize],
    distractors: &[Vec<f64>],
    tau: f64,
    normalize_features: bool,
) -> f64 {
    let prep = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
        if normalize_features {
            v.iter().map(|f| normalize(f)).collect()
        } else {
            v.to_vec()
        }
    };
    let z = prep(support);
    let d = prep(distractors);
    let mut total = 0.0;
    for &i in anchors {
        let positives: Vec<usize> = (0..z.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let negatives: f64 = (0..z.len())
            .filter(|&j| labels[j] != labels[i])
            .map(|j| (dot(&z[i], &z[j]) / tau).exp())
            .sum();
        let dist: f64 = d.iter().map(|x| (dot(&z[i], x) / tau).exp()).sum();
        let mut anchor = 0.0;
        for &p in &positives {
            let s = (dot(&z[i], &z[p]) / tau).exp();
            anchor += -(s / (s + negatives + dist)).ln();
        }
        total += anchor / positives.len() as f64;
    }
    total / anchors.len() as f64
}

/// Random loss inputs: features, labels with a partner for every sample,
/// distractors, anchors and a temperature.
pub fn loss_instance(seed: u64) -> (Tensor, Vec<usize>, Tensor, Vec<usize>, f64) {
    let mut r = rng(seed);
    let n = r.gen_range(2..=6);
    let dim = r.gen_range(2..6);
    let classes = r.gen_range(1..=n / 2);
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % classes).collect();
    // the odd sample out joins a random class so every label has a partner
    if n % 2 == 1 {
        labels[n - 1] = r.gen_range(0..classes);
    }
    let features = random_matrix_off_zero(&mut r, n, dim);
    let n_dist = r.gen_range(1..=4);
    let distractors = random_matrix_off_zero(&mut r, n_dist, dim);
    let anchors: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.7)).collect();
    let anchors = if anchors.is_empty() { vec![n - 1] } else { anchors };
    (features, labels, distractors, anchors, r.gen_range(0.05..1.0))
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One gradient-check instance: inputs plus the scalar-valued graph over them.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn labels_with_pairs(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    // every label appears at least twice
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % classes).collect();
    for i in (0..n).rev().skip(1) {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

/// Every tape op and every loss, instantiated from `seed`.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    use asc_core::asc::{self, RegularizedBlock};
    use asc_core::autodiff::Reduction;
    use asc_core::losses;

    let mut r = rng(seed);
    let m = r.gen_range(2..5);
    let k = r.gen_range(2..5);
    let n = r.gen_range(2..5);
    let mut cases = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<Tensor>, build: Build| cases.push(GradCase { name, inputs, build });

    case("matmul", vec![random_matrix(&mut r, m, k, 1.0), random_matrix(&mut r, k, n, 1.0)], Box::new(move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        random_projection(t, y, seed)
    }));
    case(
        "linear",
        vec![random_matrix(&mut r, m, k, 1.0), random_matrix(&mut r, n, k, 1.0), Tensor::vector((0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()],
        Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            random_projection(t, y, seed)
        }),
    );
    case("transpose", vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
        let y = t.transpose(v[0])?;
        random_projection(t, y, seed)
    }));
    case("relu", vec![random_matrix_off_zero(&mut r, m, n)], Box::new(move |t, v| {
        let y = t.relu(v[0])?;
        random_projection(t, y, seed)
    }));
    case("exp", vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
        let y = t.exp(v[0])?;
        random_projection(t, y, seed)
    }));
    case(
        "log",
        vec![Tensor::matrix(m, n, (0..m * n).map(|_| r.gen_range(0.5..2.0)).collect()).unwrap()],
        Box::new(move |t, v| {
            let y = t.log(v[0])?;
            random_projection(t, y, seed)
        }),
    );
    case("square", vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
        let y = t.square(v[0])?;
        random_projection(t, y, seed)
    }));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        case(name, vec![random_matrix(&mut r, m, n, 1.0), random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
            let y = match which {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            random_projection(t, y, seed)
        }));
    }
    case(
        "add_row",
        vec![random_matrix(&mut r, m, n, 1.0), Tensor::vector((0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()],
        Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            random_projection(t, y, seed)
        }),
    );
    let c = r.gen_range(-2.0..2.0);
    case("scale", vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
        let y = t.scale(v[0], c)?;
        random_projection(t, y, seed)
    }));
    for (name, kind, axis) in [
        ("sum", Reduction::Sum, None),
        ("sum_axis0", Reduction::Sum, Some(0)),
        ("sum_axis1", Reduction::Sum, Some(1)),
        ("mean", Reduction::Mean, None),
        ("mean_axis0", Reduction::Mean, Some(0)),
        ("mean_axis1", Reduction::Mean, Some(1)),
    ] {
        case(name, vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
            let y = t.reduce(kind, v[0], axis)?;
            if t.shape(y).is_empty() {
                let y2 = t.square(y)?;
                return t.sum(y2);
            }
            random_projection(t, y, seed)
        }));
    }
    case("softmax", vec![random_matrix(&mut r, m, n, 2.0)], Box::new(move |t, v| {
        let y = t.softmax(v[0])?;
        random_projection(t, y, seed)
    }));
    case("l2_normalize", vec![random_matrix_off_zero(&mut r, m, n)], Box::new(move |t, v| {
        let y = t.l2_normalize(v[0])?;
        random_projection(t, y, seed)
    }));
    case("concat_rows", vec![random_matrix(&mut r, m, n, 1.0), random_matrix(&mut r, k, n, 1.0)], Box::new(move |t, v| {
        let y = t.concat_rows(&[v[0], v[1], v[0]])?;
        random_projection(t, y, seed)
    }));
    let picks: Vec<usize> = (0..m * n + 3).map(|_| r.gen_range(0..m * n)).collect();
    case("gather", vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
        let y = t.gather(v[0], &picks)?;
        random_projection(t, y, seed)
    }));
    let rows: Vec<usize> = (0..m + 2).map(|_| r.gen_range(0..m)).collect();
    let mut mask: Vec<bool> = (0..rows.len() * n).map(|_| r.gen_bool(0.6)).collect();
    for i in 0..rows.len() {
        mask[i * n + r.gen_range(0..n)] = true;
    }
    case("masked_logsumexp", vec![random_matrix(&mut r, m, n, 2.0)], Box::new(move |t, v| {
        let y = t.masked_logsumexp(v[0], &rows, &mask)?;
        random_projection(t, y, seed)
    }));
    case("shared_subexpression", vec![random_matrix(&mut r, m, n, 1.0)], Box::new(move |t, v| {
        let a = t.mul(v[0], v[0])?;
        let at = t.transpose(v[0])?;
        let g = t.matmul(v[0], at)?;
        let e = t.exp(a)?;
        let s1 = random_projection(t, e, seed)?;
        let s2 = t.sum(g)?;
        let s = t.add(s1, s2)?;
        t.mul(s, s1)
    }));

    // losses
    let classes = r.gen_range(2..5);
    let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..classes)).collect();
    case(
        "cross_entropy",
        vec![
            random_matrix(&mut r, m, k, 1.0),
            random_matrix(&mut r, classes, k, 1.0),
            Tensor::vector((0..classes).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(),
        ],
        Box::new(move |t, v| losses::cross_entropy_loss(t, (v[1], v[2]), v[0], &labels)),
    );
    let nb = 2 * r.gen_range(2..4);
    let sl = labels_with_pairs(&mut r, nb, 2);
    let tau = r.gen_range(0.1..1.0);
    for (name, include_self, norm) in [
        ("supcon", true, true),
        ("supcon_no_self", false, true),
        ("supcon_raw", true, false),
    ] {
        let sl = sl.clone();
        case(name, vec![random_matrix_off_zero(&mut r, nb, k)], Box::new(move |t, v| {
            losses::supcon_loss(t, v[0], &sl, tau, include_self, norm)
        }));
    }
    let n_dist = r.gen_range(1..4);
    let anchors: Vec<usize> = (0..nb).filter(|_| r.gen_bool(0.7)).collect();
    let anchors = if anchors.is_empty() { vec![0] } else { anchors };
    for (name, norm) in [("conft", true), ("conft_raw", false)] {
        let (sl, anchors) = (sl.clone(), anchors.clone());
        case(
            name,
            vec![random_matrix_off_zero(&mut r, nb, k), random_matrix_off_zero(&mut r, n_dist, k)],
            Box::new(move |t, v| losses::conft_loss(t, v[0], &sl, &anchors, Some(v[1]), tau, norm)),
        );
    }
    let source_blocks = vec![random_matrix(&mut r, m, k, 1.0), random_matrix(&mut r, m, n, 1.0)];
    let weights: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..2.0)).collect();
    for (name, block) in [("consistency", RegularizedBlock::Semantic), ("consistency_all", RegularizedBlock::All)] {
        let (sb, w) = (source_blocks.clone(), weights.clone());
        case(
            name,
            vec![random_matrix(&mut r, m, k, 1.0), random_matrix(&mut r, m, n, 1.0)],
            Box::new(move |t, v| asc::consistency_from_blocks(t, &sb, v, &w, block)),
        );
    }
    let lambda = r.gen_range(0.0..3.0);
    case(
        "asc_total",
        vec![random_matrix(&mut r, m, n, 1.0), random_matrix(&mut r, m, n, 1.0)],
        Box::new(move |t, v| {
            let cls = random_projection(t, v[0], seed)?;
            let sq = t.square(v[1])?;
            let con = t.mean(sq)?;
            asc::total_loss(t, cls, con, lambda)
        }),
    );
    cases
}
