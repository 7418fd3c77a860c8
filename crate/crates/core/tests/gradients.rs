mod common;

use asc_core::{Encoder, Tensor};
use common::*;

const TOL: f64 = 1e-4;

#[test]
fn every_op_and_loss_matches_finite_differences() {
    let mut worst = std::collections::BTreeMap::new();
    for seed in 0..100 {
        for case in gradient_cases(seed) {
            let err = gradient_error(&case.inputs, &case.build);
            let w = worst.entry(case.name).or_insert(0.0f64);
            *w = w.max(err);
            assert!(err <= TOL, "{} seed {seed}: relative error {err:.3e}", case.name);
        }
    }
    assert!(worst.len() >= 30, "only {} cases", worst.len());
}

#[test]
fn encoder_parameters_match_finite_differences() {
    for seed in 0..5 {
        let enc = Encoder::new(&[3, 4, 4, 2], seed).unwrap();
        let mut r = rng(seed);
        let x = random_matrix(&mut r, 5, 3, 1.0);
        // zero biases can leave a pre-activation exactly on the ReLU kink
        let params: Vec<Tensor> = enc
            .blocks()
            .iter()
            .flat_map(|b| {
                let bias = random_matrix(&mut r, 1, b.out_dim(), 0.5).into_data();
                [b.weight.clone(), Tensor::vector(bias).unwrap()]
            })
            .collect();
        let err = gradient_error(&params, |t, v| {
            let mut h = t.constant(x.clone());
            for (i, pair) in v.chunks(2).enumerate() {
                h = t.linear(h, pair[0], pair[1])?;
                if i + 1 < v.len() / 2 {
                    h = t.relu(h)?;
                }
            }
            random_projection(t, h, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err:.3e}");
    }
}

