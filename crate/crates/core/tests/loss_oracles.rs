mod common;

use asc_core::losses::{conft_loss, supcon_loss};
use asc_core::{Tape, Tensor};
use common::*;

#[test]
fn supcon_matches_brute_force() {
    for seed in 0..200 {
        let (f, labels, _, _, tau) = loss_instance(seed);
        for include_self in [true, false] {
            for normalize in [true, false] {
                let mut tape = Tape::new();
                let v = tape.constant(f.clone());
                let l = supcon_loss(&mut tape, v, &labels, tau, include_self, normalize).unwrap();
                let got = tape.value(l).item().unwrap();
                let want = brute_supcon(&rows_of(&f), &labels, tau, include_self, normalize);
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn conft_matches_brute_force() {
    for seed in 0..200 {
        let (f, labels, d, anchors, tau) = loss_instance(seed);
        for normalize in [true, false] {
            let mut tape = Tape::new();
            let v = tape.constant(f.clone());
            let dv = tape.constant(d.clone());
            let l = conft_loss(&mut tape, v, &labels, &anchors, Some(dv), tau, normalize).unwrap();
            let got = tape.value(l).item().unwrap();
            let want = brute_conft(&rows_of(&f), &labels, &anchors, &rows_of(&d), tau, normalize);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn supcon_identical_pair_is_ln2() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let l = supcon_loss(&mut tape, v, &[4, 4], 1.0, true, true).unwrap();
    assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() <= 1e-9);
}
