use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numerics::{spectral_norm, Matrix};
use crate::tasks::{Group, GroupName};
use crate::training::Predictor;

fn random_word(seed: u64, size: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..size)).collect()
}

#[test]
fn s2_swap_token_is_single_reflection() {
    let model = build_sn_one_layer(2).unwrap();
    let swap = Permutation::all(2).iter().position(|p| !p.is_identity()).unwrap();
    let inputs = model.step_inputs(&[swap]).unwrap();
    let s = &inputs[0][0][0];
    assert_eq!(s.betas(), &[2.0]);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let k = s.keys()[0].clone();
    assert!((k[0].abs() - r).abs() < 1e-15 && (k[0] + k[1]).abs() < 1e-15);
    let t = &model.transitions().unwrap()[swap];
    let expected = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert!(t.max_abs_diff(&expected) < 1e-15);
}

#[test]
fn identity_token_leaves_state() {
    for n in 2..=5 {
        let model = build_sn_one_layer(n).unwrap();
        assert_eq!(model.n_h(), n - 1);
        let inputs = model.step_inputs(&[0, 0, 0]).unwrap();
        assert!(inputs[0][0].iter().all(|s| s.betas().iter().all(|b| *b == 0.0)));
        let states = model.states(&[0, 0, 0]).unwrap();
        let h0 = &model.initial_states()[0][0];
        assert!(states[0][0].iter().all(|h| h == h0));
        assert_eq!(model.run(&[0, 0, 0]).unwrap(), vec![0, 0, 0]);
    }
}

#[test]
fn s5_matches_brute_force_on_long_word() {
    let model = build_sn_one_layer(5).unwrap();
    let oracle = symmetric_oracle(5);
    for seed in 0..3 {
        let word = random_word(seed, 120, 512);
        assert_eq!(model.run(&word).unwrap(), oracle(&word));
    }
}

#[test]
fn s3_verification_report() {
    let model = build_sn_one_layer(3).unwrap();
    let report = verify_construction(&model, &*oracle_for(model.kind()), 100, 512, 0).unwrap();
    assert!(report.pass);
    assert_eq!(report.matched_trials, 100);
    assert_eq!(report.construction, "S3_one_layer");
}

#[test]
fn transitions_are_permutations_or_orthogonal() {
    let models = [
        build_sn_one_layer(4).unwrap(),
        build_mod_counter(7).unwrap(),
        build_dihedral_two_layer(6).unwrap(),
    ];
    for model in &models {
        for a in model.transitions().unwrap() {
            assert!(spectral_norm(&a).unwrap() <= 1.0 + 1e-9);
            let ata = a.transpose().matmul(&a).unwrap();
            assert!(ata.max_abs_diff(&Matrix::identity(a.cols())) < 1e-9);
        }
    }
    for a in models[0].transitions().unwrap() {
        assert!(a.data().iter().all(|x| x.abs() < 1e-9 || (x - 1.0).abs() < 1e-9));
    }
}

#[test]
fn counter_full_turn_returns_home() {
    let model = build_mod_counter(4).unwrap();
    let states = model.states(&[0; 4]).unwrap();
    let h0 = &model.initial_states()[0][0];
    assert!(states[0][0][3].matrix().max_abs_diff(h0.matrix()) < 1e-9);
}

#[test]
fn counter_mod_two_is_parity() {
    let model = build_mod_counter(2).unwrap();
    let t = &model.transitions().unwrap()[0];
    assert!(t.max_abs_diff(&Matrix::identity(2).scale(-1.0)) < 1e-12);
    assert_eq!(model.run(&[0; 5]).unwrap(), vec![1, 0, 1, 0, 1]);
}

#[test]
fn counter_mod_seven() {
    let model = build_mod_counter(7).unwrap();
    let out = model.run(&[0; 100]).unwrap();
    assert!(out.iter().enumerate().all(|(i, &r)| r == (i + 1) % 7));
    let report = verify_construction(&build_mod_counter(10).unwrap(), &*counter_oracle(10), 10, 1000, 1).unwrap();
    assert!(report.pass);
}

#[test]
fn dihedral_identity_word() {
    let model = build_dihedral_two_layer(5).unwrap();
    assert_eq!(model.layers(), 2);
    assert_eq!(model.run(&[0; 20]).unwrap(), vec![0; 20]);
    assert_eq!(model.prefix_products(&[0; 20]).unwrap(), vec![0; 20]);
}

#[test]
fn dihedral_two_reflections_give_rotation() {
    for m in [2, 3, 5, 6] {
        let model = build_dihedral_two_layer(m).unwrap();
        for i in 0..m {
            for j in 0..m {
                let out = model.run(&[m + i, m + j]).unwrap();
                assert_eq!(out, vec![m + i, (i + m - j) % m], "m={m} s{i} s{j}");
            }
        }
    }
}

#[test]
fn dihedral_running_and_prefix_products() {
    let model = build_dihedral_two_layer(5).unwrap();
    let running = dihedral_running_oracle(5);
    let prefix = dihedral_oracle(5);
    for seed in 0..5 {
        let word = random_word(seed, 10, 200);
        assert_eq!(model.run(&word).unwrap(), running(&word));
        assert_eq!(model.prefix_products(&word).unwrap(), prefix(&word));
    }
    let report = verify_construction(&build_dihedral_two_layer(6).unwrap(), &*dihedral_oracle(6), 100, 256, 2).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn oracles_agree_with_group_tables() {
    for (name, oracle, size) in [
        ("D6", dihedral_oracle(6), 12),
        ("D3", dihedral_oracle(3), 6),
        ("S4", symmetric_oracle(4), 24),
    ] {
        let group = Group::new(name.parse::<GroupName>().unwrap()).unwrap();
        let word = random_word(7, size, 300);
        assert_eq!(oracle(&word), group.prefix_products(&word), "{name}");
    }
}

#[test]
fn predictor_treats_bos_as_identity() {
    let model = build_sn_one_layer(3).unwrap();
    let word = random_word(3, 6, 40);
    let mut seq = vec![6];
    seq.extend(&word);
    let out = model.predict(&[&seq]).unwrap().remove(0);
    assert_eq!(out[0], 0);
    assert_eq!(&out[1..], &symmetric_oracle(3)(&word)[..]);
}

#[test]
fn rejects_bad_inputs() {
    assert!(matches!(build_sn_one_layer(1), Err(Error::Contract(_))));
    assert!(matches!(build_mod_counter(1), Err(Error::Contract(_))));
    assert!(matches!(build_dihedral_two_layer(1), Err(Error::Contract(_))));
    let model = build_dihedral_two_layer(3).unwrap();
    assert!(matches!(model.run(&[0, 6]), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sn_construction_tracks_group(n in 2usize..=4, seed in any::<u64>(), len in 1usize..64) {
        let model = build_sn_one_layer(n).unwrap();
        let word = random_word(seed, model.alphabet_size(), len);
        prop_assert_eq!(model.prefix_products(&word).unwrap(), symmetric_oracle(n)(&word));
    }

    #[test]
    fn dihedral_construction_tracks_group(m in 2usize..=9, seed in any::<u64>(), len in 1usize..64) {
        let model = build_dihedral_two_layer(m).unwrap();
        let word = random_word(seed, 2 * m, len);
        prop_assert_eq!(model.prefix_products(&word).unwrap(), dihedral_oracle(m)(&word));
    }
}
