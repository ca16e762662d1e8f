use std::collections::HashSet;

use glab_core::perturb::{apply_shuffle, Payload, PerturbKind, PerturbOp, TokenTensor};
use glab_core::rng::{Domain, SeededRng};
use ndarray::Array3;
use proptest::prelude::*;

fn random_tokens(b: usize, n: usize, c: usize, seed: u64) -> TokenTensor {
    let mut rng = SeededRng::new(seed, Domain::Eval, 0, 0);
    TokenTensor::new(Array3::from_shape_vec((b, n, c), rng.normals(b * n * c)).unwrap()).unwrap()
}

fn kind() -> impl Strategy<Value = PerturbKind> {
    prop::sample::select(PerturbKind::ALL.to_vec())
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_kind_preserves_norm(kind in kind(), log_n in 0u32..=8, c in 1usize..6, b in 1usize..3, seed: u64) {
        let n = 1usize << log_n;
        let h = random_tokens(b, n, c, seed);
        let op = PerturbOp::for_site(kind, n, seed, 1, 7).unwrap();
        let ratio = op.apply(&h).unwrap().frobenius() / h.frobenius();
        prop_assert!((ratio - 1.0).abs() <= 1e-5, "ratio {ratio}");
    }

    #[test]
    fn action_matches_materialized_matrix(kind in kind(), log_n in 0u32..=6, c in 1usize..5, seed: u64) {
        let n = 1usize << log_n;
        let h = random_tokens(2, n, c, seed ^ 1);
        let op = PerturbOp::for_site(kind, n, seed, 0, 0).unwrap();
        let fast = op.apply(&h).unwrap();
        let p = op.matrix();
        for (slice, out) in h.data().outer_iter().zip(fast.data().outer_iter()) {
            let dense = p.dot(&slice);
            let err = dense.iter().zip(out.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-6, "err {err}");
        }
    }

    #[test]
    fn exact_kinds_invert(log_n in 0u32..=7, seed: u64) {
        let n = 1usize << log_n;
        let h = random_tokens(2, n, 3, seed);

        let shuffle = PerturbOp::for_site(PerturbKind::Shuffle, n, seed, 2, 5).unwrap();
        let Payload::Permutation(perm) = shuffle.payload() else { unreachable!() };
        let mut inverse = vec![0; n];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        let back = apply_shuffle(&shuffle.apply(&h).unwrap(), &inverse).unwrap();
        prop_assert_eq!(back.data(), h.data());

        let flip = PerturbOp::for_site(PerturbKind::SignFlip, n, seed, 2, 5).unwrap();
        let flipped = flip.apply(&flip.apply(&h).unwrap()).unwrap();
        prop_assert_eq!(flipped.data(), h.data());

        let wht = PerturbOp::for_site(PerturbKind::WalshHadamard, n, seed, 2, 5).unwrap();
        let twice = wht.apply(&wht.apply(&h).unwrap()).unwrap();
        prop_assert!(max_abs_diff(twice.data(), h.data()) <= 1e-6);
    }

    #[test]
    fn construction_is_deterministic(kind in kind(), log_n in 0u32..=6, seed: u64, layer in 0usize..8, t in 0usize..1000) {
        let n = 1usize << log_n;
        let a = PerturbOp::for_site(kind, n, seed, layer, t).unwrap();
        let b = PerturbOp::for_site(kind, n, seed, layer, t).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn site_streams_rarely_collide() {
    let mut seen = HashSet::new();
    for k in 0..10 {
        for t in 0..100 {
            let op = PerturbOp::for_site(PerturbKind::Shuffle, 64, 2024, k, t * 10 + 1).unwrap();
            let Payload::Permutation(p) = op.payload() else {
                unreachable!()
            };
            seen.insert(p.clone());
        }
    }
    assert!(seen.len() >= 999, "{} distinct of 1000", seen.len());
}

#[test]
fn orthogonality_of_materialized_operators() {
    for kind in PerturbKind::ALL {
        for log_n in 0..=6 {
            let n = 1 << log_n;
            let p = PerturbOp::for_site(kind, n, 11, 0, 0).unwrap().matrix();
            let gram = p.t().dot(&p);
            let err = gram
                .indexed_iter()
                .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
                .fold(0.0, f64::max);
            let tol = match kind {
                PerturbKind::Shuffle | PerturbKind::SignFlip => 0.0,
                PerturbKind::WalshHadamard => 1e-6,
                PerturbKind::HaarOrthogonal => 1e-5,
            };
            assert!(err <= tol, "{kind} n={n}: {err}");
        }
    }
}
