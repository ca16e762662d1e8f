use glab_core::denoiser::{
    init_weights, Denoiser, DenoiserConfig, HookAction, HookSite, Hooks, InputShape,
};
use glab_core::perturb::{PerturbKind, PerturbOp};
use glab_core::rng::{Domain, SeededRng};
use ndarray::Array2;

fn config() -> DenoiserConfig {
    DenoiserConfig {
        input: InputShape::Image {
            height: 8,
            width: 8,
            channels: 1,
        },
        patch_size: 2,
        embed_dim: 16,
        depth: 4,
        heads: 2,
        mlp_dim: 24,
        num_classes: 3,
        time_embed_dim: 8,
    }
}

/// Random weights everywhere, including the zero-initialized head.
fn model() -> Denoiser {
    let mut m = init_weights(&config(), 5).unwrap();
    let mut rng = SeededRng::new(9, Domain::Eval, 0, 0);
    for p in m.params_mut() {
        *p += 0.2 * rng.normal();
    }
    m
}

fn batch(b: usize) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut rng = SeededRng::new(3, Domain::Eval, 1, 0);
    let x = Array2::from_shape_vec((b, 64), rng.normals(b * 64)).unwrap();
    (
        x,
        (0..b).map(|i| 100 + 200 * i).collect(),
        (0..b).map(|i| i % 3).collect(),
    )
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn hook_free_forward_is_deterministic() {
    let m = model();
    let (x, ts, cs) = batch(3);
    let a = m.forward(&x, &ts, &cs, &Hooks::none()).unwrap();
    let b = m.forward(&x, &ts, &cs, &Hooks::none()).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().any(|v| *v != 0.0));
}

#[test]
fn identity_perturbation_everywhere_is_a_no_op() {
    let m = model();
    let (x, ts, cs) = batch(2);
    let base = m.forward(&x, &ts, &cs, &Hooks::none()).unwrap();
    let n = config().tokens();
    for site in [HookSite::TokenInput, HookSite::AttentionInput] {
        let mut hooks = Hooks::none();
        for k in 0..config().depth {
            hooks = hooks
                .with_at(
                    k,
                    site,
                    HookAction::TokenPerturb(PerturbOp::identity_shuffle(n)),
                )
                .unwrap();
        }
        assert_eq!(m.forward(&x, &ts, &cs, &hooks).unwrap(), base);
    }
}

#[test]
fn hooks_leave_earlier_blocks_untouched() {
    let m = model();
    let (x, ts, cs) = batch(2);
    let n = config().tokens();
    let (_, clean) = m.forward_traced(&x, &ts, &cs, &Hooks::none()).unwrap();
    let actions = [
        HookAction::TokenPerturb(
            PerturbOp::for_site(PerturbKind::HaarOrthogonal, n, 1, 2, 3).unwrap(),
        ),
        HookAction::AttentionIdentity,
        HookAction::AttentionBlur { sigma: 1.5 },
    ];
    for action in actions {
        let hooks = Hooks::none().with(2, action.clone()).unwrap();
        let (_, hooked) = m.forward_traced(&x, &ts, &cs, &hooks).unwrap();
        assert_eq!(hooked.blocks[..2], clean.blocks[..2], "{action:?}");
        assert_ne!(hooked.blocks[2], clean.blocks[2], "{action:?}");
    }
}

#[test]
fn identity_attention_returns_values() {
    let m = model();
    let (x, ts, cs) = batch(2);
    let hooks = Hooks::none()
        .with(1, HookAction::AttentionIdentity)
        .unwrap();
    let (_, trace) = m.forward_traced(&x, &ts, &cs, &hooks).unwrap();
    let block = &trace.blocks[1];
    assert_eq!(block.attention, block.values);
    for p in &block.probs {
        assert_eq!(p, &Array2::eye(p.nrows()));
    }
    let (_, clean) = m.forward_traced(&x, &ts, &cs, &Hooks::none()).unwrap();
    assert_ne!(clean.blocks[1].attention, clean.blocks[1].values);
}

#[test]
fn blurred_attention_rows_stay_normalized() {
    let m = model();
    let (x, ts, cs) = batch(2);
    let hooks = Hooks::none()
        .with(0, HookAction::AttentionBlur { sigma: 2.0 })
        .unwrap();
    let (_, trace) = m.forward_traced(&x, &ts, &cs, &hooks).unwrap();
    for p in &trace.blocks[0].probs {
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn token_perturbation_preserves_norm_at_the_site() {
    let m = model();
    let (x, ts, cs) = batch(3);
    let n = config().tokens();
    for kind in PerturbKind::ALL {
        let op = PerturbOp::for_site(kind, n, 4, 1, 500).unwrap();
        let hooks = Hooks::none().with(1, HookAction::TokenPerturb(op)).unwrap();
        let (_, trace) = m.forward_traced(&x, &ts, &cs, &hooks).unwrap();
        let block = &trace.blocks[1];
        for s in 0..3 {
            let rows = s * n..(s + 1) * n;
            let before = frob(
                &block
                    .pre_hook
                    .slice(ndarray::s![rows.clone(), ..])
                    .to_owned(),
            );
            let after = frob(&block.block_input.slice(ndarray::s![rows, ..]).to_owned());
            assert!(
                (after / before - 1.0).abs() < 1e-5,
                "{kind}: {before} vs {after}"
            );
        }
    }
}

#[test]
fn bad_hooks_are_rejected() {
    let m = model();
    let (x, ts, cs) = batch(1);
    let wrong_size = Hooks::none()
        .with(0, HookAction::TokenPerturb(PerturbOp::identity_shuffle(4)))
        .unwrap();
    assert!(m.forward(&x, &ts, &cs, &wrong_size).is_err());
    let wrong_layer = Hooks::none()
        .with(9, HookAction::AttentionIdentity)
        .unwrap();
    assert!(m.forward(&x, &ts, &cs, &wrong_layer).is_err());
}
