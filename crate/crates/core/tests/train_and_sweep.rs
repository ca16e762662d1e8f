use std::sync::OnceLock;

use glab_core::analysis::{residual_at, sweep, SweepConfig};
use glab_core::data::{gen_gaussian_mixture, gen_shapes, Dataset, SHAPE_CLASSES};
use glab_core::denoiser::{train, Denoiser, DenoiserConfig, InputShape, TrainConfig};
use glab_core::diffusion::{make_linear_schedule, DiffusionConfig, NoiseSchedule};
use glab_core::guidance::{GuidanceConfig, Method};
use glab_core::rng::{Domain, SeededRng};
use ndarray::Array2;

fn sched() -> NoiseSchedule {
    make_linear_schedule(&DiffusionConfig::default()).unwrap()
}

#[test]
fn mixture_training_halves_the_loss_in_2k_steps() {
    let data = gen_gaussian_mixture(8, 64, 0.05, 1).unwrap();
    let cfg = DenoiserConfig {
        input: InputShape::Vector { dims: 2, tokens: 4 },
        patch_size: 1,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_dim: 32,
        num_classes: 9,
        time_embed_dim: 8,
    };
    let tc = TrainConfig {
        epochs: 250,
        batch_size: 64,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let (_, report) = train(&cfg, &sched(), &data, &tc).unwrap();
    assert_eq!(report.steps, 2000);
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

/// Small shapes model shared by the sweep tests.
fn shapes_model() -> &'static (Denoiser, Dataset) {
    static MODEL: OnceLock<(Denoiser, Dataset)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = gen_shapes(16, 8, 4).unwrap();
        let cfg = DenoiserConfig {
            input: InputShape::Image {
                height: 8,
                width: 8,
                channels: 1,
            },
            patch_size: 2,
            embed_dim: 16,
            depth: 3,
            heads: 2,
            mlp_dim: 32,
            num_classes: SHAPE_CLASSES + 1,
            time_embed_dim: 8,
        };
        let tc = TrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            ..TrainConfig::default()
        };
        let (m, _) = train(&cfg, &sched(), &data, &tc).unwrap();
        (m, data)
    })
}

fn small_sweep(n_samples: usize) -> SweepConfig {
    SweepConfig {
        timesteps: vec![800, 500, 200],
        n_samples,
        seed: 7,
        ..SweepConfig::default()
    }
}

#[test]
fn sweep_grid_shapes_and_determinism() {
    let (m, data) = shapes_model();
    let methods: Vec<GuidanceConfig> = [Method::Tpg, Method::Pag, Method::Seg]
        .into_iter()
        .map(GuidanceConfig::for_method)
        .collect();
    let a = sweep(m, &sched(), data, &methods, &small_sweep(6)).unwrap();
    assert_eq!(a.cos_global.dim(), (3, 3));
    assert_eq!(a.norm_global.dim(), (3, 3));
    assert_eq!(a.cos_bands.len(), 3);
    assert!(a
        .cos_bands
        .iter()
        .chain(&a.norm_bands)
        .all(|b| b.dim() == (3, 29)));
    let b = sweep(m, &sched(), data, &methods, &small_sweep(6)).unwrap();
    assert_eq!(a, b);
    assert!(a.norm_global.iter().all(|v| *v > 0.0));
}

#[test]
fn unguided_sweep_has_zero_residual() {
    let (m, data) = shapes_model();
    let sc = small_sweep(4);
    let g = sweep(
        m,
        &sched(),
        data,
        &[GuidanceConfig::for_method(Method::None)],
        &sc,
    )
    .unwrap();
    assert!(g.cos_global.iter().all(|v| *v == 0.0));
    assert!(g.norm_global.iter().all(|v| *v == 0.0));
    assert!(g.degenerate >= 3 * 4);
}

#[test]
fn sweep_ignores_dataset_order() {
    let (m, data) = shapes_model();
    let reversed: Vec<usize> = (0..data.len()).rev().collect();
    let flipped = data.subset(&reversed).unwrap();
    let methods = [GuidanceConfig::for_method(Method::Tpg)];
    let sc = small_sweep(data.len());
    let a = sweep(m, &sched(), data, &methods, &sc).unwrap();
    let b = sweep(m, &sched(), &flipped, &methods, &sc).unwrap();
    assert_eq!(a, b);
}

#[test]
fn residuals_at_a_single_step() {
    let (m, data) = shapes_model();
    let x0: Array2<f64> = data.samples().slice(ndarray::s![..4, ..]).to_owned();
    let classes = &data.labels()[..4];
    let tpg = GuidanceConfig::for_method(Method::Tpg);

    let draw = |g: &GuidanceConfig| {
        let mut rng = SeededRng::new(1, Domain::Analysis, 0, 500);
        residual_at(m, &sched(), g, &x0, 500, classes, &mut rng).unwrap()
    };
    let r1 = draw(&tpg);
    assert_eq!(r1, draw(&tpg));
    assert!(r1.delta.iter().map(|v| v * v).sum::<f64>() > 0.0);

    let empty = GuidanceConfig {
        layers: Some(Vec::new()),
        ..tpg
    };
    assert!(draw(&empty).delta.iter().all(|v| *v == 0.0));
}
