//! The subcommands. Each one reads a [`RunConfig`] and writes files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glab_core::analysis::{median_bandwidth, mmd, sweep, AnalysisGrid};
use glab_core::data::{self, Dataset};
use glab_core::denoiser::{train, Denoiser, InputShape, TrainReport};
use glab_core::diffusion::{make_linear_schedule, NoiseSchedule};
use glab_core::guidance::{sample, GuidanceConfig, Method, SampleOutput};
use glab_core::perturb::PerturbKind;
use glab_core::Result;
use log::info;
use ndarray::Array2;

use crate::checkpoint::Checkpoint;
use crate::config::{DataKind, RunConfig};
use crate::output;

/// Generates the configured dataset into the data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, Dataset)> {
    let dir = cfg.data_dir();
    let data = cfg.generate_data(cfg.named_seed("data"), None)?;
    output::ensure_dir(&dir)?;
    match cfg.data.kind {
        DataKind::Mixture => data::save_points(&dir.join("points.csv"), &data)?,
        DataKind::Shapes | DataKind::Images => data::save_images(&dir, &data)?,
    }
    info!("wrote {} samples to {}", data.len(), dir.display());
    Ok((dir, data))
}

/// Trains on the dataset in the data directory and writes the checkpoint
/// and `loss.csv`.
pub fn train_model(cfg: &RunConfig, ckpt_path: &Path) -> Result<(Checkpoint, TrainReport)> {
    let data = cfg.load_data()?;
    let dcfg = cfg.denoiser_config(&data);
    let sched = make_linear_schedule(&cfg.diffusion)?;
    let tc = cfg.train_config();
    info!(
        "training on {} samples, {} epochs of batch {}",
        data.len(),
        tc.epochs,
        tc.batch_size
    );
    let (model, report) = train(&dcfg, &sched, &data, &tc)?;
    let ck = Checkpoint::new(model, cfg.diffusion.clone(), tc.seed, report.steps);
    ck.save(ckpt_path)?;
    let loss_path = ckpt_path.with_file_name("loss.csv");
    output::write_text(&loss_path, &output::loss_csv(&report.epoch_losses))?;
    if let Some(last) = report.epoch_losses.last() {
        info!("final epoch loss {last:.5} after {} steps", report.steps);
    }
    Ok((ck, report))
}

fn load_model(path: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    let ck = Checkpoint::load(path)?;
    let sched = make_linear_schedule(&ck.header.diffusion)?;
    Ok((ck.model, sched))
}

fn data_shape(model: &Denoiser) -> data::DataShape {
    match model.config().input {
        InputShape::Image {
            height,
            width,
            channels,
        } => data::DataShape::Image {
            height,
            width,
            channels,
        },
        InputShape::Vector { dims, .. } => data::DataShape::Vector { dims },
    }
}

pub struct SampleArgs {
    pub method: Method,
    pub gamma: Option<f64>,
    pub steps: Option<usize>,
    pub save_trajectory: bool,
    pub out: PathBuf,
}

/// Samples one batch and writes it (and optionally trajectory strips) to
/// `args.out`.
pub fn sample_cmd(cfg: &RunConfig, ckpt_path: &Path, args: &SampleArgs) -> Result<SampleOutput> {
    let (model, sched) = load_model(ckpt_path)?;
    let mut gcfg = cfg.guidance_config(args.method);
    if let Some(g) = args.gamma {
        gcfg.gamma = g;
    }
    let mut run = cfg.sample_run();
    if let Some(s) = args.steps {
        run.steps = s;
    }
    run.record_trajectory = args.save_trajectory;
    let out = sample(&model, &sched, &gcfg, &run)?;
    let shape = data_shape(&model);
    output::write_samples(&args.out, shape, &out.samples)?;
    if args.save_trajectory {
        output::write_trajectory(
            &args.out.join("trajectory"),
            shape,
            &out.trajectory,
            cfg.sample.strip_length,
        )?;
    }
    info!(
        "{} samples with {} (gamma {}) in {} forward passes -> {}",
        out.samples.nrows(),
        gcfg.method,
        gcfg.gamma,
        out.forward_passes,
        args.out.display()
    );
    Ok(out)
}

/// Runs the residual sweep and writes `analysis.csv` plus heatmaps under
/// `out`.
pub fn analyze(cfg: &RunConfig, ckpt_path: &Path, out: &Path) -> Result<AnalysisGrid> {
    let (model, sched) = load_model(ckpt_path)?;
    let data = cfg.load_data()?;
    let methods: Vec<GuidanceConfig> = cfg
        .analysis
        .methods
        .iter()
        .map(|&m| cfg.guidance_config(m))
        .collect();
    let grid = sweep(&model, &sched, &data, &methods, &cfg.sweep_config())?;
    output::ensure_dir(out)?;
    output::write_text(&out.join("analysis.csv"), &output::analysis_csv(&grid))?;
    output::write_heatmaps(&out.join("heatmaps"), &grid, cfg.analysis.heatmap_scale)?;
    if grid.degenerate > 0 {
        info!(
            "{} cosines were undefined and reported as 0",
            grid.degenerate
        );
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// `vanilla` or a perturbation kind.
    pub name: String,
    pub mmd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub bandwidth: f64,
    pub gamma: f64,
    pub n_samples: usize,
    pub n_reference: usize,
}

impl AblationTable {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.mmd)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("method,mmd\n");
        for r in &self.rows {
            writeln!(s, "{},{}", r.name, r.mmd).expect("string write");
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "MMD to {} reference samples ({} generated, gamma {}, RBF bandwidth {:.4})\n\n",
            self.n_reference, self.n_samples, self.gamma, self.bandwidth
        );
        writeln!(s, "{:<18} {:>12}", "method", "mmd").expect("string write");
        writeln!(s, "{}", "-".repeat(31)).expect("string write");
        let best = self
            .rows
            .iter()
            .map(|r| r.mmd)
            .fold(f64::INFINITY, f64::min);
        for r in &self.rows {
            let mark = if r.mmd == best { " *" } else { "" };
            writeln!(s, "{:<18} {:>12.6}{mark}", r.name, r.mmd).expect("string write");
        }
        s
    }
}

/// Reference set for MMD: freshly generated from the data generator with
/// its own seed, or the training set when the data cannot be regenerated.
pub fn reference_set(cfg: &RunConfig) -> Result<Array2<f64>> {
    match cfg.data.kind {
        DataKind::Images => {
            log::warn!(
                "data.kind = images cannot be regenerated; using the training set as reference"
            );
            Ok(cfg.load_data()?.samples().clone())
        }
        _ => Ok(cfg
            .generate_data(
                cfg.named_seed("held-out"),
                Some(cfg.ablate.held_out_per_class),
            )?
            .samples()
            .clone()),
    }
}

/// Samples one fixed batch per perturbation kind plus an unguided one and
/// reports each batch's MMD to the reference set. Every row uses the same
/// sampling seed as `sample`, so the vanilla row matches a manual
/// `sample --method none` followed by an MMD.
pub fn ablate(cfg: &RunConfig, ckpt_path: &Path, out: &Path) -> Result<AblationTable> {
    let (model, sched) = load_model(ckpt_path)?;
    let reference = reference_set(cfg)?;
    let a = &cfg.ablate;
    let mut run = cfg.sample_run();
    run.batch = a.n_samples;
    run.condition = a.condition;

    let vanilla = sample(&model, &sched, &cfg.guidance_config(Method::None), &run)?.samples;
    let bandwidth = if a.bandwidth > 0.0 {
        a.bandwidth
    } else {
        median_bandwidth(&vanilla, &reference)?
    };
    let mut rows = vec![AblationRow {
        name: "vanilla".into(),
        mmd: mmd(&vanilla, &reference, bandwidth)?,
    }];
    for kind in PerturbKind::ALL {
        let mut g = cfg.guidance_config(Method::Tpg);
        g.gamma = a.gamma;
        g.perturb_kind = kind;
        let s = sample(&model, &sched, &g, &run)?.samples;
        rows.push(AblationRow {
            name: kind.name().into(),
            mmd: mmd(&s, &reference, bandwidth)?,
        });
        info!("ablation {}: done", kind.name());
    }
    let table = AblationTable {
        rows,
        bandwidth,
        gamma: a.gamma,
        n_samples: a.n_samples,
        n_reference: reference.nrows(),
    };
    output::ensure_dir(out)?;
    output::write_text(&out.join("ablation.csv"), &table.csv())?;
    output::write_text(&out.join("ablation.txt"), &table.text())?;
    Ok(table)
}

/// Human-readable checkpoint summary.
pub fn inspect(ckpt_path: &Path) -> Result<String> {
    let ck = Checkpoint::load(ckpt_path)?;
    let h = &ck.header;
    let mut s = String::new();
    writeln!(s, "checkpoint  {}", ckpt_path.display()).expect("string write");
    writeln!(s, "params      {}", ck.model.num_params()).expect("string write");
    writeln!(s, "train seed  {}", h.train_seed).expect("string write");
    writeln!(s, "steps       {}", h.steps).expect("string write");
    writeln!(
        s,
        "null class  {}",
        if h.null_trained {
            "trained"
        } else {
            "untrained"
        }
    )
    .expect("string write");
    let denoiser = serde_json::to_string(&h.denoiser).expect("config serializes");
    let diffusion = serde_json::to_string(&h.diffusion).expect("config serializes");
    writeln!(s, "denoiser    {denoiser}").expect("string write");
    writeln!(s, "diffusion   {diffusion}").expect("string write");
    writeln!(s, "tensors").expect("string write");
    for e in &h.manifest {
        writeln!(s, "  {:<28} {:?} @ {}", e.name, e.shape, e.offset).expect("string write");
    }
    Ok(s)
}
