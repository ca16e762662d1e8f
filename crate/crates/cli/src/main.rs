use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use glab_cli::commands::{self, SampleArgs};
use glab_cli::config::RunConfig;
use glab_core::guidance::Method;
use glab_core::Result;

#[derive(Parser, Debug)]
#[command(
    name = "glab",
    version,
    about = "Train toy diffusion models and compare guidance methods"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; falls back to GLAB_THREADS, then all cores.
    #[arg(long, global = true, env = "GLAB_THREADS")]
    threads: Option<usize>,

    /// Config override, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured dataset.
    GenData,
    /// Train a denoiser on the generated dataset.
    Train(CkptArg),
    /// Sample a batch with one guidance method.
    Sample(SampleCmd),
    /// Sweep guidance residuals over timesteps and frequency bands.
    Analyze(AnalyzeCmd),
    /// Compare the four token perturbations against unguided sampling.
    Ablate(OutArgs),
    /// Print a checkpoint's header and tensor manifest.
    InspectCkpt(CkptArg),
}

#[derive(Args, Debug)]
struct CkptArg {
    /// Checkpoint path (default `<out_dir>/model.ckpt`).
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OutArgs {
    #[command(flatten)]
    ckpt: CkptArg,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    None,
    Cfg,
    Tpg,
    Pag,
    Seg,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::None => Method::None,
            MethodArg::Cfg => Method::Cfg,
            MethodArg::Tpg => Method::Tpg,
            MethodArg::Pag => Method::Pag,
            MethodArg::Seg => Method::Seg,
        }
    }
}

#[derive(Args, Debug)]
struct SampleCmd {
    #[command(flatten)]
    out: OutArgs,
    /// Guidance method (default from `guidance.method`).
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Solver steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Also write snapshot strips along the trajectory.
    #[arg(long)]
    save_trajectory: bool,
}

#[derive(Args, Debug)]
struct AnalyzeCmd {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Vec<MethodArg>,
    #[arg(long, value_delimiter = ',')]
    timesteps: Vec<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
}

fn ckpt_path(cfg: &RunConfig, arg: &CkptArg) -> PathBuf {
    arg.ckpt.clone().unwrap_or_else(|| cfg.checkpoint_path())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::GenData => {
            commands::gen_data(&cfg)?;
        }
        Command::Train(c) => {
            commands::train_model(&cfg, &ckpt_path(&cfg, &c))?;
        }
        Command::Sample(c) => {
            let method: Method = c.method.map(Into::into).unwrap_or(cfg.guidance.method);
            let out = c
                .out
                .out
                .clone()
                .unwrap_or_else(|| cfg.out_dir().join("samples").join(method.name()));
            let args = SampleArgs {
                method,
                gamma: c.gamma,
                steps: c.steps,
                save_trajectory: c.save_trajectory,
                out,
            };
            commands::sample_cmd(&cfg, &ckpt_path(&cfg, &c.out.ckpt), &args)?;
        }
        Command::Analyze(c) => {
            if !c.methods.is_empty() {
                cfg.analysis.methods = c.methods.iter().map(|&m| m.into()).collect();
            }
            if !c.timesteps.is_empty() {
                cfg.analysis.timesteps = c.timesteps.clone();
            }
            if let Some(n) = c.n_samples {
                cfg.analysis.n_samples = n;
            }
            let out = c
                .out
                .out
                .clone()
                .unwrap_or_else(|| cfg.out_dir().join("analysis"));
            commands::analyze(&cfg, &ckpt_path(&cfg, &c.out.ckpt), &out)?;
        }
        Command::Ablate(c) => {
            let out = c
                .out
                .clone()
                .unwrap_or_else(|| cfg.out_dir().join("ablation"));
            let table = commands::ablate(&cfg, &ckpt_path(&cfg, &c.ckpt), &out)?;
            print!("{}", table.text());
        }
        Command::InspectCkpt(c) => {
            print!("{}", commands::inspect(&ckpt_path(&cfg, &c))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLAB_LOG", "info")).init();
    let help = format!(
        "Config keys and defaults:\n{}",
        RunConfig::documented_defaults()
    );
    let matches = Cli::command().after_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
