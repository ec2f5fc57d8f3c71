use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchrefine_core::config::ExperimentConfig;
use patchrefine_core::metrics::EvalInputs;
use patchrefine_core::workflow::{self, Layout, Stage};
use patchrefine_core::{Error, Result};

/// Latent diffusion generation, patch-wise refinement and realism metrics
/// on synthetic brain phantoms.
#[derive(Parser, Debug)]
#[command(name = "patchrefine", version)]
struct Cli {
    /// TOML experiment config; defaults to the built-in `desk` preset.
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in config: desk, cpu or smoke.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root holding data, checkpoints and results.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the phantom dataset to <out>/data.
    MakeData {
        /// Number of phantoms.
        #[arg(long)]
        n: Option<usize>,
        /// Volume edge length, or `D,H,W`.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
    },
    /// Train one stage: ae, ldm or refiner.
    Train {
        stage: String,
        /// Continue from the stage's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Autoencoder reconstructions (default: data/test -> recon).
    Reconstruct {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample coarse volumes from the latent model (default: -> synth).
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Refine coarse volumes (default: recon -> refined_recon).
    Refine {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute the metric report; unset sets default to the output layout.
    Evaluate {
        #[arg(long)]
        orig: Option<PathBuf>,
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long)]
        refined: Option<PathBuf>,
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        refined_synth: Option<PathBuf>,
    },
    /// Write one slice of a volume as an 8-bit PNG (window [-1, 1]).
    ExportSlices {
        volume: PathBuf,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        /// Slice index; defaults to the middle slice.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// All stages from data to report.
    Pipeline,
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| format!("bad shape `{s}`: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(format!("shape `{s}` needs 1 or 3 values")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::desk(),
    };
    let mut cfg = cfg.with_env_overrides()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn show(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn or(dir: &Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    dir.clone().unwrap_or_else(default)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::MakeData { n, shape } => {
            if let Some(n) = n {
                cfg.data.n = *n;
            }
            if let Some(shape) = shape {
                cfg.data.shape = *shape;
            }
            cfg.validate()?;
            let split = workflow::cmd_make_data(&cfg, &layout)?;
            println!(
                "{} train + {} test phantoms in {}",
                split.train_ids.len(),
                split.test_ids.len(),
                layout.data().display()
            );
        }
        Command::Train { stage, resume } => {
            cfg.validate()?;
            let stage: Stage = stage.parse()?;
            let out = workflow::cmd_train(stage, &cfg, &layout, *resume)?;
            println!(
                "{} trained for epochs {:?}; checkpoint {} ({})",
                stage.name(),
                out.epochs_run,
                out.checkpoint.display(),
                &out.checkpoint_id[..12]
            );
        }
        Command::Reconstruct { input, output } => {
            let input = or(input, || layout.test());
            let output = or(output, || layout.recon());
            show(&workflow::cmd_reconstruct(&layout, &input, &output)?);
        }
        Command::Generate { n, output } => {
            let n = n.unwrap_or(cfg.generate.n);
            let output = or(output, || layout.synth());
            show(&workflow::cmd_generate(&cfg, &layout, n, &output)?);
        }
        Command::Refine { input, output } => {
            let input = or(input, || layout.recon());
            let output = or(output, || refined_dir(&layout, &input));
            show(&workflow::cmd_refine(&cfg, &layout, &input, &output)?);
        }
        Command::Evaluate {
            orig,
            recon,
            refined,
            synth,
            refined_synth,
        } => {
            let explicit = [recon, refined, synth, refined_synth]
                .iter()
                .any(|d| d.is_some());
            let inputs = if explicit {
                EvalInputs {
                    orig: or(orig, || layout.test()),
                    recon: recon.clone(),
                    refined: refined.clone(),
                    synth: synth.clone(),
                    refined_synth: refined_synth.clone(),
                }
            } else {
                let mut d = workflow::default_inputs(&layout);
                if let Some(o) = orig {
                    d.orig = o.clone();
                }
                d
            };
            let report = workflow::cmd_evaluate(&cfg, &inputs, &cli.out)?;
            print!("{}", report.summary_table());
        }
        Command::ExportSlices {
            volume,
            axis,
            index,
            output,
        } => {
            let output = or(output, || layout.slices());
            let path = workflow::cmd_export_slices(volume, *axis, *index, &output)?;
            println!("{}", path.display());
        }
        Command::Pipeline => {
            let report = workflow::run_pipeline(&cfg, &layout)?;
            print!("{}", report.summary_table());
        }
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

/// `synth` refines into `refined_synth`, anything else into `refined_recon`.
fn refined_dir(layout: &Layout, input: &Path) -> PathBuf {
    if input == layout.synth() {
        layout.refined_synth()
    } else {
        layout.refined_recon()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_usage() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
