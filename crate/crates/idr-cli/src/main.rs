//! `idr` — implicit-surface reconstruction from masked images.
//!
//! Set `IDR_THREADS` to cap worker threads; `IDR_THREADS=1` selects the
//! fully sequential deterministic mode.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use idr::commands::{self, Ablation, EvalInput, TrainOptions};

#[derive(Parser)]
#[command(name = "idr", version, about = "Implicit surface reconstruction from masked images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene config.
    Synth(SynthArgs),
    /// Train geometry, renderer, and (optionally) cameras on a dataset.
    Train(TrainArgs),
    /// Render images from a checkpoint and a camera file.
    Render(RenderArgs),
    /// Extract the zero level set as OBJ and PLY meshes.
    Mesh(MeshArgs),
    /// Compare meshes, image directories, or camera files.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description file.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `idr synth`).
    dataset: PathBuf,
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint (its embedded config wins).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Keep camera parameters fixed.
    #[arg(long)]
    freeze_cameras: bool,
    /// σ of the initial camera rotation noise, degrees.
    #[arg(long, default_value_t = 0.0)]
    perturb_rot_deg: f64,
    /// σ of the initial camera translation noise.
    #[arg(long, default_value_t = 0.0)]
    perturb_trans: f64,
    /// Drop a renderer input (repeatable): normal, view, feature.
    #[arg(long, value_name = "INPUT")]
    ablate: Vec<Ablation>,
}

#[derive(Args)]
struct RenderArgs {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Camera file to render (image sizes derive from the intrinsics).
    #[arg(long)]
    cameras: PathBuf,
    /// Output directory for PNG images and masks.
    #[arg(long)]
    out: PathBuf,
    /// Render with the renderer network of another checkpoint.
    #[arg(long)]
    swap_renderer: Option<PathBuf>,
}

#[derive(Args)]
struct MeshArgs {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Grid resolution per axis.
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Output path base; `.obj` and `.ply` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Mesh to evaluate (OBJ) against --ref-mesh.
    #[arg(long, requires = "ref_mesh")]
    mesh: Option<PathBuf>,
    #[arg(long)]
    ref_mesh: Option<PathBuf>,
    /// Surface samples per mesh for the Chamfer distance.
    #[arg(long, default_value_t = 30000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Unit conversion applied to reported Chamfer distances.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Rendered image directory to evaluate against --ref-images.
    #[arg(long, requires = "ref_images")]
    images: Option<PathBuf>,
    /// Reference dataset directory (provides images and masks).
    #[arg(long)]
    ref_images: Option<PathBuf>,
    /// Camera file to evaluate against --ref-cameras.
    #[arg(long, requires = "ref_cameras")]
    cameras: Option<PathBuf>,
    #[arg(long)]
    ref_cameras: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    idr::parallel::set_threads_from_env();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(a) => {
            let n = commands::cmd_synth(&a.config, &a.out, a.seed)
                .context("synth failed")?;
            println!("wrote {n} views to {}", a.out.display());
        }
        Command::Train(a) => {
            let perturb = (a.perturb_rot_deg != 0.0 || a.perturb_trans != 0.0)
                .then_some((a.perturb_rot_deg, a.perturb_trans));
            let opts = TrainOptions {
                config_path: a.config,
                resume: a.resume,
                seed: a.seed,
                epochs: a.epochs,
                freeze_cameras: a.freeze_cameras,
                perturb,
                ablate: a.ablate,
            };
            commands::cmd_train(&a.dataset, &a.out, &opts).context("train failed")?;
            println!("training complete; outputs in {}", a.out.display());
        }
        Command::Render(a) => {
            let n = commands::cmd_render(
                &a.checkpoint,
                &a.cameras,
                &a.out,
                a.swap_renderer.as_deref(),
            )
            .context("render failed")?;
            println!("rendered {n} views to {}", a.out.display());
        }
        Command::Mesh(a) => {
            let (nv, nf) = commands::cmd_mesh(&a.checkpoint, a.resolution, &a.out)
                .context("mesh failed")?;
            println!(
                "extracted {nv} vertices / {nf} triangles to {}.obj and .ply",
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let input = match (&a.mesh, &a.images, &a.cameras) {
                (Some(mesh), None, None) => EvalInput::Mesh {
                    mesh: mesh.clone(),
                    reference: a.ref_mesh.clone().unwrap(),
                    samples: a.samples,
                    seed: a.seed,
                    scale: a.scale,
                },
                (None, Some(images), None) => EvalInput::Images {
                    dir: images.clone(),
                    reference: a.ref_images.clone().unwrap(),
                },
                (None, None, Some(cameras)) => EvalInput::Cameras {
                    file: cameras.clone(),
                    reference: a.ref_cameras.clone().unwrap(),
                },
                _ => anyhow::bail!(
                    "pass exactly one of --mesh/--ref-mesh, --images/--ref-images, --cameras/--ref-cameras"
                ),
            };
            let report = commands::cmd_eval(&input).context("eval failed")?;
            print!("{report}");
        }
    }
    Ok(())
}
