//! The operations behind the `idr` CLI subcommands. The binary only
//! parses arguments; everything it does lives here so tests can drive the
//! same paths in-process.

use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::camera::{load_cameras, perturb_cameras, save_cameras, CameraError};
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig, SceneConfig};
use crate::dataset::{load_dataset, load_png_rgb, save_views, DatasetError};
use crate::mesh::{
    chamfer_l1, load_obj, marching_cubes, psnr, sample_mesh_points, save_obj, save_ply,
    GridBounds, MeshError,
};
use crate::nets::{NetError, Renderer, SdfNetwork};
use crate::render::render_view;
use crate::synth::{generate_cameras, generate_views};
use crate::train::{Model, StepStats, TrainError, TrainSession};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err<'a>(path: &'a Path) -> impl Fn(std::io::Error) -> CommandError + 'a {
    move |source| CommandError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Renders a synthetic dataset into `out_dir`: images, masks, cameras and
/// the canonical scene config.
pub fn cmd_synth(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<usize, CommandError> {
    let mut cfg = SceneConfig::from_file(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let cameras = generate_cameras(cfg.cameras, cfg.camera_radius, cfg.width, cfg.height, cfg.seed);
    let views = generate_views(&cfg.scene, &cameras, cfg.width, cfg.height);
    save_views(out_dir, &cameras, &views)?;
    std::fs::write(out_dir.join("scene.cfg"), cfg.to_text()).map_err(io_err(out_dir))?;
    Ok(views.len())
}

/// Input ablations for the renderer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Normal,
    View,
    Feature,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Ablation::Normal),
            "view" => Ok(Ablation::View),
            "feature" => Ok(Ablation::Feature),
            other => Err(format!("unknown ablation {other:?} (normal|view|feature)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config_path: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub freeze_cameras: bool,
    /// σ of the camera perturbation: (rotation degrees, translation).
    pub perturb: Option<(f64, f64)>,
    pub ablate: Vec<Ablation>,
}

const METRICS_SCHEMA: &str = "# idr-metrics v1";
const METRICS_HEADER: &str =
    "epoch,total,rgb,mask,eikonal,psnr_batch,alpha,lr,cam_rot_err_deg,cam_trans_err";

fn metrics_row(s: &StepStats) -> String {
    let opt = |v: Option<f64>| v.map_or(String::from("nan"), |x| format!("{x}"));
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        s.epoch,
        s.total,
        s.rgb,
        s.mask,
        s.eikonal,
        s.psnr_batch,
        s.alpha,
        s.lr,
        opt(s.cam_rot_err_deg),
        opt(s.cam_trans_err),
    )
}

/// Trains on a dataset directory, writing periodic checkpoints and an
/// append-only metrics CSV. Resuming continues the interrupted run bit for
/// bit: the checkpoint carries the full session state and the original run
/// config (a config file passed alongside `--resume` is ignored).
pub fn cmd_train(dataset_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<(), CommandError> {
    let dataset = load_dataset(dataset_dir)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let (mut session, cfg) = match &opts.resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            let (mut session, mut cfg) = checkpoint::session_from(&ckpt, ckpt_path)?;
            if let Some(e) = opts.epochs {
                session.cfg.epochs = e;
                cfg.train.epochs = e;
            }
            (session, cfg)
        }
        None => {
            let mut cfg = match &opts.config_path {
                Some(p) => RunConfig::from_file(p)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = opts.seed {
                cfg.train.seed = seed;
            }
            if let Some(e) = opts.epochs {
                cfg.train.epochs = e;
            }
            for a in &opts.ablate {
                match a {
                    Ablation::Normal => cfg.renderer.use_normal = false,
                    Ablation::View => cfg.renderer.use_view = false,
                    Ablation::Feature => cfg.renderer.use_feature = false,
                }
            }
            if opts.freeze_cameras {
                cfg.cameras_trainable = false;
            }

            let seed = cfg.train.seed;
            let geometry = SdfNetwork::geometric_init(cfg.geometry, seed)?;
            let renderer = Renderer::init(cfg.renderer, seed.wrapping_add(1))?;
            let cameras = match opts.perturb {
                Some((rot_deg, trans)) => {
                    perturb_cameras(&dataset.cameras, rot_deg, trans, seed.wrapping_add(2))
                }
                None => dataset.cameras.clone(),
            };
            let mut model = Model::new(geometry, renderer, cameras);
            if !cfg.cameras_trainable {
                model.freeze_cameras();
            }
            let mut session = TrainSession::new(model, cfg.train.clone());
            session.alpha_schedule = cfg.alpha;
            session.weights = cfg.weights;
            session.trace_cfg = cfg.trace;
            (session, cfg)
        }
    };
    session.gt_cameras = Some(dataset.cameras.clone());

    let metrics_path = out_dir.join("metrics.csv");
    let fresh = !metrics_path.exists() || opts.resume.is_none();
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&metrics_path)
            .map_err(io_err(&metrics_path))?,
    );
    if fresh {
        writeln!(metrics, "{METRICS_SCHEMA}").map_err(io_err(&metrics_path))?;
        writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    }

    let checkpoint_every = cfg.checkpoint_every;
    let out = out_dir.to_path_buf();
    let cfg_for_hook = cfg.clone();
    let result = session.run(&dataset, |sess, stats| {
        writeln!(metrics, "{}", metrics_row(stats)).map_err(|source| {
            TrainError::Render(format!("metrics write failed: {source}"))
        })?;
        let done = sess.epoch >= sess.cfg.epochs;
        if done || (checkpoint_every > 0 && sess.epoch % checkpoint_every == 0) {
            let name = if done {
                "checkpoint_final.ckpt".to_string()
            } else {
                format!("checkpoint_e{:05}.ckpt", sess.epoch)
            };
            let ckpt = checkpoint::from_session(sess, &cfg_for_hook);
            ckpt.save(&out.join(name))
                .map_err(|e| TrainError::Render(format!("checkpoint save failed: {e}")))?;
        }
        Ok(())
    });
    metrics.flush().map_err(io_err(&metrics_path))?;

    if let Err(e) = result {
        // persist the last good state before reporting the failure
        let ckpt = checkpoint::from_session(&session, &cfg);
        ckpt.save(&out_dir.join("checkpoint_lastgood.ckpt"))?;
        return Err(e.into());
    }
    // the trained cameras in the camera text format, for eval tooling
    save_cameras(&out_dir.join("cameras_trained.txt"), &session.model.cameras)?;
    Ok(())
}

/// Renders every camera of a camera file with a trained model. Image
/// dimensions derive from the intrinsics (principal point at the center).
pub fn cmd_render(
    checkpoint_path: &Path,
    cameras_path: &Path,
    out_dir: &Path,
    swap_renderer: Option<&Path>,
) -> Result<usize, CommandError> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (mut model, cfg) = checkpoint::model_from(&ckpt, checkpoint_path)?;
    if let Some(other) = swap_renderer {
        let other_ckpt = Checkpoint::load(other)?;
        let (other_model, other_cfg) = checkpoint::model_from(&other_ckpt, other)?;
        if other_cfg.renderer.feature_size != cfg.renderer.feature_size {
            return Err(CommandError::Invalid(format!(
                "renderer feature size {} does not match geometry feature size {}",
                other_cfg.renderer.feature_size, cfg.renderer.feature_size
            )));
        }
        model.renderer = other_model.renderer;
    }
    let cameras = load_cameras(cameras_path)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rendered = Vec::with_capacity(cameras.cameras.len());
    for cam in &cameras.cameras {
        let width = (cam.k[0][2] * 2.0).round() as usize;
        let height = (cam.k[1][2] * 2.0).round() as usize;
        if width == 0 || height == 0 {
            return Err(CommandError::Invalid(
                "cannot infer image size from intrinsics".into(),
            ));
        }
        rendered.push(render_view(
            &model.geometry,
            &model.renderer,
            cam,
            width,
            height,
            &cfg.trace,
            [0.0, 0.0, 0.0],
        ));
    }
    save_views(out_dir, &cameras, &rendered)?;
    Ok(rendered.len())
}

/// Extracts the zero level set with marching cubes and writes OBJ + PLY.
pub fn cmd_mesh(
    checkpoint_path: &Path,
    resolution: usize,
    out_base: &Path,
) -> Result<(usize, usize), CommandError> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (model, _) = checkpoint::model_from(&ckpt, checkpoint_path)?;
    let mesh = marching_cubes(&model.geometry, resolution, &GridBounds::default(), 0.0);
    if let Some(dir) = out_base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    save_obj(&out_base.with_extension("obj"), &mesh)?;
    save_ply(&out_base.with_extension("ply"), &mesh)?;
    Ok((mesh.vertices.len(), mesh.triangles.len()))
}

/// What `cmd_eval` compares.
pub enum EvalInput {
    /// Chamfer-L1 between surface samples of two meshes.
    Mesh {
        mesh: PathBuf,
        reference: PathBuf,
        samples: usize,
        seed: u64,
        /// Unit conversion applied to the reported distances.
        scale: f64,
    },
    /// Masked PSNR between two rendered image directories; masks come from
    /// the reference directory.
    Images { dir: PathBuf, reference: PathBuf },
    /// Rotation/translation errors between two camera files.
    Cameras { file: PathBuf, reference: PathBuf },
}

/// A labeled metric table.
pub struct EvalReport {
    pub rows: Vec<(String, f64)>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, value) in &self.rows {
            writeln!(f, "{name:width$}  {value:.6}")?;
        }
        Ok(())
    }
}

pub fn cmd_eval(input: &EvalInput) -> Result<EvalReport, CommandError> {
    let mut rows = Vec::new();
    match input {
        EvalInput::Mesh {
            mesh,
            reference,
            samples,
            seed,
            scale,
        } => {
            let a = load_obj(mesh)?;
            let b = load_obj(reference)?;
            let pa = sample_mesh_points(&a, *samples, *seed);
            let pb = sample_mesh_points(&b, *samples, *seed);
            let (accuracy, completeness, chamfer) = chamfer_l1(&pa, &pb)?;
            rows.push(("accuracy".into(), accuracy * scale));
            rows.push(("completeness".into(), completeness * scale));
            rows.push(("chamfer_l1".into(), chamfer * scale));
        }
        EvalInput::Images { dir, reference } => {
            let ref_ds = load_dataset(reference)?;
            let mut total = 0.0;
            for (i, view) in ref_ds.views.iter().enumerate() {
                let img = load_png_rgb(&crate::dataset::image_path(dir, i))?;
                let gt = load_png_rgb(&crate::dataset::image_path(reference, i))?;
                let mask = crate::dataset::load_png_mask(&crate::dataset::mask_path(
                    reference, i,
                ))?;
                let _ = view;
                let db = psnr(&img, &gt, &mask)?;
                rows.push((format!("psnr_view{i:04}"), db));
                total += db;
            }
            let n = ref_ds.views.len().max(1) as f64;
            rows.push(("psnr_mean".into(), total / n));
        }
        EvalInput::Cameras { file, reference } => {
            let a = load_cameras(file)?;
            let b = load_cameras(reference)?;
            let (rot, trans) = crate::camera::camera_error(&a, &b)?;
            for (i, (r, t)) in rot.iter().zip(&trans).enumerate() {
                rows.push((format!("rot_err_deg_cam{i:03}"), *r));
                rows.push((format!("trans_err_cam{i:03}"), *t));
            }
            let n = rot.len().max(1) as f64;
            rows.push(("rot_err_deg_mean".into(), rot.iter().sum::<f64>() / n));
            rows.push(("trans_err_mean".into(), trans.iter().sum::<f64>() / n));
        }
    }
    Ok(EvalReport { rows })
}

/// Convenience for tests and the acceptance suite: renders the dataset's
/// own views with a trained model and reports masked PSNR against them.
pub fn masked_psnr_on_dataset(
    model: &Model,
    dataset_dir: &Path,
    trace_cfg: &crate::trace::TraceConfig,
) -> Result<f64, CommandError> {
    let ds = load_dataset(dataset_dir)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, view) in ds.views.iter().enumerate() {
        let cam = &ds.cameras.cameras[i];
        let (img, _) = render_view(
            &model.geometry,
            &model.renderer,
            cam,
            view.width,
            view.height,
            trace_cfg,
            [0.0; 3],
        );
        // ground truth back to [0, 1]
        let mut gt = crate::dataset::ImageF::new(view.width, view.height);
        for (pi, px) in view.rgb.iter().enumerate() {
            gt.pixels[pi] = px.map(|v| (v + 1.0) / 2.0);
        }
        let mask = crate::dataset::MaskImage {
            width: view.width,
            height: view.height,
            pixels: view.mask.clone(),
        };
        total += psnr(&img, &gt, &mask)?;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}
