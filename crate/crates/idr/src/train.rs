//! Mini-batch training: pixel sampling, the chunked forward/adjoint pass,
//! and the epoch loop.
//!
//! Each epoch samples a fixed number of pixels per image, traces their
//! rays off-tape, partitions them into surface pixels (color term) and the
//! rest (mask term), and assembles the weighted loss on per-chunk tapes.
//! Chunks are a fixed 32 pixels, gradients reduce in chunk order, and all
//! randomness derives from (seed, epoch), so a run is bit-reproducible at
//! any worker count and a resumed run continues identically.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::camera::{pixel_ray, pixel_ray_tape, CameraError, CameraSet};
use crate::dataset::Dataset;
use crate::loss::{
    adam_step, cross_entropy, AdamParams, AdamState, AlphaSchedule, LossError, LossWeights,
    LrSchedule,
};
use crate::math;
use crate::nets::{NetError, Renderer, SdfNetwork};
use crate::parallel;
use crate::render::{forward_pixel, soft_mask, BoundSdf, RenderError};
use crate::trace::{min_sdf_on_span, sphere_trace, TraceConfig, TraceError};

/// Fixed pixel-chunk granularity; part of the reproducibility contract.
const CHUNK_PIXELS: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("render error on pixel: {0}")]
    Render(String),
}

/// Sampled pixel: view index plus integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub view: usize,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    /// Pixels sampled per image per epoch.
    pub pixels_per_image: usize,
    /// Extra uniform eikonal samples in the bounding cube.
    pub eikonal_points: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            lr: LrSchedule::default(),
            pixels_per_image: 512,
            eikonal_points: 1024,
            seed: 0,
        }
    }
}

/// Everything being optimized.
#[derive(Debug, Clone)]
pub struct Model {
    pub geometry: SdfNetwork,
    pub renderer: Renderer,
    pub cameras: CameraSet,
    /// Per-camera trainability of (q, c); intrinsics stay fixed.
    pub cameras_trainable: Vec<bool>,
}

impl Model {
    pub fn new(geometry: SdfNetwork, renderer: Renderer, cameras: CameraSet) -> Self {
        let n = cameras.cameras.len();
        Model {
            geometry,
            renderer,
            cameras,
            cameras_trainable: vec![true; n],
        }
    }

    pub fn freeze_cameras(&mut self) {
        for t in self.cameras_trainable.iter_mut() {
            *t = false;
        }
    }

    /// Camera parameters as one flat vector, 7 per camera: q then c.
    pub fn tau_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cameras.cameras.len() * 7);
        for cam in &self.cameras.cameras {
            out.extend_from_slice(&cam.q);
            out.extend_from_slice(&cam.c);
        }
        out
    }

    pub fn set_tau_flat(&mut self, tau: &[f64]) {
        assert_eq!(tau.len(), self.cameras.cameras.len() * 7);
        for (i, cam) in self.cameras.cameras.iter_mut().enumerate() {
            cam.q.copy_from_slice(&tau[i * 7..i * 7 + 4]);
            cam.c.copy_from_slice(&tau[i * 7 + 4..i * 7 + 7]);
        }
    }
}

/// Per-epoch numbers written to the metrics stream.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub epoch: usize,
    pub total: f64,
    pub rgb: f64,
    pub mask: f64,
    pub eikonal: f64,
    /// PSNR of the sampled surface pixels against their ground truth.
    pub psnr_batch: f64,
    pub alpha: f64,
    pub lr: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub cam_rot_err_deg: Option<f64>,
    pub cam_trans_err: Option<f64>,
}

/// Gradients for one optimizer step.
pub struct StepGrads {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Uniform without-replacement pixel sample, per image, deterministic in
/// (seed, epoch). Requesting at least the image size returns every pixel.
pub fn sample_pixel_batch(dataset: &Dataset, per_image: usize, epoch: usize, seed: u64) -> Vec<PixelRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut out = Vec::new();
    for (vi, view) in dataset.views.iter().enumerate() {
        let n = view.width * view.height;
        let k = per_image.min(n);
        let mut idx: Vec<u32> = (0..n as u32).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        for &p in &idx[..k] {
            out.push(PixelRef {
                view: vi,
                x: p % view.width as u32,
                y: p / view.width as u32,
            });
        }
    }
    out
}

/// Uniform samples in the bounding cube `[-1, 1]³` for the eikonal term,
/// deterministic in (seed, epoch).
pub fn sample_box_points(n: usize, epoch: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e1c0);
    rng.set_stream(epoch as u64 + 1);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

struct ChunkOutput {
    theta: Vec<f64>,
    gamma: Vec<f64>,
    tau: Vec<f64>,
    rgb_sum: f64,
    ce_sum: f64,
    eik_sum: f64,
    eik_count: usize,
    n_in: usize,
    n_out: usize,
    sq_err_01: f64,
    sq_count: usize,
}

/// One full forward/adjoint pass over a sampled batch. Returns the loss
/// statistics and parameter gradients; does not update anything.
pub fn train_step(
    model: &Model,
    dataset: &Dataset,
    batch: &[PixelRef],
    extra_points: &[[f64; 3]],
    alpha: f64,
    weights: &LossWeights,
    trace_cfg: &TraceConfig,
) -> Result<(StepStats, StepGrads), TrainError> {
    let batch_total = batch.len();
    let n_eik_total = batch_total + extra_points.len();
    let chunks = parallel::chunk_ranges(batch_total, CHUNK_PIXELS);
    let n_chunks = chunks.len().max(1);
    // fixed split of the extra eikonal points across chunks
    let extra_per_chunk = extra_points.len().div_ceil(n_chunks);

    let outputs: Vec<Result<ChunkOutput, TrainError>> = parallel::map_chunks(n_chunks, |ci| {
        let range = chunks.get(ci).cloned().unwrap_or(0..0);
        let extras = {
            let lo = (ci * extra_per_chunk).min(extra_points.len());
            let hi = ((ci + 1) * extra_per_chunk).min(extra_points.len());
            &extra_points[lo..hi]
        };
        run_chunk(model, dataset, &batch[range], extras, alpha, weights, trace_cfg, batch_total, n_eik_total)
    });

    let theta_len = model.geometry.params.len();
    let gamma_len = model.renderer.params.len();
    let tau_len = model.cameras.cameras.len() * 7;
    let mut grads = StepGrads {
        theta: vec![0.0; theta_len],
        gamma: vec![0.0; gamma_len],
        tau: vec![0.0; tau_len],
    };
    let mut rgb_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut eik_sum = 0.0;
    let mut eik_count = 0usize;
    let mut n_in = 0usize;
    let mut n_out = 0usize;
    let mut sq_err = 0.0;
    let mut sq_count = 0usize;
    for out in outputs {
        let o = out?;
        for (a, b) in grads.theta.iter_mut().zip(&o.theta) {
            *a += b;
        }
        for (a, b) in grads.gamma.iter_mut().zip(&o.gamma) {
            *a += b;
        }
        for (a, b) in grads.tau.iter_mut().zip(&o.tau) {
            *a += b;
        }
        rgb_sum += o.rgb_sum;
        ce_sum += o.ce_sum;
        eik_sum += o.eik_sum;
        eik_count += o.eik_count;
        n_in += o.n_in;
        n_out += o.n_out;
        sq_err += o.sq_err_01;
        sq_count += o.sq_count;
    }
    debug_assert_eq!(eik_count, n_eik_total);

    let rgb = if batch_total > 0 { rgb_sum / batch_total as f64 } else { 0.0 };
    let mask = if batch_total > 0 {
        ce_sum / (alpha * batch_total as f64)
    } else {
        0.0
    };
    let eik = if eik_count > 0 { eik_sum / eik_count as f64 } else { 0.0 };
    let total = crate::loss::total_loss(rgb, mask, eik, weights);
    let psnr_batch = if sq_count > 0 {
        let mse = sq_err / sq_count as f64;
        if mse <= 0.0 {
            99.0
        } else {
            (10.0 * (1.0 / mse).log10()).min(99.0)
        }
    } else {
        f64::NAN
    };

    let stats = StepStats {
        epoch: 0,
        total,
        rgb,
        mask,
        eikonal: eik,
        psnr_batch,
        alpha,
        lr: 0.0,
        n_in,
        n_out,
        cam_rot_err_deg: None,
        cam_trans_err: None,
    };
    Ok((stats, grads))
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    model: &Model,
    dataset: &Dataset,
    pixels: &[PixelRef],
    extras: &[[f64; 3]],
    alpha: f64,
    weights: &LossWeights,
    trace_cfg: &TraceConfig,
    batch_total: usize,
    n_eik_total: usize,
) -> Result<ChunkOutput, TrainError> {
    let mut tape = Tape::new();
    let theta_base = tape.leaf_block(&model.geometry.params);
    let gamma_base = tape.leaf_block(&model.renderer.params);
    let tau_flat = model.tau_flat();
    let tau_base = tape.leaf_block(&tau_flat);
    let bound = BoundSdf {
        net: &model.geometry,
        base: theta_base,
    };

    let mut rgb_terms: Vec<Var> = Vec::new();
    let mut ce_terms: Vec<Var> = Vec::new();
    let mut eik_terms: Vec<Var> = Vec::new();
    let mut rgb_sum_val = 0.0;
    let mut ce_sum_val = 0.0;
    let mut n_in = 0usize;
    let mut n_out = 0usize;
    let mut sq_err = 0.0;
    let mut sq_count = 0usize;

    for p in pixels {
        let view = &dataset.views[p.view];
        let cam = &model.cameras.cameras[p.view];
        let (px, py) = (p.x as f64 + 0.5, p.y as f64 + 0.5);
        let pixel_lin = p.y as usize * view.width + p.x as usize;
        let gt_rgb = view.rgb[pixel_lin];
        let o_p = view.mask[pixel_lin];

        let ray = pixel_ray(cam, px, py, pixel_lin as u32)?;
        let trace = sphere_trace(&model.geometry, ray.origin, ray.dir, trace_cfg)?;

        // live ray on the tape
        let q_vars: [Var; 4] = std::array::from_fn(|i| tape.var_at(tau_base + (p.view * 7 + i) as u32));
        let c_vars: [Var; 3] =
            std::array::from_fn(|i| tape.var_at(tau_base + (p.view * 7 + 4 + i) as u32));
        let dir_cam = cam.pixel_dir_cam(px, py)?;
        let (c_live, v_live) = pixel_ray_tape(&mut tape, q_vars, c_vars, dir_cam)?;

        let mut as_outside = !(trace.hit() && o_p);
        if !as_outside {
            match forward_pixel(
                &mut tape,
                &bound,
                &model.renderer,
                gamma_base,
                c_live,
                v_live,
                trace.t,
            ) {
                Ok(out) => {
                    n_in += 1;
                    // Σ_ch |I − L|
                    let mut diffs = Vec::with_capacity(3);
                    for ch in 0..3 {
                        let gt = tape.constant(gt_rgb[ch]);
                        let d = tape.sub(gt, out.rgb[ch]);
                        diffs.push(tape.abs(d));
                        let pred01 = (tape.value(out.rgb[ch]) + 1.0) / 2.0;
                        let gt01 = (gt_rgb[ch] + 1.0) / 2.0;
                        sq_err += (pred01 - gt01) * (pred01 - gt01);
                    }
                    sq_count += 3;
                    let term = tape.sum(&diffs);
                    rgb_sum_val += tape.value(term);
                    rgb_terms.push(term);

                    // the hit joins the eikonal sample set as a detached
                    // point: the regularizer is an expectation over fixed
                    // sample locations, not a function of where the rays
                    // currently intersect
                    let x0 = math::ray_at(ray.origin, ray.dir, trace.t);
                    eik_terms.push(crate::loss::eikonal_residual(&mut tape, &bound, x0)?);
                }
                Err(RenderError::GrazingRay(_)) | Err(RenderError::DegenerateNormal(_)) => {
                    // tangent or ill-posed surface: demoted for this step
                    as_outside = true;
                }
                Err(RenderError::Ad(e)) => return Err(e.into()),
            }
        }

        if as_outside {
            n_out += 1;
            // the mask point t* minimizes f over the chord through the
            // unit sphere; for misses the tracer already located the
            // coarse argmin, so only the polish remains
            // the mask point t* minimizes f over the chord through the
            // unit sphere (global argmin + polish, so the envelope-theorem
            // gradient stays exact)
            let t_star =
                min_sdf_on_span(&model.geometry, ray.origin, ray.dir, trace_cfg.fallback_samples).0;
            let s = soft_mask(&mut tape, &bound, c_live, v_live, t_star, alpha)
                .map_err(|e| TrainError::Render(e.to_string()))?;
            // clipped binary cross entropy on the tape
            let lo = tape.constant(crate::loss::MASK_CLIP);
            let hi = tape.constant(1.0 - crate::loss::MASK_CLIP);
            let s1 = tape.max(s, lo);
            let s_clip = tape.min(s1, hi);
            let ce = if o_p {
                let l = tape.ln(s_clip)?;
                tape.neg(l)
            } else {
                let one = tape.constant(1.0);
                let om = tape.sub(one, s_clip);
                let l = tape.ln(om)?;
                tape.neg(l)
            };
            ce_sum_val += tape.value(ce);
            ce_terms.push(ce);
            debug_assert!((tape.value(ce) - cross_entropy(o_p, tape.value(s))).abs() < 1e-9);

            // the t* point joins the eikonal sample set
            let x_star = math::ray_at(ray.origin, ray.dir, t_star);
            eik_terms.push(crate::loss::eikonal_residual(&mut tape, &bound, x_star)?);
        }
    }

    for &x in extras {
        eik_terms.push(crate::loss::eikonal_residual(&mut tape, &bound, x)?);
    }

    // weighted chunk total
    let mut parts: Vec<Var> = Vec::new();
    if !rgb_terms.is_empty() {
        let s = tape.sum(&rgb_terms);
        let w = tape.constant(1.0 / batch_total as f64);
        parts.push(tape.mul(s, w));
    }
    if !ce_terms.is_empty() {
        let s = tape.sum(&ce_terms);
        let w = tape.constant(weights.rho / (alpha * batch_total as f64));
        parts.push(tape.mul(s, w));
    }
    let eik_sum_val: f64 = eik_terms.iter().map(|&t| tape.value(t)).sum();
    if !eik_terms.is_empty() {
        let s = tape.sum(&eik_terms);
        let w = tape.constant(weights.lambda / n_eik_total as f64);
        parts.push(tape.mul(s, w));
    }

    let theta_len = model.geometry.params.len();
    let gamma_len = model.renderer.params.len();
    let tau_len = tau_flat.len();
    let (theta, gamma, tau) = if parts.is_empty() {
        (vec![0.0; theta_len], vec![0.0; gamma_len], vec![0.0; tau_len])
    } else {
        let total = tape.sum(&parts);
        let adj = tape.backward_values(total)?;
        let slice = |base: u32, len: usize| adj[base as usize..base as usize + len].to_vec();
        (
            slice(theta_base, theta_len),
            slice(gamma_base, gamma_len),
            slice(tau_base, tau_len),
        )
    };

    Ok(ChunkOutput {
        theta,
        gamma,
        tau,
        rgb_sum: rgb_sum_val,
        ce_sum: ce_sum_val,
        eik_sum: eik_sum_val,
        eik_count: eik_terms.len(),
        n_in,
        n_out,
        sq_err_01: sq_err,
        sq_count,
    })
}

/// Optimizer state for the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub hp: AdamParams,
    pub theta: AdamState,
    pub gamma: AdamState,
    pub tau: AdamState,
    pub step: u64,
}

impl Optimizer {
    pub fn new(model: &Model) -> Self {
        Optimizer {
            hp: AdamParams::default(),
            theta: AdamState::new(model.geometry.params.len()),
            gamma: AdamState::new(model.renderer.params.len()),
            tau: AdamState::new(model.cameras.cameras.len() * 7),
            step: 0,
        }
    }
}

/// A resumable training run. The entire state is (model, optimizer,
/// epoch, config); schedules and batches derive from them.
pub struct TrainSession {
    pub model: Model,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub cfg: TrainConfig,
    pub alpha_schedule: AlphaSchedule,
    pub weights: LossWeights,
    pub trace_cfg: TraceConfig,
    /// Reference cameras for error reporting (not used by the loss).
    pub gt_cameras: Option<CameraSet>,
}

impl TrainSession {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let optimizer = Optimizer::new(&model);
        TrainSession {
            model,
            optimizer,
            epoch: 0,
            cfg,
            alpha_schedule: AlphaSchedule::default(),
            weights: LossWeights::default(),
            trace_cfg: TraceConfig::default(),
            gt_cameras: None,
        }
    }

    /// Runs one epoch: sample, step, update. Returns the epoch's stats.
    pub fn step_epoch(&mut self, dataset: &Dataset) -> Result<StepStats, TrainError> {
        let epoch = self.epoch;
        let alpha = self.alpha_schedule.alpha(epoch);
        let lr = self.cfg.lr.lr(epoch);
        let batch = sample_pixel_batch(dataset, self.cfg.pixels_per_image, epoch, self.cfg.seed);
        let extras = sample_box_points(self.cfg.eikonal_points, epoch, self.cfg.seed);

        let (mut stats, grads) = train_step(
            &self.model,
            dataset,
            &batch,
            &extras,
            alpha,
            &self.weights,
            &self.trace_cfg,
        )?;
        if !stats.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }

        self.optimizer.step += 1;
        let step = self.optimizer.step;
        adam_step(
            &mut self.model.geometry.params,
            &grads.theta,
            &mut self.optimizer.theta,
            &self.optimizer.hp,
            lr,
            step,
            "geometry",
        )?;
        adam_step(
            &mut self.model.renderer.params,
            &grads.gamma,
            &mut self.optimizer.gamma,
            &self.optimizer.hp,
            lr,
            step,
            "renderer",
        )?;
        let mut tau = self.model.tau_flat();
        let tau_before = tau.clone();
        adam_step(
            &mut tau,
            &grads.tau,
            &mut self.optimizer.tau,
            &self.optimizer.hp,
            lr,
            step,
            "cameras",
        )?;
        // frozen cameras keep their exact bits (and moments still advance,
        // so unfreezing later behaves like standard Adam)
        for (i, trainable) in self.model.cameras_trainable.iter().enumerate() {
            if !trainable {
                tau[i * 7..(i + 1) * 7].copy_from_slice(&tau_before[i * 7..(i + 1) * 7]);
            }
        }
        self.model.set_tau_flat(&tau);

        self.model.geometry.validate_finite()?;
        self.model.renderer.validate_finite()?;

        if let Some(gt) = &self.gt_cameras {
            let (rot, trans) = crate::camera::camera_error(&self.model.cameras, gt)?;
            let n = rot.len().max(1) as f64;
            stats.cam_rot_err_deg = Some(rot.iter().sum::<f64>() / n);
            stats.cam_trans_err = Some(trans.iter().sum::<f64>() / n);
        }
        stats.epoch = epoch;
        stats.lr = lr;
        self.epoch += 1;
        Ok(stats)
    }

    /// Runs epochs until `cfg.epochs`, invoking the hook after each one
    /// (checkpointing, metrics). On a non-finite loss the last good state
    /// is left in place and the error is returned.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut hook: impl FnMut(&TrainSession, &StepStats) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.epoch < self.cfg.epochs {
            let before = (self.model.clone(), self.optimizer.clone(), self.epoch);
            match self.step_epoch(dataset) {
                Ok(stats) => hook(self, &stats)?,
                Err(e) => {
                    // roll back to the last good state for checkpointing
                    self.model = before.0;
                    self.optimizer = before.1;
                    self.epoch = before.2;
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}
