//! Implicit-surface reconstruction from masked 2D images.
//!
//! The pipeline learns three things jointly from posed images and masks:
//! a signed-distance geometry network, a neural renderer approximating the
//! surface light field, and (optionally) the camera poses themselves. A
//! built-in analytic scene generator produces Phong-shaded ground truth so
//! the whole loop is verifiable end to end on a desk-scale CPU budget.
//!
//! Module map:
//! * [`autodiff`] — scalar tape with reverse-over-reverse second order
//! * [`nets`] — geometry and renderer MLPs, positional encoding, init
//! * [`camera`] — quaternion cameras, ray generation, pose metrics
//! * [`trace`] — sphere tracing with sampling fallback and secant polish
//! * [`render`] — the differentiable forward model (intersection, normals,
//!   soft mask, per-pixel radiance)
//! * [`loss`] / [`train`] — three-term loss, Adam, schedules, epoch loop
//! * [`synth`] — analytic SDF scenes shaded with the Phong model
//! * [`mesh`] — marching cubes, Chamfer-L1, PSNR
//! * [`config`] / [`checkpoint`] / [`dataset`] — file formats
//! * [`commands`] — the operations behind the `idr` CLI subcommands

pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod loss;
pub mod math;
pub mod mc_tables;
pub mod mesh;
pub mod nets;
pub mod parallel;
pub mod render;
pub mod synth;
pub mod trace;
pub mod train;

pub use autodiff::{AdError, GradMap, Tape, Var};
