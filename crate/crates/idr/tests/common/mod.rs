//! Shared fixtures and independent oracles for the integration suites.
//!
//! The oracles here re-derive quantities through routes independent of the
//! implementation paths they check: bisection/Newton root finding instead
//! of sphere tracing, raw-gradient shading instead of the tape.

use std::path::{Path, PathBuf};

use idr::camera::Ray;
use idr::dataset::{Dataset, View};
use idr::math;
use idr::nets::SdfNetwork;
use idr::synth::{
    self, AnalyticSdf, LightAttachment, PhongMaterial, Scene, SceneLighting,
};
use idr::trace::SdfField;

/// First root of `f` along the ray inside the unit sphere by dense scan
/// plus bisection to ~1e-8; the reference for traced `t` values.
pub fn bisection_root(f: &dyn SdfField, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let (t0, t1) = synth::ray_sphere_span(origin, dir, 1.0)?;
    let n = 2048;
    let mut tp = t0;
    let mut fp = f.value(math::ray_at(origin, dir, tp));
    for i in 1..=n {
        let t = t0 + (t1 - t0) * i as f64 / n as f64;
        let fv = f.value(math::ray_at(origin, dir, t));
        if fv.signum() != fp.signum() {
            let (mut lo, mut hi, mut flo) = (tp, t, fp);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let fm = f.value(math::ray_at(origin, dir, mid));
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-9 {
                    break;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        tp = t;
        fp = fv;
    }
    None
}

/// Polishes a root of the network SDF by Newton iterations from a warm
/// start; used by finite-difference oracles that re-trace after each
/// parameter perturbation.
pub fn newton_root(net: &SdfNetwork, origin: [f64; 3], dir: [f64; 3], t_init: f64) -> f64 {
    let mut t = t_init;
    for _ in 0..30 {
        let x = math::ray_at(origin, dir, t);
        let (f, g) = net.value_and_grad_raw(x);
        let slope = math::dot3(g, dir);
        if slope.abs() < 1e-9 {
            break;
        }
        let step = f / slope;
        t -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    t
}

/// The toy reconstruction target: a blended sphere–torus union inside the
/// unit sphere, Phong-shaded with a mild specular lobe.
pub fn union_scene() -> Scene {
    Scene {
        sdf: AnalyticSdf::smooth_union(
            AnalyticSdf::sphere(0.42).at([0.0, 0.22, 0.0]),
            AnalyticSdf::torus(0.45, 0.15).at([0.0, -0.18, 0.0]),
            0.08,
        ),
        material: PhongMaterial {
            k_d: 0.75,
            k_s: 0.3,
            o_d: [0.85, 0.6, 0.35],
            o_s: [1.0, 1.0, 1.0],
            n_s: 24.0,
        },
        lighting: SceneLighting {
            ambient: [0.18, 0.18, 0.18],
            diffuse: [0.85, 0.85, 0.85],
            position: [2.0, 2.0, 2.5],
            attachment: LightAttachment::World,
        },
        background: [0.0; 3],
    }
}

/// Renders a dataset in memory (no files).
pub fn scene_dataset(scene: &Scene, n_views: usize, res: usize, seed: u64) -> Dataset {
    let cameras = synth::generate_cameras(n_views, 2.5, res, res, seed);
    let views = synth::generate_views(scene, &cameras, res, res);
    Dataset {
        views: views
            .iter()
            .enumerate()
            .map(|(i, (img, mask))| View {
                camera: i,
                width: res,
                height: res,
                rgb: img.pixels.iter().map(|p| p.map(|v| (v - 0.5) * 2.0)).collect(),
                mask: mask.pixels.clone(),
            })
            .collect(),
        cameras,
    }
}

/// Writes a dataset for command-level tests and returns its directory.
pub fn write_dataset(scene: &Scene, n_views: usize, res: usize, seed: u64, tag: &str) -> PathBuf {
    let dir = temp_dir(tag);
    let cameras = synth::generate_cameras(n_views, 2.5, res, res, seed);
    let views = synth::generate_views(scene, &cameras, res, res);
    idr::dataset::save_views(&dir, &cameras, &views).unwrap();
    dir
}

pub fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("idr-acc-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn cleanup(dir: &Path) {
    std::fs::remove_dir_all(dir).ok();
}

/// Random rays from outside the unit sphere aimed near the origin.
pub fn random_inward_rays(n: usize, seed: u64, spread: f64) -> Vec<Ray> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let origin = math::scale3(
                math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0f64))),
                2.5,
            );
            let target: [f64; 3] =
                std::array::from_fn(|_| rng.random_range(-spread..spread));
            Ray {
                origin,
                dir: math::normalize3(math::sub3(target, origin)),
                pixel: i as u32,
            }
        })
        .collect()
}
