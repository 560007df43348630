//! Non-differentiable root finding along rays.
//!
//! Sphere tracing marches by the current SDF value, so it never overshoots
//! the first crossing of a true distance function. Rays that stall (the
//! march is capped) fall back to a bidirectional restart: march backward
//! from the far side of the unit sphere, sample the bracketed span at
//! fixed resolution, and polish the first sign change with the secant
//! method. Rays with no sign change report the sampled argmin of `f`,
//! which the mask loss consumes.
//!
//! Everything here runs on plain floats; the differentiable model restores
//! gradients through the frozen hit parameters separately.

use thiserror::Error;

use crate::math;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("non-finite SDF value {value} at march step {step} (t = {t})")]
    NonFinite { value: f64, step: usize, t: f64 },
    #[error("secant endpoints do not bracket a crossing: f({t_lo}) = {f_lo}, f({t_hi}) = {f_hi}")]
    NoBracket {
        t_lo: f64,
        f_lo: f64,
        t_hi: f64,
        f_hi: f64,
    },
}

/// Scalar field sampled along rays. Implemented by the analytic scene
/// shapes, the geometry network, and plain closures (tests).
pub trait SdfField: Sync {
    fn value(&self, x: [f64; 3]) -> f64;
}

impl SdfField for crate::synth::AnalyticSdf {
    fn value(&self, x: [f64; 3]) -> f64 {
        self.distance(x)
    }
}

impl SdfField for crate::nets::SdfNetwork {
    fn value(&self, x: [f64; 3]) -> f64 {
        self.value_raw(x)
    }
}

impl<F: Fn([f64; 3]) -> f64 + Sync> SdfField for F {
    fn value(&self, x: [f64; 3]) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceStatus {
    /// The forward march reached `|f| <` threshold.
    Converged,
    /// The sampling fallback found a sign change and the secant polished it.
    SecantConverged,
    /// No crossing found; `t_min_sdf` holds the sampled argmin.
    Miss,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceResult {
    pub status: TraceStatus,
    /// Hit parameter for converged statuses; end of the forward march for
    /// misses.
    pub t: f64,
    pub steps_used: usize,
    /// For misses: the sampled ray parameter minimizing `f`.
    pub t_min_sdf: Option<f64>,
    /// Interval whose interior samples produced `t_min_sdf`.
    pub sample_window: Option<(f64, f64)>,
    /// `f` at `t` (converged) or at `t_min_sdf` (miss).
    pub f_value: f64,
}

impl TraceResult {
    pub fn hit(&self) -> bool {
        matches!(
            self.status,
            TraceStatus::Converged | TraceStatus::SecantConverged
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub max_sphere_steps: usize,
    pub sdf_threshold: f64,
    pub fallback_samples: usize,
    pub secant_iters: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            max_sphere_steps: 10,
            sdf_threshold: 5e-5,
            fallback_samples: 100,
            secant_iters: 8,
        }
    }
}

/// Entry and exit parameters of the ray in the unit sphere, clamped to
/// `t ≥ 0`; `None` when the ray misses it.
pub fn ray_unit_sphere(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    crate::synth::ray_sphere_span(origin, dir, 1.0)
}

/// Sphere tracing with bidirectional restart, fixed-count sampling and
/// secant refinement. Scenes are assumed to live inside the unit sphere;
/// rays missing it return `Miss` with the closest-approach parameter so
/// the mask term still has a point to evaluate.
pub fn sphere_trace(
    f: &dyn SdfField,
    origin: [f64; 3],
    dir: [f64; 3],
    cfg: &TraceConfig,
) -> Result<TraceResult, TraceError> {
    let Some((t_near, t_far)) = ray_unit_sphere(origin, dir) else {
        let t_ca = (-math::dot3(origin, dir)).max(0.0);
        let fv = f.value(math::ray_at(origin, dir, t_ca));
        return Ok(TraceResult {
            status: TraceStatus::Miss,
            t: t_ca,
            steps_used: 0,
            t_min_sdf: Some(t_ca),
            sample_window: None,
            f_value: fv,
        });
    };

    let eval = |t: f64| f.value(math::ray_at(origin, dir, t));
    let check = |v: f64, step: usize, t: f64| -> Result<f64, TraceError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TraceError::NonFinite { value: v, step, t })
        }
    };

    // forward march from the near intersection
    let mut steps = 0usize;
    let mut t = t_near;
    let mut fv = check(eval(t), 0, t)?;
    let started_inside = fv < 0.0;
    let mut converged = fv.abs() < cfg.sdf_threshold;
    while !converged && steps < cfg.max_sphere_steps {
        t += fv;
        steps += 1;
        if !(t_near..=t_far).contains(&t) {
            break; // marched out of the unit sphere
        }
        fv = check(eval(t), steps, t)?;
        converged = fv.abs() < cfg.sdf_threshold;
    }
    if converged {
        return Ok(TraceResult {
            status: TraceStatus::Converged,
            t,
            steps_used: steps,
            t_min_sdf: None,
            sample_window: None,
            f_value: fv,
        });
    }
    let t_fwd = t.clamp(t_near, t_far);

    // backward march from the far intersection
    let mut t_back = t_far;
    let mut fb = check(eval(t_back), steps, t_back)?;
    let mut back_steps = 0usize;
    while fb.abs() >= cfg.sdf_threshold && back_steps < cfg.max_sphere_steps {
        t_back -= fb;
        back_steps += 1;
        if !(t_near..=t_far).contains(&t_back) {
            break;
        }
        fb = check(eval(t_back), steps + back_steps, t_back)?;
    }
    steps += back_steps;

    // a ray starting inside the object walks backward out of the sphere;
    // its first crossing is where the backward march settles
    if started_inside && fb.abs() < cfg.sdf_threshold {
        return Ok(TraceResult {
            status: TraceStatus::Converged,
            t: t_back,
            steps_used: steps,
            t_min_sdf: None,
            sample_window: None,
            f_value: fb,
        });
    }

    // the marches may pass each other on miss rays; sample their hull
    let t_bwd = t_back.clamp(t_near, t_far);
    let lo = t_fwd.min(t_bwd);
    let hi = t_fwd.max(t_bwd);

    // fixed sampling strictly between the two march ends; the ends
    // themselves join the sign scan so a crossing in the first or last
    // gap is not skipped
    let n = cfg.fallback_samples;
    let span = hi - lo;
    let mut ts = Vec::with_capacity(n + 2);
    let mut fs = Vec::with_capacity(n + 2);
    ts.push(lo);
    fs.push(check(eval(lo), steps, lo)?);
    for i in 0..n {
        let ti = lo + span * (i + 1) as f64 / (n + 1) as f64;
        let fi = check(eval(ti), steps, ti)?;
        ts.push(ti);
        fs.push(fi);
    }
    ts.push(hi);
    fs.push(check(eval(hi), steps, hi)?);
    for i in 0..ts.len() - 1 {
        if fs[i].signum() != fs[i + 1].signum() {
            let t_hit = secant_refine(f, origin, dir, ts[i], ts[i + 1], cfg.secant_iters)?;
            let f_hit = eval(t_hit);
            return Ok(TraceResult {
                status: TraceStatus::SecantConverged,
                t: t_hit,
                steps_used: steps,
                t_min_sdf: None,
                sample_window: None,
                f_value: f_hit,
            });
        }
    }

    // the argmin reported for misses ranges over the interior samples only
    let mut best = 1usize;
    for i in 2..=n {
        if fs[i] < fs[best] {
            best = i;
        }
    }
    Ok(TraceResult {
        status: TraceStatus::Miss,
        t: t_fwd,
        steps_used: steps,
        t_min_sdf: Some(ts[best]),
        sample_window: Some((lo, hi)),
        f_value: fs[best],
    })
}

/// Secant root polish between bracketing parameters. Endpoints may come in
/// either order. Each iteration takes the secant step through the current
/// bracket and falls back to the midpoint when the denominator degenerates;
/// the sign-change bracket is maintained throughout, so the result cannot
/// escape to a different root on shallow grazing profiles.
pub fn secant_refine(
    f: &dyn SdfField,
    origin: [f64; 3],
    dir: [f64; 3],
    t_lo: f64,
    t_hi: f64,
    iters: usize,
) -> Result<f64, TraceError> {
    let (t_lo, t_hi) = if t_lo <= t_hi { (t_lo, t_hi) } else { (t_hi, t_lo) };
    let eval = |t: f64| f.value(math::ray_at(origin, dir, t));
    let (mut a, mut b) = (t_lo, t_hi);
    let (mut fa, mut fb) = (eval(a), eval(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(TraceError::NoBracket {
            t_lo: a,
            f_lo: fa,
            t_hi: b,
            f_hi: fb,
        });
    }
    // Illinois safeguard: when the same endpoint survives twice its value
    // is halved, which breaks the one-sided stagnation of plain
    // regula falsi while preserving the bracket.
    let mut x = b;
    let mut side = 0i8;
    for _ in 0..iters {
        let denom = fb - fa;
        x = if denom.abs() < 1e-12 {
            0.5 * (a + b)
        } else {
            b - fb * (b - a) / denom
        };
        if !(x > a && x < b) {
            x = 0.5 * (a + b);
        }
        let fx = eval(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            fb = fx;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
    }
    Ok(x)
}

/// Golden-section polish of a minimizer around a known coarse argmin.
/// `half_width` should be the sample spacing that produced `t_center`.
pub fn min_sdf_polish(
    f: &dyn SdfField,
    origin: [f64; 3],
    dir: [f64; 3],
    t_center: f64,
    half_width: f64,
) -> (f64, f64) {
    let eval = |t: f64| f.value(math::ray_at(origin, dir, t));
    let (mut lo, mut hi) = (t_center - half_width, (t_center + half_width).max(t_center));
    if lo < 0.0 {
        lo = 0.0;
    }
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..24 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = eval(x2);
        }
    }
    let t_star = 0.5 * (lo + hi);
    (t_star, eval(t_star))
}

/// Minimizer `t*` of `f` along the ray's chord through the unit sphere:
/// the argmin over `n` uniform samples, polished by golden-section search
/// in its bracketing interval. The polish matters for gradients — the
/// envelope theorem freezes `t*`, which is only exact where `∂f/∂t = 0`,
/// so the mask term's derivatives would otherwise carry an error
/// proportional to the sample spacing. Falls back to the closest approach
/// for rays missing the sphere.
pub fn min_sdf_on_span(f: &dyn SdfField, origin: [f64; 3], dir: [f64; 3], n: usize) -> (f64, f64) {
    let Some((t_near, t_far)) = ray_unit_sphere(origin, dir) else {
        let t_ca = (-math::dot3(origin, dir)).max(0.0);
        return (t_ca, f.value(math::ray_at(origin, dir, t_ca)));
    };
    let eval = |t: f64| f.value(math::ray_at(origin, dir, t));
    let at = |i: usize| t_near + (t_far - t_near) * i as f64 / (n + 1) as f64;
    let mut best_i = 0usize;
    let mut best_f = eval(at(0));
    for i in 1..=n + 1 {
        let fv = eval(at(i));
        if fv < best_f {
            best_f = fv;
            best_i = i;
        }
    }
    // golden-section polish inside the bracketing samples
    let spacing = (t_far - t_near) / (n + 1) as f64;
    min_sdf_polish(f, origin, dir, at(best_i), spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::AnalyticSdf;

    #[test]
    fn unit_sphere_intersections_match_analytic_cases() {
        let (a, b) = ray_unit_sphere([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 4.0).abs() < 1e-12);

        assert!(ray_unit_sphere([0.0, 0.0, 3.0], [0.0, 0.0, 1.0]).is_none());

        let (a, b) = ray_unit_sphere([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((a - 0.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_on_sphere_converges_analytically() {
        let sdf = AnalyticSdf::sphere(0.5);
        let r = sphere_trace(&sdf, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], &TraceConfig::default())
            .unwrap();
        assert_eq!(r.status, TraceStatus::Converged);
        assert!((r.t - 2.5).abs() < 1e-4, "t = {}", r.t);
        assert!(r.f_value.abs() < 5e-5);
    }

    #[test]
    fn passing_ray_reports_min_at_perpendicular_foot() {
        let sdf = AnalyticSdf::sphere(0.5);
        let r = sphere_trace(&sdf, [0.6, 0.0, 3.0], [0.0, 0.0, -1.0], &TraceConfig::default())
            .unwrap();
        assert_eq!(r.status, TraceStatus::Miss);
        let t_min = r.t_min_sdf.unwrap();
        assert!((t_min - 3.0).abs() < 0.05, "t_min = {t_min}");
        assert!((r.f_value - 0.1).abs() < 1e-3, "f at min = {}", r.f_value);
    }

    #[test]
    fn grazing_ray_converges_by_secant() {
        let sdf = AnalyticSdf::sphere(0.5);
        let r = sphere_trace(&sdf, [0.499, 0.0, 3.0], [0.0, 0.0, -1.0], &TraceConfig::default())
            .unwrap();
        assert_eq!(r.status, TraceStatus::SecantConverged);
        assert!(r.f_value.abs() < 1e-4, "f at hit = {}", r.f_value);
        // against the slow oracle
        let ray = crate::camera::Ray {
            origin: [0.499, 0.0, 3.0],
            dir: [0.0, 0.0, -1.0],
            pixel: 0,
        };
        let t_oracle = crate::synth::oracle_trace(&sdf, &ray).unwrap();
        assert!((r.t - t_oracle).abs() < 1e-4, "{} vs {}", r.t, t_oracle);
    }

    #[test]
    fn ray_outside_unit_sphere_misses_at_closest_approach() {
        let sdf = AnalyticSdf::sphere(0.5);
        let r = sphere_trace(&sdf, [2.0, 0.0, 3.0], [0.0, 0.0, -1.0], &TraceConfig::default())
            .unwrap();
        assert_eq!(r.status, TraceStatus::Miss);
        // closest approach to the origin along this ray is t = 3
        assert!((r.t_min_sdf.unwrap() - 3.0).abs() < 1e-12);
        assert!((r.f_value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn origin_inside_object_still_finds_the_crossing() {
        let sdf = AnalyticSdf::sphere(0.5);
        let r = sphere_trace(&sdf, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], &TraceConfig::default())
            .unwrap();
        assert!(r.hit());
        assert!((r.t - 0.5).abs() < 1e-3, "t = {}", r.t);
    }

    #[test]
    fn forward_march_never_overshoots_on_true_sdfs() {
        use std::cell::RefCell;
        let visited = RefCell::new(Vec::new());
        let base = AnalyticSdf::sphere(0.5);
        let recorder = |x: [f64; 3]| {
            let v = base.distance(x);
            visited.borrow_mut().push((x, v));
            v
        };
        // single-threaded test; the RefCell recorder is not Sync-safe but
        // sphere_trace itself never shares the field across threads
        struct NotSync<F>(F);
        impl<F: Fn([f64; 3]) -> f64> SdfField for NotSync<F> {
            fn value(&self, x: [f64; 3]) -> f64 {
                (self.0)(x)
            }
        }
        unsafe impl<F> Sync for NotSync<F> {}
        let r = sphere_trace(
            &NotSync(recorder),
            [0.1, 0.05, 3.0],
            [0.0, 0.0, -1.0],
            &TraceConfig {
                max_sphere_steps: 50,
                ..TraceConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.status, TraceStatus::Converged);
        // first root along the ray
        let ray = crate::camera::Ray {
            origin: [0.1, 0.05, 3.0],
            dir: [0.0, 0.0, -1.0],
            pixel: 0,
        };
        let t_root = crate::synth::oracle_trace(&base, &ray).unwrap();
        for (x, _) in visited.borrow().iter() {
            let t = 3.0 - x[2];
            assert!(t <= t_root + 1e-9, "march reached t = {t} past root {t_root}");
        }
    }

    #[test]
    fn traced_hits_agree_with_bisection_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let shapes = [AnalyticSdf::sphere(0.6), AnalyticSdf::torus(0.5, 0.2)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let cfg = TraceConfig::default();
        for sdf in &shapes {
            let mut hits = 0;
            for _ in 0..250 {
                let origin = math::scale3(
                    math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
                    2.5,
                );
                let target: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.7..0.7));
                let dir = math::normalize3(math::sub3(target, origin));
                let res = sphere_trace(sdf, origin, dir, &cfg).unwrap();
                let ray = crate::camera::Ray {
                    origin,
                    dir,
                    pixel: 0,
                };
                let oracle = crate::synth::oracle_trace(sdf, &ray);
                if res.hit() {
                    hits += 1;
                    let t_oracle = oracle.expect("trace hit but oracle missed");
                    assert!(
                        (res.t - t_oracle).abs() < 1e-4,
                        "{:?}: t {} vs oracle {}",
                        res.status,
                        res.t,
                        t_oracle
                    );
                }
            }
            assert!(hits > 100, "too few hits to be meaningful: {hits}");
        }
    }

    #[test]
    fn secant_is_exact_on_affine_fields() {
        // f linear in t along the ray: root after one iteration
        let f = |x: [f64; 3]| 0.7 * x[2] - 0.21;
        let t = secant_refine(&f, [0.0, 0.0, 1.0], [0.0, 0.0, -1.0], 0.2, 0.9, 1).unwrap();
        // along the ray: z = 1 - t, f = 0.7(1-t) - 0.21 = 0 at t = 0.7
        assert!((t - 0.7).abs() < 1e-12);
    }

    #[test]
    fn secant_matches_bisection_and_ignores_endpoint_order() {
        let sdf = AnalyticSdf::sphere(1.0);
        let (o, d) = ([0.3, -0.2, 3.0], [0.0, 0.0, -1.0]);
        let a = secant_refine(&sdf, o, d, 1.5, 2.8, 8).unwrap();
        let b = secant_refine(&sdf, o, d, 2.8, 1.5, 8).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // bisection oracle
        let (mut lo, mut hi) = (1.5, 2.8);
        let eval = |t: f64| sdf.distance(math::ray_at(o, d, t));
        let mut flo = eval(lo);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let fm = eval(mid);
            if fm.signum() == flo.signum() {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        let t_bis = 0.5 * (lo + hi);
        assert!((a - t_bis).abs() < 1e-6, "{a} vs {t_bis}");
    }

    #[test]
    fn secant_rejects_non_bracketing_endpoints() {
        let sdf = AnalyticSdf::sphere(0.5);
        let r = secant_refine(&sdf, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], 0.1, 0.2, 8);
        assert!(matches!(r, Err(TraceError::NoBracket { .. })));
    }

    #[test]
    fn non_finite_fields_report_the_step() {
        let f = |x: [f64; 3]| {
            if x[2] < 2.0 {
                f64::NAN
            } else {
                x[2] - 1.5
            }
        };
        let r = sphere_trace(&f, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], &TraceConfig::default());
        assert!(matches!(r, Err(TraceError::NonFinite { .. })));
    }

    #[test]
    fn min_sdf_span_covers_the_whole_chord() {
        // converged rays still get a t* from the full near..far span
        let sdf = AnalyticSdf::sphere(0.5);
        let (t_star, f_star) = min_sdf_on_span(&sdf, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], 100);
        assert!(f_star < -0.45, "min f over the chord should be deep inside");
        assert!((t_star - 3.0).abs() < 0.1);
    }
}
