//! The differentiable forward model.
//!
//! Ray tracing runs off-tape and produces frozen hit parameters; this
//! module restores exact first derivatives through them. The intersection
//! is rebuilt as
//!
//! `x̂ = c + t₀·v − v/(∇ₓf(x₀;θ₀)·v₀) · f(c + t₀·v; θ)`
//!
//! with `t₀` and the denominator detached at the current parameters and
//! `c`, `v`, `f` live, which matches the true intersection in value and in
//! its first derivatives with respect to geometry and camera parameters.
//! Normals are live normalized gradients (their computation records tape
//! nodes, so second-order terms reach the parameters), the soft mask
//! applies the envelope theorem by freezing the minimizing `t*`, and the
//! per-pixel radiance feeds the surface point, normal, feature vector and
//! encoded view direction to the renderer network.

use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::math;
use crate::nets::{RenderInputs, Renderer, SdfNetwork};

/// Rays with `|∇ₓf(x₀)·v₀|` below this are treated as tangent and demoted
/// to the outside partition for the step; the intersection formula divides
/// by that quantity.
pub const GRAZING_THRESHOLD: f64 = 1e-2;

const NORMAL_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("ray tangent to surface: |∇ₓf·v| = {0} is below the grazing threshold")]
    GrazingRay(f64),
    #[error("degenerate normal: ‖∇ₓf‖ = {0}")]
    DegenerateNormal(f64),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// A geometry field that can record itself on a tape with live parameters
/// and evaluate detached values/gradients off-tape. Implemented by the
/// geometry network bound to its parameter leaf block, and by analytic
/// fixtures in tests.
pub trait TapeSdf {
    /// Records `F(x; θ) = (f, z)`; `z` may be empty for fixtures.
    fn eval(&self, tape: &mut Tape, x: [Var; 3]) -> Result<(Var, Vec<Var>), AdError>;
    /// Records the distance head alone, when the feature vector is not
    /// needed (mask and eikonal terms).
    fn eval_f(&self, tape: &mut Tape, x: [Var; 3]) -> Result<Var, AdError> {
        Ok(self.eval(tape, x)?.0)
    }
    /// Detached value at the current parameters.
    fn value_at(&self, x: [f64; 3]) -> f64;
    /// Detached spatial gradient at the current parameters.
    fn grad_at(&self, x: [f64; 3]) -> [f64; 3];
}

/// The geometry network bound to its leaf block on some tape.
pub struct BoundSdf<'a> {
    pub net: &'a SdfNetwork,
    pub base: u32,
}

impl TapeSdf for BoundSdf<'_> {
    fn eval(&self, tape: &mut Tape, x: [Var; 3]) -> Result<(Var, Vec<Var>), AdError> {
        Ok(self.net.forward_tape(tape, self.base, x))
    }
    fn eval_f(&self, tape: &mut Tape, x: [Var; 3]) -> Result<Var, AdError> {
        Ok(self.net.forward_tape_f_only(tape, self.base, x))
    }
    fn value_at(&self, x: [f64; 3]) -> f64 {
        self.net.value_raw(x)
    }
    fn grad_at(&self, x: [f64; 3]) -> [f64; 3] {
        self.net.value_and_grad_raw(x).1
    }
}

/// The intersection point as tape nodes, plus the frozen quantities that
/// define it.
pub struct DiffIntersection {
    pub x_hat: [Var; 3],
    /// Frozen hit parameter from the tracer.
    pub t0: f64,
    /// Hit point at the current parameters.
    pub x0: [f64; 3],
    /// Ray direction at the current parameters.
    pub v0: [f64; 3],
    /// Frozen denominator `∇ₓf(x₀;θ₀)·v₀`.
    pub denom: f64,
}

/// Builds the differentiable intersection for a converged trace. `c` and
/// `v` are live ray nodes (functions of the camera parameters); `t0` comes
/// from the tracer and stays constant to the graph.
pub fn differentiable_intersection(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    c: [Var; 3],
    v: [Var; 3],
    t0: f64,
) -> Result<DiffIntersection, RenderError> {
    let c0 = c.map(|ci| tape.value(ci));
    let v0 = v.map(|vi| tape.value(vi));
    let x0 = math::ray_at(c0, v0, t0);
    let denom = math::dot3(sdf.grad_at(x0), v0);
    if denom.abs() <= GRAZING_THRESHOLD {
        return Err(RenderError::GrazingRay(denom.abs()));
    }

    let t0c = tape.constant(t0);
    let arg: [Var; 3] = std::array::from_fn(|i| {
        let tv = tape.mul(t0c, v[i]);
        tape.add(c[i], tv)
    });
    let (f_arg, _) = sdf.eval(tape, arg)?;
    let dc = tape.constant(denom);
    let corr = tape.div(f_arg, dc)?;
    let x_hat: [Var; 3] = std::array::from_fn(|i| {
        let cv = tape.mul(corr, v[i]);
        tape.sub(arg[i], cv)
    });
    Ok(DiffIntersection {
        x_hat,
        t0,
        x0,
        v0,
        denom,
    })
}

/// Surface quantities at a differentiable point: live `f`, feature vector,
/// and the unit normal with its gradient recorded for second order.
pub struct SurfacePoint {
    pub f: Var,
    pub feature: Vec<Var>,
    pub normal: [Var; 3],
    /// `‖∇ₓf‖` at the point — the eikonal term reuses it.
    pub grad_norm: Var,
}

/// Evaluates the geometry at `x̂` and forms `n̂ = ∇ₓf / ‖∇ₓf‖`. The reverse
/// sweep that produces `∇ₓf` records tape nodes, so gradients of anything
/// built on the normal flow back to the parameters.
pub fn surface_point(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    x_hat: [Var; 3],
) -> Result<SurfacePoint, RenderError> {
    let (f, feature) = sdf.eval(tape, x_hat)?;
    let (normal, grad_norm) = live_normal(tape, f, x_hat)?;
    Ok(SurfacePoint {
        f,
        feature,
        normal,
        grad_norm,
    })
}

/// The unit normal alone (spec surface: `surface_normal`).
pub fn surface_normal(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    x_hat: [Var; 3],
) -> Result<[Var; 3], RenderError> {
    let (f, _) = sdf.eval(tape, x_hat)?;
    Ok(live_normal(tape, f, x_hat)?.0)
}

/// `∇ₓf` at `x_hat` as tape nodes (emitting reverse sweep).
fn live_grad(tape: &mut Tape, f: Var, x_hat: [Var; 3]) -> Result<[Var; 3], AdError> {
    let gm = tape.backward(f, &x_hat)?;
    let zero = tape.constant(0.0);
    Ok(std::array::from_fn(|i| gm.var(x_hat[i]).unwrap_or(zero)))
}

/// `‖∇ₓf‖` as a differentiable tape node.
pub fn grad_norm_from(tape: &mut Tape, f: Var, x_hat: [Var; 3]) -> Result<Var, AdError> {
    let g = live_grad(tape, f, x_hat)?;
    let g2 = tape.dot(&g, &g);
    tape.sqrt(g2)
}

fn live_normal(tape: &mut Tape, f: Var, x_hat: [Var; 3]) -> Result<([Var; 3], Var), RenderError> {
    let g = live_grad(tape, f, x_hat)?;
    let gval = g.map(|gi| tape.value(gi));
    let gnorm = math::norm3(gval);
    if gnorm < NORMAL_EPS {
        return Err(RenderError::DegenerateNormal(gnorm));
    }
    let g2 = tape.dot(&g, &g);
    let n = tape.sqrt(g2)?;
    let normal = [
        tape.div(g[0], n)?,
        tape.div(g[1], n)?,
        tape.div(g[2], n)?,
    ];
    Ok((normal, n))
}

/// Soft occupancy `sigmoid(−α · f(c + t*·v; θ))` with the minimizing `t*`
/// frozen (envelope theorem): derivatives flow through `f` only.
pub fn soft_mask(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    c: [Var; 3],
    v: [Var; 3],
    t_star: f64,
    alpha: f64,
) -> Result<Var, RenderError> {
    let tc = tape.constant(t_star);
    let arg: [Var; 3] = std::array::from_fn(|i| {
        let tv = tape.mul(tc, v[i]);
        tape.add(c[i], tv)
    });
    let f = sdf.eval_f(tape, arg)?;
    let ac = tape.constant(alpha);
    let af = tape.mul(ac, f);
    let neg = tape.neg(af);
    Ok(tape.sigmoid(neg))
}

/// Full differentiable radiance of one surface pixel:
/// `L = M(x̂, n̂, ẑ, δ_k(v); γ)`. Inputs the renderer is configured
/// without (ablations) are simply not computed.
pub fn forward_pixel(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    renderer: &Renderer,
    renderer_base: u32,
    c: [Var; 3],
    v: [Var; 3],
    t0: f64,
) -> Result<PixelForward, RenderError> {
    let inter = differentiable_intersection(tape, sdf, c, v, t0)?;
    let (f, feature) = sdf.eval(tape, inter.x_hat)?;
    let (normal, grad_norm) = if renderer.cfg.use_normal {
        let (n, gn) = live_normal(tape, f, inter.x_hat)?;
        (Some(n), Some(gn))
    } else {
        (None, None)
    };
    let rgb = renderer.forward_tape(
        tape,
        renderer_base,
        &RenderInputs {
            x: inter.x_hat,
            normal,
            feature: renderer.cfg.use_feature.then_some(feature.as_slice()),
            view: renderer.cfg.use_view.then_some(v),
        },
    );
    Ok(PixelForward {
        rgb,
        intersection: inter,
        f,
        feature,
        normal,
        grad_norm,
    })
}

/// Everything the loss needs from one surface pixel.
pub struct PixelForward {
    pub rgb: [Var; 3],
    pub intersection: DiffIntersection,
    /// Live `f` at `x̂` (an eikonal sample point).
    pub f: Var,
    pub feature: Vec<Var>,
    pub normal: Option<[Var; 3]>,
    /// `‖∇ₓf(x̂)‖` when the normal was built; the eikonal term reuses it.
    pub grad_norm: Option<Var>,
}

/// Detached shading of a traced hit — the inference path used by image
/// rendering and by finite-difference oracles (which re-trace and call
/// this). Mirrors the tape pipeline on plain floats.
pub fn shade_hit_raw(
    net: &SdfNetwork,
    renderer: &Renderer,
    x0: [f64; 3],
    v: [f64; 3],
) -> Option<[f64; 3]> {
    let (_, z) = net.forward_raw(x0);
    let normal = if renderer.cfg.use_normal {
        let (_, g) = net.value_and_grad_raw(x0);
        let n = math::norm3(g);
        if n < NORMAL_EPS {
            return None;
        }
        Some(math::scale3(g, 1.0 / n))
    } else {
        None
    };
    Some(renderer.forward_raw(&RenderInputs {
        x: x0,
        normal,
        feature: renderer.cfg.use_feature.then_some(z.as_slice()),
        view: renderer.cfg.use_view.then_some(v),
    }))
}

/// Renders a full view at inference: trace each pixel, shade hits with
/// the detached pipeline, fill misses with the background color. Returns
/// the image in [0, 1] plus the hit mask. Rows render in parallel and
/// assemble in order.
pub fn render_view(
    net: &SdfNetwork,
    renderer: &Renderer,
    camera: &crate::camera::Camera,
    width: usize,
    height: usize,
    trace_cfg: &crate::trace::TraceConfig,
    background: [f64; 3],
) -> (crate::dataset::ImageF, crate::dataset::MaskImage) {
    use crate::dataset::{ImageF, MaskImage};
    let rows = crate::parallel::map_chunks(height, |y| {
        let mut rgb_row = Vec::with_capacity(width);
        let mut mask_row = Vec::with_capacity(width);
        for x in 0..width {
            let ray = crate::camera::pixel_ray(
                camera,
                x as f64 + 0.5,
                y as f64 + 0.5,
                (y * width + x) as u32,
            )
            .expect("valid camera");
            let trace = crate::trace::sphere_trace(net, ray.origin, ray.dir, trace_cfg);
            let shaded = match trace {
                Ok(t) if t.hit() => {
                    let x0 = math::ray_at(ray.origin, ray.dir, t.t);
                    shade_hit_raw(net, renderer, x0, ray.dir)
                }
                _ => None,
            };
            match shaded {
                Some(rgb) => {
                    // renderer output is in [-1, 1]; images store [0, 1]
                    rgb_row.push(rgb.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)));
                    mask_row.push(true);
                }
                None => {
                    rgb_row.push(background.map(|v| v.clamp(0.0, 1.0)));
                    mask_row.push(false);
                }
            }
        }
        (rgb_row, mask_row)
    });
    let mut img = ImageF::new(width, height);
    let mut mask = MaskImage::new(width, height);
    for (y, (rgb_row, mask_row)) in rows.into_iter().enumerate() {
        for x in 0..width {
            img.set(x, y, rgb_row[x]);
            mask.pixels[y * width + x] = mask_row[x];
        }
    }
    (img, mask)
}
