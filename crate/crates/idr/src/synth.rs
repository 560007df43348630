//! Ground-truth scene oracle: analytic SDFs shaded with the Phong model.
//!
//! Everything here is closed-form, so rendered images, masks and cameras
//! serve as exact references for training and for the metric suite. Shapes
//! are true distance fields (`‖∇f‖ = 1` away from edge sets); the smooth
//! union is approximate near the blend region and callers relying on exact
//! distances should avoid it there.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{pixel_ray, quat_to_rot, Camera, CameraSet, Ray};
use crate::dataset::{ImageF, MaskImage};
use crate::math;
use crate::parallel;

/// A primitive or blended shape in its local frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Torus {
        major: f64,
        minor: f64,
    },
    Box {
        half: [f64; 3],
    },
    /// Polynomial smooth minimum of two posed shapes.
    SmoothUnion {
        a: Box<AnalyticSdf>,
        b: Box<AnalyticSdf>,
        blend: f64,
    },
}

/// Shape with a rigid pose: world point `x` maps to the local frame via
/// `R⁻¹ (x − t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSdf {
    pub shape: Shape,
    /// Rotation quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl AnalyticSdf {
    pub fn unposed(shape: Shape) -> Self {
        AnalyticSdf {
            shape,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::unposed(Shape::Sphere { radius })
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Self::unposed(Shape::Torus { major, minor })
    }

    pub fn cuboid(half: [f64; 3]) -> Self {
        Self::unposed(Shape::Box { half })
    }

    pub fn smooth_union(a: AnalyticSdf, b: AnalyticSdf, blend: f64) -> Self {
        Self::unposed(Shape::SmoothUnion {
            a: Box::new(a),
            b: Box::new(b),
            blend,
        })
    }

    pub fn at(mut self, translation: [f64; 3]) -> Self {
        self.translation = translation;
        self
    }

    pub fn rotated(mut self, q: [f64; 4]) -> Self {
        self.rotation = q;
        self
    }

    pub fn distance(&self, x: [f64; 3]) -> f64 {
        self.distance_grad(x).0
    }

    /// Closed-form distance and world-frame gradient.
    pub fn distance_grad(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let rot = quat_to_rot(self.rotation).expect("valid pose quaternion");
        let d = math::sub3(x, self.translation);
        // local = Rᵀ d (columns of R are the local axes in world)
        let local = [
            rot[0][0] * d[0] + rot[1][0] * d[1] + rot[2][0] * d[2],
            rot[0][1] * d[0] + rot[1][1] * d[1] + rot[2][1] * d[2],
            rot[0][2] * d[0] + rot[1][2] * d[1] + rot[2][2] * d[2],
        ];
        let (f, g_local) = self.shape.local_distance_grad(local);
        let g_world = [
            math::dot3(rot[0], g_local),
            math::dot3(rot[1], g_local),
            math::dot3(rot[2], g_local),
        ];
        (f, g_world)
    }
}

impl Shape {
    fn local_distance_grad(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        match self {
            Shape::Sphere { radius } => {
                let n = math::norm3(p);
                if n < 1e-15 {
                    (-radius, [0.0, 0.0, 1.0])
                } else {
                    (n - radius, math::scale3(p, 1.0 / n))
                }
            }
            Shape::Torus { major, minor } => {
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let q = [rho - major, p[2]];
                let qn = (q[0] * q[0] + q[1] * q[1]).sqrt();
                let f = qn - minor;
                if qn < 1e-15 {
                    return (f, [0.0, 0.0, 1.0]);
                }
                let grad = if rho < 1e-15 {
                    // on the axis the radial direction is ill-defined
                    [0.0, 0.0, q[1] / qn]
                } else {
                    [
                        q[0] / qn * p[0] / rho,
                        q[0] / qn * p[1] / rho,
                        q[1] / qn,
                    ]
                };
                (f, grad)
            }
            Shape::Box { half } => {
                let d = [
                    p[0].abs() - half[0],
                    p[1].abs() - half[1],
                    p[2].abs() - half[2],
                ];
                let outside = [d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)];
                let out_norm = math::norm3(outside);
                let inner = d[0].max(d[1]).max(d[2]).min(0.0);
                let f = out_norm + inner;
                let grad = if out_norm > 1e-15 {
                    [
                        outside[0] / out_norm * p[0].signum(),
                        outside[1] / out_norm * p[1].signum(),
                        outside[2] / out_norm * p[2].signum(),
                    ]
                } else {
                    // inside: the nearest face is along the largest component
                    let mut g = [0.0; 3];
                    let axis = if d[0] >= d[1] && d[0] >= d[2] {
                        0
                    } else if d[1] >= d[2] {
                        1
                    } else {
                        2
                    };
                    g[axis] = p[axis].signum();
                    g
                };
                (f, grad)
            }
            Shape::SmoothUnion { a, b, blend } => {
                let (fa, ga) = a.distance_grad(p);
                let (fb, gb) = b.distance_grad(p);
                let k = *blend;
                if k <= 0.0 {
                    return if fa <= fb { (fa, ga) } else { (fb, gb) };
                }
                let h = (0.5 + 0.5 * (fb - fa) / k).clamp(0.0, 1.0);
                let f = fb * (1.0 - h) + fa * h - k * h * (1.0 - h);
                // df/dfa = h, df/dfb = 1-h (the dh/df terms cancel exactly)
                let grad = math::add3(math::scale3(ga, h), math::scale3(gb, 1.0 - h));
                (f, grad)
            }
        }
    }
}

/// Phong material: diffuse/specular coefficients, colors, shininess.
#[derive(Debug, Clone, PartialEq)]
pub struct PhongMaterial {
    pub k_d: f64,
    pub k_s: f64,
    pub o_d: [f64; 3],
    pub o_s: [f64; 3],
    pub n_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightAttachment {
    World,
    /// Light position interpreted in the camera frame, so it moves with
    /// the view (emulates per-view lighting changes in captured data).
    Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLighting {
    pub ambient: [f64; 3],
    pub diffuse: [f64; 3],
    pub position: [f64; 3],
    pub attachment: LightAttachment,
}

/// `L = k_d O_d I_a + k_d O_d I_d (n̂·l̂)₊ + k_s O_s I_d (r̂·l̂)₊^{n_s}`
/// where `l̂` points from the surface to the light and `r̂` is the view
/// direction reflected about the normal. `v` is the ray direction (camera
/// toward surface); only its direction matters.
pub fn phong_shade(
    material: &PhongMaterial,
    lighting: &SceneLighting,
    light_pos: [f64; 3],
    x: [f64; 3],
    n: [f64; 3],
    v: [f64; 3],
) -> [f64; 3] {
    let n = math::normalize3(n);
    let wo = math::scale3(math::normalize3(v), -1.0);
    let l = math::normalize3(math::sub3(light_pos, x));
    // r̂ = −(I − 2 n̂ n̂ᵀ) w° = 2 (n̂·w°) n̂ − w°
    let r = math::sub3(math::scale3(n, 2.0 * math::dot3(n, wo)), wo);
    let diff = math::dot3(n, l).max(0.0);
    let spec = math::dot3(r, l).max(0.0).powf(material.n_s);
    std::array::from_fn(|c| {
        material.k_d * material.o_d[c] * lighting.ambient[c]
            + material.k_d * material.o_d[c] * lighting.diffuse[c] * diff
            + material.k_s * material.o_s[c] * lighting.diffuse[c] * spec
    })
}

/// A full synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sdf: AnalyticSdf,
    pub material: PhongMaterial,
    pub lighting: SceneLighting,
    pub background: [f64; 3],
}

impl Scene {
    fn light_world(&self, camera: &Camera) -> [f64; 3] {
        match self.lighting.attachment {
            LightAttachment::World => self.lighting.position,
            LightAttachment::Camera => {
                let rot = quat_to_rot(camera.q).expect("camera quaternion");
                let p = self.lighting.position;
                [
                    math::dot3(rot[0], p) + camera.c[0],
                    math::dot3(rot[1], p) + camera.c[1],
                    math::dot3(rot[2], p) + camera.c[2],
                ]
            }
        }
    }
}

/// First intersection of a ray with the analytic surface, polished by
/// bisection to ~1e-10 in `t`. Scans fixed steps over the padded unit
/// sphere so grazing hits are not missed.
pub fn oracle_trace(sdf: &AnalyticSdf, ray: &Ray) -> Option<f64> {
    let (t0, t1) = ray_sphere_span(ray.origin, ray.dir, 1.25)?;
    let n = 512;
    let dt = (t1 - t0) / n as f64;
    let mut t_prev = t0;
    let mut f_prev = sdf.distance(math::ray_at(ray.origin, ray.dir, t_prev));
    if f_prev <= 0.0 {
        return Some(t_prev);
    }
    for i in 1..=n {
        let t = t0 + dt * i as f64;
        let f = sdf.distance(math::ray_at(ray.origin, ray.dir, t));
        if f.signum() != f_prev.signum() {
            // bisect [t_prev, t]
            let (mut lo, mut hi) = (t_prev, t);
            let mut flo = f_prev;
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                let fm = sdf.distance(math::ray_at(ray.origin, ray.dir, mid));
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-10 {
                    break;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t_prev = t;
        f_prev = f;
    }
    None
}

/// Parameter span of a ray inside the origin-centered sphere of `radius`,
/// clamped to `t ≥ 0`. `None` if the ray misses it entirely.
pub fn ray_sphere_span(origin: [f64; 3], dir: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b = math::dot3(origin, dir);
    let c = math::dot3(origin, origin) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t_near, t_far) = (-b - sq, -b + sq);
    if t_far < 0.0 {
        return None;
    }
    Some((t_near.max(0.0), t_far))
}

/// Renders one view against the analytic scene. Pure and deterministic;
/// pixels are traced in parallel and written in row-major order.
pub fn render_ground_truth(
    scene: &Scene,
    camera: &Camera,
    width: usize,
    height: usize,
) -> (ImageF, MaskImage) {
    let light = scene.light_world(camera);
    let rows = parallel::map_chunks(height, |y| {
        let mut rgb_row = Vec::with_capacity(width);
        let mut mask_row = Vec::with_capacity(width);
        for x in 0..width {
            let ray = pixel_ray(
                camera,
                x as f64 + 0.5,
                y as f64 + 0.5,
                (y * width + x) as u32,
            )
            .expect("valid camera");
            match oracle_trace(&scene.sdf, &ray) {
                Some(t) => {
                    let p = math::ray_at(ray.origin, ray.dir, t);
                    let (_, g) = scene.sdf.distance_grad(p);
                    let shade = phong_shade(&scene.material, &scene.lighting, light, p, g, ray.dir);
                    rgb_row.push(shade.map(|v| v.clamp(0.0, 1.0)));
                    mask_row.push(true);
                }
                None => {
                    rgb_row.push(scene.background.map(|v| v.clamp(0.0, 1.0)));
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

/// Cameras on a jittered sphere of the given radius looking at the origin
/// (golden-angle spiral, poles avoided). Deterministic by seed.
pub fn generate_cameras(
    n: usize,
    radius: f64,
    width: usize,
    height: usize,
    seed: u64,
) -> CameraSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let half_fov = 24f64.to_radians();
    let focal = 0.5 * width as f64 / half_fov.tan();
    let k = [
        [focal, 0.0, width as f64 / 2.0],
        [0.0, focal, height as f64 / 2.0],
        [0.0, 0.0, 1.0],
    ];
    let cameras = (0..n)
        .map(|i| {
            // z in (−0.8, 0.8) so no camera sits at a pole
            let z = -0.8 + 1.6 * ((i as f64 + 0.5) / n as f64) + rng.random_range(-0.02..0.02);
            let theta = golden * i as f64 + rng.random_range(-0.05..0.05);
            let r_xy = (1.0 - z * z).max(0.0).sqrt();
            let dist = radius * (1.0 + rng.random_range(-0.04..0.04));
            let eye = [
                dist * r_xy * theta.cos(),
                dist * r_xy * theta.sin(),
                dist * z,
            ];
            Camera::look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], k)
        })
        .collect();
    CameraSet { cameras }
}

/// Renders every view of the scene. Same seed, same scene → identical
/// output.
pub fn generate_views(
    scene: &Scene,
    cameras: &CameraSet,
    width: usize,
    height: usize,
) -> Vec<(ImageF, MaskImage)> {
    cameras
        .cameras
        .iter()
        .map(|cam| render_ground_truth(scene, cam, width, height))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_material() -> PhongMaterial {
        PhongMaterial {
            k_d: 0.8,
            k_s: 0.4,
            o_d: [0.9, 0.6, 0.3],
            o_s: [1.0, 1.0, 1.0],
            n_s: 20.0,
        }
    }

    fn test_lighting() -> SceneLighting {
        SceneLighting {
            ambient: [0.15, 0.15, 0.15],
            diffuse: [0.9, 0.9, 0.9],
            position: [2.0, 2.0, 2.0],
            attachment: LightAttachment::World,
        }
    }

    #[test]
    fn analytic_distances_match_closed_forms() {
        let s = AnalyticSdf::sphere(1.0);
        let (f, g) = s.distance_grad([0.0, 0.0, 2.0]);
        assert!((f - 1.0).abs() < 1e-15);
        assert!(math::sub3(g, [0.0, 0.0, 1.0]).iter().all(|v| v.abs() < 1e-15));

        let t = AnalyticSdf::torus(0.5, 0.2);
        assert!((t.distance([0.0, 0.0, 0.0]) - 0.3).abs() < 1e-15);

        let b = AnalyticSdf::cuboid([0.5, 0.5, 0.5]);
        assert!((b.distance([1.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradients_are_unit_norm_away_from_edges() {
        use rand::Rng;
        let shapes = [
            AnalyticSdf::sphere(0.6),
            AnalyticSdf::torus(0.5, 0.2),
            AnalyticSdf::cuboid([0.4, 0.3, 0.5]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for s in &shapes {
            for _ in 0..300 {
                let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
                let (f, g) = s.distance_grad(x);
                if f.abs() < 1e-3 {
                    continue; // numeric sign flips right on the surface
                }
                let n = math::norm3(g);
                assert!((n - 1.0).abs() < 1e-9, "{s:?} at {x:?}: ‖∇f‖ = {n}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        let s = AnalyticSdf::smooth_union(
            AnalyticSdf::sphere(0.45).at([0.0, 0.25, 0.0]),
            AnalyticSdf::torus(0.45, 0.15).at([0.0, -0.2, 0.0]),
            0.1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..200 {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.2..1.2));
            let (_, g) = s.distance_grad(x);
            for i in 0..3 {
                let mut hi = x;
                let mut lo = x;
                hi[i] += h;
                lo[i] -= h;
                let fd = (s.distance(hi) - s.distance(lo)) / (2.0 * h);
                // skip kinks of the clamp
                if (g[i] - fd).abs() > 1e-4 {
                    let (_, g2) = s.distance_grad(math::add3(x, [h * 10.0; 3]));
                    if (g2[i] - g[i]).abs() > 1e-3 {
                        continue;
                    }
                }
                assert!((g[i] - fd).abs() < 1e-4, "component {i} at {x:?}: {} vs {}", g[i], fd);
            }
        }
    }

    #[test]
    fn posed_shapes_transform_correctly() {
        // sphere moved to (0.5, 0, 0): distance from origin is 0.5 - r
        let s = AnalyticSdf::sphere(0.2).at([0.5, 0.0, 0.0]);
        assert!((s.distance([0.0, 0.0, 0.0]) - 0.3).abs() < 1e-15);
        // rotated box: 90° about z swaps x/y extents
        let a = std::f64::consts::FRAC_PI_4;
        let b = AnalyticSdf::cuboid([0.5, 0.1, 0.1]).rotated([a.cos(), 0.0, 0.0, a.sin()]);
        assert!((b.distance([0.0, 0.7, 0.0]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn phong_terms_match_worked_examples() {
        let lighting = test_lighting();
        // n facing the light head on, no specular
        let m = PhongMaterial {
            k_s: 0.0,
            ..test_material()
        };
        let x = [0.0, 0.0, 0.0];
        let lp = [0.0, 0.0, 2.0];
        let shade = phong_shade(&m, &lighting, lp, x, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]);
        for c in 0..3 {
            let expect = m.k_d * m.o_d[c] * (lighting.ambient[c] + lighting.diffuse[c]);
            assert!((shade[c] - expect).abs() < 1e-12);
        }
        // light behind the surface: ambient only
        let shade = phong_shade(&m, &lighting, [0.0, 0.0, -2.0], x, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]);
        for c in 0..3 {
            let expect = m.k_d * m.o_d[c] * lighting.ambient[c];
            assert!((shade[c] - expect).abs() < 1e-12);
        }
        // mirror configuration: r̂ = l̂ and k_d = 0 gives k_s·O_s·I_d
        let m = PhongMaterial {
            k_d: 0.0,
            ..test_material()
        };
        // view straight down +z onto n = +z: w° = (0,0,-1)... use n = +z,
        // v = (0,0,-1) (camera above looking down): w° = +z, r̂ = +z.
        let shade = phong_shade(&m, &lighting, [0.0, 0.0, 5.0], x, [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]);
        for c in 0..3 {
            let expect = m.k_s * m.o_s[c] * lighting.diffuse[c];
            assert!((shade[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shading_ignores_view_vector_scale() {
        let m = test_material();
        let l = test_lighting();
        let x = [0.1, 0.2, 0.3];
        let n = math::normalize3([0.3, 0.5, 1.0]);
        let a = phong_shade(&m, &l, l.position, x, n, [0.2, -0.4, 0.9]);
        let b = phong_shade(&m, &l, l.position, x, n, math::scale3([0.2, -0.4, 0.9], 7.5));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn shading_is_equivariant_under_rigid_rotation() {
        let m = test_material();
        let l = test_lighting();
        let x = [0.2, -0.1, 0.4];
        let n = math::normalize3([0.1, 0.9, 0.3]);
        let v = math::normalize3([-0.5, 0.2, 0.8]);
        let lp = [1.5, -2.0, 1.0];
        let a = phong_shade(&m, &l, lp, x, n, v);

        let half = 0.3f64;
        let axis = math::normalize3([0.2, 1.0, -0.5]);
        let q = [half.cos(), axis[0] * half.sin(), axis[1] * half.sin(), axis[2] * half.sin()];
        let rot = quat_to_rot(q).unwrap();
        let rot_v = |p: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| math::dot3(rot[i], p)) };
        let b = phong_shade(&m, &l, rot_v(lp), rot_v(x), rot_v(n), rot_v(v));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn radiance_distinguishes_normals_and_views() {
        // two configurations differing only in n give different radiance,
        // and two differing only in v give different radiance
        let m = test_material();
        let l = test_lighting();
        let x = [0.0, 0.0, 0.5];
        let lp = [1.5, 0.5, 2.0];
        let v = math::normalize3([0.0, -0.3, -1.0]);
        let n1 = [0.0, 0.0, 1.0];
        let n2 = math::normalize3([0.6, 0.0, 0.8]);
        let by_n1 = phong_shade(&m, &l, lp, x, n1, v);
        let by_n2 = phong_shade(&m, &l, lp, x, n2, v);
        let dn: f64 = (0..3).map(|c| (by_n1[c] - by_n2[c]).abs()).sum();
        assert!(dn > 0.05, "normal change moved radiance by only {dn}");

        let v2 = math::normalize3([0.7, 0.2, -0.7]);
        let by_v1 = phong_shade(&m, &l, lp, x, n1, v);
        let by_v2 = phong_shade(&m, &l, lp, x, n1, v2);
        let dv: f64 = (0..3).map(|c| (by_v1[c] - by_v2[c]).abs()).sum();
        assert!(dv > 0.05, "view change moved radiance by only {dv}");
    }

    #[test]
    fn sphere_mask_is_a_disc_of_projective_radius() {
        let scene = Scene {
            sdf: AnalyticSdf::sphere(0.5),
            material: test_material(),
            lighting: test_lighting(),
            background: [0.0; 3],
        };
        let (w, h) = (96, 96);
        let cams = generate_cameras(1, 2.5, w, h, 0);
        let cam = &cams.cameras[0];
        let (_, mask) = render_ground_truth(&scene, cam, w, h);

        // projected radius of a sphere of radius r at distance d:
        // focal · r / sqrt(d² − r²)
        let d = math::norm3(cam.c);
        let focal = cam.k[0][0];
        let expect_r = focal * 0.5 / (d * d - 0.25).sqrt();
        let area = mask.count() as f64;
        let measured_r = (area / std::f64::consts::PI).sqrt();
        assert!(
            (measured_r - expect_r).abs() < 1.0,
            "disc radius {measured_r:.2}px vs {expect_r:.2}px"
        );
        // and the disc is centered: mask at the center pixel
        assert!(mask.at(w / 2, h / 2));
    }

    #[test]
    fn head_on_sphere_is_brightest_at_center_with_light_at_camera() {
        let scene = Scene {
            sdf: AnalyticSdf::sphere(0.5),
            material: PhongMaterial {
                k_s: 0.0,
                ..test_material()
            },
            lighting: SceneLighting {
                position: [0.0, 0.0, 0.0],
                attachment: LightAttachment::Camera,
                ..test_lighting()
            },
            background: [0.0; 3],
        };
        let (w, h) = (65, 65);
        let cam = Camera::look_at(
            [0.0, 0.0, 2.5],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [[80.0, 0.0, 32.5], [0.0, 80.0, 32.5], [0.0, 0.0, 1.0]],
        );
        let (img, mask) = render_ground_truth(&scene, &cam, w, h);
        let center = img.at(w / 2, h / 2)[0];
        for y in 0..h {
            for x in 0..w {
                if mask.at(x, y) {
                    assert!(img.at(x, y)[0] <= center + 1e-9);
                }
            }
        }
    }

    #[test]
    fn rendering_is_bit_identical_across_runs() {
        let scene = Scene {
            sdf: AnalyticSdf::smooth_union(
                AnalyticSdf::sphere(0.4).at([0.1, 0.0, 0.0]),
                AnalyticSdf::torus(0.4, 0.15),
                0.08,
            ),
            material: test_material(),
            lighting: test_lighting(),
            background: [0.0; 3],
        };
        let cams = generate_cameras(2, 2.5, 32, 32, 9);
        let a = generate_views(&scene, &cams, 32, 32);
        let b = generate_views(&scene, &cams, 32, 32);
        assert_eq!(a, b);
    }

    #[test]
    fn generated_cameras_are_deterministic_and_cover_the_object() {
        let a = generate_cameras(16, 2.5, 96, 96, 3);
        let b = generate_cameras(16, 2.5, 96, 96, 3);
        assert_eq!(a, b);
        assert_eq!(a.cameras.len(), 16);

        // every point of the unit-radius object sphere projects inside the
        // image bounds for every camera
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cam in &a.cameras {
            let rot = quat_to_rot(cam.q).unwrap();
            for _ in 0..200 {
                let p = math::scale3(
                    math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
                    0.9,
                );
                let d = math::sub3(p, cam.c);
                // camera frame: columns of rot are camera axes in world
                let local = [
                    rot[0][0] * d[0] + rot[1][0] * d[1] + rot[2][0] * d[2],
                    rot[0][1] * d[0] + rot[1][1] * d[1] + rot[2][1] * d[2],
                    rot[0][2] * d[0] + rot[1][2] * d[1] + rot[2][2] * d[2],
                ];
                assert!(local[2] > 0.0, "object point behind camera");
                let px = cam.k[0][0] * local[0] / local[2] + cam.k[0][2];
                let py = cam.k[1][1] * local[1] / local[2] + cam.k[1][2];
                assert!(px > 0.0 && px < 96.0 && py > 0.0 && py < 96.0, "({px}, {py})");
            }
        }
    }
}
