//! Trainable cameras: quaternion rotation, center, fixed intrinsics.
//!
//! A camera is `C = (q, c, K)`. The quaternion is stored unnormalized as
//! the trainable parameter and normalized inside every forward pass, so
//! optimization stays unconstrained while rays always use a unit rotation.
//! Rays follow `v = Q(q) K⁻¹ p̃ / ‖K⁻¹ p̃‖` with `p̃ = (px, py, 1)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::math;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("degenerate quaternion with norm {0}")]
    DegenerateQuaternion(f64),
    #[error("intrinsics not invertible (det = {0})")]
    SingularIntrinsics(f64),
    #[error("camera counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("camera file {path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One camera: rotation quaternion `(w, x, y, z)`, center, 3×3 intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub q: [f64; 4],
    pub c: [f64; 3],
    pub k: [[f64; 3]; 3],
}

/// Ordered camera list; indices match image indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraSet {
    pub cameras: Vec<Camera>,
}

/// A ray through one pixel.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    /// Linear pixel index within its image (row-major).
    pub pixel: u32,
}

/// Rotation matrix of a quaternion, normalizing first. Rows are world
/// axes of the camera frame (camera-to-world).
pub fn quat_to_rot(q: [f64; 4]) -> Result<[[f64; 3]; 3], CameraError> {
    let n2 = q.iter().map(|v| v * v).sum::<f64>();
    let n = n2.sqrt();
    if n < 1e-12 {
        return Err(CameraError::DegenerateQuaternion(n));
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Tape counterpart of [`quat_to_rot`]; gradients flow through the
/// normalization into the raw quaternion.
pub fn quat_to_rot_tape(tape: &mut Tape, q: [Var; 4]) -> Result<[[Var; 3]; 3], crate::AdError> {
    let qq = tape.dot(&q, &q);
    let n = tape.sqrt(qq)?;
    let w = tape.div(q[0], n)?;
    let x = tape.div(q[1], n)?;
    let y = tape.div(q[2], n)?;
    let z = tape.div(q[3], n)?;
    let one = tape.constant(1.0);
    let two = tape.constant(2.0);

    let mut term = |a: Var, b: Var, si: f64, c2: Var, d: Var, s2: f64| -> Var {
        // 2*(a*b ± c*d)
        let ab = tape.mul(a, b);
        let cd = tape.mul(c2, d);
        let s = if si > 0.0 {
            if s2 > 0.0 {
                tape.add(ab, cd)
            } else {
                tape.sub(ab, cd)
            }
        } else {
            unreachable!()
        };
        tape.mul(two, s)
    };
    let r01 = term(x, y, 1.0, w, z, -1.0);
    let r02 = term(x, z, 1.0, w, y, 1.0);
    let r10 = term(x, y, 1.0, w, z, 1.0);
    let r12 = term(y, z, 1.0, w, x, -1.0);
    let r20 = term(x, z, 1.0, w, y, -1.0);
    let r21 = term(y, z, 1.0, w, x, 1.0);

    let mut diag = |a: Var, b: Var| -> Var {
        // 1 - 2*(a² + b²)
        let aa = tape.mul(a, a);
        let bb = tape.mul(b, b);
        let s = tape.add(aa, bb);
        let s2 = tape.mul(two, s);
        tape.sub(one, s2)
    };
    let r00 = diag(y, z);
    let r11 = diag(x, z);
    let r22 = diag(x, y);

    Ok([[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]])
}

fn invert3(m: [[f64; 3]; 3]) -> Result<[[f64; 3]; 3], CameraError> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return Err(CameraError::SingularIntrinsics(det));
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, d) = ((j + 1) % 3, (j + 2) % 3);
            // transpose of the cofactor matrix
            inv[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    Ok(inv)
}

impl Camera {
    /// Looking at `target` from `eye` with the image x-axis to the right
    /// and y downward; `up_hint` picks the roll.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up_hint: [f64; 3], k: [[f64; 3]; 3]) -> Camera {
        let fwd = math::normalize3(math::sub3(target, eye));
        let right = math::normalize3(math::cross3(fwd, up_hint));
        let down = math::cross3(fwd, right);
        // columns of camera-to-world: right, down, forward
        let m = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        Camera {
            q: rot_to_quat(m),
            c: eye,
            k,
        }
    }

    /// `K⁻¹ p̃ / ‖K⁻¹ p̃‖` — the camera-frame unit direction of a pixel.
    pub fn pixel_dir_cam(&self, px: f64, py: f64) -> Result<[f64; 3], CameraError> {
        let kinv = invert3(self.k)?;
        let p = [px, py, 1.0];
        let d: [f64; 3] = std::array::from_fn(|i| math::dot3(kinv[i], p));
        Ok(math::normalize3(d))
    }
}

/// Quaternion of a rotation matrix (Shepperd's method).
pub fn rot_to_quat(m: [[f64; 3]; 3]) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Ray through pixel `(px, py)` at the camera's current parameters.
pub fn pixel_ray(camera: &Camera, px: f64, py: f64, pixel: u32) -> Result<Ray, CameraError> {
    let rot = quat_to_rot(camera.q)?;
    let d_cam = camera.pixel_dir_cam(px, py)?;
    let dir: [f64; 3] = std::array::from_fn(|i| math::dot3(rot[i], d_cam));
    Ok(Ray {
        origin: camera.c,
        dir,
        pixel,
    })
}

/// Tape ray: origin and direction as differentiable functions of the
/// camera's `(q, c)` leaves. The intrinsics part `K⁻¹p̃/‖K⁻¹p̃‖` is constant.
pub fn pixel_ray_tape(
    tape: &mut Tape,
    q: [Var; 4],
    c: [Var; 3],
    dir_cam: [f64; 3],
) -> Result<([Var; 3], [Var; 3]), crate::AdError> {
    let rot = quat_to_rot_tape(tape, q)?;
    let d = dir_cam.map(|v| tape.constant(v));
    let dir = [
        tape.dot(&rot[0], &d),
        tape.dot(&rot[1], &d),
        tape.dot(&rot[2], &d),
    ];
    Ok((c, dir))
}

/// Composes each camera with a random axis-angle rotation (angle in
/// degrees ~ N(0, σ_rot)) and offsets each center by N(0, σ_trans · I).
pub fn perturb_cameras(
    set: &CameraSet,
    rot_deg_sigma: f64,
    trans_sigma: f64,
    seed: u64,
) -> CameraSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot_dist = Normal::new(0.0, rot_deg_sigma.max(0.0)).unwrap();
    let trans_dist = Normal::new(0.0, trans_sigma.max(0.0)).unwrap();
    let cameras = set
        .cameras
        .iter()
        .map(|cam| {
            let axis = math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0f64)));
            let angle = rot_dist.sample(&mut rng).to_radians();
            let (s, w) = ((angle / 2.0).sin(), (angle / 2.0).cos());
            let dq = [w, axis[0] * s, axis[1] * s, axis[2] * s];
            let q = quat_mul(dq, cam.q);
            let c = std::array::from_fn(|i| cam.c[i] + trans_dist.sample(&mut rng));
            Camera { q, c, k: cam.k }
        })
        .collect();
    CameraSet { cameras }
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Per-camera rotation error (degrees, geodesic) and center error after a
/// global similarity alignment of the camera positions onto the reference.
pub fn camera_error(
    set: &CameraSet,
    reference: &CameraSet,
) -> Result<(Vec<f64>, Vec<f64>), CameraError> {
    if set.cameras.len() != reference.cameras.len() {
        return Err(CameraError::CountMismatch(
            set.cameras.len(),
            reference.cameras.len(),
        ));
    }
    let pts: Vec<[f64; 3]> = set.cameras.iter().map(|c| c.c).collect();
    let gts: Vec<[f64; 3]> = reference.cameras.iter().map(|c| c.c).collect();
    let (s, r_align, t) = similarity_align(&pts, &gts);

    let mut rot_err = Vec::with_capacity(pts.len());
    let mut trans_err = Vec::with_capacity(pts.len());
    for (cam, gt) in set.cameras.iter().zip(&reference.cameras) {
        let ra = quat_to_rot(cam.q)?;
        let rg = quat_to_rot(gt.q)?;
        let aligned = mat_mul(r_align, ra);
        // geodesic angle of rel = aligned · rgᵀ via atan2(‖skew‖, trace),
        // which stays accurate near 0 where acos degrades
        let rel = mat_mul(aligned, transpose3(rg));
        let skew = [
            rel[2][1] - rel[1][2],
            rel[0][2] - rel[2][0],
            rel[1][0] - rel[0][1],
        ];
        let sin_a = math::norm3(skew) / 2.0;
        let cos_a = (rel[0][0] + rel[1][1] + rel[2][2] - 1.0) / 2.0;
        rot_err.push(sin_a.atan2(cos_a).to_degrees());

        let mapped: [f64; 3] =
            std::array::from_fn(|i| s * math::dot3(r_align[i], cam.c) + t[i]);
        trans_err.push(math::norm3(math::sub3(mapped, gt.c)));
    }
    Ok((rot_err, trans_err))
}

fn transpose3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn mat_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Horn-style similarity fit `y ≈ s R x + t` (rotation by the quaternion
/// eigen method with power iteration).
///
/// Point layouts that leave the rotation underdetermined (a single camera,
/// collinear centers, identical sets) admit many optimal gauges; among
/// candidates within rounding of the best summed-L1 residual the
/// translation-only one wins, so `camera_error(τ, τ)` is exactly zero.
pub fn similarity_align(xs: &[[f64; 3]], ys: &[[f64; 3]]) -> (f64, [[f64; 3]; 3], [f64; 3]) {
    let (s, r, t) = similarity_align_horn(xs, ys);
    if xs.is_empty() {
        return (s, r, t);
    }
    let l1 = |s: f64, r: &[[f64; 3]; 3], t: [f64; 3]| -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                let m: [f64; 3] = std::array::from_fn(|i| s * math::dot3(r[i], *x) + t[i]);
                math::sub3(m, *y).iter().map(|v| v.abs()).sum::<f64>()
            })
            .sum()
    };
    let mut cx = [0.0; 3];
    let mut cy = [0.0; 3];
    for i in 0..xs.len() {
        cx = math::add3(cx, xs[i]);
        cy = math::add3(cy, ys[i]);
    }
    let nf = xs.len() as f64;
    let t_only = math::sub3(math::scale3(cy, 1.0 / nf), math::scale3(cx, 1.0 / nf));
    let ident = identity3();
    let horn_res = l1(s, &r, t);
    let trans_res = l1(1.0, &ident, t_only);
    if trans_res <= horn_res * (1.0 + 1e-9) + 1e-12 {
        (1.0, ident, t_only)
    } else {
        (s, r, t)
    }
}

fn similarity_align_horn(xs: &[[f64; 3]], ys: &[[f64; 3]]) -> (f64, [[f64; 3]; 3], [f64; 3]) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n == 0 {
        return (1.0, identity3(), [0.0; 3]);
    }
    let nf = n as f64;
    let mut cx = [0.0; 3];
    let mut cy = [0.0; 3];
    for i in 0..n {
        cx = math::add3(cx, xs[i]);
        cy = math::add3(cy, ys[i]);
    }
    cx = math::scale3(cx, 1.0 / nf);
    cy = math::scale3(cy, 1.0 / nf);

    // cross covariance M = Σ (x−cx)(y−cy)ᵀ
    let mut m = [[0.0f64; 3]; 3];
    let mut var_x = 0.0;
    for i in 0..n {
        let dx = math::sub3(xs[i], cx);
        let dy = math::sub3(ys[i], cy);
        var_x += math::dot3(dx, dx);
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += dx[a] * dy[b];
            }
        }
    }
    let m_norm: f64 = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if m_norm < 1e-12 || var_x < 1e-12 {
        let t = math::sub3(cy, cx);
        return (1.0, identity3(), t);
    }

    // Horn's 4×4 symmetric matrix, largest eigenvector = rotation quaternion
    let (sxx, sxy, sxz) = (m[0][0], m[0][1], m[0][2]);
    let (syx, syy, syz) = (m[1][0], m[1][1], m[1][2]);
    let (szx, szy, szz) = (m[2][0], m[2][1], m[2][2]);
    let nmat = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let mut q = [1.0, 0.1, 0.1, 0.1];
    for _ in 0..256 {
        // shift to make the target eigenvalue dominant in magnitude
        let mut next = [0.0f64; 4];
        for i in 0..4 {
            for j in 0..4 {
                next[i] += nmat[i][j] * q[j];
            }
            next[i] += 2.0 * m_norm * q[i];
        }
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        q = next.map(|v| v / norm);
    }
    let r = quat_to_rot(q).expect("unit quaternion");

    // scale via projections onto the rotated frame
    let mut num = 0.0;
    for i in 0..n {
        let dx = math::sub3(xs[i], cx);
        let dy = math::sub3(ys[i], cy);
        let rdx: [f64; 3] = std::array::from_fn(|a| math::dot3(r[a], dx));
        num += math::dot3(dy, rdx);
    }
    let s = num / var_x;
    let rcx: [f64; 3] = std::array::from_fn(|a| s * math::dot3(r[a], cx));
    let t = math::sub3(cy, rcx);
    (s, r, t)
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

const CAMERA_FILE_HEADER: &str = "idr-cameras 1";

/// Writes the versioned camera file: one line per camera with 16 floats
/// (q, c, K row-major) at full precision.
pub fn save_cameras(path: &Path, set: &CameraSet) -> Result<(), CameraError> {
    let wrap = |source| CameraError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let werr = |source| CameraError::Io {
        path: path.display().to_string(),
        source,
    };
    writeln!(out, "{CAMERA_FILE_HEADER}").map_err(werr)?;
    for cam in &set.cameras {
        let mut vals = Vec::with_capacity(16);
        vals.extend_from_slice(&cam.q);
        vals.extend_from_slice(&cam.c);
        for row in &cam.k {
            vals.extend_from_slice(row);
        }
        let line: Vec<String> = vals.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", line.join(" ")).map_err(|source| CameraError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<CameraSet, CameraError> {
    let file = std::fs::File::open(path).map_err(|source| CameraError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut cameras = Vec::new();
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| CameraError::Parse {
        path: path.display().to_string(),
        line: line + 1,
        msg,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty file".into()))?;
    let header = header.map_err(|e| parse_err(0, e.to_string()))?;
    if header.trim() != CAMERA_FILE_HEADER {
        return Err(parse_err(0, format!("unknown header {header:?}")));
    }
    for (lineno, line) in lines {
        let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| parse_err(lineno, e.to_string()))?;
        if vals.len() != 16 {
            return Err(parse_err(lineno, format!("expected 16 values, got {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite value".into()));
        }
        cameras.push(Camera {
            q: [vals[0], vals[1], vals[2], vals[3]],
            c: [vals[4], vals[5], vals[6]],
            k: [
                [vals[7], vals[8], vals[9]],
                [vals[10], vals[11], vals[12]],
                [vals[13], vals[14], vals[15]],
            ],
        });
    }
    Ok(CameraSet { cameras })
}
