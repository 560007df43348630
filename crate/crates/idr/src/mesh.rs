//! Surface extraction and quantitative metrics.
//!
//! Marching cubes runs the standard 256-case table over a sampled grid
//! with linear edge interpolation; vertices are deduplicated per grid
//! edge, so closed level sets come out watertight. Chamfer-L1 averages the
//! two one-sided mean nearest-neighbor distances (exact search — fine at
//! desk scale); PSNR is measured over masked pixels in [0, 1].

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{ImageF, MaskImage};
use crate::math;
use crate::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};
use crate::parallel;
use crate::trace::SdfField;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        math::norm3(math::cross3(math::sub3(b, a), math::sub3(c, a))) / 2.0
    }

    /// Sum of signed tetrahedron volumes; positive for outward-wound
    /// closed surfaces.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                math::dot3(a, math::cross3(b, c)) / 6.0
            })
            .sum()
    }
}

/// Axis-aligned sampling region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridBounds {
    fn default() -> Self {
        GridBounds {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

/// Standard marching cubes at `resolution` cells per axis over `bounds`.
/// The zero crossing on each cube edge is placed by linear interpolation;
/// degenerate (zero-area) triangles are dropped.
pub fn marching_cubes(
    f: &dyn SdfField,
    resolution: usize,
    bounds: &GridBounds,
    level: f64,
) -> TriangleMesh {
    assert!(resolution >= 1, "resolution must be at least 1 cell");
    let n = resolution;
    let step: [f64; 3] = std::array::from_fn(|i| (bounds.max[i] - bounds.min[i]) / n as f64);
    let coord = |ix: usize, iy: usize, iz: usize| -> [f64; 3] {
        [
            bounds.min[0] + ix as f64 * step[0],
            bounds.min[1] + iy as f64 * step[1],
            bounds.min[2] + iz as f64 * step[2],
        ]
    };

    // sample the grid, one z-slab per parallel chunk
    let nv = n + 1;
    let slabs = parallel::map_chunks(nv, |iz| {
        let mut slab = vec![0.0f64; nv * nv];
        for iy in 0..nv {
            for ix in 0..nv {
                slab[iy * nv + ix] = f.value(coord(ix, iy, iz));
            }
        }
        slab
    });
    let value = |ix: usize, iy: usize, iz: usize| slabs[iz][iy * nv + ix];

    // global edge id -> vertex index, so shared edges share vertices
    let mut edge_vertex: HashMap<(usize, usize, usize, u8), u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();

    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let mut config = 0u8;
                for (ci, &(dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                    if value(ix + dx, iy + dy, iz + dz) < level {
                        config |= 1 << ci;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                let row = &TRI_TABLE[config as usize];
                let mut tri = [0u32; 3];
                for (k, &e) in row.iter().take_while(|&&e| e >= 0).enumerate() {
                    let e = e as usize;
                    let (ca, cb) = EDGE_CORNERS[e];
                    let (ax, ay, az) = CORNER_OFFSETS[ca];
                    let (bx, by, bz) = CORNER_OFFSETS[cb];
                    let a = (ix + ax, iy + ay, iz + az);
                    let b = (ix + bx, iy + by, iz + bz);
                    // canonical edge key: lower corner plus axis
                    let (lo, axis) = if a.0 != b.0 {
                        (if a.0 < b.0 { a } else { b }, 0u8)
                    } else if a.1 != b.1 {
                        (if a.1 < b.1 { a } else { b }, 1u8)
                    } else {
                        (if a.2 < b.2 { a } else { b }, 2u8)
                    };
                    let key = (lo.0, lo.1, lo.2, axis);
                    let vi = *edge_vertex.entry(key).or_insert_with(|| {
                        let fa = value(a.0, a.1, a.2);
                        let fb = value(b.0, b.1, b.2);
                        let t = if (fb - fa).abs() < 1e-300 {
                            0.5
                        } else {
                            ((level - fa) / (fb - fa)).clamp(0.0, 1.0)
                        };
                        let pa = coord(a.0, a.1, a.2);
                        let pb = coord(b.0, b.1, b.2);
                        let p = math::add3(pa, math::scale3(math::sub3(pb, pa), t));
                        let idx = mesh.vertices.len() as u32;
                        mesh.vertices.push(p);
                        idx
                    });
                    tri[k % 3] = vi;
                    if k % 3 == 2 {
                        let area2 = {
                            let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
                            math::norm3(math::cross3(math::sub3(b, a), math::sub3(c, a)))
                        };
                        if area2 > 2e-12 {
                            // table winding is inward for this corner
                            // layout; flip for outward normals
                            mesh.triangles.push([tri[0], tri[2], tri[1]]);
                        }
                    }
                }
            }
        }
    }
    mesh
}

/// One-sided mean nearest-neighbor distances and their average:
/// `(accuracy, completeness, chamfer)`.
pub fn chamfer_l1(
    points_a: &[[f64; 3]],
    points_b: &[[f64; 3]],
) -> Result<(f64, f64, f64), MeshError> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(MeshError::EmptyPointSet);
    }
    let one_sided = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let sums = parallel::map_chunks(parallel::chunk_ranges(from.len(), 512).len(), |ci| {
            let range = parallel::chunk_ranges(from.len(), 512)[ci].clone();
            let mut acc = 0.0;
            for p in &from[range] {
                let mut best = f64::INFINITY;
                for q in to {
                    let d2 = {
                        let d = math::sub3(*p, *q);
                        math::dot3(d, d)
                    };
                    if d2 < best {
                        best = d2;
                    }
                }
                acc += best.sqrt();
            }
            acc
        });
        sums.iter().sum::<f64>() / from.len() as f64
    };
    let accuracy = one_sided(points_a, points_b);
    let completeness = one_sided(points_b, points_a);
    Ok((accuracy, completeness, (accuracy + completeness) / 2.0))
}

/// PSNR in dB over masked pixels, capped at 99 dB for identical inputs.
/// Inputs are in [0, 1].
pub fn psnr(a: &ImageF, b: &ImageF, mask: &MaskImage) -> Result<f64, MeshError> {
    if a.width != b.width || a.height != b.height {
        return Err(MeshError::SizeMismatch(a.width, a.height, b.width, b.height));
    }
    if a.width != mask.width || a.height != mask.height {
        return Err(MeshError::SizeMismatch(a.width, a.height, mask.width, mask.height));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for (i, &m) in mask.pixels.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..3 {
            let d = a.pixels[i][c] - b.pixels[i][c];
            se += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(MeshError::EmptyMask);
    }
    let mse = se / count as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Area-weighted uniform surface samples; deterministic by seed.
pub fn sample_mesh_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<[f64; 3]> {
    if n == 0 || mesh.is_empty() {
        return Vec::new();
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for &t in &mesh.triangles {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let target = rng.random_range(0.0..total);
            let ti = cumulative.partition_point(|&c| c < target).min(mesh.triangles.len() - 1);
            let [a, b, c] = mesh.triangles[ti].map(|i| mesh.vertices[i as usize]);
            // uniform barycentric via the square-root trick
            let (r1, r2): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let s = r1.sqrt();
            let (u, v, w) = (1.0 - s, s * (1.0 - r2), s * r2);
            [
                u * a[0] + v * b[0] + w * c[0],
                u * a[1] + v * b[1] + w * c[1],
                u * a[2] + v * b[2] + w * c[2],
            ]
        })
        .collect()
}

/// Wavefront OBJ (v/f lines, 1-based indices).
pub fn save_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), MeshError> {
    let wrap = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let mut w = |s: String| -> Result<(), MeshError> {
        writeln!(out, "{s}").map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    for v in &mesh.vertices {
        w(format!("v {} {} {}", v[0], v[1], v[2]))?;
    }
    for t in &mesh.triangles {
        w(format!("f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1))?;
    }
    Ok(())
}

/// Binary little-endian PLY with float vertices.
pub fn save_ply(path: &Path, mesh: &TriangleMesh) -> Result<(), MeshError> {
    let wrap = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    out.write_all(header.as_bytes()).map_err(wrap)?;
    for v in &mesh.vertices {
        for c in v {
            out.write_all(&(*c as f32).to_le_bytes()).map_err(wrap)?;
        }
    }
    for t in &mesh.triangles {
        out.write_all(&[3u8]).map_err(wrap)?;
        for i in t {
            out.write_all(&(*i as i32).to_le_bytes()).map_err(wrap)?;
        }
    }
    Ok(())
}

/// Loads v/f lines of a Wavefront OBJ (triangles only).
pub fn load_obj(path: &Path) -> Result<TriangleMesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |msg: String| MeshError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, msg),
    };
    let mut mesh = TriangleMesh::default();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                if coords.len() != 3 {
                    return Err(bad(format!("line {}: malformed vertex", i + 1)));
                }
                mesh.vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .filter_map(|p| p.split('/').next().and_then(|q| q.parse().ok()))
                    .collect();
                if idx.len() != 3 {
                    return Err(bad(format!("line {}: only triangles are supported", i + 1)));
                }
                for &v in &idx {
                    if v == 0 || v > mesh.vertices.len() {
                        return Err(bad(format!("line {}: index out of range", i + 1)));
                    }
                }
                mesh.triangles
                    .push([idx[0] as u32 - 1, idx[1] as u32 - 1, idx[2] as u32 - 1]);
            }
            _ => {} // comments, normals etc. are ignored
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc_tables::edge_mask;
    use crate::synth::AnalyticSdf;
    use std::collections::HashMap;

    /// Every edge of a closed mesh must be shared by exactly two triangles
    /// with opposite orientations.
    fn assert_watertight(mesh: &TriangleMesh) {
        let mut count: HashMap<(u32, u32), i64> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let (key, dir) = if a < b { ((a, b), 1) } else { ((b, a), -1) };
                *count.entry(key).or_insert(0) += dir;
            }
        }
        let mut unpaired: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3]));
                *unpaired.entry((a, b)).or_insert(0) += 1;
            }
        }
        for (&edge, &c) in &unpaired {
            assert_eq!(c, 2, "edge {edge:?} shared by {c} triangles");
        }
        for (&edge, &signed) in &count {
            assert_eq!(signed, 0, "edge {edge:?} orientation mismatch");
        }
    }

    #[test]
    fn tri_table_references_only_crossing_edges() {
        for config in 0..256usize {
            let mask = edge_mask(config as u8);
            let row = &TRI_TABLE[config];
            let mut len = 0;
            for &e in row.iter().take_while(|&&e| e >= 0) {
                assert!(
                    mask & (1 << e) != 0,
                    "config {config}: edge {e} is not a crossing edge"
                );
                len += 1;
            }
            assert_eq!(len % 3, 0, "config {config}: partial triangle");
            // every crossing edge must be used by at least one triangle
            let mut used = 0u16;
            for &e in row.iter().take_while(|&&e| e >= 0) {
                used |= 1 << e;
            }
            assert_eq!(used, mask, "config {config}: crossing edges unused");
        }
    }

    #[test]
    fn sphere_mesh_lies_on_the_surface_and_is_closed() {
        let sdf = AnalyticSdf::sphere(0.5);
        let mesh = marching_cubes(&sdf, 64, &GridBounds::default(), 0.0);
        assert!(!mesh.is_empty());
        let cell = 2.0 / 64.0;
        let diag = (3f64).sqrt() * cell;
        for v in &mesh.vertices {
            assert!(
                (math::norm3(*v) - 0.5).abs() < 2.0 * diag,
                "vertex {v:?} too far from the sphere"
            );
        }
        assert_watertight(&mesh);
        // outward orientation encloses positive volume near 4/3 π r³
        let vol = mesh.signed_volume();
        let expect = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((vol - expect).abs() < 0.05 * expect, "volume {vol} vs {expect}");
    }

    #[test]
    fn torus_mesh_is_closed() {
        let sdf = AnalyticSdf::torus(0.5, 0.2);
        let mesh = marching_cubes(&sdf, 48, &GridBounds::default(), 0.0);
        assert!(!mesh.is_empty());
        assert_watertight(&mesh);
    }

    #[test]
    fn random_blob_fields_mesh_watertight() {
        // random unions exercise many more table configurations than
        // smooth convex shapes do
        use rand::Rng;
        for seed in 0..12u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut blobs = Vec::new();
            for _ in 0..4 {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.45..0.45));
                let r = rng.random_range(0.15..0.4);
                blobs.push((c, r));
            }
            let f = move |x: [f64; 3]| -> f64 {
                blobs
                    .iter()
                    .map(|(c, r)| math::norm3(math::sub3(x, *c)) - r)
                    .fold(f64::INFINITY, f64::min)
            };
            let mesh = marching_cubes(&f, 24, &GridBounds::default(), 0.0);
            assert!(!mesh.is_empty());
            assert_watertight(&mesh);
        }
    }

    #[test]
    fn constant_positive_field_gives_empty_mesh() {
        let f = |_: [f64; 3]| 1.0;
        let mesh = marching_cubes(&f, 16, &GridBounds::default(), 0.0);
        assert!(mesh.is_empty());
    }

    #[test]
    fn vertices_lie_on_sign_changing_grid_edges() {
        let sdf = AnalyticSdf::sphere(0.6);
        let res = 20;
        let mesh = marching_cubes(&sdf, res, &GridBounds::default(), 0.0);
        let step = 2.0 / res as f64;
        for v in &mesh.vertices {
            // each vertex must sit on a grid line: at least two of the
            // three coordinates are multiples of the step
            let on_grid = v
                .iter()
                .map(|&c| {
                    let k = (c + 1.0) / step;
                    (k - k.round()).abs() < 1e-9
                })
                .filter(|&b| b)
                .count();
            assert!(on_grid >= 2, "vertex {v:?} not on a grid edge");
        }
    }

    #[test]
    fn chamfer_examples_and_symmetry() {
        let a = vec![[0.0, 0.0, 0.0]];
        let (acc, comp, ch) = chamfer_l1(&a, &a).unwrap();
        assert_eq!((acc, comp, ch), (0.0, 0.0, 0.0));

        let b = vec![[1.0, 0.0, 0.0]];
        let (acc, comp, ch) = chamfer_l1(&a, &b).unwrap();
        assert_eq!((acc, comp, ch), (1.0, 1.0, 1.0));

        assert!(chamfer_l1(&[], &a).is_err());

        // symmetric aggregate; one-sided terms swap
        let xs = vec![[0.0, 0.0, 0.0], [0.5, 0.2, 0.0], [1.0, 0.0, 0.3]];
        let ys = vec![[0.1, 0.0, 0.0], [0.9, 0.1, 0.2]];
        let (a1, c1, ch1) = chamfer_l1(&xs, &ys).unwrap();
        let (a2, c2, ch2) = chamfer_l1(&ys, &xs).unwrap();
        assert_eq!(a1, c2);
        assert_eq!(c1, a2);
        assert_eq!(ch1, ch2);
    }

    #[test]
    fn meshed_sphere_matches_analytic_samples_within_a_cell() {
        let sdf = AnalyticSdf::sphere(0.5);
        let res = 64;
        let mesh = marching_cubes(&sdf, res, &GridBounds::default(), 0.0);
        let mesh_pts = sample_mesh_points(&mesh, 4000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sphere_pts: Vec<[f64; 3]> = (0..4000)
            .map(|_| {
                math::scale3(
                    math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0f64))),
                    0.5,
                )
            })
            .collect();
        let (_, _, ch) = chamfer_l1(&mesh_pts, &sphere_pts).unwrap();
        assert!(ch < 2.0 / res as f64, "chamfer {ch}");
    }

    #[test]
    fn psnr_examples() {
        let mut a = ImageF::new(4, 4);
        for p in a.pixels.iter_mut() {
            *p = [0.5, 0.25, 0.75];
        }
        let mask = MaskImage {
            width: 4,
            height: 4,
            pixels: vec![true; 16],
        };
        assert_eq!(psnr(&a, &a, &mask).unwrap(), 99.0);

        // uniform error of 0.1 on all masked pixels: 20 dB
        let mut b = a.clone();
        for p in b.pixels.iter_mut() {
            p[0] += 0.1;
            p[1] += 0.1;
            p[2] -= 0.1;
        }
        let db = psnr(&a, &b, &mask).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "psnr {db}");

        // error on unmasked pixels only leaves PSNR unchanged
        let mut half_mask = mask.clone();
        for i in 8..16 {
            half_mask.pixels[i] = false;
        }
        let mut c = a.clone();
        for i in 8..16 {
            c.pixels[i] = [0.0, 0.0, 0.0];
        }
        assert_eq!(psnr(&a, &c, &half_mask).unwrap(), 99.0);

        let empty = MaskImage {
            width: 4,
            height: 4,
            pixels: vec![false; 16],
        };
        assert!(matches!(psnr(&a, &b, &empty), Err(MeshError::EmptyMask)));
    }

    #[test]
    fn psnr_decreases_with_masked_error() {
        let a = ImageF::new(8, 8);
        let mask = MaskImage {
            width: 8,
            height: 8,
            pixels: vec![true; 64],
        };
        let mut last = f64::INFINITY;
        for err in [0.01, 0.05, 0.1, 0.3] {
            let mut b = a.clone();
            for p in b.pixels.iter_mut() {
                p[0] += err;
            }
            let db = psnr(&a, &b, &mask).unwrap();
            assert!(db < last);
            last = db;
        }
    }

    #[test]
    fn mesh_sampling_examples() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert!(sample_mesh_points(&mesh, 0, 1).is_empty());
        // all samples inside the single triangle
        for p in sample_mesh_points(&mesh, 200, 3) {
            assert!(p[2].abs() < 1e-12);
            assert!(p[0] >= -1e-12 && p[1] >= -1e-12 && p[0] + p[1] <= 1.0 + 1e-12);
        }
        // deterministic by seed
        assert_eq!(sample_mesh_points(&mesh, 50, 9), sample_mesh_points(&mesh, 50, 9));
    }

    #[test]
    fn sphere_samples_average_to_the_radius() {
        let sdf = AnalyticSdf::sphere(0.5);
        let mesh = marching_cubes(&sdf, 48, &GridBounds::default(), 0.0);
        let pts = sample_mesh_points(&mesh, 5000, 4);
        let mean: f64 = pts.iter().map(|p| math::norm3(*p)).sum::<f64>() / pts.len() as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean radius {mean}");
    }

    #[test]
    fn obj_export_is_well_formed() {
        let sdf = AnalyticSdf::sphere(0.4);
        let mesh = marching_cubes(&sdf, 12, &GridBounds::default(), 0.0);
        let dir = std::env::temp_dir().join(format!("idr-mesh-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.obj");
        save_obj(&path, &mesh).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut nv = 0usize;
        let mut nf = 0usize;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    assert_eq!(parts.clone().count(), 3);
                    for p in parts {
                        p.parse::<f64>().unwrap();
                    }
                    nv += 1;
                }
                Some("f") => {
                    let idx: Vec<usize> =
                        parts.map(|p| p.parse::<usize>().unwrap()).collect();
                    assert_eq!(idx.len(), 3);
                    for i in idx {
                        assert!(i >= 1 && i <= mesh.vertices.len());
                    }
                    nf += 1;
                }
                other => panic!("unexpected OBJ line {other:?}"),
            }
        }
        assert_eq!(nv, mesh.vertices.len());
        assert_eq!(nf, mesh.triangles.len());
        save_ply(&dir.join("m.ply"), &mesh).unwrap();
        std::fs::remove_dir_all(&dir).ok();
    }
}
