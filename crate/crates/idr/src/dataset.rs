//! Image and dataset directory I/O.
//!
//! A dataset directory holds `image_####.png` (8-bit RGB), `mask_####.png`
//! (8-bit grayscale, 0 or 255), `cameras.txt` and the `scene.cfg` used to
//! generate it. On load, pixels are mapped from [0,1] to [-1,1] by
//! subtracting 0.5 and doubling; masks threshold at mid-gray.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::camera::{load_cameras, save_cameras, CameraError, CameraSet};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {msg}")]
    Png { path: String, msg: String },
    #[error("{0}")]
    Camera(#[from] CameraError),
    #[error("dataset {dir}: {msg}")]
    Layout { dir: String, msg: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Floating-point RGB image, row-major, values in [0, 1] unless stated.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageF {
    pub fn new(width: usize, height: usize) -> Self {
        ImageF {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.pixels[y * self.width + x] = v;
    }
}

/// Binary object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        MaskImage {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&m| m).count()
    }
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG; input values are clamped to [0, 1].
pub fn save_png_rgb(path: &Path, img: &ImageF) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| DatasetError::Png {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut data = Vec::with_capacity(img.pixels.len() * 3);
    for p in &img.pixels {
        data.extend_from_slice(&[quantize8(p[0]), quantize8(p[1]), quantize8(p[2])]);
    }
    writer.write_image_data(&data).map_err(|e| DatasetError::Png {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn save_png_mask(path: &Path, mask: &MaskImage) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| DatasetError::Png {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let data: Vec<u8> = mask.pixels.iter().map(|&m| if m { 255 } else { 0 }).collect();
    writer.write_image_data(&data).map_err(|e| DatasetError::Png {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn png_open(path: &Path) -> Result<(png::OutputInfo, Vec<u8>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| DatasetError::Png {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| DatasetError::Png {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Loads an RGB PNG into [0, 1] floats.
pub fn load_png_rgb(path: &Path) -> Result<ImageF, DatasetError> {
    let (info, buf) = png_open(path)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(DatasetError::Png {
            path: path.display().to_string(),
            msg: format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = ImageF::new(w, h);
    for (i, px) in buf.chunks_exact(3).enumerate() {
        img.pixels[i] = [
            px[0] as f64 / 255.0,
            px[1] as f64 / 255.0,
            px[2] as f64 / 255.0,
        ];
    }
    Ok(img)
}

pub fn load_png_mask(path: &Path) -> Result<MaskImage, DatasetError> {
    let (info, buf) = png_open(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(DatasetError::Png {
            path: path.display().to_string(),
            msg: format!(
                "expected 8-bit grayscale, got {:?}/{:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(MaskImage {
        width: w,
        height: h,
        pixels: buf.iter().map(|&v| v > 127).collect(),
    })
}

/// One training view: image in [-1, 1]³, binary mask, camera index.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: usize,
    pub width: usize,
    pub height: usize,
    /// RGB per pixel, normalized to [-1, 1].
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

/// A loaded dataset: views plus their cameras.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<View>,
    pub cameras: CameraSet,
}

impl Dataset {
    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.rgb.len()).sum()
    }
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("image_{index:04}.png"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:04}.png"))
}

/// Writes `image_####.png` / `mask_####.png` pairs plus `cameras.txt`.
pub fn save_views(
    dir: &Path,
    cameras: &CameraSet,
    views: &[(ImageF, MaskImage)],
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, (img, mask)) in views.iter().enumerate() {
        save_png_rgb(&image_path(dir, i), img)?;
        save_png_mask(&mask_path(dir, i), mask)?;
    }
    save_cameras(&dir.join("cameras.txt"), cameras)?;
    Ok(())
}

/// Loads a dataset directory, normalizing images to [-1, 1].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let cameras = load_cameras(&dir.join("cameras.txt"))?;
    let mut views = Vec::with_capacity(cameras.cameras.len());
    for i in 0..cameras.cameras.len() {
        let img = load_png_rgb(&image_path(dir, i))?;
        let mask = load_png_mask(&mask_path(dir, i))?;
        if img.width != mask.width || img.height != mask.height {
            return Err(DatasetError::Layout {
                dir: dir.display().to_string(),
                msg: format!("view {i}: image and mask sizes differ"),
            });
        }
        views.push(View {
            camera: i,
            width: img.width,
            height: img.height,
            rgb: img.pixels.iter().map(|p| p.map(|v| (v - 0.5) * 2.0)).collect(),
            mask: mask.pixels,
        });
    }
    Ok(Dataset { views, cameras })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("idr-ds-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tmp_dir("rt");
        let mut img = ImageF::new(5, 3);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [(i as f64) / 20.0, 1.0 - (i as f64) / 20.0, 0.5];
        }
        let path = dir.join("x.png");
        save_png_rgb(&path, &img).unwrap();
        let back = load_png_rgb(&path).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let dir = tmp_dir("mask");
        let mask = MaskImage {
            width: 4,
            height: 2,
            pixels: vec![true, false, true, true, false, false, true, false],
        };
        let path = dir.join("m.png");
        save_png_mask(&path, &mask).unwrap();
        assert_eq!(load_png_mask(&path).unwrap(), mask);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loaded_views_are_normalized_to_signed_range() {
        let dir = tmp_dir("norm");
        let mut img = ImageF::new(2, 2);
        img.set(0, 0, [1.0, 0.0, 0.5]);
        let mask = MaskImage {
            width: 2,
            height: 2,
            pixels: vec![true, false, false, true],
        };
        let cams = CameraSet {
            cameras: vec![crate::camera::Camera {
                q: [1.0, 0.0, 0.0, 0.0],
                c: [0.0, 0.0, 2.5],
                k: [[50.0, 0.0, 1.0], [0.0, 50.0, 1.0], [0.0, 0.0, 1.0]],
            }],
        };
        save_views(&dir, &cams, &[(img, mask)]).unwrap();
        let ds = load_dataset(&dir).unwrap();
        let px = ds.views[0].rgb[0];
        assert!((px[0] - 1.0).abs() < 1e-9);
        assert!((px[1] + 1.0).abs() < 1e-9);
        assert!(px[2].abs() < 0.01);
        assert!(ds.views[0].mask[0]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
