//! Structured-text configuration files.
//!
//! The format is `key = value` lines with `#` comments; keys are dotted
//! paths. Unknown and duplicate keys are rejected with their line number,
//! and every field has a documented default, so an empty file is a valid
//! config. `parse(to_text(c)) == c` exactly.

use std::path::Path;
use thiserror::Error;

use crate::loss::{AlphaSchedule, LossWeights, LrSchedule};
use crate::nets::{RendererConfig, SdfNetConfig};
use crate::synth::{
    AnalyticSdf, LightAttachment, PhongMaterial, Scene, SceneLighting, Shape,
};
use crate::trace::TraceConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parsed `key = value` entries with consumption tracking.
pub struct KeyValues {
    entries: Vec<(String, String, usize)>,
    consumed: Vec<bool>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some(eq) = stripped.find('=') else {
                return Err(ConfigError::Parse {
                    line,
                    msg: format!("expected `key = value`, got {stripped:?}"),
                });
            };
            let key = stripped[..eq].trim().to_string();
            let value = stripped[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line,
                    msg: "empty key".into(),
                });
            }
            if let Some((k, _, l)) = entries.iter().find(|(k, _, _)| *k == key) {
                let _ = l;
                return Err(ConfigError::Duplicate {
                    line,
                    key: k.clone(),
                });
            }
            entries.push((key, value, line));
        }
        let n = entries.len();
        Ok(KeyValues {
            entries,
            consumed: vec![false; n],
        })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        for (i, (k, v, line)) in self.entries.iter().enumerate() {
            if k == key {
                self.consumed[i] = true;
                return Some((v.clone(), *line));
            }
        }
        None
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _, _)| k == key)
    }

    fn parse_with<T, F: Fn(&str) -> Option<T>>(
        &mut self,
        key: &str,
        default: T,
        f: F,
        expect: &str,
    ) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => f(&v).ok_or_else(|| ConfigError::Parse {
                line,
                msg: format!("{key}: expected {expect}, got {v:?}"),
            }),
        }
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_with(key, default, |v| v.parse().ok(), "a number")
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_with(key, default, |v| v.parse().ok(), "a nonnegative integer")
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse_with(key, default, |v| v.parse().ok(), "a nonnegative integer")
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(
            key,
            default,
            |v| match v {
                "true" | "1" | "yes" => Some(true),
                "false" | "0" | "no" => Some(false),
                _ => None,
            },
            "true/false",
        )
    }

    pub fn vec3(&mut self, key: &str, default: [f64; 3]) -> Result<[f64; 3], ConfigError> {
        self.parse_with(
            key,
            default,
            |v| {
                let parts: Vec<f64> = v.split_whitespace().filter_map(|p| p.parse().ok()).collect();
                (parts.len() == 3 && v.split_whitespace().count() == 3)
                    .then(|| [parts[0], parts[1], parts[2]])
            },
            "three numbers",
        )
    }

    pub fn vec4(&mut self, key: &str, default: [f64; 4]) -> Result<[f64; 4], ConfigError> {
        self.parse_with(
            key,
            default,
            |v| {
                let parts: Vec<f64> = v.split_whitespace().filter_map(|p| p.parse().ok()).collect();
                (parts.len() == 4 && v.split_whitespace().count() == 4)
                    .then(|| [parts[0], parts[1], parts[2], parts[3]])
            },
            "four numbers",
        )
    }

    pub fn string(&mut self, key: &str, default: &str) -> Result<String, ConfigError> {
        self.parse_with(key, default.to_string(), |v| Some(v.to_string()), "a string")
    }

    pub fn usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        self.parse_with(
            key,
            default.to_vec(),
            |v| {
                if v.trim().is_empty() {
                    return Some(Vec::new());
                }
                v.split(',')
                    .map(|p| p.trim().parse().ok())
                    .collect::<Option<Vec<usize>>>()
            },
            "a comma-separated integer list",
        )
    }

    /// Rejects any keys never consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        for (i, (k, _, line)) in self.entries.iter().enumerate() {
            if !self.consumed[i] {
                return Err(ConfigError::UnknownKey {
                    line: *line,
                    key: k.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Full training run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: SdfNetConfig,
    pub renderer: RendererConfig,
    pub trace: TraceConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub alpha: AlphaSchedule,
    pub cameras_trainable: bool,
    /// Checkpoint cadence in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let geometry = SdfNetConfig::default();
        let renderer = RendererConfig {
            feature_size: geometry.feature_size,
            ..RendererConfig::default()
        };
        RunConfig {
            geometry,
            renderer,
            trace: TraceConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            alpha: AlphaSchedule::default(),
            cameras_trainable: true,
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::parse(text)?;
        let d = RunConfig::default();
        let geometry = SdfNetConfig {
            depth: kv.usize("geometry.depth", d.geometry.depth)?,
            hidden: kv.usize("geometry.width", d.geometry.hidden)?,
            feature_size: kv.usize("geometry.feature_size", d.geometry.feature_size)?,
            skip_layer: {
                let depth = kv.usize("geometry.depth", d.geometry.depth).unwrap_or(d.geometry.depth);
                kv.usize("geometry.skip_layer", depth / 2)?
            },
            encoding_order: kv.usize("geometry.encoding_order", d.geometry.encoding_order)?,
            init_radius: kv.f64("geometry.init_radius", d.geometry.init_radius)?,
            softplus_beta: kv.f64("geometry.softplus_beta", d.geometry.softplus_beta)?,
        };
        let renderer = RendererConfig {
            depth: kv.usize("renderer.depth", d.renderer.depth)?,
            hidden: kv.usize("renderer.width", d.renderer.hidden)?,
            view_encoding_order: kv
                .usize("renderer.view_encoding_order", d.renderer.view_encoding_order)?,
            feature_size: geometry.feature_size,
            use_normal: kv.bool("renderer.use_normal", true)?,
            use_view: kv.bool("renderer.use_view", true)?,
            use_feature: kv.bool("renderer.use_feature", true)?,
        };
        let trace = TraceConfig {
            max_sphere_steps: kv.usize("trace.max_sphere_steps", d.trace.max_sphere_steps)?,
            sdf_threshold: kv.f64("trace.sdf_threshold", d.trace.sdf_threshold)?,
            fallback_samples: kv.usize("trace.fallback_samples", d.trace.fallback_samples)?,
            secant_iters: kv.usize("trace.secant_iters", d.trace.secant_iters)?,
        };
        let train = TrainConfig {
            epochs: kv.usize("train.epochs", d.train.epochs)?,
            lr: LrSchedule {
                base: kv.f64("train.lr", d.train.lr.base)?,
                decay_epochs: kv.usize_list("train.lr_decay_epochs", &d.train.lr.decay_epochs)?,
                decay_factor: kv.f64("train.lr_decay_factor", d.train.lr.decay_factor)?,
            },
            pixels_per_image: kv.usize("train.pixels_per_image", d.train.pixels_per_image)?,
            eikonal_points: kv.usize("train.eikonal_points", d.train.eikonal_points)?,
            seed: kv.u64("train.seed", d.train.seed)?,
        };
        let weights = LossWeights {
            rho: kv.f64("loss.rho", d.weights.rho)?,
            lambda: kv.f64("loss.lambda", d.weights.lambda)?,
        };
        let alpha = AlphaSchedule {
            start: kv.f64("alpha.start", d.alpha.start)?,
            factor: kv.f64("alpha.factor", d.alpha.factor)?,
            period: kv.usize("alpha.period", d.alpha.period)?,
            max_multiplications: kv
                .usize("alpha.max_multiplications", d.alpha.max_multiplications)?,
        };
        let cameras_trainable = kv.bool("cameras.trainable", d.cameras_trainable)?;
        let checkpoint_every = kv.usize("train.checkpoint_every", d.checkpoint_every)?;
        kv.finish()?;
        Ok(RunConfig {
            geometry,
            renderer,
            trace,
            train,
            weights,
            alpha,
            cameras_trainable,
            checkpoint_every,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let lr_list = self
            .train
            .lr
            .decay_epochs
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "geometry.depth = {}\n\
             geometry.width = {}\n\
             geometry.feature_size = {}\n\
             geometry.skip_layer = {}\n\
             geometry.encoding_order = {}\n\
             geometry.init_radius = {}\n\
             geometry.softplus_beta = {}\n\
             renderer.depth = {}\n\
             renderer.width = {}\n\
             renderer.view_encoding_order = {}\n\
             renderer.use_normal = {}\n\
             renderer.use_view = {}\n\
             renderer.use_feature = {}\n\
             trace.max_sphere_steps = {}\n\
             trace.sdf_threshold = {}\n\
             trace.fallback_samples = {}\n\
             trace.secant_iters = {}\n\
             train.epochs = {}\n\
             train.lr = {}\n\
             train.lr_decay_epochs = {}\n\
             train.lr_decay_factor = {}\n\
             train.pixels_per_image = {}\n\
             train.eikonal_points = {}\n\
             train.seed = {}\n\
             train.checkpoint_every = {}\n\
             loss.rho = {}\n\
             loss.lambda = {}\n\
             alpha.start = {}\n\
             alpha.factor = {}\n\
             alpha.period = {}\n\
             alpha.max_multiplications = {}\n\
             cameras.trainable = {}\n",
            self.geometry.depth,
            self.geometry.hidden,
            self.geometry.feature_size,
            self.geometry.skip_layer,
            self.geometry.encoding_order,
            self.geometry.init_radius,
            self.geometry.softplus_beta,
            self.renderer.depth,
            self.renderer.hidden,
            self.renderer.view_encoding_order,
            self.renderer.use_normal,
            self.renderer.use_view,
            self.renderer.use_feature,
            self.trace.max_sphere_steps,
            self.trace.sdf_threshold,
            self.trace.fallback_samples,
            self.trace.secant_iters,
            self.train.epochs,
            self.train.lr.base,
            lr_list,
            self.train.lr.decay_factor,
            self.train.pixels_per_image,
            self.train.eikonal_points,
            self.train.seed,
            self.checkpoint_every,
            self.weights.rho,
            self.weights.lambda,
            self.alpha.start,
            self.alpha.factor,
            self.alpha.period,
            self.alpha.max_multiplications,
            self.cameras_trainable,
        )
    }
}

/// Synthetic scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub scene: Scene,
    pub cameras: usize,
    pub camera_radius: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

fn parse_shape(kv: &mut KeyValues, prefix: &str, allow_union: bool) -> Result<AnalyticSdf, ConfigError> {
    let key = |s: &str| format!("{prefix}.{s}");
    let kind = kv.string(&key("kind"), "sphere")?;
    let shape = match kind.as_str() {
        "sphere" => Shape::Sphere {
            radius: kv.f64(&key("radius"), 0.5)?,
        },
        "torus" => Shape::Torus {
            major: kv.f64(&key("major"), 0.5)?,
            minor: kv.f64(&key("minor"), 0.2)?,
        },
        "box" => Shape::Box {
            half: kv.vec3(&key("half"), [0.4, 0.4, 0.4])?,
        },
        "smooth_union" if allow_union => {
            let a = parse_shape(kv, &key("a"), false)?;
            let b = parse_shape(kv, &key("b"), false)?;
            Shape::SmoothUnion {
                a: Box::new(a),
                b: Box::new(b),
                blend: kv.f64(&key("blend"), 0.1)?,
            }
        }
        other => {
            return Err(ConfigError::Parse {
                line: 0,
                msg: format!("{}: unknown shape kind {other:?}", key("kind")),
            })
        }
    };
    Ok(AnalyticSdf {
        shape,
        rotation: kv.vec4(&key("rotation"), [1.0, 0.0, 0.0, 0.0])?,
        translation: kv.vec3(&key("center"), [0.0, 0.0, 0.0])?,
    })
}

fn shape_text(sdf: &AnalyticSdf, prefix: &str, out: &mut String) {
    use std::fmt::Write;
    let kind = match &sdf.shape {
        Shape::Sphere { .. } => "sphere",
        Shape::Torus { .. } => "torus",
        Shape::Box { .. } => "box",
        Shape::SmoothUnion { .. } => "smooth_union",
    };
    writeln!(out, "{prefix}.kind = {kind}").unwrap();
    match &sdf.shape {
        Shape::Sphere { radius } => writeln!(out, "{prefix}.radius = {radius}").unwrap(),
        Shape::Torus { major, minor } => {
            writeln!(out, "{prefix}.major = {major}").unwrap();
            writeln!(out, "{prefix}.minor = {minor}").unwrap();
        }
        Shape::Box { half } => {
            writeln!(out, "{prefix}.half = {} {} {}", half[0], half[1], half[2]).unwrap()
        }
        Shape::SmoothUnion { a, b, blend } => {
            shape_text(a, &format!("{prefix}.a"), out);
            shape_text(b, &format!("{prefix}.b"), out);
            writeln!(out, "{prefix}.blend = {blend}").unwrap();
        }
    }
    writeln!(
        out,
        "{prefix}.rotation = {} {} {} {}",
        sdf.rotation[0], sdf.rotation[1], sdf.rotation[2], sdf.rotation[3]
    )
    .unwrap();
    writeln!(
        out,
        "{prefix}.center = {} {} {}",
        sdf.translation[0], sdf.translation[1], sdf.translation[2]
    )
    .unwrap();
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::parse(text)?;
        let sdf = parse_shape(&mut kv, "shape", true)?;
        let material = PhongMaterial {
            k_d: kv.f64("material.k_d", 0.8)?,
            k_s: kv.f64("material.k_s", 0.3)?,
            o_d: kv.vec3("material.o_d", [0.85, 0.6, 0.35])?,
            o_s: kv.vec3("material.o_s", [1.0, 1.0, 1.0])?,
            n_s: kv.f64("material.n_s", 20.0)?,
        };
        let attachment = match kv.string("light.attach", "world")?.as_str() {
            "world" => LightAttachment::World,
            "camera" => LightAttachment::Camera,
            other => {
                return Err(ConfigError::Parse {
                    line: 0,
                    msg: format!("light.attach: expected world|camera, got {other:?}"),
                })
            }
        };
        let lighting = SceneLighting {
            ambient: kv.vec3("light.ambient", [0.18, 0.18, 0.18])?,
            diffuse: kv.vec3("light.diffuse", [0.85, 0.85, 0.85])?,
            position: kv.vec3("light.position", [2.0, 2.0, 2.0])?,
            attachment,
        };
        let background = kv.vec3("background", [0.0, 0.0, 0.0])?;
        let cameras = kv.usize("cameras", 16)?;
        let camera_radius = kv.f64("camera_radius", 2.5)?;
        let width = kv.usize("width", 96)?;
        let height = kv.usize("height", 96)?;
        let seed = kv.u64("seed", 0)?;
        kv.finish()?;
        Ok(SceneConfig {
            scene: Scene {
                sdf,
                material,
                lighting,
                background,
            },
            cameras,
            camera_radius,
            width,
            height,
            seed,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        shape_text(&self.scene.sdf, "shape", &mut out);
        let m = &self.scene.material;
        writeln!(out, "material.k_d = {}", m.k_d).unwrap();
        writeln!(out, "material.k_s = {}", m.k_s).unwrap();
        writeln!(out, "material.o_d = {} {} {}", m.o_d[0], m.o_d[1], m.o_d[2]).unwrap();
        writeln!(out, "material.o_s = {} {} {}", m.o_s[0], m.o_s[1], m.o_s[2]).unwrap();
        writeln!(out, "material.n_s = {}", m.n_s).unwrap();
        let l = &self.scene.lighting;
        writeln!(out, "light.ambient = {} {} {}", l.ambient[0], l.ambient[1], l.ambient[2])
            .unwrap();
        writeln!(out, "light.diffuse = {} {} {}", l.diffuse[0], l.diffuse[1], l.diffuse[2])
            .unwrap();
        writeln!(
            out,
            "light.position = {} {} {}",
            l.position[0], l.position[1], l.position[2]
        )
        .unwrap();
        writeln!(
            out,
            "light.attach = {}",
            match l.attachment {
                LightAttachment::World => "world",
                LightAttachment::Camera => "camera",
            }
        )
        .unwrap();
        let b = &self.scene.background;
        writeln!(out, "background = {} {} {}", b[0], b[1], b[2]).unwrap();
        writeln!(out, "cameras = {}", self.cameras).unwrap();
        writeln!(out, "camera_radius = {}", self.camera_radius).unwrap();
        writeln!(out, "width = {}", self.width).unwrap();
        writeln!(out, "height = {}", self.height).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.geometry.depth = 6;
        cfg.geometry.hidden = 96;
        cfg.renderer.use_normal = false;
        cfg.train.epochs = 123;
        cfg.train.lr.decay_epochs = vec![40, 80];
        cfg.weights.lambda = 0.25;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // and the serialization itself is a fixed point
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.weights.rho, 100.0);
        assert_eq!(cfg.weights.lambda, 0.1);
        assert_eq!(cfg.alpha.start, 50.0);
        assert_eq!(cfg.train.lr.base, 1e-4);
        assert_eq!(cfg.train.lr.decay_epochs, vec![1000, 1500]);
        assert_eq!(cfg.trace.sdf_threshold, 5e-5);
        assert_eq!(cfg.trace.max_sphere_steps, 10);
        assert_eq!(cfg.trace.fallback_samples, 100);
        assert_eq!(cfg.trace.secant_iters, 8);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = RunConfig::parse("train.epochs = 5\nbogus.key = 3\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "bogus.key");
            }
            other => panic!("expected unknown-key error, got {other}"),
        }
    }

    #[test]
    fn malformed_lines_and_duplicates_are_rejected() {
        let err = RunConfig::parse("train.epochs 5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
        let err = RunConfig::parse("train.epochs = 5\ntrain.epochs = 6\n").unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { line: 2, .. }));
        let err = RunConfig::parse("train.epochs = five\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn scene_config_round_trips_with_nested_shapes() {
        let text = "\
shape.kind = smooth_union
shape.a.kind = sphere
shape.a.radius = 0.45
shape.a.center = 0 0.2 0
shape.b.kind = torus
shape.b.major = 0.5
shape.b.minor = 0.16
shape.blend = 0.12
material.k_s = 0.5
light.attach = camera
cameras = 8
width = 64
height = 64
seed = 11
";
        let cfg = SceneConfig::parse(text).unwrap();
        assert_eq!(cfg.cameras, 8);
        assert!(matches!(cfg.scene.sdf.shape, Shape::SmoothUnion { .. }));
        assert_eq!(cfg.scene.lighting.attachment, LightAttachment::Camera);
        let round = SceneConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, round);
    }

    #[test]
    fn scene_config_rejects_unknown_shape_kind() {
        assert!(SceneConfig::parse("shape.kind = pyramid\n").is_err());
    }
}
