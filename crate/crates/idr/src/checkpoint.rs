//! Binary checkpoints: named shaped arrays of 64-bit little-endian floats
//! plus the run configuration, epoch, and optimizer state. Loading a saved
//! checkpoint reproduces the training session bit for bit.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::camera::{Camera, CameraSet};
use crate::config::{ConfigError, RunConfig};
use crate::loss::AdamState;
use crate::nets::{NetError, Renderer, SdfNetwork};
use crate::train::{Model, Optimizer, TrainSession};

const MAGIC: &[u8; 8] = b"IDRCKPT\x01";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: malformed: {msg}")]
    Malformed { path: String, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A named array with shape, row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run_config: String,
    pub epoch: u64,
    pub seed: u64,
    pub alpha: f64,
    pub optimizer_step: u64,
    pub arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let wrap = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
        let mut w = move |bytes: &[u8]| -> Result<(), CheckpointError> {
            out.write_all(bytes).map_err(|source| CheckpointError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        w(MAGIC)?;
        w(&VERSION.to_le_bytes())?;
        w(&self.epoch.to_le_bytes())?;
        w(&self.seed.to_le_bytes())?;
        w(&self.alpha.to_le_bytes())?;
        w(&self.optimizer_step.to_le_bytes())?;
        let cfg = self.run_config.as_bytes();
        w(&(cfg.len() as u32).to_le_bytes())?;
        w(cfg)?;
        w(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            let name = a.name.as_bytes();
            w(&(name.len() as u32).to_le_bytes())?;
            w(name)?;
            w(&(a.shape.len() as u32).to_le_bytes())?;
            for &d in &a.shape {
                w(&(d as u64).to_le_bytes())?;
            }
            debug_assert_eq!(a.shape.iter().product::<usize>(), a.data.len());
            for &v in &a.data {
                w(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let wrap = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(wrap)?);
        let mut buf8 = [0u8; 8];
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf8).map_err(wrap)?;
        if &buf8 != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.display().to_string(),
            });
        }
        file.read_exact(&mut buf4).map_err(wrap)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(CheckpointError::BadVersion {
                path: path.display().to_string(),
                version,
            });
        }
        let read_u64 = |file: &mut std::io::BufReader<std::fs::File>| -> Result<u64, CheckpointError> {
            let mut b = [0u8; 8];
            file.read_exact(&mut b).map_err(|source| CheckpointError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(u64::from_le_bytes(b))
        };
        let epoch = read_u64(&mut file)?;
        let seed = read_u64(&mut file)?;
        let alpha = f64::from_bits(read_u64(&mut file)?);
        let optimizer_step = read_u64(&mut file)?;
        file.read_exact(&mut buf4).map_err(wrap)?;
        let cfg_len = u32::from_le_bytes(buf4) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        file.read_exact(&mut cfg_bytes).map_err(wrap)?;
        let run_config = String::from_utf8(cfg_bytes).map_err(|e| CheckpointError::Malformed {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        file.read_exact(&mut buf4).map_err(wrap)?;
        let n_arrays = u32::from_le_bytes(buf4) as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            file.read_exact(&mut buf4).map_err(wrap)?;
            let name_len = u32::from_le_bytes(buf4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes).map_err(wrap)?;
            let name = String::from_utf8(name_bytes).map_err(|e| CheckpointError::Malformed {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
            file.read_exact(&mut buf4).map_err(wrap)?;
            let ndim = u32::from_le_bytes(buf4) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut file)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(read_u64(&mut file)?));
            }
            arrays.push(ArrayEntry { name, shape, data });
        }
        Ok(Checkpoint {
            run_config,
            epoch,
            seed,
            alpha,
            optimizer_step,
            arrays,
        })
    }
}

fn push_array(arrays: &mut Vec<ArrayEntry>, name: &str, shape: Vec<usize>, data: Vec<f64>) {
    arrays.push(ArrayEntry {
        name: name.to_string(),
        shape,
        data,
    });
}

/// Snapshot of a full training session.
pub fn from_session(session: &TrainSession, cfg: &RunConfig) -> Checkpoint {
    let model = &session.model;
    let mut arrays = Vec::new();
    for a in model.geometry.named_arrays() {
        push_array(
            &mut arrays,
            &a.name,
            a.shape.clone(),
            model.geometry.params[a.range.clone()].to_vec(),
        );
    }
    for a in model.renderer.named_arrays() {
        push_array(
            &mut arrays,
            &a.name,
            a.shape.clone(),
            model.renderer.params[a.range.clone()].to_vec(),
        );
    }
    let n = model.cameras.cameras.len();
    let mut q = Vec::with_capacity(n * 4);
    let mut c = Vec::with_capacity(n * 3);
    let mut k = Vec::with_capacity(n * 9);
    for cam in &model.cameras.cameras {
        q.extend_from_slice(&cam.q);
        c.extend_from_slice(&cam.c);
        for row in &cam.k {
            k.extend_from_slice(row);
        }
    }
    push_array(&mut arrays, "cameras.q", vec![n, 4], q);
    push_array(&mut arrays, "cameras.c", vec![n, 3], c);
    push_array(&mut arrays, "cameras.k", vec![n, 3, 3], k);
    push_array(
        &mut arrays,
        "cameras.trainable",
        vec![n],
        model
            .cameras_trainable
            .iter()
            .map(|&t| if t { 1.0 } else { 0.0 })
            .collect(),
    );
    let opt = &session.optimizer;
    for (name, state) in [
        ("geometry", &opt.theta),
        ("renderer", &opt.gamma),
        ("cameras", &opt.tau),
    ] {
        push_array(&mut arrays, &format!("adam.m.{name}"), vec![state.m.len()], state.m.clone());
        push_array(&mut arrays, &format!("adam.v.{name}"), vec![state.v.len()], state.v.clone());
    }
    Checkpoint {
        run_config: cfg.to_text(),
        epoch: session.epoch as u64,
        seed: session.cfg.seed,
        alpha: session.alpha_schedule.alpha(session.epoch.saturating_sub(1)),
        optimizer_step: opt.step,
        arrays,
    }
}

fn require<'a>(
    ckpt: &'a Checkpoint,
    name: &str,
    path: &Path,
) -> Result<&'a ArrayEntry, CheckpointError> {
    ckpt.array(name).ok_or_else(|| CheckpointError::Malformed {
        path: path.display().to_string(),
        msg: format!("missing array {name:?}"),
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from(ckpt: &Checkpoint, path: &Path) -> Result<(Model, RunConfig), CheckpointError> {
    let cfg = RunConfig::parse(&ckpt.run_config)?;
    let mut geometry = SdfNetwork::geometric_init(cfg.geometry, 0)?;
    for a in geometry.named_arrays() {
        let e = require(ckpt, &a.name, path)?;
        if e.data.len() != a.range.len() {
            return Err(CheckpointError::Malformed {
                path: path.display().to_string(),
                msg: format!("array {} has wrong length", a.name),
            });
        }
        geometry.params[a.range.clone()].copy_from_slice(&e.data);
    }
    let mut renderer = Renderer::init(cfg.renderer, 0)?;
    for a in renderer.named_arrays() {
        let e = require(ckpt, &a.name, path)?;
        if e.data.len() != a.range.len() {
            return Err(CheckpointError::Malformed {
                path: path.display().to_string(),
                msg: format!("array {} has wrong length", a.name),
            });
        }
        renderer.params[a.range.clone()].copy_from_slice(&e.data);
    }
    let q = require(ckpt, "cameras.q", path)?;
    let c = require(ckpt, "cameras.c", path)?;
    let k = require(ckpt, "cameras.k", path)?;
    let trainable = require(ckpt, "cameras.trainable", path)?;
    let n = q.shape.first().copied().unwrap_or(0);
    let mut cameras = Vec::with_capacity(n);
    for i in 0..n {
        let mut km = [[0.0; 3]; 3];
        for r in 0..3 {
            for col in 0..3 {
                km[r][col] = k.data[i * 9 + r * 3 + col];
            }
        }
        cameras.push(Camera {
            q: std::array::from_fn(|j| q.data[i * 4 + j]),
            c: std::array::from_fn(|j| c.data[i * 3 + j]),
            k: km,
        });
    }
    let model = Model {
        geometry,
        renderer,
        cameras: CameraSet { cameras },
        cameras_trainable: trainable.data.iter().map(|&v| v != 0.0).collect(),
    };
    model.geometry.validate_finite()?;
    model.renderer.validate_finite()?;
    Ok((model, cfg))
}

/// Restores a full training session (model, optimizer moments, epoch).
pub fn session_from(ckpt: &Checkpoint, path: &Path) -> Result<(TrainSession, RunConfig), CheckpointError> {
    let (model, cfg) = model_from(ckpt, path)?;
    let mut optimizer = Optimizer::new(&model);
    for (name, state) in [
        ("geometry", &mut optimizer.theta),
        ("renderer", &mut optimizer.gamma),
        ("cameras", &mut optimizer.tau),
    ] {
        let m = require(ckpt, &format!("adam.m.{name}"), path)?;
        let v = require(ckpt, &format!("adam.v.{name}"), path)?;
        if m.data.len() != state.m.len() || v.data.len() != state.v.len() {
            return Err(CheckpointError::Malformed {
                path: path.display().to_string(),
                msg: format!("adam state for {name} has wrong length"),
            });
        }
        *state = AdamState {
            m: m.data.clone(),
            v: v.data.clone(),
        };
    }
    optimizer.step = ckpt.optimizer_step;
    let mut session = TrainSession::new(model, cfg.train.clone());
    session.optimizer = optimizer;
    session.epoch = ckpt.epoch as usize;
    session.alpha_schedule = cfg.alpha;
    session.weights = cfg.weights;
    session.trace_cfg = cfg.trace;
    Ok((session, cfg))
}
