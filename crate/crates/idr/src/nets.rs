//! Geometry and renderer networks.
//!
//! The geometry network maps an encoded 3D point to a signed distance and a
//! feature vector, `F(δ_k(x); θ) = (f, z)`, with softplus activations and a
//! skip connection that re-concatenates the encoded input at a middle layer.
//! The renderer maps surface quantities `(x̂, n̂, ẑ, δ_k(v))` to RGB in
//! [-1, 1]³ (relu hidden layers, tanh output).
//!
//! Each network evaluates through two interchangeable paths: recorded on a
//! [`Tape`] for training, or on plain floats for ray marching, inference and
//! finite-difference oracles. Both paths share one generic forward, so they
//! perform the same arithmetic in the same order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::math;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite parameter in {array} at index {index}")]
    NonFiniteParam { array: String, index: usize },
    #[error("config invalid: {0}")]
    BadConfig(String),
}

/// Identity-augmented sinusoidal encoding length for a `d`-vector.
pub fn encoding_dim(d: usize, k: usize) -> usize {
    d + 2 * k * d
}

/// Encodes `y` as `[y, sin(2^ω π yᵢ), cos(2^ω π yᵢ) ...]`, identity first,
/// then per entry the (sin, cos) pairs in ascending frequency order.
pub fn positional_encode(y: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoding_dim(y.len(), k));
    positional_encode_into(y, k, &mut out);
    out
}

fn positional_encode_into(y: &[f64], k: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(y);
    for &yi in y {
        for omega in 0..k {
            let arg = (1u64 << omega) as f64 * std::f64::consts::PI * yi;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
}

/// Tape-recorded counterpart of [`positional_encode`].
pub fn positional_encode_tape(tape: &mut Tape, y: &[Var], k: usize) -> Vec<Var> {
    let mut out = Vec::with_capacity(encoding_dim(y.len(), k));
    out.extend_from_slice(y);
    for &yi in y {
        for omega in 0..k {
            let freq = tape.constant((1u64 << omega) as f64 * std::f64::consts::PI);
            let arg = tape.mul(freq, yi);
            out.push(tape.sin(arg));
            out.push(tape.cos(arg));
        }
    }
    out
}

/// Evaluation context: the one generic forward below runs either on plain
/// floats or on tape nodes depending on which context it is handed.
pub(crate) trait Ctx {
    type V: Copy;
    fn constant(&mut self, v: f64) -> Self::V;
    fn param(&mut self, slot: usize) -> Self::V;
    /// `Σ params[w0 + i] * xs[i]`, accumulated in index order.
    fn dot_params(&mut self, w0: usize, xs: &[Self::V]) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sin(&mut self, x: Self::V) -> Self::V;
    fn cos(&mut self, x: Self::V) -> Self::V;
    fn softplus(&mut self, x: Self::V, beta: f64) -> Self::V;
    fn relu(&mut self, x: Self::V) -> Self::V;
    fn tanh(&mut self, x: Self::V) -> Self::V;
}

pub(crate) struct RawCtx<'a> {
    pub params: &'a [f64],
}

impl Ctx for RawCtx<'_> {
    type V = f64;
    fn constant(&mut self, v: f64) -> f64 {
        v
    }
    fn param(&mut self, slot: usize) -> f64 {
        self.params[slot]
    }
    fn dot_params(&mut self, w0: usize, xs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            acc += self.params[w0 + i] * x;
        }
        acc
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn sin(&mut self, x: f64) -> f64 {
        x.sin()
    }
    fn cos(&mut self, x: f64) -> f64 {
        x.cos()
    }
    fn softplus(&mut self, x: f64, beta: f64) -> f64 {
        math::softplus(x, beta)
    }
    fn relu(&mut self, x: f64) -> f64 {
        x.max(0.0)
    }
    fn tanh(&mut self, x: f64) -> f64 {
        x.tanh()
    }
}

/// Tape context bound to a leaf block holding this network's parameters
/// (leaf index = `base + flat parameter slot`).
pub(crate) struct TapeCtx<'a> {
    pub tape: &'a mut Tape,
    pub base: u32,
}

impl Ctx for TapeCtx<'_> {
    type V = Var;
    fn constant(&mut self, v: f64) -> Var {
        self.tape.constant(v)
    }
    fn param(&mut self, slot: usize) -> Var {
        self.tape.var_at(self.base + slot as u32)
    }
    fn dot_params(&mut self, w0: usize, xs: &[Var]) -> Var {
        self.tape.dot_block(self.base + w0 as u32, xs.len(), xs)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.tape.add(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.tape.mul(a, b)
    }
    fn sin(&mut self, x: Var) -> Var {
        self.tape.sin(x)
    }
    fn cos(&mut self, x: Var) -> Var {
        self.tape.cos(x)
    }
    fn softplus(&mut self, x: Var, beta: f64) -> Var {
        self.tape.softplus(x, beta)
    }
    fn relu(&mut self, x: Var) -> Var {
        self.tape.relu(x)
    }
    fn tanh(&mut self, x: Var) -> Var {
        self.tape.tanh(x)
    }
}

fn encode_ctx<C: Ctx>(ctx: &mut C, y: &[C::V], k: usize) -> Vec<C::V> {
    let mut out = Vec::with_capacity(encoding_dim(y.len(), k));
    out.extend_from_slice(y);
    for &yi in y {
        for omega in 0..k {
            let freq = ctx.constant((1u64 << omega) as f64 * std::f64::consts::PI);
            let arg = ctx.mul(freq, yi);
            out.push(ctx.sin(arg));
            out.push(ctx.cos(arg));
        }
    }
    out
}

/// One dense layer's location inside the flat parameter vector. Weights are
/// row-major (`out_dim` rows of `in_dim`), biases follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Layer {
    fn apply<C: Ctx>(&self, ctx: &mut C, xs: &[C::V]) -> Vec<C::V> {
        debug_assert_eq!(xs.len(), self.in_dim);
        (0..self.out_dim)
            .map(|r| {
                let pre = ctx.dot_params(self.w_off + r * self.in_dim, xs);
                let b = ctx.param(self.b_off + r);
                ctx.add(pre, b)
            })
            .collect()
    }
}

/// A named view into a network's flat parameter vector, for checkpoints and
/// the optimizer.
#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: std::ops::Range<usize>,
}

fn layer_layout(dims: &[(usize, usize)]) -> (Vec<Layer>, usize) {
    let mut layers = Vec::with_capacity(dims.len());
    let mut off = 0usize;
    for &(i, o) in dims {
        layers.push(Layer {
            in_dim: i,
            out_dim: o,
            w_off: off,
            b_off: off + i * o,
        });
        off += i * o + o;
    }
    (layers, off)
}

fn layer_arrays(prefix: &str, layers: &[Layer]) -> Vec<NamedArray> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for (i, l) in layers.iter().enumerate() {
        out.push(NamedArray {
            name: format!("{prefix}.layer{i}.weight"),
            shape: vec![l.out_dim, l.in_dim],
            range: l.w_off..l.w_off + l.in_dim * l.out_dim,
        });
        out.push(NamedArray {
            name: format!("{prefix}.layer{i}.bias"),
            shape: vec![l.out_dim],
            range: l.b_off..l.b_off + l.out_dim,
        });
    }
    out
}

fn check_finite(arrays: &[NamedArray], params: &[f64]) -> Result<(), NetError> {
    for a in arrays {
        if let Some(bad) = params[a.range.clone()].iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteParam {
                array: a.name.clone(),
                index: bad,
            });
        }
    }
    Ok(())
}

/// Geometry network shape. Defaults are desk-scale; the sizes reported for
/// large scenes (8 layers of 512, feature 256) are reachable through config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfNetConfig {
    /// Hidden layer count.
    pub depth: usize,
    pub hidden: usize,
    /// Feature head width ℓ.
    pub feature_size: usize,
    /// Hidden layer whose input re-concatenates the encoded point.
    pub skip_layer: usize,
    /// Positional encoding order k.
    pub encoding_order: usize,
    /// Radius of the sphere the initial SDF approximates.
    pub init_radius: f64,
    pub softplus_beta: f64,
}

impl Default for SdfNetConfig {
    fn default() -> Self {
        SdfNetConfig {
            depth: 4,
            hidden: 128,
            feature_size: 64,
            skip_layer: 2,
            encoding_order: 6,
            init_radius: 0.75,
            softplus_beta: 100.0,
        }
    }
}

impl SdfNetConfig {
    /// Sizes used at full scale: 8 hidden layers of 512, feature 256.
    pub fn full_scale() -> Self {
        SdfNetConfig {
            depth: 8,
            hidden: 512,
            feature_size: 256,
            skip_layer: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.depth < 2 {
            return Err(NetError::BadConfig("geometry depth must be >= 2".into()));
        }
        if self.skip_layer == 0 || self.skip_layer >= self.depth {
            return Err(NetError::BadConfig(format!(
                "skip layer {} must be strictly inside 1..{}",
                self.skip_layer, self.depth
            )));
        }
        if self.feature_size < 1 {
            return Err(NetError::BadConfig("feature size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoded_dim(&self) -> usize {
        encoding_dim(3, self.encoding_order)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let e = self.encoded_dim();
        let h = self.hidden;
        let mut dims = Vec::with_capacity(self.depth + 1);
        for l in 0..self.depth {
            let i = if l == 0 {
                e
            } else if l == self.skip_layer {
                h + e
            } else {
                h
            };
            dims.push((i, h));
        }
        dims.push((h, 1 + self.feature_size));
        dims
    }
}

/// Scale applied to the skip-layer concatenation `[h, δ_k(x)]`.
const SKIP_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Solves `A w = b` for symmetric positive definite `A` by in-place
/// Cholesky. `a` is row-major `n × n`.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
    // factorize A = L L^T
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                a[i * n + i] = s.max(1e-300).sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    // L y = b
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    // L^T w = y
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    b.to_vec()
}

/// The geometry network `F(δ_k(x); θ) = (f, z)`.
#[derive(Debug, Clone)]
pub struct SdfNetwork {
    pub cfg: SdfNetConfig,
    pub layers: Vec<Layer>,
    pub params: Vec<f64>,
}

impl SdfNetwork {
    /// Geometric initialization: the fresh network approximates the signed
    /// distance to a sphere of radius `cfg.init_radius`. Hidden weights are
    /// N(0, √2/√out); the weights reading sinusoidal encoding channels are
    /// zeroed (first and skip layers) so the identity channels dominate at
    /// init; the output layer gets mean √π/√in with bias −r.
    pub fn geometric_init(cfg: SdfNetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        let (layers, total) = layer_layout(&dims);
        let mut params = vec![0.0f64; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.encoded_dim();
        let h = cfg.hidden;

        for (l, layer) in layers.iter().enumerate() {
            let w = layer.w_off;
            if l == layers.len() - 1 {
                let mean = std::f64::consts::PI.sqrt() / (layer.in_dim as f64).sqrt();
                let dist = Normal::new(mean, 1e-4).unwrap();
                for p in params[w..w + layer.in_dim * layer.out_dim].iter_mut() {
                    *p = dist.sample(&mut rng);
                }
                for p in params[layer.b_off..layer.b_off + layer.out_dim].iter_mut() {
                    *p = -cfg.init_radius;
                }
            } else {
                let std = (2.0f64).sqrt() / (layer.out_dim as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                for p in params[w..w + layer.in_dim * layer.out_dim].iter_mut() {
                    *p = dist.sample(&mut rng);
                }
                // Sinusoidal channels start silent so the initial function
                // is driven by the raw coordinates.
                if l == 0 {
                    for r in 0..layer.out_dim {
                        for c in 3..e {
                            params[w + r * layer.in_dim + c] = 0.0;
                        }
                    }
                } else if l == cfg.skip_layer {
                    for r in 0..layer.out_dim {
                        for c in h + 3..h + e {
                            params[w + r * layer.in_dim + c] = 0.0;
                        }
                    }
                }
            }
        }
        let mut net = SdfNetwork {
            cfg,
            layers,
            params,
        };
        net.calibrate_init(&mut rng);
        Ok(net)
    }

    /// At desk widths the random head leaves the init sphere noticeably
    /// anisotropic and its radial slope seed-dependent. Re-fit the distance
    /// head (last-layer row 0 plus bias) to `‖x‖ − r` by ridge least squares
    /// over the frozen random features — the finite-width analogue of the
    /// analytic `√π/√n` head, and deterministic given the seed.
    fn calibrate_init(&mut self, rng: &mut ChaCha8Rng) {
        let r = self.cfg.init_radius;
        let out = *self.layers.last().unwrap();
        let d = out.in_dim + 1; // head weights plus bias
        let n_samples = 8 * d;
        let r_max = (2.2 * r).max(1.8);

        let mut ata = vec![0.0f64; d * d];
        let mut aty = vec![0.0f64; d];
        let mut feat = vec![0.0f64; d];
        for _ in 0..n_samples {
            let dir = math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let rad = rng.random_range(0.0..r_max);
            let h = self.hidden_raw(math::scale3(dir, rad));
            feat[..out.in_dim].copy_from_slice(&h);
            feat[out.in_dim] = 1.0;
            let y = rad - r;
            for i in 0..d {
                aty[i] += feat[i] * y;
                for j in i..d {
                    ata[i * d + j] += feat[i] * feat[j];
                }
            }
        }
        for i in 0..d {
            ata[i * d + i] += 1e-6 * n_samples as f64;
            for j in 0..i {
                ata[i * d + j] = ata[j * d + i];
            }
        }
        let w = solve_spd(&mut ata, &mut aty, d);
        self.params[out.w_off..out.w_off + out.in_dim].copy_from_slice(&w[..out.in_dim]);
        self.params[out.b_off] = w[out.in_dim];
    }

    /// Activations of the last hidden layer.
    fn hidden_raw(&self, x: [f64; 3]) -> Vec<f64> {
        let enc = positional_encode(&x, self.cfg.encoding_order);
        let mut h = enc.clone();
        let params = &self.params;
        for (l, layer) in self.layers.iter().take(self.layers.len() - 1).enumerate() {
            if l == self.cfg.skip_layer {
                h.extend_from_slice(&enc);
                for v in h.iter_mut() {
                    *v *= SKIP_SCALE;
                }
            }
            let mut out = Vec::with_capacity(layer.out_dim);
            for r in 0..layer.out_dim {
                let mut acc = 0.0;
                let w = layer.w_off + r * layer.in_dim;
                for (i, &xv) in h.iter().enumerate() {
                    acc += params[w + i] * xv;
                }
                out.push(math::softplus(
                    acc + params[layer.b_off + r],
                    self.cfg.softplus_beta,
                ));
            }
            h = out;
        }
        h
    }

    pub fn named_arrays(&self) -> Vec<NamedArray> {
        layer_arrays("geometry", &self.layers)
    }

    pub fn validate_finite(&self) -> Result<(), NetError> {
        check_finite(&self.named_arrays(), &self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn forward_ctx<C: Ctx>(&self, ctx: &mut C, x: [C::V; 3]) -> (C::V, Vec<C::V>) {
        let enc = encode_ctx(ctx, &x, self.cfg.encoding_order);
        let mut h: Vec<C::V> = enc.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l == self.layers.len() - 1;
            if l == self.cfg.skip_layer {
                // concat roughly doubles the squared norm; rescale to keep
                // the geometric initialization a distance function
                h.extend_from_slice(&enc);
                let s = ctx.constant(SKIP_SCALE);
                for v in h.iter_mut() {
                    *v = ctx.mul(*v, s);
                }
            }
            let mut out = layer.apply(ctx, &h);
            if !last {
                for v in out.iter_mut() {
                    *v = ctx.softplus(*v, self.cfg.softplus_beta);
                }
            }
            h = out;
        }
        let f = h[0];
        let z = h.split_off(1);
        (f, z)
    }

    /// Full forward on plain floats: `(f, z)`.
    pub fn forward_raw(&self, x: [f64; 3]) -> (f64, Vec<f64>) {
        let mut ctx = RawCtx {
            params: &self.params,
        };
        self.forward_ctx(&mut ctx, x)
    }

    /// Signed distance only; skips the feature head rows of the last
    /// layer. This is the ray-marching hot path, so activations live in
    /// reusable thread-local buffers.
    pub fn value_raw(&self, x: [f64; 3]) -> f64 {
        thread_local! {
            static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>, Vec<f64>)> =
                std::cell::RefCell::new(Default::default());
        }
        SCRATCH.with(|cell| {
            let scratch = &mut *cell.borrow_mut();
            let (enc, h, next) = (&mut scratch.0, &mut scratch.1, &mut scratch.2);
            positional_encode_into(&x, self.cfg.encoding_order, enc);
            h.clear();
            h.extend_from_slice(enc);
            let params = &self.params;
            let beta = self.cfg.softplus_beta;
            for (l, layer) in self.layers.iter().enumerate() {
                let last = l == self.layers.len() - 1;
                if l == self.cfg.skip_layer {
                    h.extend_from_slice(enc);
                    for v in h.iter_mut() {
                        *v *= SKIP_SCALE;
                    }
                }
                if last {
                    let row = &params[layer.w_off..layer.w_off + layer.in_dim];
                    let mut acc = 0.0;
                    for (a, b) in row.iter().zip(h.iter()) {
                        acc += a * b;
                    }
                    return acc + params[layer.b_off];
                }
                next.clear();
                for r in 0..layer.out_dim {
                    let w = layer.w_off + r * layer.in_dim;
                    let row = &params[w..w + layer.in_dim];
                    let mut acc = 0.0;
                    for (a, b) in row.iter().zip(h.iter()) {
                        acc += a * b;
                    }
                    next.push(math::softplus(acc + params[layer.b_off + r], beta));
                }
                std::mem::swap(h, next);
            }
            unreachable!("network has at least one layer")
        })
    }

    /// `(f, ∇ₓf)` by hand-rolled backprop on plain floats. Used where the
    /// gradient is needed as a detached constant (the intersection
    /// denominator, mesh normals, inference shading) — the tape path
    /// computes the live gradient independently.
    pub fn value_and_grad_raw(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let k = self.cfg.encoding_order;
        let beta = self.cfg.softplus_beta;
        let enc = positional_encode(&x, k);
        let e = enc.len();
        let params = &self.params;

        // forward, keeping per-layer inputs and pre-activations
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = enc.clone();
        let mut f_val = 0.0;
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l == self.layers.len() - 1;
            if l == self.cfg.skip_layer {
                h.extend_from_slice(&enc);
                for v in h.iter_mut() {
                    *v *= SKIP_SCALE;
                }
            }
            if last {
                let mut acc = 0.0;
                for (i, &xv) in h.iter().enumerate() {
                    acc += params[layer.w_off + i] * xv;
                }
                f_val = acc + params[layer.b_off];
                pres.push(Vec::new());
            } else {
                let mut pre = Vec::with_capacity(layer.out_dim);
                let mut out = Vec::with_capacity(layer.out_dim);
                for r in 0..layer.out_dim {
                    let mut acc = 0.0;
                    let w = layer.w_off + r * layer.in_dim;
                    for (i, &xv) in h.iter().enumerate() {
                        acc += params[w + i] * xv;
                    }
                    let p = acc + params[layer.b_off + r];
                    pre.push(p);
                    out.push(math::softplus(p, beta));
                }
                pres.push(pre);
                h = out;
            }
        }

        // reverse sweep down to the encoded input
        let mut d_enc = vec![0.0f64; e];
        let last = self.layers.len() - 1;
        let out_layer = &self.layers[last];
        let mut d_h: Vec<f64> = params[out_layer.w_off..out_layer.w_off + out_layer.in_dim].to_vec();
        for l in (0..last).rev() {
            let layer = &self.layers[l];
            let mut d_pre = d_h;
            for (r, dp) in d_pre.iter_mut().enumerate() {
                *dp *= math::softplus_deriv(pres[l][r], beta);
            }
            let mut d_in = vec![0.0f64; layer.in_dim];
            for (r, &dp) in d_pre.iter().enumerate() {
                if dp == 0.0 {
                    continue;
                }
                let w = layer.w_off + r * layer.in_dim;
                for (i, di) in d_in.iter_mut().enumerate() {
                    *di += params[w + i] * dp;
                }
            }
            if l == self.cfg.skip_layer {
                for v in d_in.iter_mut() {
                    *v *= SKIP_SCALE;
                }
                let h_dim = layer.in_dim - e;
                for (i, &v) in d_in[h_dim..].iter().enumerate() {
                    d_enc[i] += v;
                }
                d_in.truncate(h_dim);
                d_h = d_in;
            } else if l == 0 {
                for (i, &v) in d_in.iter().enumerate() {
                    d_enc[i] += v;
                }
                d_h = Vec::new();
            } else {
                d_h = d_in;
            }
        }
        // chain the encoding jacobian into x
        let mut grad = [d_enc[0], d_enc[1], d_enc[2]];
        for i in 0..3 {
            for omega in 0..k {
                let w = (1u64 << omega) as f64 * std::f64::consts::PI;
                let arg = w * x[i];
                grad[i] += d_enc[3 + i * 2 * k + 2 * omega] * w * arg.cos();
                grad[i] -= d_enc[3 + i * 2 * k + 2 * omega + 1] * w * arg.sin();
            }
        }
        (f_val, grad)
    }

    /// Tape forward. `base` is the first leaf index of this network's
    /// parameter block (see [`Tape::leaf_block`]).
    pub fn forward_tape(&self, tape: &mut Tape, base: u32, x: [Var; 3]) -> (Var, Vec<Var>) {
        let mut ctx = TapeCtx { tape, base };
        self.forward_ctx(&mut ctx, x)
    }

    /// Tape forward of the distance head only; skips the feature rows of
    /// the output layer.
    pub fn forward_tape_f_only(&self, tape: &mut Tape, base: u32, x: [Var; 3]) -> Var {
        let mut ctx = TapeCtx { tape, base };
        let enc = encode_ctx(&mut ctx, &x, self.cfg.encoding_order);
        let mut h: Vec<Var> = enc.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l == self.layers.len() - 1;
            if l == self.cfg.skip_layer {
                h.extend_from_slice(&enc);
                let s = ctx.constant(SKIP_SCALE);
                for v in h.iter_mut() {
                    *v = ctx.mul(*v, s);
                }
            }
            if last {
                let pre = ctx.dot_params(layer.w_off, &h);
                let b = ctx.param(layer.b_off);
                return ctx.add(pre, b);
            }
            let mut out = layer.apply(&mut ctx, &h);
            for v in out.iter_mut() {
                *v = ctx.softplus(*v, self.cfg.softplus_beta);
            }
            h = out;
        }
        unreachable!("network has at least one layer")
    }
}

/// Renderer shape and input ablations. All three optional inputs are on by
/// default; experiments drop the normal, view direction, or feature vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RendererConfig {
    /// Hidden layer count.
    pub depth: usize,
    pub hidden: usize,
    /// Positional encoding order for the view direction.
    pub view_encoding_order: usize,
    pub feature_size: usize,
    pub use_normal: bool,
    pub use_view: bool,
    pub use_feature: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            depth: 3,
            hidden: 128,
            view_encoding_order: 4,
            feature_size: 64,
            use_normal: true,
            use_view: true,
            use_feature: true,
        }
    }
}

impl RendererConfig {
    /// Sizes used at full scale: 4 hidden layers of 512.
    pub fn full_scale() -> Self {
        RendererConfig {
            depth: 4,
            hidden: 512,
            feature_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.depth < 1 {
            return Err(NetError::BadConfig("renderer depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let mut d = 3;
        if self.use_normal {
            d += 3;
        }
        if self.use_feature {
            d += self.feature_size;
        }
        if self.use_view {
            d += encoding_dim(3, self.view_encoding_order);
        }
        d
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut i = self.input_dim();
        for _ in 0..self.depth {
            dims.push((i, self.hidden));
            i = self.hidden;
        }
        dims.push((i, 3));
        dims
    }
}

/// The renderer network `M(x̂, n̂, ẑ, δ_k(v); γ) ∈ [-1, 1]³`.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub cfg: RendererConfig,
    pub layers: Vec<Layer>,
    pub params: Vec<f64>,
}

/// Renderer inputs; optional fields must match the config's ablation flags.
pub struct RenderInputs<'a, V> {
    pub x: [V; 3],
    pub normal: Option<[V; 3]>,
    pub feature: Option<&'a [V]>,
    pub view: Option<[V; 3]>,
}

impl Renderer {
    pub fn init(cfg: RendererConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        let (layers, total) = layer_layout(&dims);
        let mut params = vec![0.0f64; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let std = 1.0 / (layer.in_dim as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for p in params[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim].iter_mut() {
                *p = dist.sample(&mut rng);
            }
        }
        Ok(Renderer {
            cfg,
            layers,
            params,
        })
    }

    pub fn named_arrays(&self) -> Vec<NamedArray> {
        layer_arrays("renderer", &self.layers)
    }

    pub fn validate_finite(&self) -> Result<(), NetError> {
        check_finite(&self.named_arrays(), &self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn assemble<C: Ctx>(&self, ctx: &mut C, inp: &RenderInputs<'_, C::V>) -> Vec<C::V> {
        let mut xs: Vec<C::V> = Vec::with_capacity(self.cfg.input_dim());
        xs.extend_from_slice(&inp.x);
        if self.cfg.use_normal {
            let n = inp.normal.expect("renderer configured with normal input");
            xs.extend_from_slice(&n);
        }
        if self.cfg.use_feature {
            let z = inp.feature.expect("renderer configured with feature input");
            assert_eq!(z.len(), self.cfg.feature_size, "feature length mismatch");
            xs.extend_from_slice(z);
        }
        if self.cfg.use_view {
            let v = inp.view.expect("renderer configured with view input");
            let enc = encode_ctx(ctx, &v, self.cfg.view_encoding_order);
            xs.extend_from_slice(&enc);
        }
        xs
    }

    fn forward_ctx<C: Ctx>(&self, ctx: &mut C, inp: &RenderInputs<'_, C::V>) -> [C::V; 3] {
        let mut h = self.assemble(ctx, inp);
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l == self.layers.len() - 1;
            let mut out = layer.apply(ctx, &h);
            for v in out.iter_mut() {
                *v = if last { ctx.tanh(*v) } else { ctx.relu(*v) };
            }
            h = out;
        }
        [h[0], h[1], h[2]]
    }

    pub fn forward_raw(&self, inp: &RenderInputs<'_, f64>) -> [f64; 3] {
        let mut ctx = RawCtx {
            params: &self.params,
        };
        self.forward_ctx(&mut ctx, inp)
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        base: u32,
        inp: &RenderInputs<'_, Var>,
    ) -> [Var; 3] {
        let mut ctx = TapeCtx { tape, base };
        self.forward_ctx(&mut ctx, inp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn encoding_matches_worked_examples() {
        // y = (0), k = 2 -> (0, 0, 1, 0, 1)
        let e = positional_encode(&[0.0], 2);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        // y = (0.5), k = 1 -> (0.5, 1, cos(pi/2) ~ 0)
        let e = positional_encode(&[0.5], 1);
        assert!((e[0] - 0.5).abs() < 1e-15);
        assert!((e[1] - 1.0).abs() < 1e-15);
        assert!(e[2].abs() < 1e-15);
        // length d + 2kd
        let e = positional_encode(&[0.3, -0.2], 6);
        assert_eq!(e.len(), 26);
    }

    #[test]
    fn encoding_respects_integer_periods() {
        // components at y and y + 2 agree for every frequency 2^ω π, ω >= 1
        let y = 0.37;
        let a = positional_encode(&[y], 6);
        let b = positional_encode(&[y + 2.0], 6);
        for omega in 1..6 {
            assert!(
                (a[1 + 2 * omega] - b[1 + 2 * omega]).abs() < 1e-12,
                "sin ω={omega}"
            );
            assert!(
                (a[2 + 2 * omega] - b[2 + 2 * omega]).abs() < 1e-12,
                "cos ω={omega}"
            );
        }
    }

    #[test]
    fn tape_and_raw_encodings_agree() {
        let y = [0.12, -0.95, 0.4];
        let raw = positional_encode(&y, 6);
        let mut t = Tape::new();
        let ys: Vec<Var> = y.iter().map(|&v| t.leaf(v)).collect();
        let vars = positional_encode_tape(&mut t, &ys, 6);
        for (r, v) in raw.iter().zip(&vars) {
            assert_eq!(r.to_bits(), t.value(*v).to_bits());
        }
    }

    #[test]
    fn geometric_init_approximates_sphere_sdf() {
        let cfg = SdfNetConfig {
            init_radius: 1.0,
            ..SdfNetConfig::default()
        };
        let net = SdfNetwork::geometric_init(cfg, 11).unwrap();
        // center is inside at depth ~ r
        let f0 = net.value_raw([0.0, 0.0, 0.0]);
        assert!((f0 + 1.0).abs() < 0.15, "f(0) = {f0}");
        // near zero on the sphere
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let p = math::normalize3(v);
            let f = net.value_raw(p);
            assert!(f.abs() < 0.15, "|f| on sphere = {f}");
        }
        // outside: f(0,0,2r) ~ r
        let f2 = net.value_raw([0.0, 0.0, 2.0]);
        assert!((f2 - 1.0).abs() < 0.2, "f(0,0,2) = {f2}");
    }

    #[test]
    fn geometric_init_is_deterministic() {
        let a = SdfNetwork::geometric_init(SdfNetConfig::default(), 99).unwrap();
        let b = SdfNetwork::geometric_init(SdfNetConfig::default(), 99).unwrap();
        assert_eq!(a.params, b.params);
        let c = SdfNetwork::geometric_init(SdfNetConfig::default(), 100).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn geometric_init_is_nearly_eikonal() {
        let net = SdfNetwork::geometric_init(SdfNetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut acc = 0.0;
        let n = 200;
        for _ in 0..n {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let (_, g) = net.value_and_grad_raw(x);
            let r = math::norm3(g) - 1.0;
            acc += r * r;
        }
        let mean = acc / n as f64;
        assert!(mean < 0.1, "mean eikonal residual at init = {mean}");
    }

    #[test]
    fn feature_vector_has_configured_length() {
        let net = SdfNetwork::geometric_init(SdfNetConfig::default(), 0).unwrap();
        let (_, z) = net.forward_raw([0.1, 0.2, 0.3]);
        assert_eq!(z.len(), net.cfg.feature_size);
    }

    #[test]
    fn raw_and_tape_forward_agree_bitwise() {
        let net = SdfNetwork::geometric_init(SdfNetConfig::default(), 21).unwrap();
        let x = [0.31, -0.22, 0.57];
        let (f_raw, z_raw) = net.forward_raw(x);
        let mut t = Tape::new();
        let base = t.leaf_block(&net.params);
        let xv = x.map(|v| t.leaf(v));
        let (f, z) = net.forward_tape(&mut t, base, xv);
        assert_eq!(f_raw.to_bits(), t.value(f).to_bits());
        for (a, b) in z_raw.iter().zip(&z) {
            assert_eq!(a.to_bits(), t.value(*b).to_bits());
        }
        assert_eq!(net.value_raw(x).to_bits(), f_raw.to_bits());
    }

    #[test]
    fn raw_gradient_matches_tape_and_finite_differences() {
        let net = SdfNetwork::geometric_init(SdfNetConfig::default(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
            let (f, g) = net.value_and_grad_raw(x);
            assert!((f - net.value_raw(x)).abs() < 1e-14);

            // tape gradient
            let mut t = Tape::new();
            let base = t.leaf_block(&net.params);
            let xv = x.map(|v| t.leaf(v));
            let (fv, _) = net.forward_tape(&mut t, base, xv);
            let gm = t.backward(fv, &xv).unwrap();
            for i in 0..3 {
                assert!(
                    (gm.get(xv[i]) - g[i]).abs() < 1e-10,
                    "tape vs raw grad component {i}"
                );
            }

            // finite differences
            let h = 1e-5;
            for i in 0..3 {
                let mut hi = x;
                let mut lo = x;
                hi[i] += h;
                lo[i] -= h;
                let fd = (net.value_raw(hi) - net.value_raw(lo)) / (2.0 * h);
                let rel = (g[i] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "component {i}: {} vs fd {}", g[i], fd);
            }
        }
    }

    #[test]
    fn renderer_output_stays_in_tanh_range() {
        let cfg = RendererConfig::default();
        let net = Renderer::init(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let z: Vec<f64> = (0..cfg.feature_size)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let n = math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let v = math::normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let rgb = net.forward_raw(&RenderInputs {
                x: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                normal: Some(n),
                feature: Some(&z),
                view: Some(v),
            });
            for c in rgb {
                assert!((-1.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn renderer_ablations_change_input_arity() {
        let cfg = RendererConfig {
            use_normal: false,
            ..RendererConfig::default()
        };
        assert_eq!(cfg.input_dim(), RendererConfig::default().input_dim() - 3);
        let net = Renderer::init(cfg, 1).unwrap();
        let z = vec![0.0; cfg.feature_size];
        let rgb = net.forward_raw(&RenderInputs {
            x: [0.1, 0.2, 0.3],
            normal: None,
            feature: Some(&z),
            view: Some([0.0, 0.0, 1.0]),
        });
        assert!(rgb.iter().all(|c| c.is_finite()));

        let cfg = RendererConfig {
            use_view: false,
            use_feature: false,
            ..RendererConfig::default()
        };
        assert_eq!(cfg.input_dim(), 6);
    }

    #[test]
    fn zeroed_output_layer_renders_black() {
        let mut net = Renderer::init(RendererConfig::default(), 9).unwrap();
        let last = *net.layers.last().unwrap();
        for p in net.params[last.w_off..last.b_off + last.out_dim].iter_mut() {
            *p = 0.0;
        }
        let z = vec![0.4; net.cfg.feature_size];
        let rgb = net.forward_raw(&RenderInputs {
            x: [0.5, -0.2, 0.1],
            normal: Some([0.0, 0.0, 1.0]),
            feature: Some(&z),
            view: Some([0.0, 1.0, 0.0]),
        });
        assert_eq!(rgb, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn renderer_is_a_pure_function_of_inputs() {
        let net = Renderer::init(RendererConfig::default(), 30).unwrap();
        let z = vec![0.2; net.cfg.feature_size];
        let a = net.forward_raw(&RenderInputs {
            x: [0.1, 0.9, -0.4],
            normal: Some([0.0, 1.0, 0.0]),
            feature: Some(&z),
            view: Some([1.0, 0.0, 0.0]),
        });
        // fresh tape, same inputs
        let mut t = Tape::new();
        let base = t.leaf_block(&net.params);
        let zv: Vec<Var> = z.iter().map(|&v| t.leaf(v)).collect();
        let xi = [0.1, 0.9, -0.4].map(|c| t.leaf(c));
        let ni = [0.0, 1.0, 0.0].map(|c| t.leaf(c));
        let vi = [1.0, 0.0, 0.0].map(|c| t.leaf(c));
        let rgb = net.forward_tape(
            &mut t,
            base,
            &RenderInputs {
                x: xi,
                normal: Some(ni),
                feature: Some(&zv),
                view: Some(vi),
            },
        );
        for i in 0..3 {
            assert_eq!(a[i].to_bits(), t.value(rgb[i]).to_bits());
        }
    }

    #[test]
    fn init_respects_config_invariants() {
        assert!(SdfNetwork::geometric_init(
            SdfNetConfig {
                depth: 1,
                ..SdfNetConfig::default()
            },
            0
        )
        .is_err());
        assert!(SdfNetwork::geometric_init(
            SdfNetConfig {
                skip_layer: 4,
                depth: 4,
                ..SdfNetConfig::default()
            },
            0
        )
        .is_err());
        assert!(Renderer::init(
            RendererConfig {
                depth: 0,
                ..RendererConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn init_sphere_holds_at_other_radii() {
        let cfg = SdfNetConfig {
            init_radius: 0.75,
            ..SdfNetConfig::default()
        };
        let net = SdfNetwork::geometric_init(cfg, 1).unwrap();
        let r = 0.75;
        let f = net.value_raw([0.0, 0.0, 2.0 * r]);
        assert!((f - r).abs() < 0.2 * r, "f(0,0,2r) = {f}");
    }
}
