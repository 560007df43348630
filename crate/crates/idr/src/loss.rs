//! The three-term loss, its schedules, and the Adam optimizer.
//!
//! `loss = rgb + ρ·mask + λ·eikonal` with ρ = 100 and λ = 0.1. Both the
//! color and mask terms normalize by the full mini-batch size |P|, not by
//! their own partition sizes. The mask term additionally divides by the
//! current α, which steps `50 → 1600` by doublings every 250 epochs; the
//! learning rate halves at epochs 1000 and 1500.

use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::render::TapeSdf;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite gradient in {array} at index {index}")]
    NonFiniteGrad { array: String, index: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Mask term weight ρ.
    pub rho: f64,
    /// Eikonal term weight λ.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rho: 100.0,
            lambda: 0.1,
        }
    }
}

/// α doubles every `period` epochs, at most `max_multiplications` times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub start: f64,
    pub factor: f64,
    pub period: usize,
    pub max_multiplications: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            start: 50.0,
            factor: 2.0,
            period: 250,
            max_multiplications: 5,
        }
    }
}

impl AlphaSchedule {
    pub fn alpha(&self, epoch: usize) -> f64 {
        let mults = (epoch / self.period).min(self.max_multiplications);
        self.start * self.factor.powi(mults as i32)
    }
}

/// Learning rate with step decays at fixed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            decay_epochs: vec![1000, 1500],
            decay_factor: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base * self.decay_factor.powi(decays as i32)
    }
}

/// `(1/|P|) Σ_{P_in} |I_p − L_p|₁` over pixels that hit the surface with a
/// positive mask. `batch_total` is the full mini-batch size |P|.
pub fn rgb_loss(pred: &[[f64; 3]], gt: &[[f64; 3]], batch_total: usize) -> f64 {
    assert_eq!(pred.len(), gt.len());
    if batch_total == 0 {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (0..3).map(|c| (g[c] - p[c]).abs()).sum::<f64>())
        .sum();
    sum / batch_total as f64
}

pub const MASK_CLIP: f64 = 1e-7;

/// Binary cross entropy of a clipped soft mask value against the label.
pub fn cross_entropy(label: bool, soft: f64) -> f64 {
    let s = soft.clamp(MASK_CLIP, 1.0 - MASK_CLIP);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// `(1/(α|P|)) Σ_{P_out} CE(O_p, S_{p,α})`.
pub fn mask_loss(soft: &[f64], labels: &[bool], alpha: f64, batch_total: usize) -> f64 {
    assert_eq!(soft.len(), labels.len());
    if batch_total == 0 {
        return 0.0;
    }
    let sum: f64 = soft
        .iter()
        .zip(labels)
        .map(|(&s, &o)| cross_entropy(o, s))
        .sum();
    sum / (alpha * batch_total as f64)
}

/// Mean of `(‖∇ₓf‖ − 1)²` over gradient norms.
pub fn eikonal_loss_value(grad_norms: &[f64]) -> f64 {
    if grad_norms.is_empty() {
        return 0.0;
    }
    grad_norms.iter().map(|&n| (n - 1.0) * (n - 1.0)).sum::<f64>() / grad_norms.len() as f64
}

/// `rgb + ρ·mask + λ·eikonal`.
pub fn total_loss(rgb: f64, mask: f64, eikonal: f64, w: &LossWeights) -> f64 {
    rgb + w.rho * mask + w.lambda * eikonal
}

/// Records the eikonal residual `(‖∇ₓf(x)‖ − 1)²` at a fixed point. The
/// gradient is produced by the emitting reverse sweep, so the residual is
/// differentiable with respect to the geometry parameters (second order).
pub fn eikonal_residual(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    point: [f64; 3],
) -> Result<Var, AdError> {
    let x = point.map(|v| tape.leaf(v));
    let f = sdf.eval_f(tape, x)?;
    let norm = crate::render::grad_norm_from(tape, f, x)?;
    residual_from_norm(tape, norm)
}

/// `(norm − 1)²` from an existing gradient-norm node.
pub fn residual_from_norm(tape: &mut Tape, norm: Var) -> Result<Var, AdError> {
    let one = tape.constant(1.0);
    let d = tape.sub(norm, one);
    Ok(tape.mul(d, d))
}

/// Mean eikonal residual over a point set, on tape.
pub fn eikonal_loss(
    tape: &mut Tape,
    sdf: &impl TapeSdf,
    points: &[[f64; 3]],
) -> Result<Var, AdError> {
    if points.is_empty() {
        return Ok(tape.constant(0.0));
    }
    let mut terms = Vec::with_capacity(points.len());
    for &p in points {
        terms.push(eikonal_residual(tape, sdf, p)?);
    }
    let sum = tape.sum(&terms);
    let inv = tape.constant(1.0 / points.len() as f64);
    Ok(tape.mul(sum, inv))
}

/// First/second moment state for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam with the standard defaults; only the learning rate is scheduled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `step` is the 1-based step count after
/// this update (callers increment a shared counter once per optimizer
/// step). Rejects non-finite gradients, naming the parameter array.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamParams,
    lr: f64,
    step: u64,
    array_name: &str,
) -> Result<(), LossError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(LossError::NonFiniteGrad {
            array: array_name.to_string(),
            index: bad,
        });
    }
    let b1t = hp.beta1.powi(step as i32);
    let b2t = hp.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / (1.0 - b1t);
        let v_hat = state.v[i] / (1.0 - b2t);
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::BoundSdf;

    #[test]
    fn rgb_loss_examples() {
        let gt = vec![[0.1, 0.2, 0.3]; 10];
        assert_eq!(rgb_loss(&gt, &gt, 10), 0.0);

        let mut pred = gt.clone();
        pred[3][0] += 0.3;
        assert!((rgb_loss(&pred, &gt, 10) - 0.03).abs() < 1e-15);

        assert_eq!(rgb_loss(&[], &[], 10), 0.0);
    }

    #[test]
    fn mask_loss_examples() {
        // O = 0, S = 1e-7: contribution ~ 0
        let l = mask_loss(&[1e-7], &[false], 50.0, 1);
        assert!(l.abs() < 1e-6);

        // O = 1, S = 0.5, α = 50, |P| = 1: ln 2 / 50
        let l = mask_loss(&[0.5], &[true], 50.0, 1);
        assert!((l - 2f64.ln() / 50.0).abs() < 1e-12);

        assert_eq!(mask_loss(&[], &[], 50.0, 8), 0.0);
    }

    #[test]
    fn eikonal_value_examples() {
        // exact SDF: zero residual
        assert!(eikonal_loss_value(&[1.0, 1.0, 1.0]) < 1e-12);
        // f scaled by 2: residual (2−1)² = 1
        assert!((eikonal_loss_value(&[2.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eikonal_tape_matches_examples_and_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;

        // exact SDF ‖x‖ − 1 on tape → ~0
        struct Sphere;
        impl TapeSdf for Sphere {
            fn eval(&self, tape: &mut Tape, x: [Var; 3]) -> Result<(Var, Vec<Var>), AdError> {
                let sq = tape.dot(&x, &x);
                let n = tape.sqrt(sq)?;
                let one = tape.constant(1.0);
                Ok((tape.sub(n, one), Vec::new()))
            }
            fn value_at(&self, x: [f64; 3]) -> f64 {
                crate::math::norm3(x) - 1.0
            }
            fn grad_at(&self, x: [f64; 3]) -> [f64; 3] {
                crate::math::normalize3(x)
            }
        }
        let mut tape = Tape::new();
        let pts = [[0.3, 0.4, 0.5], [-0.7, 0.2, 0.1], [0.9, -0.9, 0.4]];
        let l = eikonal_loss(&mut tape, &Sphere, &pts).unwrap();
        assert!(tape.value(l).abs() < 1e-12);

        // gradient w.r.t. θ on a small network vs finite differences
        let cfg = crate::nets::SdfNetConfig {
            depth: 2,
            hidden: 12,
            feature_size: 2,
            skip_layer: 1,
            encoding_order: 2,
            init_radius: 0.8,
            softplus_beta: 100.0,
        };
        let net = crate::nets::SdfNetwork::geometric_init(cfg, 77).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..12)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();

        let mut tape = Tape::new();
        let base = tape.leaf_block(&net.params);
        let bound = BoundSdf { net: &net, base };
        let l = eikonal_loss(&mut tape, &bound, &pts).unwrap();
        let adj = tape.backward_values(l).unwrap();

        let value_at = |params: &[f64]| -> f64 {
            let mut n2 = net.clone();
            n2.params.copy_from_slice(params);
            let norms: Vec<f64> = pts
                .iter()
                .map(|&p| crate::math::norm3(n2.value_and_grad_raw(p).1))
                .collect();
            eikonal_loss_value(&norms)
        };
        let h = 1e-5;
        for j in (0..net.params.len()).step_by(17) {
            let mut hi = net.params.clone();
            let mut lo = net.params.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (value_at(&hi) - value_at(&lo)) / (2.0 * h);
            let got = adj[(base + j as u32) as usize];
            assert!(
                (got - fd).abs() / fd.abs().max(1e-2) < 1e-3,
                "θ{j}: {got} vs {fd}"
            );
        }
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights {
            rho: 100.0,
            lambda: 0.1,
        };
        assert!((total_loss(0.1, 0.001, 0.2, &w) - 0.22).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let w0 = LossWeights {
            rho: 0.0,
            lambda: 0.0,
        };
        assert_eq!(total_loss(0.37, 5.0, 9.0, &w0), 0.37);
    }

    #[test]
    fn total_loss_is_linear_in_weights() {
        let (r, m, e) = (0.31, 0.007, 0.85);
        for (rho, lambda) in [(0.0, 0.0), (50.0, 0.05), (100.0, 0.1), (200.0, 0.2)] {
            let w = LossWeights { rho, lambda };
            let expect = r + rho * m + lambda * e;
            assert!((total_loss(r, m, e, &w) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_schedule_doubles_then_saturates() {
        let s = AlphaSchedule::default();
        assert_eq!(s.alpha(0), 50.0);
        assert_eq!(s.alpha(249), 50.0);
        assert_eq!(s.alpha(250), 100.0);
        assert_eq!(s.alpha(499), 100.0);
        assert_eq!(s.alpha(500), 200.0);
        assert_eq!(s.alpha(750), 400.0);
        assert_eq!(s.alpha(1000), 800.0);
        assert_eq!(s.alpha(1249), 800.0);
        assert_eq!(s.alpha(1250), 1600.0);
        assert_eq!(s.alpha(1999), 1600.0);
        assert_eq!(s.alpha(100_000), 1600.0);
        // nondecreasing
        let mut last = 0.0;
        for e in 0..2600 {
            let a = s.alpha(e);
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn lr_schedule_halves_at_fixed_epochs() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(999), 1e-4);
        assert_eq!(s.lr(1000), 5e-5);
        assert_eq!(s.lr(1499), 5e-5);
        assert_eq!(s.lr(1500), 2.5e-5);
        assert_eq!(s.lr(1999), 2.5e-5);
        for e in 0..2200 {
            let lr = s.lr(e);
            assert!(lr == 1e-4 || lr == 5e-5 || lr == 2.5e-5);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![0.4, -0.7];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamParams::default(), 1e-2, 1, "p").unwrap();
        assert_eq!(p, vec![0.4, -0.7]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // bias correction makes m̂/√v̂ = sign(g) on the first step
        for g in [3.0, -0.004, 1e4] {
            let mut p = vec![0.0];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, &AdamParams::default(), 1e-2, 1, "p").unwrap();
            let expect = -1e-2 * g.signum();
            assert!(
                (p[0] - expect).abs() < 1e-5,
                "g = {g}: step {} vs {expect}",
                p[0]
            );
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = vec![0.0, 1.0];
        let mut st = AdamState::new(2);
        let err = adam_step(
            &mut p,
            &[0.1, f64::NAN],
            &mut st,
            &AdamParams::default(),
            1e-2,
            1,
            "renderer.layer0.weight",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("renderer.layer0.weight"), "{msg}");
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.2, 0.9];
            let mut st = AdamState::new(3);
            for step in 1..=50u64 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                adam_step(&mut p, &g, &mut st, &AdamParams::default(), 1e-2, step, "p").unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
