//! Scalar math shared by the tape and the raw (tape-free) evaluation paths.
//! Both paths must call these so their values agree to the last bit.

/// Logistic function, overflow-free on both tails. Beyond |x| = 40 the
/// exact value rounds to 0 or 1 in f64, so the tails skip the exp.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 40.0 {
        1.0
    } else if x <= -40.0 {
        0.0
    } else if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) = ln(1 + e^{βx}) / β`, computed as
/// `(max(βx, 0) + ln(1 + e^{-|βx|})) / β` so large `βx` cannot overflow.
/// Past |βx| = 40 the correction is below half an ulp of the linear part,
/// so the tails return it directly.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx >= 40.0 {
        x
    } else if bx <= -40.0 {
        0.0
    } else {
        (bx.max(0.0) + (-bx.abs()).exp().ln_1p()) / beta
    }
}

/// Derivative of [`softplus`] with respect to `x`.
pub fn softplus_deriv(x: f64, beta: f64) -> f64 {
    sigmoid(beta * x)
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Point on a ray at parameter `t`.
pub fn ray_at(origin: [f64; 3], dir: [f64; 3], t: f64) -> [f64; 3] {
    add3(origin, scale3(dir, t))
}
