//! Reverse-mode automatic differentiation on a flat scalar tape.
//!
//! A [`Tape`] is an append-only list of operation records in topological
//! order: every node's inputs precede it, so a single reverse sweep computes
//! adjoints. Two sweeps are provided:
//!
//! * [`Tape::backward`] *emits* the reverse pass as new tape nodes, so the
//!   returned gradients are themselves differentiable (reverse-over-reverse).
//!   This is how second-order terms — gradients of expressions that contain
//!   `‖∇ₓf‖` — are obtained: call `backward`, build on the returned nodes,
//!   call `backward` again.
//! * [`Tape::backward_values`] is the plain numeric sweep used in the hot
//!   training path where nothing downstream differentiates the result.
//!
//! Tapes are single-writer. Concurrent evaluation uses one tape per worker;
//! mixing variables across tapes panics at record time and is reported as a
//! structural error by the sweeps.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape. Cheap to copy; does not keep the
/// tape alive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    /// Node index within its tape.
    pub fn index(self) -> u32 {
        self.idx
    }
}

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op} of {value} at node {node} is outside the operation domain")]
    Domain {
        op: &'static str,
        value: f64,
        node: u32,
    },
    #[error("variable from tape {var_tape} used with tape {tape}")]
    CrossTape { var_tape: u32, tape: u32 },
    #[error("non-finite value {value} produced at node {node} ({op})")]
    NonFinite {
        op: &'static str,
        value: f64,
        node: u32,
    },
}

/// Operation kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Pow { exponent: f64 },
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Min,
    Max,
    Abs,
    Tanh,
    Sigmoid,
    Softplus { beta: f64 },
    Relu,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Pow(f64),
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Min,
    Max,
    Abs,
    Tanh,
    Sigmoid,
    Softplus(f64),
    Relu,
    // a = offset into the argument arena, b = length of each half.
    // Arena layout: n left-hand indices followed by n right-hand indices.
    Dot,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    a: u32,
    b: u32,
    value: f64,
}

/// Gradient of one scalar output with respect to a set of requested nodes.
///
/// Nodes absent from the map have adjoint zero. When produced by the
/// emitting sweep, each entry also carries the tape node holding the
/// adjoint, so gradients can be differentiated again.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: HashMap<u32, (f64, Option<Var>)>,
}

impl GradMap {
    /// Adjoint value for `leaf`; zero if absent.
    pub fn get(&self, leaf: Var) -> f64 {
        self.grads.get(&leaf.idx).map_or(0.0, |g| g.0)
    }

    /// Tape node holding the adjoint of `leaf`, when the sweep emitted one.
    pub fn var(&self, leaf: Var) -> Option<Var> {
        self.grads.get(&leaf.idx).and_then(|g| g.1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Contribution of one consumer to an input's adjoint during the emitting
/// sweep. `Prod` entries are fused into a single dot node at finalization.
enum Contrib {
    Pos(Var),
    Neg(Var),
    Prod(Var, Var),
}

/// Append-only record of scalar operations.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    args: Vec<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            args: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current end-of-tape mark for a later [`Tape::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops all nodes recorded after `mark`. Handles into the dropped
    /// region become invalid.
    pub fn truncate(&mut self, mark: usize) {
        assert!(mark <= self.nodes.len(), "truncate past end of tape");
        if let Some(node) = self.nodes.get(mark) {
            let arg_mark = match node.op {
                Op::Dot => node.a as usize,
                _ => self.args.len(),
            };
            self.args.truncate(arg_mark);
        }
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> f64 {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.nodes[v.idx as usize].value
    }

    /// Reconstructs the handle for node `idx`. The node must exist.
    pub fn var_at(&self, idx: u32) -> Var {
        assert!((idx as usize) < self.nodes.len(), "node {idx} out of range");
        Var {
            tape: self.id,
            idx,
        }
    }

    fn push(&mut self, op: Op, a: u32, b: u32, value: f64) -> Var {
        let idx = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { op, a, b, value });
        Var {
            tape: self.id,
            idx,
        }
    }

    fn check(&self, v: Var) -> u32 {
        assert_eq!(
            v.tape, self.id,
            "variable from tape {} used with tape {}",
            v.tape, self.id
        );
        v.idx
    }

    /// New leaf node. Leaves have no inputs; they are the only nodes a
    /// gradient sweep treats as endpoints.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, 0, 0, value)
    }

    /// Alias of [`Tape::leaf`] for values that are semantically constants.
    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(value)
    }

    /// Pushes a contiguous run of leaves and returns the index of the first.
    pub fn leaf_block(&mut self, values: &[f64]) -> u32 {
        let base = self.nodes.len() as u32;
        self.nodes.reserve(values.len());
        for &v in values {
            self.nodes.push(Node {
                op: Op::Leaf,
                a: 0,
                b: 0,
                value: v,
            });
        }
        base
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let (xi, yi) = (self.check(x), self.check(y));
        let v = self.nodes[xi as usize].value + self.nodes[yi as usize].value;
        self.push(Op::Add, xi, yi, v)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        let (xi, yi) = (self.check(x), self.check(y));
        let v = self.nodes[xi as usize].value - self.nodes[yi as usize].value;
        self.push(Op::Sub, xi, yi, v)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        let (xi, yi) = (self.check(x), self.check(y));
        let v = self.nodes[xi as usize].value * self.nodes[yi as usize].value;
        self.push(Op::Mul, xi, yi, v)
    }

    pub fn div(&mut self, x: Var, y: Var) -> Result<Var, AdError> {
        let (xi, yi) = (self.check(x), self.check(y));
        let d = self.nodes[yi as usize].value;
        if d == 0.0 {
            return Err(AdError::Domain {
                op: "div",
                value: d,
                node: yi,
            });
        }
        let v = self.nodes[xi as usize].value / d;
        Ok(self.push(Op::Div, xi, yi, v))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = -self.nodes[xi as usize].value;
        self.push(Op::Neg, xi, 0, v)
    }

    /// `x^p` with a constant exponent.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var, AdError> {
        let xi = self.check(x);
        let xv = self.nodes[xi as usize].value;
        if xv < 0.0 && exponent.fract() != 0.0 {
            return Err(AdError::Domain {
                op: "pow (fractional exponent of negative base)",
                value: xv,
                node: xi,
            });
        }
        if xv == 0.0 && exponent < 0.0 {
            return Err(AdError::Domain {
                op: "pow (negative exponent of zero)",
                value: xv,
                node: xi,
            });
        }
        Ok(self.push(Op::Pow(exponent), xi, 0, xv.powf(exponent)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = self.nodes[xi as usize].value.exp();
        self.push(Op::Exp, xi, 0, v)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, AdError> {
        let xi = self.check(x);
        let xv = self.nodes[xi as usize].value;
        if xv <= 0.0 {
            return Err(AdError::Domain {
                op: "ln",
                value: xv,
                node: xi,
            });
        }
        Ok(self.push(Op::Ln, xi, 0, xv.ln()))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = self.nodes[xi as usize].value.sin();
        self.push(Op::Sin, xi, 0, v)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = self.nodes[xi as usize].value.cos();
        self.push(Op::Cos, xi, 0, v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AdError> {
        let xi = self.check(x);
        let xv = self.nodes[xi as usize].value;
        if xv < 0.0 {
            return Err(AdError::Domain {
                op: "sqrt",
                value: xv,
                node: xi,
            });
        }
        Ok(self.push(Op::Sqrt, xi, 0, xv.sqrt()))
    }

    /// Minimum; gradient routes entirely to the selected argument, ties to
    /// the first.
    pub fn min(&mut self, x: Var, y: Var) -> Var {
        let (xi, yi) = (self.check(x), self.check(y));
        let (xv, yv) = (self.nodes[xi as usize].value, self.nodes[yi as usize].value);
        let v = if xv <= yv { xv } else { yv };
        self.push(Op::Min, xi, yi, v)
    }

    /// Maximum; same tie-breaking as [`Tape::min`].
    pub fn max(&mut self, x: Var, y: Var) -> Var {
        let (xi, yi) = (self.check(x), self.check(y));
        let (xv, yv) = (self.nodes[xi as usize].value, self.nodes[yi as usize].value);
        let v = if xv >= yv { xv } else { yv };
        self.push(Op::Max, xi, yi, v)
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = self.nodes[xi as usize].value.abs();
        self.push(Op::Abs, xi, 0, v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = self.nodes[xi as usize].value.tanh();
        self.push(Op::Tanh, xi, 0, v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = crate::math::sigmoid(self.nodes[xi as usize].value);
        self.push(Op::Sigmoid, xi, 0, v)
    }

    /// `softplus(x) = ln(1 + e^{βx}) / β`, evaluated overflow-free.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Var {
        let xi = self.check(x);
        let v = crate::math::softplus(self.nodes[xi as usize].value, beta);
        self.push(Op::Softplus(beta), xi, 0, v)
    }

    /// Rectifier; subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let v = self.nodes[xi as usize].value.max(0.0);
        self.push(Op::Relu, xi, 0, v)
    }

    /// Inner product of two equal-length variable slices as one n-ary node.
    pub fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        assert_eq!(xs.len(), ys.len(), "dot operands differ in length");
        let off = self.args.len() as u32;
        let n = xs.len() as u32;
        self.args.reserve(2 * xs.len());
        for &x in xs {
            let i = self.check(x);
            self.args.push(i);
        }
        for &y in ys {
            let i = self.check(y);
            self.args.push(i);
        }
        let mut acc = 0.0;
        for k in 0..xs.len() {
            let a = self.nodes[self.args[off as usize + k] as usize].value;
            let b = self.nodes[self.args[off as usize + xs.len() + k] as usize].value;
            acc += a * b;
        }
        self.push(Op::Dot, off, n, acc)
    }

    /// Dot of a contiguous leaf block (e.g. a weight row) against variables.
    /// Equivalent to [`Tape::dot`] but skips materializing the left handles.
    pub fn dot_block(&mut self, block_base: u32, n: usize, ys: &[Var]) -> Var {
        assert_eq!(n, ys.len(), "dot operands differ in length");
        debug_assert!((block_base as usize + n) <= self.nodes.len());
        let off = self.args.len() as u32;
        self.args.reserve(2 * n);
        for k in 0..n {
            self.args.push(block_base + k as u32);
        }
        for &y in ys {
            let i = self.check(y);
            self.args.push(i);
        }
        let mut acc = 0.0;
        for k in 0..n {
            let a = self.nodes[(block_base + k as u32) as usize].value;
            let b = self.nodes[self.args[off as usize + n + k] as usize].value;
            acc += a * b;
        }
        self.push(Op::Dot, off, n as u32, acc)
    }

    /// Row-major matrix times vector, recorded as one dot node per row.
    pub fn matvec(&mut self, m: &[Var], rows: usize, cols: usize, v: &[Var]) -> Vec<Var> {
        assert_eq!(m.len(), rows * cols, "matrix shape mismatch");
        assert_eq!(v.len(), cols, "vector length mismatch");
        (0..rows)
            .map(|r| self.dot(&m[r * cols..(r + 1) * cols], v))
            .collect()
    }

    /// Left-fold sum of a variable slice. Empty input yields a zero constant.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    /// Generic entry point dispatching on [`OpKind`]. `Dot` splits `inputs`
    /// into two equal halves; unary kinds take one input, binary kinds two.
    pub fn record(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AdError> {
        let unary = |ins: &[Var]| -> Var {
            assert_eq!(ins.len(), 1, "unary op expects one input");
            ins[0]
        };
        let binary = |ins: &[Var]| -> (Var, Var) {
            assert_eq!(ins.len(), 2, "binary op expects two inputs");
            (ins[0], ins[1])
        };
        Ok(match op {
            OpKind::Add => {
                let (x, y) = binary(inputs);
                self.add(x, y)
            }
            OpKind::Sub => {
                let (x, y) = binary(inputs);
                self.sub(x, y)
            }
            OpKind::Mul => {
                let (x, y) = binary(inputs);
                self.mul(x, y)
            }
            OpKind::Div => {
                let (x, y) = binary(inputs);
                self.div(x, y)?
            }
            OpKind::Neg => self.neg(unary(inputs)),
            OpKind::Pow { exponent } => self.pow(unary(inputs), exponent)?,
            OpKind::Exp => self.exp(unary(inputs)),
            OpKind::Ln => self.ln(unary(inputs))?,
            OpKind::Sin => self.sin(unary(inputs)),
            OpKind::Cos => self.cos(unary(inputs)),
            OpKind::Sqrt => self.sqrt(unary(inputs))?,
            OpKind::Min => {
                let (x, y) = binary(inputs);
                self.min(x, y)
            }
            OpKind::Max => {
                let (x, y) = binary(inputs);
                self.max(x, y)
            }
            OpKind::Abs => self.abs(unary(inputs)),
            OpKind::Tanh => self.tanh(unary(inputs)),
            OpKind::Sigmoid => self.sigmoid(unary(inputs)),
            OpKind::Softplus { beta } => self.softplus(unary(inputs), beta),
            OpKind::Relu => self.relu(unary(inputs)),
            OpKind::Dot => {
                assert!(inputs.len() % 2 == 0, "dot expects an even input count");
                let n = inputs.len() / 2;
                self.dot(&inputs[..n], &inputs[n..])
            }
        })
    }

    fn args_of(&self, node: &Node) -> (&[u32], &[u32]) {
        let off = node.a as usize;
        let n = node.b as usize;
        (&self.args[off..off + n], &self.args[off + n..off + 2 * n])
    }

    fn validate_sweep(&self, output: Var, leaves: &[Var]) -> Result<(), AdError> {
        if output.tape != self.id {
            return Err(AdError::CrossTape {
                var_tape: output.tape,
                tape: self.id,
            });
        }
        for &l in leaves {
            if l.tape != self.id {
                return Err(AdError::CrossTape {
                    var_tape: l.tape,
                    tape: self.id,
                });
            }
        }
        Ok(())
    }

    /// Plain numeric reverse sweep. Returns the dense adjoint array over
    /// `[0, output]`; entries past the output node are untouched (zero).
    pub fn backward_values(&self, output: Var) -> Result<Vec<f64>, AdError> {
        self.validate_sweep(output, &[])?;
        let end = output.idx as usize;
        let mut adj = vec![0.0f64; end + 1];
        adj[end] = 1.0;
        for i in (0..=end).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            let xv = |idx: u32| self.nodes[idx as usize].value;
            match node.op {
                Op::Leaf => {}
                Op::Add => {
                    adj[node.a as usize] += a;
                    adj[node.b as usize] += a;
                }
                Op::Sub => {
                    adj[node.a as usize] += a;
                    adj[node.b as usize] -= a;
                }
                Op::Mul => {
                    adj[node.a as usize] += a * xv(node.b);
                    adj[node.b as usize] += a * xv(node.a);
                }
                Op::Div => {
                    let y = xv(node.b);
                    adj[node.a as usize] += a / y;
                    adj[node.b as usize] -= a * node.value / y;
                }
                Op::Neg => adj[node.a as usize] -= a,
                Op::Pow(p) => {
                    adj[node.a as usize] += a * p * xv(node.a).powf(p - 1.0);
                }
                Op::Exp => adj[node.a as usize] += a * node.value,
                Op::Ln => adj[node.a as usize] += a / xv(node.a),
                Op::Sin => adj[node.a as usize] += a * xv(node.a).cos(),
                Op::Cos => adj[node.a as usize] -= a * xv(node.a).sin(),
                Op::Sqrt => adj[node.a as usize] += a / (2.0 * node.value),
                Op::Min => {
                    let sel = if xv(node.a) <= xv(node.b) {
                        node.a
                    } else {
                        node.b
                    };
                    adj[sel as usize] += a;
                }
                Op::Max => {
                    let sel = if xv(node.a) >= xv(node.b) {
                        node.a
                    } else {
                        node.b
                    };
                    adj[sel as usize] += a;
                }
                Op::Abs => {
                    let x = xv(node.a);
                    if x > 0.0 {
                        adj[node.a as usize] += a;
                    } else if x < 0.0 {
                        adj[node.a as usize] -= a;
                    }
                }
                Op::Tanh => {
                    adj[node.a as usize] += a * (1.0 - node.value * node.value);
                }
                Op::Sigmoid => {
                    adj[node.a as usize] += a * node.value * (1.0 - node.value);
                }
                Op::Softplus(beta) => {
                    adj[node.a as usize] += a * crate::math::sigmoid(beta * xv(node.a));
                }
                Op::Relu => {
                    if xv(node.a) > 0.0 {
                        adj[node.a as usize] += a;
                    }
                }
                Op::Dot => {
                    let off = node.a as usize;
                    let n = node.b as usize;
                    for k in 0..n {
                        let xi = self.args[off + k] as usize;
                        let yi = self.args[off + n + k] as usize;
                        let (xval, yval) = (self.nodes[xi].value, self.nodes[yi].value);
                        adj[xi] += a * yval;
                        adj[yi] += a * xval;
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Reverse sweep that records its own arithmetic as tape nodes, so the
    /// resulting adjoints can be differentiated again.
    ///
    /// Only the region of the tape that both feeds `output` and depends on
    /// one of `leaves` is visited; the sweep cost scales with that span,
    /// not the whole tape.
    pub fn backward(&mut self, output: Var, leaves: &[Var]) -> Result<GradMap, AdError> {
        self.validate_sweep(output, leaves)?;
        let mut map = GradMap::default();
        if leaves.is_empty() {
            return Ok(map);
        }
        let start = leaves.iter().map(|l| l.idx).min().unwrap() as usize;
        let end = output.idx as usize;
        if start > end {
            return Ok(map); // leaves recorded after the output cannot affect it
        }
        let span = end - start + 1;

        // relevant: depends on at least one requested leaf (forward scan)
        let mut relevant = vec![false; span];
        for l in leaves {
            if (l.idx as usize) <= end {
                relevant[l.idx as usize - start] = true;
            }
        }
        for i in start..=end {
            if relevant[i - start] {
                continue;
            }
            let node = self.nodes[i];
            let dep = match node.op {
                Op::Leaf => false,
                Op::Dot => {
                    let (xs, ys) = self.args_of(&node);
                    xs.iter()
                        .chain(ys)
                        .any(|&j| j as usize >= start && relevant[j as usize - start])
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::Max => {
                    (node.a as usize >= start && relevant[node.a as usize - start])
                        || (node.b as usize >= start && relevant[node.b as usize - start])
                }
                _ => node.a as usize >= start && relevant[node.a as usize - start],
            };
            relevant[i - start] = dep;
        }
        if !relevant[end - start] {
            return Ok(map); // output does not depend on any requested leaf
        }

        // needed: feeds the output (reverse scan)
        let mut needed = vec![false; span];
        needed[end - start] = true;
        for i in (start..=end).rev() {
            if !needed[i - start] || !relevant[i - start] {
                continue;
            }
            let node = self.nodes[i];
            let mark = |j: u32, needed: &mut Vec<bool>| {
                if j as usize >= start {
                    needed[j as usize - start] = true;
                }
            };
            match node.op {
                Op::Leaf => {}
                Op::Dot => {
                    let off = node.a as usize;
                    let n = node.b as usize;
                    for k in 0..2 * n {
                        mark(self.args[off + k], &mut needed);
                    }
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::Max => {
                    mark(node.a, &mut needed);
                    mark(node.b, &mut needed);
                }
                _ => mark(node.a, &mut needed),
            }
        }

        let live = |i: usize, relevant: &[bool], needed: &[bool]| -> bool {
            i >= start && i <= end && relevant[i - start] && needed[i - start]
        };

        let mut contribs: Vec<Vec<Contrib>> = Vec::with_capacity(span);
        contribs.resize_with(span, Vec::new);
        let seed = self.constant(1.0);
        contribs[end - start].push(Contrib::Pos(seed));

        let mut adjoints: Vec<Option<Var>> = vec![None; span];
        for i in (start..=end).rev() {
            if !live(i, &relevant, &needed) {
                continue;
            }
            let parts = std::mem::take(&mut contribs[i - start]);
            if parts.is_empty() {
                continue;
            }
            let adj = self.finalize_contribs(parts)?;
            adjoints[i - start] = Some(adj);

            let node = self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::Add => {
                    self.contribute(node.a, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                    self.contribute(node.b, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                }
                Op::Sub => {
                    self.contribute(node.a, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                    self.contribute(node.b, Contrib::Neg(adj), start, end, &relevant, &mut contribs);
                }
                Op::Mul => {
                    let (xa, xb) = (self.var_at(node.a), self.var_at(node.b));
                    self.contribute(node.a, Contrib::Prod(xb, adj), start, end, &relevant, &mut contribs);
                    self.contribute(node.b, Contrib::Prod(xa, adj), start, end, &relevant, &mut contribs);
                }
                Op::Div => {
                    let (x, y) = (self.var_at(node.a), self.var_at(node.b));
                    let z = self.var_at(i as u32);
                    if self.input_live(node.a, start, end, &relevant) {
                        let one = self.constant(1.0);
                        let recip = self.div(one, y)?;
                        self.contribute(node.a, Contrib::Prod(recip, adj), start, end, &relevant, &mut contribs);
                    }
                    if self.input_live(node.b, start, end, &relevant) {
                        let q = self.div(z, y)?;
                        let m = self.neg(q);
                        self.contribute(node.b, Contrib::Prod(m, adj), start, end, &relevant, &mut contribs);
                    }
                    let _ = x;
                }
                Op::Neg => {
                    self.contribute(node.a, Contrib::Neg(adj), start, end, &relevant, &mut contribs);
                }
                Op::Pow(p) => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let x = self.var_at(node.a);
                        let xp = self.pow(x, p - 1.0)?;
                        let pc = self.constant(p);
                        let m = self.mul(pc, xp);
                        self.contribute(node.a, Contrib::Prod(m, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Exp => {
                    let z = self.var_at(i as u32);
                    self.contribute(node.a, Contrib::Prod(z, adj), start, end, &relevant, &mut contribs);
                }
                Op::Ln => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let x = self.var_at(node.a);
                        let one = self.constant(1.0);
                        let recip = self.div(one, x)?;
                        self.contribute(node.a, Contrib::Prod(recip, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Sin => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let x = self.var_at(node.a);
                        let c = self.cos(x);
                        self.contribute(node.a, Contrib::Prod(c, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Cos => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let x = self.var_at(node.a);
                        let s = self.sin(x);
                        let m = self.neg(s);
                        self.contribute(node.a, Contrib::Prod(m, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Sqrt => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let z = self.var_at(i as u32);
                        let two = self.constant(2.0);
                        let den = self.mul(two, z);
                        let one = self.constant(1.0);
                        let recip = self.div(one, den)?;
                        self.contribute(node.a, Contrib::Prod(recip, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Min => {
                    let sel = if self.nodes[node.a as usize].value <= self.nodes[node.b as usize].value {
                        node.a
                    } else {
                        node.b
                    };
                    self.contribute(sel, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                }
                Op::Max => {
                    let sel = if self.nodes[node.a as usize].value >= self.nodes[node.b as usize].value {
                        node.a
                    } else {
                        node.b
                    };
                    self.contribute(sel, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                }
                Op::Abs => {
                    let x = self.nodes[node.a as usize].value;
                    if x > 0.0 {
                        self.contribute(node.a, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                    } else if x < 0.0 {
                        self.contribute(node.a, Contrib::Neg(adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Tanh => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let z = self.var_at(i as u32);
                        let zz = self.mul(z, z);
                        let one = self.constant(1.0);
                        let d = self.sub(one, zz);
                        self.contribute(node.a, Contrib::Prod(d, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Sigmoid => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let z = self.var_at(i as u32);
                        let one = self.constant(1.0);
                        let om = self.sub(one, z);
                        let d = self.mul(z, om);
                        self.contribute(node.a, Contrib::Prod(d, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Softplus(beta) => {
                    if self.input_live(node.a, start, end, &relevant) {
                        let x = self.var_at(node.a);
                        let bc = self.constant(beta);
                        let bx = self.mul(bc, x);
                        let s = self.sigmoid(bx);
                        self.contribute(node.a, Contrib::Prod(s, adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Relu => {
                    if self.nodes[node.a as usize].value > 0.0 {
                        self.contribute(node.a, Contrib::Pos(adj), start, end, &relevant, &mut contribs);
                    }
                }
                Op::Dot => {
                    let off = node.a as usize;
                    let n = node.b as usize;
                    for k in 0..n {
                        let xi = self.args[off + k];
                        let yi = self.args[off + n + k];
                        if self.input_live(xi, start, end, &relevant) {
                            let y = self.var_at(yi);
                            self.contribute(xi, Contrib::Prod(y, adj), start, end, &relevant, &mut contribs);
                        }
                        if self.input_live(yi, start, end, &relevant) {
                            let x = self.var_at(xi);
                            self.contribute(yi, Contrib::Prod(x, adj), start, end, &relevant, &mut contribs);
                        }
                    }
                }
            }
        }

        for &l in leaves {
            if (l.idx as usize) < start || (l.idx as usize) > end {
                continue;
            }
            if let Some(adj) = adjoints[l.idx as usize - start] {
                map.grads.insert(l.idx, (self.value(adj), Some(adj)));
            }
        }
        Ok(map)
    }

    fn input_live(&self, idx: u32, start: usize, end: usize, relevant: &[bool]) -> bool {
        let i = idx as usize;
        i >= start && i <= end && relevant[i - start]
    }

    fn contribute(
        &self,
        idx: u32,
        c: Contrib,
        start: usize,
        end: usize,
        relevant: &[bool],
        contribs: &mut [Vec<Contrib>],
    ) {
        if self.input_live(idx, start, end, relevant) {
            contribs[idx as usize - start].push(c);
        }
    }

    /// Collapses a contribution list into a single node. Product terms fuse
    /// into one dot; plain terms fold in with add/sub. Order follows the
    /// contribution list, which the sweep fills deterministically.
    fn finalize_contribs(&mut self, parts: Vec<Contrib>) -> Result<Var, AdError> {
        let mut lhs: Vec<Var> = Vec::new();
        let mut rhs: Vec<Var> = Vec::new();
        let mut plain: Vec<(bool, Var)> = Vec::new();
        for p in parts {
            match p {
                Contrib::Prod(a, b) => {
                    lhs.push(a);
                    rhs.push(b);
                }
                Contrib::Pos(v) => plain.push((false, v)),
                Contrib::Neg(v) => plain.push((true, v)),
            }
        }
        let mut acc: Option<Var> = match lhs.len() {
            0 => None,
            1 => Some(self.mul(lhs[0], rhs[0])),
            _ => Some(self.dot(&lhs, &rhs)),
        };
        for (negated, v) in plain {
            acc = Some(match (acc, negated) {
                (None, false) => v,
                (None, true) => self.neg(v),
                (Some(a), false) => self.add(a, v),
                (Some(a), true) => self.sub(a, v),
            });
        }
        Ok(acc.expect("finalize called with no contributions"))
    }

    /// Derivative of the inner gradient with respect to `outer` leaves:
    /// emits `backward(output, inner)`, sums the inner adjoints, and runs a
    /// second emitting sweep. Equivalent to a Hessian-vector product with
    /// the indicator vector of `inner`.
    pub fn grad_of_grad(
        &mut self,
        output: Var,
        inner: &[Var],
        outer: &[Var],
    ) -> Result<GradMap, AdError> {
        let gm = self.backward(output, inner)?;
        let inner_nodes: Vec<Var> = inner.iter().filter_map(|&l| gm.var(l)).collect();
        if inner_nodes.is_empty() {
            return Ok(GradMap::default());
        }
        let total = self.sum(&inner_nodes);
        self.backward(total, outer)
    }
}
