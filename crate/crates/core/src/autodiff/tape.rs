use crate::error::{NtcError, Result};

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, transpose_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Log,
    Tanh,
    Softplus,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    ClampMin(Var, f64),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLastAxis(Var),
    Gdn { r: Var, beta: Var, gamma: Var },
    StraightThrough(Var),
    SoftRound { y: Var, tau: Var },
    MixtureLogMass(MixtureArgs),
    GatherRows { src: Var, idx: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    LogSoftmax(Var),
    LerpRows { table: Var, lo: usize, t: f64 },
}

#[derive(Debug, Clone, Copy)]
struct MixtureArgs {
    v: Var,
    logits: Var,
    loc: Var,
    log_scale: Var,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Smallest scale a logistic mixture component may take.
pub const MIN_LOGISTIC_SCALE: f64 = 1e-4;
/// Per-dimension floor on a bin mass before taking its logarithm.
pub const BIN_MASS_FLOOR: f64 = 1e-12;

/// Append-only record of a computation for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// DAG; the backward pass walks it in reverse and visits every node once.
/// Leaves created with [`Tape::param`] receive gradients, leaves created with
/// [`Tape::constant`] do not, and nothing downstream of constants only is
/// differentiated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(sa.to_vec());
    }
    if b.len() == 1 {
        return Ok(sa.to_vec());
    }
    if a.len() == 1 {
        return Ok(sb.to_vec());
    }
    if sa.len() > sb.len() && sa.ends_with(sb) {
        return Ok(sa.to_vec());
    }
    if sb.len() > sa.len() && sb.ends_with(sa) {
        return Ok(sb.to_vec());
    }
    Err(NtcError::dim(op, format!("cannot broadcast {sa:?} with {sb:?}")))
}

/// Sums a gradient laid out like the broadcast output back onto an operand
/// with `len` elements (a trailing-suffix or single-element operand).
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, g) in grad.iter().enumerate() {
        out[i % len] += g;
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op_name, ta, tb)?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        if kind == BinaryKind::Div && db.iter().any(|&v| v == 0.0) {
            return Err(NtcError::domain("div", "division by zero"));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let t = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
                return Err(NtcError::domain("log", format!("non-positive input {bad}")));
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Abs => f64::abs,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Softplus => softplus,
            UnaryKind::Square => |x| x * x,
        };
        let out = t.map(f);
        let needs = self.needs(a);
        Ok(self.push(out, Op::Unary(kind, a), needs))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    /// `max(a, floor)`; the gradient is passed only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor));
        let needs = self.needs(a);
        Ok(self.push(out, Op::ClampMin(a, floor), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NtcError::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), needs))
    }

    /// Affine layer `x W^T + b` for a batch `x[B x A]`, `W[U x A]`, `b[U]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 2
            || tw.shape().len() != 2
            || tx.shape()[1] != tw.shape()[1]
            || tb.len() != tw.shape()[0]
        {
            return Err(NtcError::dim(
                "linear",
                format!("x {:?}, W {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let (bsz, a, u) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut out = matmul_nt_raw(tx.data(), tw.data(), bsz, a, u);
        for row in out.chunks_mut(u) {
            for (o, bias) in row.iter_mut().zip(tb.data()) {
                *o += bias;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![bsz, u], out), Op::Linear { x, w, b }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(NtcError::dim("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = transpose_raw(t.data(), r, c);
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NtcError::dim("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), needs))
    }

    /// Sums over the trailing axis: `[.., n] -> [..]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().is_empty() {
            return Err(NtcError::dim("sum_last_axis", "scalar input"));
        }
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumLastAxis(a), needs))
    }

    /// Weighted-l1 divisive normalization `v_i = r_i / (beta_i + sum_j gamma_ij |r_j|)`
    /// applied to every row of `r`.
    pub fn gdn(&mut self, r: Var, beta: Var, gamma: Var) -> Result<Var> {
        let (tr, tb, tg) = (self.value(r), self.value(beta), self.value(gamma));
        let u = tr.cols();
        if tb.len() != u || tg.shape() != [u, u] {
            return Err(NtcError::dim(
                "gdn",
                format!("r {:?}, beta {:?}, gamma {:?}", tr.shape(), tb.shape(), tg.shape()),
            ));
        }
        if let Some(bad) = tb.data().iter().find(|&&b| b <= 0.0) {
            return Err(NtcError::domain("gdn", format!("non-positive beta {bad}")));
        }
        let (bd, gd) = (tb.data(), tg.data());
        let mut out = vec![0.0; tr.len()];
        for (row, orow) in tr.data().chunks(u).zip(out.chunks_mut(u)) {
            for i in 0..u {
                let grow = &gd[i * u..(i + 1) * u];
                let denom = bd[i] + grow.iter().zip(row).map(|(g, r)| g * r.abs()).sum::<f64>();
                orow[i] = row[i] / denom;
            }
        }
        let needs = self.needs(r) || self.needs(beta) || self.needs(gamma);
        Ok(self.push(
            Tensor::from_parts(tr.shape().to_vec(), out),
            Op::Gdn { r, beta, gamma },
            needs,
        ))
    }

    /// Rounds to the nearest integer (ties to even) in the forward pass and
    /// passes the gradient through unchanged.
    pub fn straight_through(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::round_ties_even);
        let needs = self.needs(a);
        Ok(self.push(out, Op::StraightThrough(a), needs))
    }

    /// Temperature-controlled soft rounding; `tau` is a scalar node.
    pub fn soft_round(&mut self, y: Var, tau: Var) -> Result<Var> {
        let t = self.value(tau);
        if t.len() != 1 {
            return Err(NtcError::dim("soft_round", "temperature must be scalar"));
        }
        let tau_v = t.item();
        if tau_v <= 0.0 {
            return Err(NtcError::domain("soft_round", format!("temperature {tau_v}")));
        }
        let out = self
            .value(y)
            .map(|v| crate::quantization::soft_round_scalar(v, tau_v));
        let needs = self.needs(y) || self.needs(tau);
        Ok(self.push(out, Op::SoftRound { y, tau }, needs))
    }

    /// Per-dimension `log2` of the bin mass `F(v + 1/2) - F(v - 1/2)` of a
    /// logistic mixture, floored at [`BIN_MASS_FLOOR`].
    ///
    /// `v` is `[B x M]`; `logits`, `loc` and `log_scale` are `[M x C]`.
    pub fn mixture_log2_mass(
        &mut self,
        v: Var,
        logits: Var,
        loc: Var,
        log_scale: Var,
    ) -> Result<Var> {
        let tv = self.value(v);
        let tl = self.value(logits);
        let m = tv.cols();
        if tl.shape().len() != 2
            || tl.shape()[0] != m
            || self.value(loc).shape() != tl.shape()
            || self.value(log_scale).shape() != tl.shape()
        {
            return Err(NtcError::dim(
                "mixture_log2_mass",
                format!("v {:?}, params {:?}", tv.shape(), tl.shape()),
            ));
        }
        let c = tl.shape()[1];
        let params = MixtureParams::new(
            tl.data(),
            self.value(loc).data(),
            self.value(log_scale).data(),
            m,
            c,
        );
        let out: Vec<f64> = tv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| params.bin_mass(i % m, x).max(BIN_MASS_FLOOR).log2())
            .collect();
        let shape = tv.shape().to_vec();
        let needs = [v, logits, loc, log_scale].iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MixtureLogMass(MixtureArgs {
                v,
                logits,
                loc,
                log_scale,
            }),
            needs,
        ))
    }

    /// Selects rows `idx` of a `[K x N]` table into `[B x N]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 {
            return Err(NtcError::dim("gather_rows", format!("{:?}", t.shape())));
        }
        let (k, n) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= k {
                return Err(NtcError::IndexOutOfRange { index: i, len: k });
            }
            out.extend_from_slice(t.row(i));
        }
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), n], out),
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Selects entries `idx` of a vector.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= t.len() {
                return Err(NtcError::IndexOutOfRange {
                    index: i,
                    len: t.len(),
                });
            }
            out.push(t.data()[i]);
        }
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Natural-log softmax of a vector, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NtcError::dim("log_softmax", "empty input"));
        }
        let out = log_softmax_raw(t.data());
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(t.shape().to_vec(), out),
            Op::LogSoftmax(a),
            needs,
        ))
    }

    /// Linear interpolation `(1 - t) * table[lo] + t * table[lo + 1]` between
    /// two rows of a `[R x D]` table.
    pub fn lerp_rows(&mut self, table: Var, lo: usize, t: f64) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 || lo >= tt.shape()[0] {
            return Err(NtcError::dim(
                "lerp_rows",
                format!("row {lo} of {:?}", tt.shape()),
            ));
        }
        let r = tt.shape()[0];
        let lo_row = tt.row(lo);
        let out: Vec<f64> = if lo + 1 < r && t != 0.0 {
            let hi_row = tt.row(lo + 1);
            lo_row
                .iter()
                .zip(hi_row)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect()
        } else {
            lo_row.to_vec()
        };
        let needs = self.needs(table);
        Ok(self.push(Tensor::vector(out), Op::LerpRows { table, lo, t }, needs))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(NtcError::dim(
                "backward",
                format!("root must be scalar, got {:?}", root_val.shape()),
            ));
        }
        if !root_val.all_finite() {
            return Err(NtcError::NonFinite {
                context: "backward root".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let (la, lb) = (da.len(), db.len());
                if self.needs(*a) {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(i, g)| g * db[i % lb]).collect(),
                        BinaryKind::Div => gd.iter().enumerate().map(|(i, g)| g / db[i % lb]).collect(),
                    };
                    accumulate(&mut grads[a.0], ta.shape(), reduce_to(&full, la));
                }
                if self.needs(*b) {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add => gd.to_vec(),
                        BinaryKind::Sub => gd.iter().map(|g| -g).collect(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(i, g)| g * da[i % la]).collect(),
                        BinaryKind::Div => gd
                            .iter()
                            .enumerate()
                            .map(|(i, g)| {
                                let bv = db[i % lb];
                                -g * da[i % la] / (bv * bv)
                            })
                            .collect(),
                    };
                    accumulate(&mut grads[b.0], tb.shape(), reduce_to(&full, lb));
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let delta: Vec<f64> = match kind {
                    UnaryKind::Neg => gd.iter().map(|g| -g).collect(),
                    UnaryKind::Abs => gd
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                        .collect(),
                    UnaryKind::Exp => gd.iter().zip(y).map(|(g, e)| g * e).collect(),
                    UnaryKind::Log => gd.iter().zip(x).map(|(g, v)| g / v).collect(),
                    UnaryKind::Tanh => gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
                    UnaryKind::Softplus => gd.iter().zip(x).map(|(g, &v)| g * sigmoid(v)).collect(),
                    UnaryKind::Square => gd.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect(),
                };
                accumulate(&mut grads[a.0], self.value(*a).shape(), delta);
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                let delta = gd
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if v > floor { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], self.value(*a).shape(), delta);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let d = matmul_nt_raw(gd, tb.data(), m, n, k);
                    accumulate(&mut grads[a.0], ta.shape(), d);
                }
                if self.needs(*b) {
                    let d = matmul_tn_raw(ta.data(), gd, m, k, n);
                    accumulate(&mut grads[b.0], tb.shape(), d);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, a, u) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if self.needs(*x) {
                    let d = matmul_raw(gd, tw.data(), bsz, u, a);
                    accumulate(&mut grads[x.0], tx.shape(), d);
                }
                if self.needs(*w) {
                    let d = matmul_tn_raw(gd, tx.data(), bsz, u, a);
                    accumulate(&mut grads[w.0], tw.shape(), d);
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; u];
                    for row in gd.chunks(u) {
                        for (acc, g) in d.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut grads[b.0], &[u], d);
                }
            }
            Op::Transpose(a) => {
                let s = self.value(*a).shape();
                let d = transpose_raw(gd, s[1], s[0]);
                accumulate(&mut grads[a.0], s, d);
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a.0], self.value(*a).shape(), gd.to_vec());
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                accumulate(&mut grads[a.0], t.shape(), vec![gd[0]; t.len()]);
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let v = gd[0] / t.len() as f64;
                accumulate(&mut grads[a.0], t.shape(), vec![v; t.len()]);
            }
            Op::SumLastAxis(a) => {
                let t = self.value(*a);
                let n = t.cols();
                let d: Vec<f64> = (0..t.len()).map(|i| gd[i / n]).collect();
                accumulate(&mut grads[a.0], t.shape(), d);
            }
            Op::Gdn { r, beta, gamma } => self.gdn_backward(*r, *beta, *gamma, gd, grads),
            Op::StraightThrough(a) => {
                accumulate(&mut grads[a.0], self.value(*a).shape(), gd.to_vec());
            }
            Op::SoftRound { y, tau } => {
                let tau_v = self.value(*tau).item();
                let ty = self.value(*y);
                if self.needs(*y) {
                    let d = gd
                        .iter()
                        .zip(ty.data())
                        .map(|(g, &v)| g * crate::quantization::soft_round_dy(v, tau_v))
                        .collect();
                    accumulate(&mut grads[y.0], ty.shape(), d);
                }
                if self.needs(*tau) {
                    let s: f64 = gd
                        .iter()
                        .zip(ty.data())
                        .map(|(g, &v)| g * crate::quantization::soft_round_dtau(v, tau_v))
                        .sum();
                    accumulate(&mut grads[tau.0], self.value(*tau).shape(), vec![s]);
                }
            }
            Op::MixtureLogMass(args) => self.mixture_backward(*args, node, gd, grads),
            Op::GatherRows { src, idx } => {
                let t = self.value(*src);
                let n = t.cols();
                let mut d = vec![0.0; t.len()];
                for (b, &k) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[k * n + j] += gd[b * n + j];
                    }
                }
                accumulate(&mut grads[src.0], t.shape(), d);
            }
            Op::Gather { src, idx } => {
                let t = self.value(*src);
                let mut d = vec![0.0; t.len()];
                for (b, &k) in idx.iter().enumerate() {
                    d[k] += gd[b];
                }
                accumulate(&mut grads[src.0], t.shape(), d);
            }
            Op::LogSoftmax(a) => {
                let total: f64 = gd.iter().sum();
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, ls)| g - ls.exp() * total)
                    .collect();
                accumulate(&mut grads[a.0], self.value(*a).shape(), d);
            }
            Op::LerpRows { table, lo, t } => {
                let tt = self.value(*table);
                let dcols = tt.cols();
                let mut d = vec![0.0; tt.len()];
                let two_rows = lo + 1 < tt.shape()[0] && *t != 0.0;
                for j in 0..dcols {
                    if two_rows {
                        d[lo * dcols + j] += (1.0 - t) * gd[j];
                        d[(lo + 1) * dcols + j] += t * gd[j];
                    } else {
                        d[lo * dcols + j] += gd[j];
                    }
                }
                accumulate(&mut grads[table.0], tt.shape(), d);
            }
        }
    }

    fn gdn_backward(&self, r: Var, beta: Var, gamma: Var, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (tr, tb, tg) = (self.value(r), self.value(beta), self.value(gamma));
        let u = tr.cols();
        let (bd, gmd) = (tb.data(), tg.data());
        let mut dr = vec![0.0; tr.len()];
        let mut dbeta = vec![0.0; u];
        let mut dgamma = vec![0.0; u * u];
        let mut denom = vec![0.0; u];
        let mut coef = vec![0.0; u];
        for (b, row) in tr.data().chunks(u).enumerate() {
            let grow_out = &gd[b * u..(b + 1) * u];
            for i in 0..u {
                let grow = &gmd[i * u..(i + 1) * u];
                denom[i] = bd[i] + grow.iter().zip(row).map(|(g, r)| g * r.abs()).sum::<f64>();
                // d v_i / d denom_i, times upstream gradient
                coef[i] = -grow_out[i] * row[i] / (denom[i] * denom[i]);
            }
            for k in 0..u {
                let sign = if row[k] > 0.0 {
                    1.0
                } else if row[k] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let mut acc = grow_out[k] / denom[k];
                if sign != 0.0 {
                    for i in 0..u {
                        acc += coef[i] * gmd[i * u + k] * sign;
                    }
                }
                dr[b * u + k] = acc;
            }
            for i in 0..u {
                dbeta[i] += coef[i];
                for k in 0..u {
                    dgamma[i * u + k] += coef[i] * row[k].abs();
                }
            }
        }
        if self.needs(r) {
            accumulate(&mut grads[r.0], tr.shape(), dr);
        }
        if self.needs(beta) {
            accumulate(&mut grads[beta.0], tb.shape(), dbeta);
        }
        if self.needs(gamma) {
            accumulate(&mut grads[gamma.0], tg.shape(), dgamma);
        }
    }

    fn mixture_backward(&self, args: MixtureArgs, node: &Node, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let tv = self.value(args.v);
        let tl = self.value(args.logits);
        let (m, c) = (tl.shape()[0], tl.shape()[1]);
        let params = MixtureParams::new(
            tl.data(),
            self.value(args.loc).data(),
            self.value(args.log_scale).data(),
            m,
            c,
        );
        let mut dv = vec![0.0; tv.len()];
        let mut dlogit = vec![0.0; m * c];
        let mut dloc = vec![0.0; m * c];
        let mut dls = vec![0.0; m * c];
        for (i, (&x, &out)) in tv.data().iter().zip(node.value.data()).enumerate() {
            let dim = i % m;
            let mass = params.bin_mass(dim, x);
            if mass <= BIN_MASS_FLOOR || gd[i] == 0.0 {
                continue;
            }
            debug_assert!((mass.log2() - out).abs() < 1e-9);
            let gm = gd[i] / (mass * std::f64::consts::LN_2);
            for comp in 0..c {
                let p = dim * c + comp;
                let (w, s) = (params.weights[p], params.scales[p]);
                let a = (x + 0.5 - params.loc[p]) / s;
                let b = (x - 0.5 - params.loc[p]) / s;
                let (pa, pb) = (logistic_pdf(a), logistic_pdf(b));
                let diff = sigmoid_diff(a, b);
                dv[i] += gm * w * (pa - pb) / s;
                dloc[p] -= gm * w * (pa - pb) / s;
                if !params.scale_floored[p] {
                    dls[p] += gm * w * (-pa * a + pb * b);
                }
                dlogit[p] += gm * w * (diff - mass);
            }
        }
        if self.needs(args.v) {
            accumulate(&mut grads[args.v.0], tv.shape(), dv);
        }
        if self.needs(args.logits) {
            accumulate(&mut grads[args.logits.0], tl.shape(), dlogit);
        }
        if self.needs(args.loc) {
            accumulate(&mut grads[args.loc.0], tl.shape(), dloc);
        }
        if self.needs(args.log_scale) {
            accumulate(&mut grads[args.log_scale.0], tl.shape(), dls);
        }
    }
}

pub(crate) fn log_softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn logistic_pdf(z: f64) -> f64 {
    let s = sigmoid(z);
    s * sigmoid(-z)
}

/// `sigmoid(a) - sigmoid(b)` for `a > b`, evaluated on the side of the
/// logistic where the two values are not both close to one.
pub(crate) fn sigmoid_diff(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        sigmoid(-b) - sigmoid(-a)
    } else {
        sigmoid(a) - sigmoid(b)
    }
}

/// Unpacked logistic mixture parameters for a set of dimensions.
pub(crate) struct MixtureParams {
    pub weights: Vec<f64>,
    pub loc: Vec<f64>,
    pub scales: Vec<f64>,
    pub scale_floored: Vec<bool>,
    pub components: usize,
}

impl MixtureParams {
    pub fn new(logits: &[f64], loc: &[f64], log_scale: &[f64], m: usize, c: usize) -> Self {
        let mut weights = Vec::with_capacity(m * c);
        for d in 0..m {
            weights.extend(log_softmax_raw(&logits[d * c..(d + 1) * c]).into_iter().map(f64::exp));
        }
        let scale_floored: Vec<bool> = log_scale.iter().map(|ls| ls.exp() <= MIN_LOGISTIC_SCALE).collect();
        let scales = log_scale.iter().map(|ls| ls.exp().max(MIN_LOGISTIC_SCALE)).collect();
        MixtureParams {
            weights,
            loc: loc.to_vec(),
            scales,
            scale_floored,
            components: c,
        }
    }

    pub fn bin_mass(&self, dim: usize, x: f64) -> f64 {
        let c = self.components;
        (0..c)
            .map(|comp| {
                let p = dim * c + comp;
                let s = self.scales[p];
                self.weights[p] * sigmoid_diff((x + 0.5 - self.loc[p]) / s, (x - 0.5 - self.loc[p]) / s)
            })
            .sum()
    }

    pub fn cdf(&self, dim: usize, x: f64) -> f64 {
        let c = self.components;
        (0..c)
            .map(|comp| {
                let p = dim * c + comp;
                self.weights[p] * sigmoid((x - self.loc[p]) / self.scales[p])
            })
            .sum()
    }

    pub fn pdf(&self, dim: usize, x: f64) -> f64 {
        let c = self.components;
        (0..c)
            .map(|comp| {
                let p = dim * c + comp;
                self.weights[p] * logistic_pdf((x - self.loc[p]) / self.scales[p]) / self.scales[p]
            })
            .sum()
    }
}
