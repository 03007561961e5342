//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and enough bookkeeping to run its vector-Jacobian
//! product; [`Tape::backward`] walks the nodes in reverse insertion order.
//! Nodes that no trainable leaf can reach never receive a gradient buffer.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, gemm, inverse_perm, permute, Broadcast};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Tanh,
    Silu,
    Abs,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Matmul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        dims: [usize; 4],
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    SliceLast {
        a: usize,
        start: usize,
        width: usize,
    },
    Unary(usize, Unary),
    Softmax(usize, usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        xhat: Rc<[f64]>,
        rstd: Rc<[f64]>,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    PickPerRow(usize, Rc<[usize]>),
}

struct Node {
    shape: Vec<usize>,
    value: Rc<[f64]>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: value.into(),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf; it receives gradients iff `requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn value(&self, id: usize) -> Rc<[f64]> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

/// `tanh` through one `exp`; absolute error ~1e-16, several times faster
/// than libm here. Only used where `1 + tanh` is needed.
#[inline]
fn tanh_via_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let n = nodes[id].value.len();
    let buf = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            acc(grads, nodes, *a, |buf| kernels::axpy(1.0, g, buf));
            let (out_shape, b_shape) = (&node.shape, &nodes[*b].shape);
            acc(grads, nodes, *b, |buf| {
                if out_shape == b_shape {
                    kernels::axpy(sign, g, buf);
                } else {
                    let map = Broadcast::new(out_shape, b_shape).expect("checked at record");
                    for (i, gi) in g.iter().enumerate() {
                        buf[map.at(i)] += sign * gi;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (out_shape, b_shape) = (&node.shape, &nodes[*b].shape);
            if out_shape == b_shape {
                acc(grads, nodes, *a, |buf| {
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bv.iter()) {
                        *o += gi * bi;
                    }
                });
                acc(grads, nodes, *b, |buf| {
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(av.iter()) {
                        *o += gi * ai;
                    }
                });
            } else {
                let map = Broadcast::new(out_shape, b_shape).expect("checked at record");
                acc(grads, nodes, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[map.at(i)];
                    }
                });
                acc(grads, nodes, *b, |buf| {
                    for i in 0..g.len() {
                        buf[map.at(i)] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |buf| kernels::axpy(*c, g, buf)),
        Op::Shift(a) | Op::Reshape(a) => acc(grads, nodes, *a, |buf| kernels::axpy(1.0, g, buf)),
        Op::Matmul(a, b) => {
            let (ashape, bshape) = (&nodes[*a].shape, &nodes[*b].shape);
            let k = bshape[0];
            let n = bshape[1];
            let m = nodes[*a].value.len() / k;
            let _ = ashape;
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, |buf| gemm(g, bv, buf, m, n, k, false, true, true));
            acc(grads, nodes, *b, |buf| gemm(av, g, buf, k, m, n, true, false, true));
        }
        Op::Bmm { a, b, ta, tb, dims } => {
            let [groups, m, k, n] = *dims;
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (sa, sb, sc) = (m * k, k * n, m * n);
            acc(grads, nodes, *a, |buf| {
                for gi in 0..groups {
                    let gc = &g[gi * sc..(gi + 1) * sc];
                    let bb = &bv[gi * sb..(gi + 1) * sb];
                    let da = &mut buf[gi * sa..(gi + 1) * sa];
                    if !ta {
                        gemm(gc, bb, da, m, n, k, false, !tb, true);
                    } else {
                        gemm(bb, gc, da, k, n, m, *tb, true, true);
                    }
                }
            });
            acc(grads, nodes, *b, |buf| {
                for gi in 0..groups {
                    let gc = &g[gi * sc..(gi + 1) * sc];
                    let aa = &av[gi * sa..(gi + 1) * sa];
                    let db = &mut buf[gi * sb..(gi + 1) * sb];
                    if !tb {
                        gemm(aa, gc, db, k, m, n, !ta, false, true);
                    } else {
                        gemm(gc, aa, db, n, m, k, true, *ta, true);
                    }
                }
            });
        }
        Op::Permute(a, perm) => {
            let (back, _) = permute(g, &node.shape, &inverse_perm(perm));
            acc(grads, nodes, *a, |buf| kernels::axpy(1.0, &back, buf));
        }
        Op::SliceLast { a, start, width } => {
            let len = *node.shape.last().unwrap();
            acc(grads, nodes, *a, |buf| {
                for (r, gr) in g.chunks(len).enumerate() {
                    let dst = &mut buf[r * width + start..r * width + start + len];
                    kernels::axpy(1.0, gr, dst);
                }
            });
        }
        Op::Unary(a, kind) => {
            let x = &nodes[*a].value;
            let y = &node.value;
            acc(grads, nodes, *a, |buf| {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Gelu => {
                            let xi = x[i];
                            let u = GELU_C * (xi + GELU_K * xi * xi * xi);
                            let th = tanh_via_exp(u);
                            0.5 * (1.0 + th)
                                + 0.5 * xi * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * xi * xi)
                        }
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Silu => {
                            let s = 1.0 / (1.0 + (-x[i]).exp());
                            s * (1.0 + x[i] * (1.0 - s))
                        }
                        Unary::Abs => x[i].signum() * (x[i] != 0.0) as u8 as f64,
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Square => 2.0 * x[i],
                    };
                    buf[i] += g[i] * d;
                }
            });
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            acc(grads, nodes, *a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for j in 0..len {
                            let p = base + j * inner;
                            s += g[p] * y[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            buf[p] += y[p] * (g[p] - s);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let len = *node.shape.last().unwrap();
            acc(grads, nodes, *a, |buf| {
                for r in 0..g.len() / len {
                    let row = r * len..(r + 1) * len;
                    let gs: f64 = g[row.clone()].iter().sum();
                    for p in row {
                        buf[p] += g[p] - y[p].exp() * gs;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().unwrap();
            let rows = g.len() / d;
            let gain_v = gain.map(|gid| nodes[gid].value.clone());
            if let Some(bid) = bias {
                acc(grads, nodes, *bid, |buf| {
                    for r in 0..rows {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], buf);
                    }
                });
            }
            if let Some(gid) = gain {
                acc(grads, nodes, *gid, |buf| {
                    for p in 0..g.len() {
                        buf[p % d] += g[p] * xhat[p];
                    }
                });
            }
            acc(grads, nodes, *x, |buf| {
                let mut dxh = vec![0.0; d];
                for r in 0..rows {
                    let off = r * d;
                    for j in 0..d {
                        let gj = g[off + j];
                        dxh[j] = match &gain_v {
                            Some(gv) => gj * gv[j],
                            None => gj,
                        };
                    }
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = (0..d).map(|j| dxh[j] * xhat[off + j]).sum::<f64>() / d as f64;
                    for j in 0..d {
                        buf[off + j] += rstd[r] * (dxh[j] - m1 - xhat[off + j] * m2);
                    }
                }
            });
        }
        Op::SumAll(a) => acc(grads, nodes, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len() as f64;
            acc(grads, nodes, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n))
        }
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = split_axis(&nodes[*a].shape, *axis);
            acc(grads, nodes, *a, |buf| {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut buf[(o * len + j) * inner..(o * len + j + 1) * inner];
                        kernels::axpy(1.0, &g[o * inner..(o + 1) * inner], dst);
                    }
                }
            });
        }
        Op::GatherRows(table, ids) => {
            let c = *node.shape.last().unwrap();
            acc(grads, nodes, *table, |buf| {
                for (r, &row) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut buf[row * c..(row + 1) * c]);
                }
            });
        }
        Op::PickPerRow(a, idx) => {
            let c = *nodes[*a].shape.last().unwrap();
            acc(grads, nodes, *a, |buf| {
                for (r, &j) in idx.iter().enumerate() {
                    buf[r * c + j] += g[r];
                }
            });
        }
    }
}

/// (product of extents before `axis`, extent of `axis`, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<[f64]> {
        self.tape.value(self.id)
    }

    /// Single value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.value().to_vec()).expect("node shape is consistent")
    }

    fn needs(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn broadcast_binary(
        &self,
        other: &Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let (av, bv) = (self.value(), other.value());
        let out: Vec<f64> = if sa == sb {
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let map = Broadcast::new(&sa, &sb).ok_or_else(|| {
                Error::Dimension(format!("{name}: cannot broadcast {sb:?} onto {sa:?}"))
            })?;
            av.iter().enumerate().map(|(i, &x)| f(x, bv[map.at(i)])).collect()
        };
        let needs = self.needs() || other.needs();
        Ok(self.tape.push(sa, out, op, needs))
    }

    /// Elementwise sum; `other` may broadcast into `self`'s shape.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().iter().map(|v| v * c).collect();
        self.tape.push(self.shape(), out, Op::Scale(self.id, c), self.needs())
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().iter().map(|v| v + c).collect();
        self.tape.push(self.shape(), out, Op::Shift(self.id), self.needs())
    }

    /// `[..., K] · [K, N] -> [..., N]`.
    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w);
        let (sa, sw) = (self.shape(), w.shape());
        if sw.len() != 2 || sa.last() != Some(&sw[0]) {
            return Err(Error::Dimension(format!("matmul: {sa:?} · {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(&self.value(), &w.value(), &mut out, m, k, n, false, false, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs() || w.needs();
        Ok(self.tape.push(shape, out, Op::Matmul(self.id, w.id), needs))
    }

    /// Affine map `x · w + b` over the last axis.
    pub fn linear(&self, w: &Var<'t>, b: Option<&Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// Batched product of rank-3 operands `[G, m, k] · [G, k, n]`, with
    /// optional transposition of either operand's trailing matrix.
    pub fn bmm(&self, other: &Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!("bmm: {sa:?} · {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::Dimension(format!(
                "bmm: inner extents {k} and {kb} differ ({sa:?} · {sb:?})"
            )));
        }
        let groups = sa[0];
        let (av, bv) = (self.value(), other.value());
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm(
                &av[g * m * k..(g + 1) * m * k],
                &bv[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
                ta,
                tb,
                false,
            );
        }
        let needs = self.needs() || other.needs();
        let op = Op::Bmm {
            a: self.id,
            b: other.id,
            ta,
            tb,
            dims: [groups, m, k, n],
        };
        Ok(self.tape.push(vec![groups, m, n], out, op, needs))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("permute {perm:?} of {shape:?}")));
        }
        let (out, out_shape) = permute(&self.value(), &shape, perm);
        Ok(self
            .tape
            .push(out_shape, out, Op::Permute(self.id, perm.to_vec()), self.needs()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(self
            .tape
            .push(shape.to_vec(), self.value().to_vec(), Op::Reshape(self.id), self.needs()))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        let width = *shape.last().unwrap();
        if len == 0 || start + len > width {
            return Err(Error::Dimension(format!(
                "slice {start}..{} of last extent {width}",
                start + len
            )));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(v.len() / width * len);
        for row in v.chunks(width) {
            out.extend_from_slice(&row[start..start + len]);
        }
        *shape.last_mut().unwrap() = len;
        Ok(self
            .tape
            .push(shape, out, Op::SliceLast { a: self.id, start, width }, self.needs()))
    }

    fn unary(&self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().iter().map(|&v| f(v)).collect();
        self.tape
            .push(self.shape(), out, Op::Unary(self.id, kind), self.needs())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu, |x| {
            0.5 * x * (1.0 + tanh_via_exp(GELU_C * (x + GELU_K * x * x * x)))
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh, f64::tanh)
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Unary::Silu, |x| x / (1.0 + (-x).exp()))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs, f64::abs)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Log, f64::ln)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square, |x| x * x)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len).map(|j| v[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (v[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        Ok(self
            .tape
            .push(shape, out, Op::Softmax(self.id, axis), self.needs()))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let shape = self.shape();
        let len = *shape.last().unwrap();
        let v = self.value();
        let mut out = vec![0.0; v.len()];
        for (row, dst) in v.chunks(len).zip(out.chunks_mut(len)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for (d, x) in dst.iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        self.tape
            .push(shape, out, Op::LogSoftmax(self.id), self.needs())
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance,
    /// then applies the optional affine `gain`/`bias`.
    pub fn layer_norm(
        &self,
        gain: Option<&Var<'t>>,
        bias: Option<&Var<'t>>,
        eps: f64,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        let d = *shape.last().unwrap();
        for p in [gain, bias].into_iter().flatten() {
            self.same_tape(p);
            if p.shape() != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm affine shape {:?} for last extent {d}",
                    p.shape()
                )));
            }
        }
        let v = self.value();
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gain.map(|g| g.value()) {
            out.iter_mut().enumerate().for_each(|(p, o)| *o *= gv[p % d]);
        }
        if let Some(bv) = bias.map(|b| b.value()) {
            out.iter_mut().enumerate().for_each(|(p, o)| *o += bv[p % d]);
        }
        let needs = self.needs()
            || gain.is_some_and(|g| g.needs())
            || bias.is_some_and(|b| b.needs());
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.map(|g| g.id),
            bias: bias.map(|b| b.id),
            xhat: xhat.into(),
            rstd: rstd.into(),
        };
        Ok(self.tape.push(shape, out, op, needs))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().iter().sum();
        self.tape.push(vec![1], vec![s], Op::SumAll(self.id), self.needs())
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.tape.push(vec![1], vec![s], Op::MeanAll(self.id), self.needs())
    }

    /// Sums out `axis`, dropping it from the shape (rank-1 inputs give `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("sum axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &v[(o * len + j) * inner..(o * len + j + 1) * inner];
                kernels::axpy(1.0, src, &mut out[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self
            .tape
            .push(out_shape, out, Op::SumAxis(self.id, axis), self.needs()))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Rows of a `[V, C]` table selected by `ids`, giving `[len(ids), C]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on {shape:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Argument(format!("row {bad} of table with {} rows", shape[0])));
        }
        let c = shape[1];
        let v = self.value();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.tape.push(
            vec![ids.len(), c],
            out,
            Op::GatherRows(self.id, ids.into()),
            self.needs(),
        ))
    }

    /// Entry `idx[r]` of each row of a `[R, C]` matrix.
    pub fn pick_per_row(&self, idx: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != idx.len() || idx.iter().any(|&j| j >= shape[1]) {
            return Err(Error::Dimension(format!(
                "pick_per_row: {} indices into {shape:?}",
                idx.len()
            )));
        }
        let c = shape[1];
        let v = self.value();
        let out = idx.iter().enumerate().map(|(r, &j)| v[r * c + j]).collect();
        Ok(self.tape.push(
            vec![idx.len()],
            out,
            Op::PickPerRow(self.id, idx.into()),
            self.needs(),
        ))
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
