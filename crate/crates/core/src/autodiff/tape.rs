//! Tape-based reverse-mode differentiation over scalar and grid values.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Node ids are assigned in creation order, so walking the tape
//! backwards from the loss visits each node after all of its consumers.
//!
//! Grids are row-major `f64`. Binary elementwise ops accept two grids of the
//! same shape or a grid and a 1×1 scalar. Convolution kernels, sampling plans
//! and label maps are constants: no gradient flows into them.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Offset,
    Exp,
    Abs,
    Sigmoid,
    Square,
    Clamp,
    ColumnCumprod,
    ShiftDown,
    Conv2d,
    BilinearSample,
    GatherByLabel,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::Exp,
        OpKind::Abs,
        OpKind::Sigmoid,
        OpKind::Square,
        OpKind::Clamp,
        OpKind::ColumnCumprod,
        OpKind::ShiftDown,
        OpKind::Conv2d,
        OpKind::BilinearSample,
        OpKind::GatherByLabel,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Square => "square",
            OpKind::Clamp => "clamp",
            OpKind::ColumnCumprod => "column_cumprod",
            OpKind::ShiftDown => "shift_down",
            OpKind::Conv2d => "conv2d",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::GatherByLabel => "gather_by_label",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Precomputed bilinear lookups: for each output pixel either nothing
/// (value 0) or four `(source index, weight)` taps.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    src_shape: (usize, usize),
    out_shape: (usize, usize),
    taps: Vec<Option<[(usize, f64); 4]>>,
}

impl SamplePlan {
    /// `coords[p]` is the continuous `(row, col)` position in the source,
    /// pixel centers at integers. Positions are clamped to the source extent.
    pub fn from_coords(
        src_shape: (usize, usize),
        out_shape: (usize, usize),
        coords: &[Option<(f64, f64)>],
    ) -> Self {
        assert_eq!(coords.len(), out_shape.0 * out_shape.1, "one coordinate per output pixel");
        let (h, w) = src_shape;
        let taps = coords
            .iter()
            .map(|c| {
                c.map(|(row, col)| {
                    let row = row.clamp(0.0, (h - 1) as f64);
                    let col = col.clamp(0.0, (w - 1) as f64);
                    let (r0, c0) = (row.floor() as usize, col.floor() as usize);
                    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
                    let (fr, fc) = (row - r0 as f64, col - c0 as f64);
                    [
                        (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
                        (r0 * w + c1, (1.0 - fr) * fc),
                        (r1 * w + c0, fr * (1.0 - fc)),
                        (r1 * w + c1, fr * fc),
                    ]
                })
            })
            .collect();
        Self {
            src_shape,
            out_shape,
            taps,
        }
    }

    pub fn src_shape(&self) -> (usize, usize) {
        self.src_shape
    }

    pub fn out_shape(&self) -> (usize, usize) {
        self.out_shape
    }

    /// Resample a plain grid.
    pub fn apply(&self, src: &Grid) -> Grid {
        assert_eq!(src.shape(), self.src_shape, "sample plan source shape");
        let data = self
            .taps
            .iter()
            .map(|t| match t {
                Some(taps) => taps.iter().map(|&(i, wt)| wt * src.data()[i]).sum(),
                None => 0.0,
            })
            .collect();
        Grid::new(self.out_shape.0, self.out_shape.1, data)
    }

    /// 1 where the output pixel samples the source, 0 elsewhere.
    pub fn coverage(&self) -> Vec<u8> {
        self.taps.iter().map(|t| u8::from(t.is_some())).collect()
    }
}

/// Label grid driving [`Tape::gather_by_label`].
#[derive(Debug, Clone)]
pub struct LabelIndex {
    shape: (usize, usize),
    labels: Vec<u8>,
}

impl LabelIndex {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width, "label index size");
        Self {
            shape: (height, width),
            labels,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    ColumnCumprod(NodeId),
    ShiftDown(NodeId),
    Conv2d(NodeId, Arc<Grid>),
    BilinearSample(NodeId, Arc<SamplePlan>),
    GatherByLabel {
        table: NodeId,
        labels: Arc<LabelIndex>,
        field: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Exp(..) => OpKind::Exp,
            Op::Abs(..) => OpKind::Abs,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Square(..) => OpKind::Square,
            Op::Clamp(..) => OpKind::Clamp,
            Op::ColumnCumprod(..) => OpKind::ColumnCumprod,
            Op::ShiftDown(..) => OpKind::ShiftDown,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::BilinearSample(..) => OpKind::BilinearSample,
            Op::GatherByLabel { .. } => OpKind::GatherByLabel,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Backward-rule corruption hook for negative-control tests of gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    parallel: bool,
    fault: Option<Fault>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[id.0]],
        }
    }
}

/// `∂loss/∂θ` aligned with a [`crate::tissue::ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
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

fn replicate(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Let convolution and resampling split their forward pass across the
    /// current rayon pool.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Grid {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.is_scalar());
        v.data()[0]
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Differentiable input (gradient root).
    pub fn leaf(&mut self, value: Grid) -> Result<NodeId> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Grid) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Grid::scalar(value))
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.kind().name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("node {} is not on this tape", id.0)));
        }
        Ok(())
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).map(f);
        let rg = self.grad_of(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            Grid::new(
                va.height(),
                va.width(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if vb.is_scalar() {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::Shape {
                op: name,
                left: va.shape(),
                right: vb.shape(),
            });
        };
        let rg = self.grad_of(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `c · x` for a constant `c`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Running product down each column: `y[r, c] = Π_{s ≤ r} x[s, c]`.
    pub fn column_cumprod(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x);
        let (h, w) = src.shape();
        let mut out = src.clone();
        let d = out.data_mut();
        for r in 1..h {
            for c in 0..w {
                d[r * w + c] *= d[(r - 1) * w + c];
            }
        }
        let rg = self.grad_of(&[x]);
        self.push(out, Op::ColumnCumprod(x), rg)
    }

    /// Move every row one step deeper; row 0 becomes `fill`.
    pub fn shift_down(&mut self, x: NodeId, fill: f64) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x);
        let (h, w) = src.shape();
        let out = Grid::from_fn(h, w, |r, c| if r == 0 { fill } else { src.get(r - 1, c) });
        let rg = self.grad_of(&[x]);
        self.push(out, Op::ShiftDown(x), rg)
    }

    /// 2D convolution with a constant odd-sized kernel and replicate padding.
    pub fn conv2d(&mut self, x: NodeId, kernel: Arc<Grid>) -> Result<NodeId> {
        self.check(x)?;
        let (kh, kw) = kernel.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                left: self.value(x).shape(),
                right: (kh, kw),
            });
        }
        let src = self.value(x);
        let (h, w) = src.shape();
        let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
        let row = |r: usize, out_row: &mut [f64]| {
            for (c, out) in out_row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..kh {
                    let sr = replicate(r as isize - (i as isize - rh), h);
                    for j in 0..kw {
                        let sc = replicate(c as isize - (j as isize - rw), w);
                        acc += kernel.get(i, j) * src.get(sr, sc);
                    }
                }
                *out = acc;
            }
        };
        let mut data = vec![0.0; h * w];
        if self.parallel {
            data.par_chunks_mut(w).enumerate().for_each(|(r, out)| row(r, out));
        } else {
            data.chunks_mut(w).enumerate().for_each(|(r, out)| row(r, out));
        }
        let rg = self.grad_of(&[x]);
        self.push(Grid::new(h, w, data), Op::Conv2d(x, kernel), rg)
    }

    /// Resample `x` through a constant bilinear plan.
    pub fn bilinear_sample(&mut self, x: NodeId, plan: Arc<SamplePlan>) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x);
        if src.shape() != plan.src_shape {
            return Err(Error::Shape {
                op: "bilinear_sample",
                left: src.shape(),
                right: plan.src_shape,
            });
        }
        let sample = |t: &Option<[(usize, f64); 4]>| match t {
            Some(taps) => taps.iter().map(|&(i, wt)| wt * src.data()[i]).sum(),
            None => 0.0,
        };
        let data: Vec<f64> = if self.parallel {
            plan.taps.par_iter().map(sample).collect()
        } else {
            plan.taps.iter().map(sample).collect()
        };
        let (oh, ow) = plan.out_shape;
        let rg = self.grad_of(&[x]);
        self.push(Grid::new(oh, ow, data), Op::BilinearSample(x, plan), rg)
    }

    /// Spread column `field` of a `K × F` table over the label grid.
    pub fn gather_by_label(
        &mut self,
        table: NodeId,
        labels: Arc<LabelIndex>,
        field: usize,
    ) -> Result<NodeId> {
        self.check(table)?;
        let t = self.value(table);
        let (k, f) = t.shape();
        if field >= f {
            return Err(Error::Shape {
                op: "gather_by_label",
                left: (k, f),
                right: (0, field),
            });
        }
        if let Some(&bad) = labels.labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::MissingLabel {
                label: bad as usize,
                table_len: k,
            });
        }
        let (h, w) = labels.shape;
        let data = labels.labels.iter().map(|&l| t.get(l as usize, field)).collect();
        let rg = self.grad_of(&[table]);
        self.push(
            Grid::new(h, w, data),
            Op::GatherByLabel {
                table,
                labels,
                field,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Grid::scalar(self.value(x).sum());
        let rg = self.grad_of(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Grid::scalar(self.value(x).mean());
        let rg = self.grad_of(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(mut gy) = grads[id].take() else {
                continue;
            };
            if let Some(fault) = self.fault {
                if fault.op == node.op.kind() {
                    gy.iter_mut().for_each(|g| *g *= fault.factor);
                }
            }
            if gy.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.kind().name(),
                    node: id,
                });
            }
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    /// Gradient of `loss` with respect to the flattened leaf `params`.
    pub fn gradient(&self, loss: NodeId, params: NodeId) -> Result<GradientVector> {
        self.check(params)?;
        Ok(GradientVector(self.backward(loss)?.wrt(params)))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: impl Fn(usize) -> f64) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        for (i, slot) in g.iter_mut().enumerate() {
            *slot += contrib(i);
        }
    }

    /// Accumulate an elementwise-shaped contribution into `id`, summing it
    /// down to a scalar when `id` was broadcast.
    fn accumulate_broadcast(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        if node.value.len() == contrib.len() {
            self.accumulate(grads, id, |i| contrib[i]);
        } else {
            let total: f64 = contrib.iter().sum();
            self.accumulate(grads, id, |_| total);
        }
    }

    fn propagate(&self, op: &Op, y: &Grid, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // value of `id` at output position `i`, honoring scalar broadcast
        let at = |id: NodeId, i: usize| {
            let v = self.value(id).data();
            if v.len() == 1 {
                v[0]
            } else {
                v[i]
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, gy.to_vec());
                self.accumulate_broadcast(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, gy.to_vec());
                self.accumulate_broadcast(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let ga = gy.iter().enumerate().map(|(i, g)| g * at(*b, i)).collect();
                let gb = gy.iter().enumerate().map(|(i, g)| g * at(*a, i)).collect();
                self.accumulate_broadcast(grads, *a, ga);
                self.accumulate_broadcast(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let ga = gy.iter().enumerate().map(|(i, g)| g / at(*b, i)).collect();
                let gb = gy
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let d = at(*b, i);
                        -g * at(*a, i) / (d * d)
                    })
                    .collect();
                self.accumulate_broadcast(grads, *a, ga);
                self.accumulate_broadcast(grads, *b, gb);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |i| c * gy[i]),
            Op::Offset(x) => self.accumulate(grads, *x, |i| gy[i]),
            Op::Exp(x) => self.accumulate(grads, *x, |i| gy[i] * y.data()[i]),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| {
                    let s = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gy[i] * s
                })
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |i| {
                let s = y.data()[i];
                gy[i] * s * (1.0 - s)
            }),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| 2.0 * xv[i] * gy[i])
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gy[i]
                    } else {
                        0.0
                    }
                })
            }
            Op::ColumnCumprod(x) => {
                // gx[r] = (Π_{t<r} x_t) · A_r with A_r = g_r + x_{r+1} A_{r+1};
                // division-free, so exact zeros in x are handled.
                let xv = self.value(*x);
                let (h, w) = xv.shape();
                let mut gx = vec![0.0; h * w];
                for c in 0..w {
                    let mut acc = 0.0;
                    for r in (0..h).rev() {
                        acc = gy[r * w + c] + if r + 1 < h { xv.get(r + 1, c) * acc } else { 0.0 };
                        gx[r * w + c] = acc;
                    }
                    let mut prefix = 1.0;
                    for r in 0..h {
                        gx[r * w + c] *= prefix;
                        prefix *= xv.get(r, c);
                    }
                }
                self.accumulate(grads, *x, |i| gx[i]);
            }
            Op::ShiftDown(x) => {
                let w = y.width();
                self.accumulate(grads, *x, |i| gy.get(i + w).copied().unwrap_or(0.0));
            }
            Op::Conv2d(x, kernel) => {
                let (h, w) = y.shape();
                let (kh, kw) = kernel.shape();
                let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
                let mut gx = vec![0.0; h * w];
                for r in 0..h {
                    for c in 0..w {
                        let g = gy[r * w + c];
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..kh {
                            let sr = replicate(r as isize - (i as isize - rh), h);
                            for j in 0..kw {
                                let sc = replicate(c as isize - (j as isize - rw), w);
                                gx[sr * w + sc] += kernel.get(i, j) * g;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, |i| gx[i]);
            }
            Op::BilinearSample(x, plan) => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (taps, g) in plan.taps.iter().zip(gy) {
                    if let Some(taps) = taps {
                        for &(i, wt) in taps {
                            gx[i] += wt * g;
                        }
                    }
                }
                self.accumulate(grads, *x, |i| gx[i]);
            }
            Op::GatherByLabel {
                table,
                labels,
                field,
            } => {
                let f = self.value(*table).width();
                let mut gt = vec![0.0; self.value(*table).len()];
                for (&l, g) in labels.labels.iter().zip(gy) {
                    gt[l as usize * f + field] += g;
                }
                self.accumulate(grads, *table, |i| gt[i]);
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| gy[0]),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |_| gy[0] / n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Grid {
        Grid::new(values.len(), 1, values.to_vec())
    }

    #[test]
    fn exp_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::scalar(0.0)).unwrap();
        let y = t.exp(x).unwrap();
        assert_eq!(t.backward(y).unwrap().wrt(x), vec![1.0]);
    }

    #[test]
    fn cumprod_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.leaf(col(&[2.0, 3.0, 4.0])).unwrap();
        let y = t.column_cumprod(x).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 6.0, 24.0]);
        let s = t.sum(y).unwrap();
        // ∂/∂x₁ = 1 + 3 + 12, ∂/∂x₂ = 2 + 8, ∂/∂x₃ = 6
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![16.0, 10.0, 6.0]);
    }

    #[test]
    fn cumprod_backward_with_exact_zero() {
        let mut t = Tape::new();
        let x = t.leaf(col(&[2.0, 0.0, 4.0])).unwrap();
        let y = t.column_cumprod(x).unwrap();
        let s = t.sum(y).unwrap();
        // y = [2, 0, 0]; ∂y₂/∂x₂ = 2, ∂y₃/∂x₂ = 8, ∂y₃/∂x₃ = 0
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![1.0, 10.0, 0.0]);
    }

    #[test]
    fn gather_backward_counts_pixels() {
        let mut t = Tape::new();
        let table = t.leaf(Grid::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let labels = Arc::new(LabelIndex::new(2, 3, vec![0, 0, 2, 0, 2, 0]));
        let g = t.gather_by_label(table, labels, 1).unwrap();
        assert_eq!(t.value(g).data(), &[2.0, 2.0, 6.0, 2.0, 6.0, 2.0]);
        let s = t.sum(g).unwrap();
        // label 0 covers 4 pixels, label 1 none, label 2 two
        assert_eq!(t.backward(s).unwrap().wrt(table), vec![0.0, 4.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn gather_rejects_missing_label() {
        let mut t = Tape::new();
        let table = t.leaf(Grid::new(2, 5, vec![0.0; 10])).unwrap();
        let labels = Arc::new(LabelIndex::new(2, 1, vec![0, 3]));
        assert!(matches!(
            t.gather_by_label(table, labels, 0),
            Err(Error::MissingLabel { label: 3, table_len: 2 })
        ));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Grid::new(1, 3, vec![1.0, 2.0, 3.0])).unwrap();
        let c = t.scalar(4.0).unwrap();
        assert_eq!(t.gradient(c, p).unwrap().0, vec![0.0; 3]);
    }

    #[test]
    fn linear_loss_has_unit_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Grid::new(2, 5, (0..10).map(f64::from).collect())).unwrap();
        let s = t.sum(p).unwrap();
        assert_eq!(t.gradient(s, p).unwrap().0, vec![1.0; 10]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(Grid::zeros(2, 2)).unwrap();
        assert!(matches!(t.backward(p), Err(Error::Backward(_))));
    }

    #[test]
    fn foreign_node_is_rejected() {
        let t = Tape::new();
        assert!(t.backward(NodeId(3)).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Grid::zeros(2, 2)).unwrap();
        let b = t.leaf(Grid::zeros(2, 3)).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_forward_reports_node() {
        let mut t = Tape::new();
        let a = t.leaf(Grid::scalar(1.0)).unwrap();
        let z = t.scalar(0.0).unwrap();
        assert!(matches!(t.div(a, z), Err(Error::NonFinite { op: "div", node: 2 })));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut t = Tape::new();
        let g = t.leaf(Grid::new(1, 3, vec![1.0, 2.0, 3.0])).unwrap();
        let s = t.leaf(Grid::scalar(2.0)).unwrap();
        let m = t.mul(g, s).unwrap();
        let l = t.sum(m).unwrap();
        let grads = t.backward(l).unwrap();
        assert_eq!(grads.wrt(s), vec![6.0]);
        assert_eq!(grads.wrt(g), vec![2.0; 3]);
    }

    #[test]
    fn abs_and_clamp_subgradients() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::new(1, 5, vec![-1.0, 0.0, 0.5, 1.0, 2.0])).unwrap();
        let a = t.abs(x).unwrap();
        let sa = t.sum(a).unwrap();
        assert_eq!(t.backward(sa).unwrap().wrt(x), vec![-1.0, 0.0, 1.0, 1.0, 1.0]);
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        let sc = t.sum(c).unwrap();
        assert_eq!(t.backward(sc).unwrap().wrt(x), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_of_constant_is_constant() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::filled(5, 4, 0.7)).unwrap();
        let k = Arc::new(Grid::filled(3, 3, 1.0 / 9.0));
        let y = t.conv2d(x, k).unwrap();
        for v in t.value(y).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::zeros(4, 4)).unwrap();
        assert!(t.conv2d(x, Arc::new(Grid::zeros(2, 3))).is_err());
    }

    #[test]
    fn conv_identity_kernel_shifts() {
        // kernel with its single tap one column right of center: out[c] = x[c-1]
        let mut t = Tape::new();
        let x = t.leaf(Grid::new(1, 4, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = Arc::new(Grid::new(1, 3, vec![0.0, 0.0, 1.0]));
        let y = t.conv2d(x, k).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 2.0, 3.0]);
        let s = t.sum(y).unwrap();
        // replicate adjoint: x[0] feeds out[0] and out[1]; x[3] feeds nothing
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![2.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn shift_down_fill_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(col(&[1.0, 2.0, 3.0])).unwrap();
        let y = t.shift_down(x, 9.0).unwrap();
        assert_eq!(t.value(y).data(), &[9.0, 1.0, 2.0]);
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0])).unwrap();
        let plan = Arc::new(SamplePlan::from_coords((2, 2), (1, 2), &[Some((0.5, 0.5)), None]));
        let y = t.bilinear_sample(x, plan).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, 0.0]);
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![0.25; 4]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::new(2, 2, vec![0.1, -0.4, 0.3, 0.9])).unwrap();
        let s = t.sigmoid(x).unwrap();
        let e = t.exp(s).unwrap();
        let l = t.mean(e).unwrap();
        let a = t.backward(l).unwrap().wrt(x);
        let b = t.backward(l).unwrap().wrt(x);
        assert_eq!(a, b);
    }

    #[test]
    fn fault_injection_scales_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Grid::scalar(0.0)).unwrap();
        let y = t.sigmoid(x).unwrap();
        t.inject_fault(Some(Fault {
            op: OpKind::Sigmoid,
            factor: 2.0,
        }));
        assert_eq!(t.backward(y).unwrap().wrt(x), vec![0.5]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
