use std::cell::Cell;

use super::{broadcast_shape, Tensor};
use crate::error::{shape_err, Error, Result};

thread_local! {
    static SIGMOID_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Corrupts the sigmoid backward rule on the current thread. Only used to
/// prove the gradient checker notices a wrong derivative.
#[doc(hidden)]
pub fn inject_sigmoid_fault(enabled: bool) {
    SIGMOID_FAULT.with(|f| f.set(enabled));
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Log1p,
    Exp,
    Negate,
    Ln,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        // flat source index per output element; `None` when shapes match
        a_idx: Option<Vec<usize>>,
        b_idx: Option<Vec<usize>>,
    },
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Var, Var),
    Stack(Vec<Var>),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    LogSumExpRows {
        input: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph. Node order is a valid topological order,
/// so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `tensor` into the graph. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.push(t.shape, t.values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).values[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.node(v).shape.clone(), self.node(v).values.clone())
            .expect("graph nodes hold consistent shapes")
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = &self.node(a).values;
        let values: Vec<f64> = match op {
            UnaryOp::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Log1p => x.iter().map(|v| v.ln_1p()).collect(),
            UnaryOp::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryOp::Negate => x.iter().map(|v| -v).collect(),
            UnaryOp::Ln => x.iter().map(|v| v.ln()).collect(),
            UnaryOp::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
        };
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a);
        self.push(shape, values, Op::Unary(op, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log1p, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Negate, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Ln, a)
    }

    /// Square root; the derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a).shape.clone();
        let sb = self.node(b).shape.clone();
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err(
                "elementwise",
                format!("cannot broadcast {sa:?} with {sb:?}"),
            )
        })?;
        let a_idx = (sa != shape).then(|| broadcast_index(&sa, &shape));
        let b_idx = (sb != shape).then(|| broadcast_index(&sb, &shape));
        let n: usize = shape.iter().product();
        let xa = &self.node(a).values;
        let xb = &self.node(b).values;
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let ia = a_idx.as_ref().map_or(i, |m| m[i]);
                let ib = b_idx.as_ref().map_or(i, |m| m[i]);
                f(xa[ia], xb[ib])
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            values,
            Op::Binary {
                op,
                a,
                b,
                a_idx,
                b_idx,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        let values = self
            .node(a)
            .values
            .iter()
            .map(|v| v.powf(exponent))
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a);
        self.push(shape, values, Op::Powf(a, exponent), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let values = self.node(a).values.iter().map(|v| v * factor).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a);
        self.push(shape, values, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.node(a).values.iter().map(|v| v + c).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a);
        self.push(shape, values, Op::AddScalar(a), rg)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was
    /// already inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let values = self
            .node(a)
            .values
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.rg(a);
        self.push(shape, values, Op::Clamp(a, lo, hi), rg)
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_raw(&self.node(a).values, &self.node(b).values, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], values, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.node(a).shape;
        if s.len() != 2 {
            return Err(shape_err(
                "transpose",
                format!("expected rank 2, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let x = &self.node(a).values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], values, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(a).values.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.node(a).shape),
            ));
        }
        let values = self.node(a).values.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), values, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).values.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.node(a).values;
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    // ---- convolutional layers ----

    /// Cross-correlation of a `C_in x H x W` input with `C_out x C_in x k x k`
    /// kernels, zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.node(input).shape.clone();
        let sk = self.node(kernel).shape.clone();
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(shape_err(
                "conv2d",
                format!("input {si:?} / kernel {sk:?} (expected CxHxW and OxCxkxk)"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if sk[1] != c_in {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {} input channels, input has {c_in}", sk[1]),
            ));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let geo = ConvGeometry::new(c_in, h, w, c_out, k, stride, padding);
        let mut out = vec![0.0; c_out * geo.oh * geo.ow];
        conv_forward(
            &geo,
            &self.node(input).values,
            &self.node(kernel).values,
            &mut out,
        );
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![c_out, geo.oh, geo.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn pool2d(
        &mut self,
        kind: PoolKind,
        input: Var,
        window: usize,
        stride: usize,
    ) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if s.len() != 3 {
            return Err(shape_err("pool2d", format!("expected CxHxW, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(shape_err(
                "pool2d",
                format!("window {window} / stride {stride} on {h}x{w} input"),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = &self.node(input).values;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        let inv = 1.0 / (window * window) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (ch * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                                    // strict `>` keeps the first row-major maximum
                                    if x[i] > best {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax.push(best_i);
                        }
                        PoolKind::Avg => {
                            let mut acc = 0.0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    acc += x[(ch * h + oy * stride + dy) * w + ox * stride + dx];
                                }
                            }
                            out[o] = acc * inv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            PoolKind::Avg => Op::AvgPool {
                input,
                window,
                stride,
            },
        };
        Ok(self.push(vec![c, oh, ow], out, op, rg))
    }

    /// Per-channel spatial mean: `C x H x W -> C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if s.len() != 3 {
            return Err(shape_err(
                "global_avg_pool",
                format!("expected CxHxW, got {s:?}"),
            ));
        }
        let hw = s[1] * s[2];
        let values = self
            .node(input)
            .values
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(input);
        Ok(self.push(vec![s[0]], values, Op::GlobalAvgPool(input), rg))
    }

    /// Per-channel spatial maximum: `C x H x W -> C`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if s.len() != 3 {
            return Err(shape_err(
                "global_max_pool",
                format!("expected CxHxW, got {s:?}"),
            ));
        }
        let hw = s[1] * s[2];
        let mut values = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for (c, ch) in self.node(input).values.chunks(hw).enumerate() {
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &v) in ch.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            values.push(bv);
            argmax.push(c * hw + bi);
        }
        let rg = self.rg(input);
        Ok(self.push(vec![s[0]], values, Op::GlobalMaxPool { input, argmax }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(shape_err(
                "concat_channels",
                format!("spatial mismatch between {sa:?} and {sb:?}"),
            ));
        }
        let mut values = self.node(a).values.clone();
        values.extend_from_slice(&self.node(b).values);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![sa[0] + sb[0], sa[1], sa[2]],
            values,
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("stack", "nothing to stack"))?;
        let inner = self.node(*first).shape.clone();
        let mut values = Vec::with_capacity(parts.len() * self.node(*first).values.len());
        for p in parts {
            if self.node(*p).shape != inner {
                return Err(shape_err(
                    "stack",
                    format!("{:?} vs {inner:?}", self.node(*p).shape),
                ));
            }
            values.extend_from_slice(&self.node(*p).values);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(shape, values, Op::Stack(parts.to_vec()), rg))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if s.len() != 2 {
            return Err(shape_err(
                "gather_rows",
                format!("expected rank 2, got {s:?}"),
            ));
        }
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "empty row selection"));
        }
        let cols = s[1];
        let mut values = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= s[0] {
                return Err(shape_err("gather_rows", format!("row {r} out of {}", s[0])));
            }
            values.extend_from_slice(&self.node(input).values[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![rows.len(), cols],
            values,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise `log Σ exp` over the entries selected by `mask`, evaluated as
    /// `max + log Σ exp(x - max)`. Every row needs at least one selected entry.
    pub fn logsumexp_rows(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let s = self.node(input).shape.clone();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(shape_err(
                "logsumexp_rows",
                format!("input {s:?} with mask of length {}", mask.len()),
            ));
        }
        let cols = s[1];
        let x = &self.node(input).values;
        let mut values = Vec::with_capacity(s[0]);
        for r in 0..s[0] {
            let row = &x[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            if !m.contains(&true) {
                return Err(Error::Contract(format!(
                    "logsumexp_rows: row {r} has no selected entries"
                )));
            }
            let selected = || row.iter().zip(m).filter(|(_, &keep)| keep).map(|(v, _)| *v);
            if selected().any(f64::is_nan) {
                values.push(f64::NAN);
                continue;
            }
            let max = selected().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                values.push(f64::NEG_INFINITY);
                continue;
            }
            let acc: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| (v - max).exp())
                .sum();
            values.push(max + acc.ln());
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![s[0]],
            values,
            Op::LogSumExpRows {
                input,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse sweep ----

    /// Accumulates `d output / d leaf` into every reachable leaf that requires
    /// gradients. Calling it again without [`Graph::zero_grad`] adds on top.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.node(output).values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element output, got shape {:?}",
                self.node(output).shape
            )));
        }
        if !self.rg(output) {
            return Ok(());
        }
        let fault = SIGMOID_FAULT.with(Cell::get);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = &node.values;
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[idx] {
                        Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += g),
                        slot @ None => *slot = Some(gy),
                    }
                    continue;
                }
                Op::Unary(op, a) => {
                    let x = &self.nodes[a.0].values;
                    let d: Vec<f64> = match op {
                        UnaryOp::Relu => gy
                            .iter()
                            .zip(x)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryOp::Sigmoid => {
                            let bias = if fault { 1.1 } else { 1.0 };
                            gy.iter()
                                .zip(y)
                                .map(|(g, s)| g * s * (1.0 - s) * bias)
                                .collect()
                        }
                        UnaryOp::Log1p => gy.iter().zip(x).map(|(g, v)| g / (1.0 + v)).collect(),
                        UnaryOp::Exp => gy.iter().zip(y).map(|(g, e)| g * e).collect(),
                        UnaryOp::Negate => gy.iter().map(|g| -g).collect(),
                        UnaryOp::Ln => gy.iter().zip(x).map(|(g, v)| g / v).collect(),
                        UnaryOp::Sqrt => gy
                            .iter()
                            .zip(y)
                            .map(|(g, r)| if *r > 0.0 { g / (2.0 * r) } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::Binary {
                    op,
                    a,
                    b,
                    a_idx,
                    b_idx,
                } => {
                    let xa = &self.nodes[a.0].values;
                    let xb = &self.nodes[b.0].values;
                    let ia = |i: usize| a_idx.as_ref().map_or(i, |m| m[i]);
                    let ib = |i: usize| b_idx.as_ref().map_or(i, |m| m[i]);
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; xa.len()];
                        for (i, g) in gy.iter().enumerate() {
                            da[ia(i)] += match op {
                                BinaryOp::Add | BinaryOp::Sub => *g,
                                BinaryOp::Mul => g * xb[ib(i)],
                                BinaryOp::Div => g / xb[ib(i)],
                            };
                        }
                        accumulate(&mut grads, &self.nodes, *a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; xb.len()];
                        for (i, g) in gy.iter().enumerate() {
                            db[ib(i)] += match op {
                                BinaryOp::Add => *g,
                                BinaryOp::Sub => -g,
                                BinaryOp::Mul => g * xa[ia(i)],
                                BinaryOp::Div => {
                                    let d = xb[ib(i)];
                                    -g * xa[ia(i)] / (d * d)
                                }
                            };
                        }
                        accumulate(&mut grads, &self.nodes, *b, &db);
                    }
                }
                Op::Powf(a, e) => {
                    let x = &self.nodes[a.0].values;
                    let d: Vec<f64> = if *e == 0.0 {
                        vec![0.0; x.len()]
                    } else {
                        gy.iter()
                            .zip(x)
                            .map(|(g, v)| g * e * v.powf(e - 1.0))
                            .collect()
                    };
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = gy.iter().map(|g| g * c).collect();
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    accumulate(&mut grads, &self.nodes, *a, &gy);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.0].values;
                    let d: Vec<f64> = gy
                        .iter()
                        .zip(x)
                        .map(|(g, v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let xa = &self.nodes[a.0].values;
                    let xb = &self.nodes[b.0].values;
                    if self.nodes[a.0].requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = gy[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += g * xb[p * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = xa[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += av * gy[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let s = &self.nodes[a.0].shape;
                    let (r, c) = (s[0], s[1]);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = gy[j * r + i];
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::Sum(a) => {
                    let d = vec![gy[0]; self.nodes[a.0].values.len()];
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].values.len();
                    let d = vec![gy[0] / n as f64; n];
                    accumulate(&mut grads, &self.nodes, *a, &d);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let si = &self.nodes[input.0].shape;
                    let sk = &self.nodes[kernel.0].shape;
                    let geo =
                        ConvGeometry::new(si[0], si[1], si[2], sk[0], sk[2], *stride, *padding);
                    let x = &self.nodes[input.0].values;
                    let kw = &self.nodes[kernel.0].values;
                    let want_dx = self.nodes[input.0].requires_grad;
                    let want_dk = self.nodes[kernel.0].requires_grad;
                    let mut dx = if want_dx {
                        vec![0.0; x.len()]
                    } else {
                        Vec::new()
                    };
                    let mut dk = if want_dk {
                        vec![0.0; kw.len()]
                    } else {
                        Vec::new()
                    };
                    conv_backward(
                        &geo,
                        x,
                        kw,
                        &gy,
                        want_dx.then_some(&mut dx[..]),
                        want_dk.then_some(&mut dk[..]),
                    );
                    if want_dx {
                        accumulate(&mut grads, &self.nodes, *input, &dx);
                    }
                    if want_dk {
                        accumulate(&mut grads, &self.nodes, *kernel, &dk);
                    }
                }
                Op::MaxPool { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                    let mut d = vec![0.0; self.nodes[input.0].values.len()];
                    for (g, &i) in gy.iter().zip(argmax) {
                        d[i] += g;
                    }
                    accumulate(&mut grads, &self.nodes, *input, &d);
                }
                Op::AvgPool {
                    input,
                    window,
                    stride,
                } => {
                    let s = &self.nodes[input.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
                    let inv = 1.0 / (window * window) as f64;
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gy[(ch * oh + oy) * ow + ox] * inv;
                                for dy in 0..*window {
                                    for dx in 0..*window {
                                        d[(ch * h + oy * stride + dy) * w + ox * stride + dx] += g;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *input, &d);
                }
                Op::GlobalAvgPool(input) => {
                    let s = &self.nodes[input.0].shape;
                    let hw = s[1] * s[2];
                    let inv = 1.0 / hw as f64;
                    let d: Vec<f64> = gy
                        .iter()
                        .flat_map(|g| std::iter::repeat_n(g * inv, hw))
                        .collect();
                    accumulate(&mut grads, &self.nodes, *input, &d);
                }
                Op::ConcatChannels(a, b) => {
                    let na = self.nodes[a.0].values.len();
                    accumulate(&mut grads, &self.nodes, *a, &gy[..na]);
                    accumulate(&mut grads, &self.nodes, *b, &gy[na..]);
                }
                Op::Stack(parts) => {
                    let chunk = gy.len() / parts.len();
                    for (p, g) in parts.iter().zip(gy.chunks(chunk)) {
                        accumulate(&mut grads, &self.nodes, *p, g);
                    }
                }
                Op::GatherRows { input, rows } => {
                    let cols = self.nodes[input.0].shape[1];
                    let mut d = vec![0.0; self.nodes[input.0].values.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            d[r * cols + c] += gy[k * cols + c];
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *input, &d);
                }
                Op::LogSumExpRows { input, mask } => {
                    let cols = self.nodes[input.0].shape[1];
                    let x = &self.nodes[input.0].values;
                    let mut d = vec![0.0; x.len()];
                    for (r, (g, lse)) in gy.iter().zip(y).enumerate() {
                        for c in 0..cols {
                            let i = r * cols + c;
                            if mask[i] {
                                d[i] = g * (x[i] - lse).exp();
                            }
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *input, &d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], target: Var, delta: &[f64]) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// For each flat index of `out`, the flat index of the operand element that
/// broadcasts onto it.
fn broadcast_index(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - operand.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = if i < pad { 1 } else { operand[i - pad] };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    idx
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for (o, bv) in out.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    c
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        }
    }

    /// Output positions `o` along an axis of length `len` for which
    /// `o * stride + tap - padding` lands inside the input.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let off = tap as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len - 1
        let hi_num = len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo as usize;
        let hi = (hi + 1).min(out_len as isize).max(0) as usize;
        lo..hi.max(lo)
    }
}

impl ConvGeometry {
    /// Unfolds the padded input into a `(c_in·k·k) x (oh·ow)` matrix whose
    /// row `(ci, ky, kx)` holds the input value under that tap for every
    /// output position (zero where the tap falls in the padding).
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride, self.padding);
        let n = self.oh * self.ow;
        let mut col = vec![0.0; self.c_in * k * k * n];
        for ci in 0..self.c_in {
            let x_c = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let ys = self.valid_range(ky, self.h, self.oh);
                for kx in 0..k {
                    let xs = self.valid_range(kx, self.w, self.ow);
                    let r = (ci * k + ky) * k + kx;
                    let row = &mut col[r * n..(r + 1) * n];
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let src = &x_c[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xs.clone() {
                            dst[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
        col
    }

    /// Adds an unfolded gradient back onto the input layout.
    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.padding);
        let n = self.oh * self.ow;
        for ci in 0..self.c_in {
            let dx_c = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let ys = self.valid_range(ky, self.h, self.oh);
                for kx in 0..k {
                    let xs = self.valid_range(kx, self.w, self.ow);
                    let r = (ci * k + ky) * k + kx;
                    let row = &col[r * n..(r + 1) * n];
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let dst = &mut dx_c[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xs.clone() {
                            dst[ox * s + kx - p] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(g: &ConvGeometry, x: &[f64], kernel: &[f64], out: &mut [f64]) {
    let col = g.im2col(x);
    let n = g.oh * g.ow;
    let taps = g.c_in * g.k * g.k;
    for co in 0..g.c_out {
        let out_c = &mut out[co * n..(co + 1) * n];
        for r in 0..taps {
            axpy(kernel[co * taps + r], &col[r * n..(r + 1) * n], out_c);
        }
    }
}

fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    gy: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let n = g.oh * g.ow;
    let taps = g.c_in * g.k * g.k;
    if let Some(dk) = dk {
        let col = g.im2col(x);
        for co in 0..g.c_out {
            let g_c = &gy[co * n..(co + 1) * n];
            for r in 0..taps {
                dk[co * taps + r] += dot(g_c, &col[r * n..(r + 1) * n]);
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; taps * n];
        for co in 0..g.c_out {
            let g_c = &gy[co * n..(co + 1) * n];
            for r in 0..taps {
                axpy(kernel[co * taps + r], g_c, &mut dcol[r * n..(r + 1) * n]);
            }
        }
        g.col2im_add(&dcol, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn param(shape: &[usize], v: &[f64]) -> Tensor {
        t(shape, v).requiring_grad()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, -3.2, 3.2]));
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s)[0], 0.5);
        assert_eq!(g.value(r), &[0.0, 0.0, 3.2]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[17.0, 39.0]);
        assert_eq!(g.shape(c), &[2, 1]);
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let id = g.leaf(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m: Vec<f64> = (0..12).map(|i| i as f64 * 0.7 - 3.0).collect();
        let mv = g.leaf(&t(&[3, 4], &m));
        let out = g.matmul(id, mv).unwrap();
        assert_eq!(g.value(out), &m[..]);
    }

    #[test]
    fn conv_identity_and_all_ones() {
        let mut g = Graph::new();
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let xi = g.leaf(&t(&[1, 5, 5], &x));
        let k1 = g.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(xi, k1, 1, 0).unwrap();
        assert_eq!(g.value(y), &x[..]);

        let ones = g.leaf(&t(&[1, 5, 5], &[1.0; 25]));
        let k3 = g.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = g.conv2d(ones, k3, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_output_geometry_and_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[3, 32, 32]));
        let k = g.leaf(&Tensor::zeros(&[16, 3, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[16, 16, 16]);

        let small = g.leaf(&Tensor::zeros(&[1, 2, 2]));
        let big = g.leaf(&Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(
            g.conv2d(small, big, 1, 1),
            Err(Error::Shape { .. })
        ));
        assert!(g.conv2d(small, big, 1, 2).is_ok());
    }

    #[test]
    fn conv_padding_matches_naive() {
        let x: Vec<f64> = (0..2 * 5 * 6)
            .map(|i| ((i * 7) % 11) as f64 - 5.0)
            .collect();
        let k: Vec<f64> = (0..3 * 2 * 3 * 3)
            .map(|i| ((i * 5) % 7) as f64 - 3.0)
            .collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let mut g = Graph::new();
            let xi = g.leaf(&t(&[2, 5, 6], &x));
            let ki = g.leaf(&t(&[3, 2, 3, 3], &k));
            let y = g.conv2d(xi, ki, stride, pad).unwrap();
            let (oh, ow) = (
                (5 + 2 * pad - 3) / stride + 1,
                (6 + 2 * pad - 3) / stride + 1,
            );
            assert_eq!(g.shape(y), &[3, oh, ow]);
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += k[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                        assert_eq!(g.value(y)[(co * oh + oy) * ow + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let avg = g.pool2d(PoolKind::Avg, x, 2, 2).unwrap();
        assert_eq!(g.value(avg), &[2.5]);
        let gap = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(gap), &[2.5]);

        let c = g.leaf(&t(&[2, 4, 4], &[0.75; 32]));
        let mp = g.pool2d(PoolKind::Max, c, 2, 2).unwrap();
        assert_eq!(g.shape(mp), &[2, 2, 2]);
        assert!(g.value(mp).iter().all(|&v| v == 0.75));
        assert!(g.pool2d(PoolKind::Max, x, 3, 1).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first_element() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let mp = g.pool2d(PoolKind::Max, x, 2, 2).unwrap();
        let s = g.sum(mp);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_layout_and_errors() {
        let mut g = Graph::new();
        let a = g.leaf(&param(&[2, 7, 7], &[1.0; 98]));
        let bv: Vec<f64> = (0..147).map(|i| i as f64).collect();
        let b = g.leaf(&param(&[3, 7, 7], &bv));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[5, 7, 7]);
        assert_eq!(&g.value(c)[98..], &bv[..]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));

        let d = g.leaf(&Tensor::zeros(&[1, 6, 7]));
        assert!(g.concat_channels(a, d).is_err());
    }

    #[test]
    fn product_rule_and_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[1], &[2.0]));
        let y = g.leaf(&param(&[1], &[3.0]));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        assert_eq!(g.grad(y).unwrap(), &[4.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn broadcast_backward_sums_over_expanded_axes() {
        let mut g = Graph::new();
        let a = g.leaf(&param(&[2, 2, 2], &[1.0; 8]));
        let m = g.leaf(&param(&[2, 1, 1], &[2.0, 3.0]));
        let y = g.mul(a, m).unwrap();
        assert_eq!(g.value(y), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(m).unwrap(), &[4.0, 4.0]);
        assert_eq!(
            g.grad(a).unwrap(),
            &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]
        );
    }

    #[test]
    fn logsumexp_propagates_nan_and_rejects_empty_rows() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2, 2], &[f64::NAN, 1.0, 2.0, 3.0]));
        let l = g.logsumexp_rows(x, &[true, true, false, true]).unwrap();
        assert!(g.value(l)[0].is_nan());
        assert_eq!(g.value(l)[1], 3.0);
        assert!(g.logsumexp_rows(x, &[false, false, true, true]).is_err());
    }

    #[test]
    fn logsumexp_is_stable() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3], &[1000.0, 1000.0, -5.0]));
        let l = g.logsumexp_rows(x, &[true, true, false]).unwrap();
        assert!((g.value(l)[0] - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(g.logsumexp_rows(x, &[false; 3]).is_err());
    }
}
