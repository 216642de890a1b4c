use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// A differentiable operation defined outside the built-in primitive set.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` when the input is not differentiable).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulConst(usize, Vec<f64>),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        in_chunk: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: usize,
        indices: Vec<usize>,
        row_len: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        n: usize,
    },
    Sum(usize),
    Mean(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2 {
        x: usize,
        h: usize,
        w: usize,
    },
    MeanPoolSpatial {
        x: usize,
        hw: usize,
    },
    L1Loss(usize, usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
///
/// Values are appended in execution order, so the node list is always
/// topologically sorted. [`Tape::backward`] consumes the tape.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    /// Borrow the value of `v`.
    ///
    /// Panics if `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        Ref::map(self.nodes.borrow(), |n| &n[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        self.nodes.borrow()[v.index].requires_grad
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        // Nothing upstream is trainable: keep the value, drop the saved state.
        let op = if requires_grad { op } else { Op::Constant };
        self.push_raw(value, op, requires_grad)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::DetachedGraph);
        }
        Ok(v.index)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[ia].value.shape(), nodes[ib].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = self.same_shape(name, a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(va.shape(), data)?
        };
        Ok(self.push(value, op(ia, ib), &[ia, ib]))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            Tensor::new(v.shape(), v.data().iter().map(|x| f(*x)).collect())?
        };
        Ok(self.push(value, op(ix), &[ix]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `x + row`, broadcasting `row` (length = last dim of `x`) over all rows.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vr) = (&nodes[ix].value, &nodes[ir].value);
            let n = *vx.shape().last().unwrap_or(&0);
            if vr.numel() != n || n == 0 {
                return Err(shape_err(
                    "add_row",
                    format!("{:?} + row {:?}", vx.shape(), vr.shape()),
                ));
            }
            let data = vx
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + vr.data()[i % n])
                .collect();
            Tensor::new(vx.shape(), data)?
        };
        Ok(self.push(value, Op::AddRow(ix, ir), &[ix, ir]))
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v * s, |i| Op::Scale(i, s))
    }

    /// Adds a constant to every element.
    pub fn offset(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::Offset)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, x: Var, c: &Tensor) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            if v.shape() != c.shape() {
                return Err(shape_err(
                    "mul_const",
                    format!("{:?} vs {:?}", v.shape(), c.shape()),
                ));
            }
            let data = v.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
            Tensor::new(v.shape(), data)?
        };
        Ok(self.push(value, Op::MulConst(ix, c.data().to_vec()), &[ix]))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let (sa, sb) = (va.shape(), vb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
            (Tensor::new(&[m, n], out)?, m, k, n)
        };
        Ok(self.push(value, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (value, rows, cols) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            if v.shape().len() != 2 {
                return Err(shape_err("transpose", format!("{:?} is not 2-D", v.shape())));
            }
            let (r, c) = (v.shape()[0], v.shape()[1]);
            (Tensor::new(&[c, r], transpose(v.data(), r, c))?, r, c)
        };
        Ok(self.push(value, Op::Transpose { x: ix, rows, cols }, &[ix]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes.borrow()[ix].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(ix), &[ix]))
    }

    /// Flattens to shape `[numel]`.
    pub fn flatten(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let idx: Vec<usize> = xs.iter().map(|v| self.idx(*v)).collect::<Result<_>>()?;
        let (value, outer, chunks) = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
            }
            let mut out_shape = first.clone();
            out_shape[axis] = 0;
            for &i in &idx {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let chunks: Vec<usize> = idx
                .iter()
                .map(|&i| nodes[i].value.shape()[axis] * inner)
                .collect();
            let total: usize = chunks.iter().sum();
            let mut data = Vec::with_capacity(outer * total);
            for o in 0..outer {
                for (&i, &c) in idx.iter().zip(&chunks) {
                    data.extend_from_slice(&nodes[i].value.data()[o * c..(o + 1) * c]);
                }
            }
            (Tensor::new(&out_shape, data)?, outer, chunks)
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: idx.clone(),
                outer,
                chunks,
            },
            &idx,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (value, outer, in_chunk, s0, l0) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            let shape = v.shape();
            if axis >= shape.len() || start + len > shape[axis] || len == 0 {
                return Err(shape_err(
                    "slice",
                    format!("[{start}..{}] on axis {axis} of {shape:?}", start + len),
                ));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let in_chunk = shape[axis] * inner;
            let (s0, l0) = (start * inner, len * inner);
            let mut data = Vec::with_capacity(outer * l0);
            for o in 0..outer {
                data.extend_from_slice(&v.data()[o * in_chunk + s0..o * in_chunk + s0 + l0]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            (Tensor::new(&out_shape, data)?, outer, in_chunk, s0, l0)
        };
        Ok(self.push(
            value,
            Op::Slice {
                x: ix,
                outer,
                in_chunk,
                start: s0,
                len: l0,
            },
            &[ix],
        ))
    }

    /// Selects rows (entries of axis 0) in the given order; repeats allowed.
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (value, row_len) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            let shape = v.shape();
            let rows = shape[0];
            if let Some(bad) = indices.iter().find(|&&r| r >= rows) {
                return Err(shape_err("gather_rows", format!("row {bad} of {shape:?}")));
            }
            let row_len: usize = shape[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * row_len);
            for &r in indices {
                data.extend_from_slice(&v.data()[r * row_len..(r + 1) * row_len]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[0] = indices.len();
            (Tensor::new(&out_shape, data)?, row_len)
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                x: ix,
                indices: indices.to_vec(),
                row_len,
            },
            &[ix],
        ))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (value, n) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            let n = *v.shape().last().unwrap_or(&0);
            if n == 0 {
                return Err(shape_err("softmax", format!("{:?}", v.shape())));
            }
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    sum += *e;
                }
                for e in row.iter_mut() {
                    *e /= sum;
                }
            }
            (Tensor::new(v.shape(), data)?, n)
        };
        Ok(self.push(value, Op::Softmax { x: ix, n }, &[ix]))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s: f64 = self.nodes.borrow()[ix].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let m = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        Ok(self.push(Tensor::scalar(m), Op::Mean(ix), &[ix]))
    }

    /// 2-D convolution of a `[cin, h, w]` map with `[cout, cin, k, k]`
    /// weights and `[cout]` bias. Padding is `k / 2`, so stride 1 keeps the
    /// spatial size and stride `s` gives `ceil(h / s)` for odd `k`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (value, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (vx, vw, vb) = (&nodes[ix].value, &nodes[iw].value, &nodes[ib].value);
            let (sx, sw) = (vx.shape(), vw.shape());
            if sx.len() != 3
                || sw.len() != 4
                || sw[1] != sx[0]
                || sw[2] != sw[3]
                || vb.numel() != sw[0]
                || stride == 0
            {
                return Err(shape_err(
                    "conv2d",
                    format!("input {sx:?}, weight {sw:?}, bias {:?}, stride {stride}", vb.shape()),
                ));
            }
            let (cin, h, w, cout, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
            let pad = k / 2;
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let geom = ConvGeom {
                cin,
                h,
                w,
                cout,
                k,
                stride,
                pad,
                ho,
                wo,
            };
            let cols = im2col(vx.data(), &geom);
            let p = ho * wo;
            let mut out = vec![0.0; cout * p];
            for (co, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(vb.data()[co]);
            }
            gemm(cout, cin * k * k, p, vw.data(), false, &cols, false, &mut out, 1.0);
            (Tensor::new(&[cout, ho, wo], out)?, geom, cols)
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
                cols,
            },
            &[ix, iw, ib],
        ))
    }

    /// Non-overlapping 2x2 average pooling of `[c, h, w]` (even `h`, `w`).
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (value, h, w) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            let s = v.shape();
            if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 || s[1] == 0 || s[2] == 0 {
                return Err(shape_err("avg_pool2", format!("{s:?}")));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let (ho, wo) = (h / 2, w / 2);
            let d = v.data();
            let mut out = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                let base = ch * h * w;
                for r in 0..ho {
                    let (r0, r1) = (base + 2 * r * w, base + (2 * r + 1) * w);
                    for q in 0..wo {
                        out.push(0.25 * (d[r0 + 2 * q] + d[r0 + 2 * q + 1] + d[r1 + 2 * q] + d[r1 + 2 * q + 1]));
                    }
                }
            }
            (Tensor::new(&[c, ho, wo], out)?, h, w)
        };
        Ok(self.push(value, Op::AvgPool2 { x: ix, h, w }, &[ix]))
    }

    /// Global average pooling of `[c, h, w]` to `[c]`.
    pub fn mean_pool_spatial(&self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (value, hw) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            if v.shape().len() != 3 {
                return Err(shape_err("mean_pool_spatial", format!("{:?}", v.shape())));
            }
            let hw = v.shape()[1] * v.shape()[2];
            let data = v
                .data()
                .chunks(hw)
                .map(|c| c.iter().sum::<f64>() / hw as f64)
                .collect();
            (Tensor::vector(data), hw)
        };
        Ok(self.push(value, Op::MeanPoolSpatial { x: ix, hw }, &[ix]))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("l1_loss", a, b)?;
        let v = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
            s / va.numel() as f64
        };
        Ok(self.push(Tensor::scalar(v), Op::L1Loss(ia, ib), &[ia, ib]))
    }

    /// Records a custom operation whose forward value has already been
    /// computed by the caller.
    pub fn custom(&self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|v| self.idx(*v)).collect::<Result<_>>()?;
        Ok(self.push(
            value,
            Op::Custom {
                inputs: idx.clone(),
                op,
            },
            &idx,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let nodes = self.nodes.into_inner();
        if nodes[li].value.numel() != 1 {
            return Err(Error::NotScalar(nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[li] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            })
            .collect();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |j: usize, gj: Vec<f64>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => existing.iter_mut().zip(&gj).for_each(|(e, v)| *e += v),
                    slot => *slot = Some(gj),
                }
            };
            let val = |j: usize| nodes[j].value.data();
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g / y).collect());
                    acc(
                        *b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
                Op::AddRow(x, r) => {
                    let n = nodes[*r].value.numel();
                    let mut gr = vec![0.0; n];
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % n] += gv;
                    }
                    acc(*r, gr);
                    acc(*x, g);
                }
                Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
                Op::Offset(x) => acc(*x, g),
                Op::MulConst(x, c) => acc(*x, g.iter().zip(c).map(|(g, c)| g * c).collect()),
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, val(*b), true, &mut ga, 0.0);
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, val(*a), true, &g, false, &mut gb, 0.0);
                        acc(*b, gb);
                    }
                }
                Op::Transpose { x, rows, cols } => acc(*x, transpose(&g, *cols, *rows)),
                Op::Reshape(x) => acc(*x, g),
                Op::Concat {
                    inputs,
                    outer,
                    chunks,
                } => {
                    let total: usize = chunks.iter().sum();
                    let mut offset = 0;
                    for (&j, &c) in inputs.iter().zip(chunks) {
                        let mut gj = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            gj.extend_from_slice(&g[o * total + offset..o * total + offset + c]);
                        }
                        acc(j, gj);
                        offset += c;
                    }
                }
                Op::Slice {
                    x,
                    outer,
                    in_chunk,
                    start,
                    len,
                } => {
                    let mut gx = vec![0.0; outer * in_chunk];
                    for o in 0..*outer {
                        gx[o * in_chunk + start..o * in_chunk + start + len]
                            .copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    acc(*x, gx);
                }
                Op::GatherRows {
                    x,
                    indices,
                    row_len,
                } => {
                    let mut gx = vec![0.0; nodes[*x].value.numel()];
                    for (k, &r) in indices.iter().enumerate() {
                        for c in 0..*row_len {
                            gx[r * row_len + c] += g[k * row_len + c];
                        }
                    }
                    acc(*x, gx);
                }
                Op::Relu(x) => acc(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                ),
                Op::Sigmoid(x) => acc(
                    *x,
                    g.iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                ),
                Op::Softmax { x, n } => {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(*n).zip(y.chunks(*n)).zip(gx.chunks_mut(*n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; nodes[*x].value.numel()]),
                Op::Mean(x) => {
                    let n = nodes[*x].value.numel();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let p = geom.ho * geom.wo;
                    let kk = geom.cin * geom.k * geom.k;
                    if nodes[*b].requires_grad {
                        acc(*b, g.chunks(p).map(|c| c.iter().sum()).collect());
                    }
                    if nodes[*w].requires_grad {
                        let mut gw = vec![0.0; geom.cout * kk];
                        gemm(geom.cout, p, kk, &g, false, cols, true, &mut gw, 0.0);
                        acc(*w, gw);
                    }
                    if nodes[*x].requires_grad {
                        let mut gcols = vec![0.0; kk * p];
                        gemm(kk, geom.cout, p, val(*w), true, &g, false, &mut gcols, 0.0);
                        acc(*x, col2im(&gcols, geom));
                    }
                }
                Op::AvgPool2 { x, h, w } => {
                    let (h, w) = (*h, *w);
                    let (ho, wo) = (h / 2, w / 2);
                    let c = g.len() / (ho * wo);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for r in 0..ho {
                            for q in 0..wo {
                                let v = 0.25 * g[(ch * ho + r) * wo + q];
                                let base = ch * h * w;
                                for (dr, dq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    gx[base + (2 * r + dr) * w + 2 * q + dq] += v;
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::MeanPoolSpatial { x, hw } => {
                    let gx = g
                        .iter()
                        .flat_map(|gc| std::iter::repeat_n(gc / *hw as f64, *hw))
                        .collect();
                    acc(*x, gx);
                }
                Op::L1Loss(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let n = va.len() as f64;
                    let ga: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| {
                            let d = x - y;
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            s * g[0] / n
                        })
                        .collect();
                    acc(*b, ga.iter().map(|v| -v).collect());
                    acc(*a, ga);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&j| &nodes[j].value).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(gs.len(), inputs.len(), "{} backward arity", op.name());
                    for (&j, gj) in inputs.iter().zip(gs) {
                        if let Some(gj) = gj {
                            debug_assert_eq!(gj.len(), nodes[j].value.numel(), "{}", op.name());
                            acc(j, gj);
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for the leaf `v`; `None` for non-leaves and constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `c = op(a) * op(b) + beta * c` for row-major `op(a): [m, k]`, `op(b): [k, n]`.
/// With `trans_a` the buffer `a` holds `[k, m]`; with `trans_b`, `b` holds `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // packing overhead dominates tiny products
    if m * k * n <= 4096 {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * rsa as usize + l * csa as usize] * b[l * rsb as usize + j * csb as usize];
                }
                let cij = &mut c[i * n + j];
                *cij = if beta == 0.0 { s } else { beta * *cij + s };
            }
        }
        return;
    }
    // SAFETY: the asserted buffer lengths cover every index reachable with
    // these dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * p];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
