use std::rc::Rc;

use super::{broadcast_shape, numel_of, BinaryKind, Op, Tape, TapeRef, Tensor, UnaryKind};
use crate::error::{Error, Result};

fn finish(
    tape: Option<&Tape>,
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    name: &'static str,
) -> Result<Tensor> {
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: name });
    }
    let values = Rc::new(values);
    match tape {
        Some(t) => {
            let id = t.push(op, shape.clone(), Rc::clone(&values));
            Ok(Tensor {
                shape,
                values,
                node: Some(TapeRef { tape: t.clone(), id }),
            })
        }
        None => Ok(Tensor { shape, values, node: None }),
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major strides of `shape`, with 0 on axes of extent 1 so the same
/// strides serve broadcast reads.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

fn broadcast_values(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let rank = dst_shape.len();
    let strides = broadcast_strides(src_shape, rank);
    let n = numel_of(dst_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; rank];
    let mut src_idx = 0usize;
    for slot in out.iter_mut() {
        *slot = src[src_idx];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            src_idx += strides[ax];
            if coords[ax] < dst_shape[ax] {
                break;
            }
            src_idx -= dst_shape[ax] * strides[ax];
            coords[ax] = 0;
        }
    }
    out
}

impl Tensor {
    fn unary(&self, kind: UnaryKind, name: &'static str) -> Result<Tensor> {
        match kind {
            UnaryKind::Log => {
                if self.values.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: "log requires strictly positive input".into(),
                    });
                }
            }
            UnaryKind::Sqrt => {
                if self.values.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: "sqrt requires strictly positive input".into(),
                    });
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid_f,
            UnaryKind::Softplus => softplus_f,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
        };
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::Unary(kind, self.node_on(t)?),
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, self.shape.clone(), values, name)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Neg, "neg")
    }
    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Exp, "exp")
    }
    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Log, "log")
    }
    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Tanh, "tanh")
    }
    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Softplus, "softplus")
    }
    pub fn square(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Square, "square")
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Sqrt, "sqrt")
    }
    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnaryKind::Relu, "relu")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let values: Vec<f64> = self.values.iter().map(|v| v.clamp(lo, hi)).collect();
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::Clamp { input: self.node_on(t)?, lo, hi },
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, self.shape.clone(), values, "clamp")
    }

    fn binary(&self, other: &Tensor, kind: BinaryKind, name: &'static str) -> Result<Tensor> {
        self.joint_tape(other)?;
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or(Error::ShapeMismatch {
            op: name,
            left: self.shape.clone(),
            right: other.shape.clone(),
        })?;
        let a = self.broadcast_to(&out_shape)?;
        let b = other.broadcast_to(&out_shape)?;
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let values: Vec<f64> = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tape = a.joint_tape(&b)?;
        let op = match &tape {
            Some(t) => Op::Binary(kind, a.node_on(t)?, b.node_on(t)?),
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, out_shape, values, name)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add, "add")
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub, "sub")
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul, "mul")
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn add_scalar(&self, v: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(v))
    }
    pub fn sub_scalar(&self, v: f64) -> Result<Tensor> {
        self.sub(&Tensor::scalar(v))
    }
    pub fn mul_scalar(&self, v: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(v))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let av = &self.values;
        let bv = &other.values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aip * b;
                }
            }
        }
        let tape = self.joint_tape(other)?;
        let op = match &tape {
            Some(t) => Op::Matmul(self.node_on(t)?, other.node_on(t)?),
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, vec![m, n], out, "matmul")
    }

    /// 2-d transpose.
    pub fn t(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.values[i * n + j];
            }
        }
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::Transpose(self.node_on(t)?),
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, vec![n, m], out, "transpose")
    }

    fn check_axes(&self, axes: &[usize], name: &'static str) -> Result<()> {
        if axes.is_empty() {
            return Err(Error::InvalidAxis { axis: usize::MAX, shape: self.shape.clone() });
        }
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= self.shape.len() {
                return Err(Error::InvalidAxis { axis: ax, shape: self.shape.clone() });
            }
            if axes[..i].contains(&ax) {
                return Err(Error::InvalidAxis { axis: ax, shape: self.shape.clone() });
            }
        }
        let _ = name;
        Ok(())
    }

    pub(crate) fn sum_axes_impl(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        self.check_axes(axes, "sum")?;
        let rank = self.shape.len();
        let reduced: Vec<bool> = (0..rank).map(|i| axes.contains(&i)).collect();
        let keep_shape: Vec<usize> = (0..rank)
            .map(|i| if reduced[i] { 1 } else { self.shape[i] })
            .collect();
        let out_shape: Vec<usize> = if keep_dims {
            keep_shape.clone()
        } else {
            (0..rank).filter(|&i| !reduced[i]).map(|i| self.shape[i]).collect()
        };
        let mut out = vec![0.0; numel_of(&keep_shape)];
        // output strides per input axis; 0 on reduced axes
        let mut ostr = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            if !reduced[i] {
                ostr[i] = acc;
            }
            acc *= keep_shape[i];
        }
        let mut coords = vec![0usize; rank];
        let mut oi = 0usize;
        for &v in self.values.iter() {
            out[oi] += v;
            for ax in (0..rank).rev() {
                coords[ax] += 1;
                oi += ostr[ax];
                if coords[ax] < self.shape[ax] {
                    break;
                }
                oi -= self.shape[ax] * ostr[ax];
                coords[ax] = 0;
            }
        }
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::Sum { input: self.node_on(t)?, axes: axes.to_vec(), keep_dims },
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, out_shape, out, "sum")
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.sum_axes_impl(axes, false)
    }

    pub(crate) fn sum_axes_keep(&self, axes: &[usize]) -> Result<Tensor> {
        self.sum_axes_impl(axes, true)
    }

    /// Sum over all axes to a scalar of shape `[1]`.
    pub fn sum_all(&self) -> Result<Tensor> {
        if self.shape.is_empty() {
            return self.reshape(&[1]);
        }
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.sum_axes(&axes)?.reshape(&[1])
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.check_axes(axes, "mean")?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        if count == 0 {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        self.sum_axes(axes)?.mul_scalar(1.0 / count as f64)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        self.sum_all()?.mul_scalar(1.0 / self.numel() as f64)
    }

    /// Euclidean norm over `axes`. A tiny floor inside the square root keeps
    /// the gradient finite for all-zero slices without moving values at
    /// ordinary magnitudes.
    pub fn l2_norm_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.square()?.sum_axes(axes)?.add_scalar(1e-18)?.sqrt()
    }

    pub fn l2_norm_all(&self) -> Result<Tensor> {
        self.square()?.sum_all()?.add_scalar(1e-18)?.sqrt()
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let ok = broadcast_shape(&self.shape, shape).map(|s| s == shape).unwrap_or(false);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let values = broadcast_values(&self.values, &self.shape, shape);
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::BroadcastTo { input: self.node_on(t)? },
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, shape.to_vec(), values, "broadcast_to")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::Reshape { input: self.node_on(t)? },
            None => Op::Leaf,
        };
        finish(
            tape.as_ref(),
            op,
            shape.to_vec(),
            self.values.as_ref().clone(),
            "reshape",
        )
    }

    /// Concatenates along the last axis. All parts must agree on the leading axes.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidConfig("concat of zero tensors".into()));
        }
        let lead = &parts[0].shape[..parts[0].shape.len() - 1];
        let mut cols = 0usize;
        for p in parts {
            if p.shape.is_empty() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            cols += p.shape[p.shape.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * cols];
        let mut col_off = 0usize;
        for p in parts {
            let c = p.shape[p.shape.len() - 1];
            for r in 0..rows {
                out[r * cols + col_off..r * cols + col_off + c]
                    .copy_from_slice(&p.values[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let mut tape: Option<Tape> = None;
        for p in parts {
            if let Some(t) = p.tape() {
                match &tape {
                    Some(existing) if !existing.same_tape(&t) => return Err(Error::TapeMismatch),
                    None => tape = Some(t),
                    _ => {}
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.push(cols);
        let op = match &tape {
            Some(t) => {
                let ids: Result<Vec<usize>> = parts.iter().map(|p| p.node_on(t)).collect();
                Op::ConcatCols(ids?)
            }
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, shape, out, "concat_cols")
    }

    /// Slices `len` entries starting at `start` along the last axis.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "narrow_cols",
                left: self.shape.clone(),
                right: vec![start, len],
            });
        }
        let c = self.shape[self.shape.len() - 1];
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "narrow_cols",
                left: self.shape.clone(),
                right: vec![start, len],
            });
        }
        let rows = self.numel() / c.max(1);
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&self.values[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::NarrowCols { input: self.node_on(t)?, start, len },
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, shape, out, "narrow_cols")
    }

    /// Stacks per-step `[batch, d]` tensors into `[batch, T, d]`.
    pub fn stack_steps(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidConfig("stack of zero tensors".into()));
        }
        let first = &parts[0].shape;
        if first.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "stack_steps",
                left: first.clone(),
                right: vec![],
            });
        }
        let (b, d) = (first[0], first[1]);
        for p in parts {
            if p.shape != *first {
                return Err(Error::ShapeMismatch {
                    op: "stack_steps",
                    left: first.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let steps = parts.len();
        let mut out = vec![0.0; b * steps * d];
        for (t, p) in parts.iter().enumerate() {
            for bi in 0..b {
                out[bi * steps * d + t * d..bi * steps * d + (t + 1) * d]
                    .copy_from_slice(&p.values[bi * d..(bi + 1) * d]);
            }
        }
        let mut tape: Option<Tape> = None;
        for p in parts {
            if let Some(t) = p.tape() {
                match &tape {
                    Some(existing) if !existing.same_tape(&t) => return Err(Error::TapeMismatch),
                    None => tape = Some(t),
                    _ => {}
                }
            }
        }
        let op = match &tape {
            Some(t) => {
                let ids: Result<Vec<usize>> = parts.iter().map(|p| p.node_on(t)).collect();
                Op::StackSteps(ids?)
            }
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, vec![b, steps, d], out, "stack_steps")
    }

    /// Extracts step `t` of a `[batch, T, d]` tensor as `[batch, d]`.
    pub fn slice_step(&self, step: usize) -> Result<Tensor> {
        if self.shape.len() != 3 || step >= self.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_step",
                left: self.shape.clone(),
                right: vec![step],
            });
        }
        let (b, steps, d) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            out[bi * d..(bi + 1) * d]
                .copy_from_slice(&self.values[bi * steps * d + step * d..bi * steps * d + (step + 1) * d]);
        }
        let tape = self.tape();
        let op = match &tape {
            Some(t) => Op::SliceStep { input: self.node_on(t)?, step },
            None => Op::Leaf,
        };
        finish(tape.as_ref(), op, vec![b, d], out, "slice_step")
    }
}
