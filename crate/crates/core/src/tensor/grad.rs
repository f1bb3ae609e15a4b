use super::{BinaryKind, Op, Tape, Tensor, UnaryKind};
use crate::error::{Error, Result};

/// Reverse-mode gradient of a single-element `scalar` with respect to `wrt`.
///
/// The vector-Jacobian products are emitted as ordinary ops on the same tape,
/// so every returned gradient is itself differentiable. A `wrt` tensor the
/// scalar does not depend on gets a zero gradient.
pub fn grad(scalar: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
    if scalar.numel() != 1 {
        return Err(Error::NonScalar { shape: scalar.shape.clone() });
    }
    let tape = scalar.tape().ok_or(Error::Detached)?;
    let scalar_id = scalar.node.as_ref().unwrap().id;

    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        match &w.node {
            None => return Err(Error::Detached),
            Some(r) => {
                if !std::rc::Rc::ptr_eq(&tape.inner, &r.tape.inner) {
                    return Err(Error::TapeMismatch);
                }
                wrt_ids.push(r.id);
            }
        }
    }

    // Snapshot the op structure up to the scalar so new VJP nodes can be
    // pushed while walking.
    let ops: Vec<Op> = {
        let inner = tape.inner.borrow();
        inner.nodes[..=scalar_id].iter().map(|n| n.op.clone()).collect()
    };

    let mut grads: Vec<Option<Tensor>> = vec![None; scalar_id + 1];
    grads[scalar_id] = Some(Tensor::ones(scalar.shape()));

    for id in (0..=scalar_id).rev() {
        let Some(g) = grads[id].clone() else { continue };
        match &ops[id] {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let vjp = unary_vjp(*kind, &g, &tape, *a, id)?;
                accumulate(&mut grads, *a, vjp)?;
            }
            Op::Clamp { input, lo, hi } => {
                let x = tape.tensor_at(*input);
                let mask: Vec<f64> = x
                    .values()
                    .iter()
                    .map(|&v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 })
                    .collect();
                let mask = Tensor::new(x.shape(), mask)?;
                accumulate(&mut grads, *input, g.mul(&mask)?)?;
            }
            Op::Binary(kind, a, b) => {
                let (ga, gb) = binary_vjp(*kind, &g, &tape, *a, *b, id)?;
                accumulate(&mut grads, *a, ga)?;
                accumulate(&mut grads, *b, gb)?;
            }
            Op::Matmul(a, b) => {
                let at = tape.tensor_at(*a);
                let bt = tape.tensor_at(*b);
                accumulate(&mut grads, *a, g.matmul(&bt.t()?)?)?;
                accumulate(&mut grads, *b, at.t()?.matmul(&g)?)?;
            }
            Op::Transpose(a) => {
                accumulate(&mut grads, *a, g.t()?)?;
            }
            Op::Sum { input, axes, keep_dims } => {
                let in_shape = tape.tensor_at(*input).shape().to_vec();
                let gk = if *keep_dims {
                    g.clone()
                } else {
                    let keep_shape: Vec<usize> = (0..in_shape.len())
                        .map(|i| if axes.contains(&i) { 1 } else { in_shape[i] })
                        .collect();
                    g.reshape(&keep_shape)?
                };
                accumulate(&mut grads, *input, gk.broadcast_to(&in_shape)?)?;
            }
            Op::BroadcastTo { input } => {
                let in_shape = tape.tensor_at(*input).shape().to_vec();
                accumulate(&mut grads, *input, unbroadcast(&g, &in_shape)?)?;
            }
            Op::Reshape { input } => {
                let in_shape = tape.tensor_at(*input).shape().to_vec();
                accumulate(&mut grads, *input, g.reshape(&in_shape)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0usize;
                for &p in parts {
                    let shape = tape.tensor_at(p).shape().to_vec();
                    let w = *shape.last().unwrap();
                    accumulate(&mut grads, p, g.narrow_cols(off, w)?)?;
                    off += w;
                }
            }
            Op::NarrowCols { input, start, len } => {
                let in_shape = tape.tensor_at(*input).shape().to_vec();
                let cols = *in_shape.last().unwrap();
                let mut lead = in_shape.clone();
                let lead_last = lead.len() - 1;
                let mut parts: Vec<Tensor> = Vec::new();
                if *start > 0 {
                    lead[lead_last] = *start;
                    parts.push(Tensor::zeros(&lead));
                }
                parts.push(g.clone());
                if start + len < cols {
                    lead[lead_last] = cols - start - len;
                    parts.push(Tensor::zeros(&lead));
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                accumulate(&mut grads, *input, Tensor::concat_cols(&refs)?)?;
            }
            Op::StackSteps(parts) => {
                for (t, &p) in parts.iter().enumerate() {
                    accumulate(&mut grads, p, g.slice_step(t)?)?;
                }
            }
            Op::SliceStep { input, step } => {
                let in_shape = tape.tensor_at(*input).shape().to_vec();
                let (b, steps, d) = (in_shape[0], in_shape[1], in_shape[2]);
                let zero = Tensor::zeros(&[b, d]);
                let parts: Vec<&Tensor> =
                    (0..steps).map(|t| if t == *step { &g } else { &zero }).collect();
                accumulate(&mut grads, *input, Tensor::stack_steps(&parts)?)?;
            }
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for (w, &wid) in wrt.iter().zip(&wrt_ids) {
        let g = grads
            .get(wid)
            .and_then(|o| o.clone())
            .unwrap_or_else(|| Tensor::zeros(w.shape()));
        out.push(if g.is_taped() { g } else { tape.watch(&g) });
    }
    Ok(out)
}

fn unary_vjp(kind: UnaryKind, g: &Tensor, tape: &Tape, input: usize, out_id: usize) -> Result<Tensor> {
    let out = tape.tensor_at(out_id);
    let x = tape.tensor_at(input);
    match kind {
        UnaryKind::Neg => g.neg(),
        UnaryKind::Exp => g.mul(&out),
        UnaryKind::Log => g.div(&x),
        UnaryKind::Tanh => {
            let go = g.mul(&out)?;
            g.sub(&go.mul(&out)?)
        }
        UnaryKind::Sigmoid => {
            let go = g.mul(&out)?;
            go.sub(&go.mul(&out)?)
        }
        UnaryKind::Softplus => g.mul(&x.sigmoid()?),
        UnaryKind::Square => g.mul(&x)?.mul_scalar(2.0),
        UnaryKind::Sqrt => g.div(&out.mul_scalar(2.0)?),
        UnaryKind::Relu => {
            let mask: Vec<f64> = x.values().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            g.mul(&Tensor::new(x.shape(), mask)?)
        }
    }
}

fn binary_vjp(
    kind: BinaryKind,
    g: &Tensor,
    tape: &Tape,
    a: usize,
    b: usize,
    out_id: usize,
) -> Result<(Tensor, Tensor)> {
    match kind {
        BinaryKind::Add => Ok((g.clone(), g.clone())),
        BinaryKind::Sub => Ok((g.clone(), g.neg()?)),
        BinaryKind::Mul => {
            let at = tape.tensor_at(a);
            let bt = tape.tensor_at(b);
            Ok((g.mul(&bt)?, g.mul(&at)?))
        }
        BinaryKind::Div => {
            let bt = tape.tensor_at(b);
            let out = tape.tensor_at(out_id);
            let ga = g.div(&bt)?;
            let gb = g.mul(&out)?.div(&bt)?.neg()?;
            Ok((ga, gb))
        }
    }
}

fn unbroadcast(g: &Tensor, target: &[usize]) -> Result<Tensor> {
    let extra = g.shape().len() - target.len();
    let mut t = if extra > 0 {
        let lead: Vec<usize> = (0..extra).collect();
        g.sum_axes(&lead)?
    } else {
        g.clone()
    };
    let mut axes = Vec::new();
    for i in 0..target.len() {
        if target[i] == 1 && t.shape()[i] != 1 {
            axes.push(i);
        }
    }
    if !axes.is_empty() {
        t = t.sum_axes_keep(&axes)?;
    }
    if t.shape() != target {
        t = t.reshape(target)?;
    }
    Ok(t)
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, vjp: Tensor) -> Result<()> {
    grads[id] = Some(match grads[id].take() {
        None => vjp,
        Some(prev) => prev.add(&vjp)?,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_square_at_3() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![3.0]).unwrap();
        let y = x.square().unwrap();
        let g = grad(&y, &[&x]).unwrap();
        assert_eq!(g[0].values(), &[6.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![2.0]).unwrap();
        let y = x.square().unwrap().mul(&x).unwrap();
        let g1 = grad(&y, &[&x]).unwrap();
        assert_eq!(g1[0].values(), &[12.0]);
        let g2 = grad(&g1[0], &[&x]).unwrap();
        assert_eq!(g2[0].values(), &[12.0]);
    }

    #[test]
    fn grad_of_independent_leaf_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![3.0]).unwrap();
        let z = tape.leaf(&[2], vec![1.0, 1.0]).unwrap();
        let y = x.square().unwrap();
        let g = grad(&y, &[&z]).unwrap();
        assert_eq!(g[0].values(), &[0.0, 0.0]);
        assert!(g[0].is_taped());
    }

    #[test]
    fn grad_rejects_non_scalar_and_detached() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(grad(&x, &[&x]), Err(Error::NonScalar { .. })));
        let c = Tensor::scalar(1.0);
        assert!(matches!(grad(&c, &[&c]), Err(Error::Detached)));
        let y = x.sum_all().unwrap();
        assert!(matches!(grad(&y, &[&c]), Err(Error::Detached)));
        let other = Tape::new();
        let w = other.leaf(&[1], vec![1.0]).unwrap();
        assert!(matches!(grad(&y, &[&w]), Err(Error::TapeMismatch)));
    }

    #[test]
    fn grad_is_linear_over_sums() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = x.square().unwrap().sum_all().unwrap();
        let h = x.tanh().unwrap().sum_all().unwrap();
        let both = f.add(&h).unwrap();
        let g_both = grad(&both, &[&x]).unwrap();
        let gf = grad(&f, &[&x]).unwrap();
        let gh = grad(&h, &[&x]).unwrap();
        for i in 0..3 {
            let sum = gf[0].values()[i] + gh[0].values()[i];
            assert!((g_both[0].values()[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradient() {
        // f = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones
        let tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.leaf(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let f = a.matmul(&b).unwrap().sum_all().unwrap();
        let g = grad(&f, &[&a, &b]).unwrap();
        assert_eq!(g[0].values(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g[1].values(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn broadcast_gradient_sums_back() {
        let tape = Tape::new();
        let col = tape.leaf(&[2, 1], vec![1.0, 2.0]).unwrap();
        let x = tape.leaf(&[2, 3], vec![1.0; 6]).unwrap();
        let f = x.mul(&col).unwrap().sum_all().unwrap();
        let g = grad(&f, &[&col]).unwrap();
        assert_eq!(g[0].shape(), &[2, 1]);
        assert_eq!(g[0].values(), &[3.0, 3.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(&[4], vec![0.1, 0.7, -0.3, 1.9]).unwrap();
            let y = x.tanh().unwrap().square().unwrap().sum_all().unwrap();
            let g = grad(&y, &[&x]).unwrap();
            (y.item().unwrap(), g[0].values().to_vec())
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1.to_bits(), y2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn slice_and_stack_gradients() {
        let tape = Tape::new();
        let seq = tape.leaf(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mid = seq.slice_step(1).unwrap();
        let f = mid.square().unwrap().sum_all().unwrap();
        let g = grad(&f, &[&seq]).unwrap();
        assert_eq!(g[0].values(), &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
    }
}
