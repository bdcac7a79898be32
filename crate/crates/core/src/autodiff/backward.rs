use std::collections::HashMap;

use super::ops::{Op, OpKind};
use super::{Array, Mode, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamVars;

#[cfg(any(test, feature = "fault-injection"))]
thread_local! {
    static FAULT: std::cell::Cell<Option<OpKind>> = const { std::cell::Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` deliberately corrupted (scaled by
/// 1.5) on this thread. Negative control for gradient checking.
#[cfg(any(test, feature = "fault-injection"))]
pub fn with_fault<T>(kind: OpKind, f: impl FnOnce() -> T) -> T {
    let prev = FAULT.with(|c| c.replace(Some(kind)));
    let out = f();
    FAULT.with(|c| c.set(prev));
    out
}

fn fault_active(kind: OpKind) -> bool {
    #[cfg(any(test, feature = "fault-injection"))]
    {
        FAULT.with(|c| c.get()) == Some(kind)
    }
    #[cfg(not(any(test, feature = "fault-injection")))]
    {
        let _ = kind;
        false
    }
}

fn mask(x: &Array, keep: impl Fn(f64) -> bool) -> Tensor {
    Tensor::from(x.map(|v| if keep(v) { 1.0 } else { 0.0 }))
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Vector-Jacobian products of one recorded op. `needs[i]` marks the inputs
/// whose gradient is wanted; the others come back as `None`.
fn vjp(op: &Op, inputs: &[Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let x = &inputs[0];
    let single = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), if want(1) { Some(g.neg()?) } else { None }]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&inputs[1])?) } else { None },
            if want(1) { Some(g.mul(&inputs[0])?) } else { None },
        ]),
        Op::Div => {
            let b = &inputs[1];
            Ok(vec![
                if want(0) { Some(g.div(b)?) } else { None },
                if want(1) {
                    Some(g.mul(out)?.div(b)?.neg()?)
                } else {
                    None
                },
            ])
        }
        Op::Scale(c) => single(g.scale(*c)),
        Op::Shift => single(Ok(g.clone())),
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) {
                    Some(g.matmul(&b.transpose()?)?)
                } else {
                    None
                },
                if want(1) {
                    Some(a.transpose()?.matmul(g)?)
                } else {
                    None
                },
            ])
        }
        Op::Transpose => single(g.transpose()),
        Op::Relu => single(g.mul(&mask(x.value(), |v| v > 0.0))),
        Op::Sigmoid => single(out.mul(&out.neg()?.shift(1.0)?)?.mul(g)),
        Op::Exp => single(g.mul(out)),
        Op::Log => single(g.div(x)),
        Op::Pow(p) => single(x.pow(p - 1.0)?.scale(*p)?.mul(g)),
        Op::ClampMin(c) => {
            let c = *c;
            single(g.mul(&mask(x.value(), |v| v > c)))
        }
        Op::Sum => single(g.broadcast_to(x.shape())),
        Op::Broadcast => single(g.sum()?.reshape(x.shape())),
        Op::SumAxis(axis) => single(g.broadcast_axis(*axis, x.shape()[*axis])),
        Op::BroadcastAxis(axis) => single(g.sum_axis(*axis)),
        Op::Reshape => single(g.reshape(x.shape())),
        Op::Permute(perm) => single(g.permute(&inverse_perm(perm))),
        Op::Gather(index) => single(g.scatter_add(index.clone(), x.shape())),
        Op::ScatterAdd(index) => single(g.gather(index.clone(), x.shape())),
        Op::Conv2d(pad_h, pad_w) => {
            let w = &inputs[1];
            let (kh, kw) = (w.shape()[2] as isize, w.shape()[3] as isize);
            let gx = if want(0) {
                Some(g.conv2d_padded(&w.flip_kernel()?, (kh - 1 - pad_h, kw - 1 - pad_w))?)
            } else {
                None
            };
            let gw = if want(1) {
                let xt = x.permute(&[1, 0, 2, 3])?;
                let gt = g.permute(&[1, 0, 2, 3])?;
                Some(xt.conv2d_padded(&gt, (*pad_h, *pad_w))?.permute(&[1, 0, 2, 3])?)
            } else {
                None
            };
            Ok(vec![gx, gw])
        }
    }
}

/// Gradients of the scalar `root` with respect to each tensor in `wrt`.
///
/// In a [`Mode::HigherOrder`] graph the returned gradients are recorded on the
/// same graph and can be differentiated again; otherwise they are detached.
/// A `wrt` tensor that `root` does not depend on gets a zero gradient.
pub fn grad(root: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
    let Some(root_node) = &root.node else {
        return Err(Error::Usage("backward root is not on a graph".into()));
    };
    if root.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward root must be scalar, got shape {:?}",
            root.shape()
        )));
    }
    let graph = root_node.graph.clone();
    let root_id = root_node.id;
    let mut targets: HashMap<usize, Vec<usize>> = HashMap::new();
    for (slot, t) in wrt.iter().enumerate() {
        match &t.node {
            Some(n) if n.graph.same(&graph) && n.requires_grad => targets.entry(n.id).or_default().push(slot),
            Some(n) if !n.graph.same(&graph) => {
                return Err(Error::Usage(format!(
                    "gradient target #{slot} belongs to a different graph"
                )))
            }
            _ => {
                return Err(Error::Usage(format!(
                    "gradient target #{slot} is detached or does not require grad"
                )))
            }
        }
    }

    let higher_order = graph.mode() == Mode::HigherOrder;
    // Which nodes lie on a path to some target.
    let leads: Vec<bool> = {
        let tape = graph.tape.borrow();
        let mut leads = vec![false; root_id + 1];
        for id in 0..=root_id {
            let node = &tape.nodes[id];
            leads[id] =
                node.requires_grad && (targets.contains_key(&id) || node.inputs.iter().any(|&i| leads[i]));
        }
        leads
    };

    let mut results: Vec<Option<Tensor>> = vec![None; wrt.len()];
    let mut grads: Vec<Option<Tensor>> = vec![None; root_id + 1];
    grads[root_id] = Some(Tensor::from(Array::ones(root.shape())));

    for id in (0..=root_id).rev() {
        if !leads[id] {
            continue;
        }
        let Some(g) = grads[id].take() else {
            continue;
        };
        if let Some(slots) = targets.get(&id) {
            for &slot in slots {
                results[slot] = Some(g.clone());
            }
        }
        let (op, input_ids) = {
            let tape = graph.tape.borrow();
            let node = &tape.nodes[id];
            (node.op.clone(), node.inputs.clone())
        };
        if input_ids.is_empty() {
            continue;
        }
        let inputs: Vec<Tensor> = input_ids.iter().map(|&i| graph.handle(i, higher_order)).collect();
        let out = graph.handle(id, higher_order);
        let needs: Vec<bool> = input_ids.iter().map(|&i| leads[i]).collect();
        let mut parts = vjp(&op, &inputs, &out, &g, &needs)?;
        if fault_active(op.kind()) {
            for p in parts.iter_mut().flatten() {
                *p = p.scale(1.5)?;
            }
        }
        for ((&input, part), need) in input_ids.iter().zip(parts).zip(needs) {
            let Some(part) = part else { continue };
            if !need {
                continue;
            }
            let part = if higher_order { part } else { part.detach() };
            grads[input] = Some(match grads[input].take() {
                None => part,
                Some(acc) => acc.add(&part)?,
            });
        }
    }

    Ok(results
        .into_iter()
        .zip(wrt)
        .map(|(r, t)| r.unwrap_or_else(|| Tensor::from(Array::zeros(t.shape()))))
        .collect())
}

/// Gradients of the scalar `root` with respect to every named tensor in `wrt`.
pub fn backward(root: &Tensor, wrt: &ParamVars) -> Result<ParamVars> {
    for (name, t) in wrt.iter() {
        if !t.requires_grad() {
            return Err(Error::Usage(format!(
                "parameter `{name}` is detached from the graph"
            )));
        }
    }
    let tensors: Vec<&Tensor> = wrt.iter().map(|(_, t)| t).collect();
    let grads = grad(root, &tensors)?;
    Ok(wrt.iter().map(|(name, _)| name.to_string()).zip(grads).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn scalar_grad(mode: Mode, x0: f64, f: impl Fn(&Tensor) -> Result<Tensor>) -> f64 {
        let g = Graph::new(mode);
        let x = g.param(Array::scalar(x0));
        let y = f(&x).unwrap();
        grad(&y, &[&x]).unwrap()[0].item().unwrap()
    }

    #[test]
    fn square_at_three() {
        let d = scalar_grad(Mode::FirstOrder, 3.0, |x| x.pow(2.0));
        assert_eq!(d, 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new(Mode::HigherOrder);
        let x = g.param(Array::scalar(2.0));
        let y = x.pow(3.0).unwrap();
        let dy = grad(&y, &[&x]).unwrap().remove(0);
        assert!(dy.requires_grad());
        assert_eq!(dy.item().unwrap(), 12.0);
        let d2y = grad(&dy, &[&x]).unwrap().remove(0);
        assert_eq!(d2y.item().unwrap(), 12.0);
    }

    #[test]
    fn first_order_gradients_are_detached() {
        let g = Graph::new(Mode::FirstOrder);
        let x = g.param(Array::scalar(2.0));
        let y = x.pow(3.0).unwrap();
        let before = g.len();
        let dy = grad(&y, &[&x]).unwrap().remove(0);
        assert!(!dy.is_attached());
        assert_eq!(g.len(), before);
    }

    #[test]
    fn reused_input_accumulates() {
        let d = scalar_grad(Mode::FirstOrder, 1.5, |x| x.mul(x)?.add(x));
        assert_eq!(d, 4.0);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let g = Graph::new(Mode::FirstOrder);
        let x = g.param(Array::vector(vec![1.0, 2.0]));
        let y = x.scale(2.0).unwrap();
        assert!(matches!(grad(&y, &[&x]), Err(Error::Usage(_))));
    }

    #[test]
    fn detached_parameter_is_named() {
        let g = Graph::new(Mode::FirstOrder);
        let mut vars = ParamVars::new();
        vars.insert("w", g.param(Array::scalar(1.0)));
        vars.insert("b", Tensor::scalar(2.0));
        let y = vars.get("w").unwrap().mul(vars.get("b").unwrap()).unwrap();
        match backward(&y, &vars) {
            Err(Error::Usage(msg)) => assert!(msg.contains("`b`"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unrelated_target_gets_zero() {
        let g = Graph::new(Mode::FirstOrder);
        let x = g.param(Array::scalar(1.0));
        let z = g.param(Array::vector(vec![1.0, 1.0]));
        let y = x.exp().unwrap();
        let grads = grad(&y, &[&x, &z]).unwrap();
        assert_eq!(grads[1].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn clamp_min_gates_gradient() {
        let at = |x0: f64| scalar_grad(Mode::FirstOrder, x0, |x| x.clamp_min(0.5));
        assert_eq!(at(0.2), 0.0);
        assert_eq!(at(0.9), 1.0);
    }

    #[test]
    fn fault_injection_changes_gradient() {
        let clean = scalar_grad(Mode::FirstOrder, 0.3, |x| x.sigmoid());
        let faulty = with_fault(OpKind::Sigmoid, || {
            scalar_grad(Mode::FirstOrder, 0.3, |x| x.sigmoid())
        });
        assert!((faulty / clean - 1.5).abs() < 1e-12);
    }
}
