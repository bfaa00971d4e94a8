//! Named-parameter plumbing shared by the generator and discriminator.
//!
//! Model structs own plain tensors. For a differentiable forward pass
//! the tensors are interned on a [`Tape`] through a [`Binder`], which
//! either registers them as trainable leaves (recording stable names
//! for gradient collection, checkpoints and the optimizer) or freezes
//! them as constants for inference and detached evaluation. The
//! traversal order of `bind` and `for_each_tensor` must agree; tests
//! assert this for every model.

use crate::autodiff::{Gradients, Tape, Var};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Ordered (name, var) registry of the trainable leaves of one tape.
#[derive(Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Var)>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gradients in registration order; parameters the loss never
    /// reached get zeros of the right shape.
    pub fn named_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// How parameters enter a tape: trainable (named, gradient-bearing) or
/// frozen constants.
pub enum Binder<'a> {
    Trainable(&'a mut ParamRegistry),
    Frozen,
}

impl Binder<'_> {
    pub fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        match self {
            Binder::Trainable(reg) => {
                let var = tape.param(t.clone());
                reg.entries.push((name, var));
                var
            }
            Binder::Frozen => tape.constant(t.clone()),
        }
    }
}

/// Uniform access to a model's named tensors.
pub trait ParamTensors {
    fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Snapshot of all named tensors, in traversal order.
pub fn named_tensors(p: &impl ParamTensors) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.for_each_tensor("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Overwrite tensors from a named snapshot; every traversed name must
/// be present with a matching shape.
pub fn load_named(p: &mut impl ParamTensors, entries: &[(String, Tensor)]) -> crate::Result<()> {
    use std::collections::BTreeMap;
    let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    p.for_each_tensor_mut("", &mut |name, t| match map.get(name) {
        Some(src) if src.shape() == t.shape() => *t = (*src).clone(),
        Some(src) => mismatched.push(format!(
            "{} (expected {:?}, found {:?})",
            name,
            t.shape(),
            src.shape()
        )),
        None => missing.push(name.to_string()),
    });
    if !mismatched.is_empty() {
        return Err(crate::Error::Checkpoint(format!(
            "tensor shape mismatch: {}",
            mismatched.join(", ")
        )));
    }
    if !missing.is_empty() {
        return Err(crate::Error::Checkpoint(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Total scalar parameter count.
pub fn param_count(p: &impl ParamTensors) -> usize {
    let mut n = 0;
    p.for_each_tensor("", &mut |_, t| n += t.numel());
    n
}

/// (name, shape) manifest in traversal order.
pub fn manifest(p: &impl ParamTensors) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.for_each_tensor("", &mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
    out
}

/// Dense affine map `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init(inp: usize, out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: normal_tensor(rng, &[inp, out], std),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[inp, out]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Binder, prefix: &str) -> LinearVars {
        LinearVars {
            w: b.bind(tape, format!("{prefix}.w"), &self.w),
            b: b.bind(tape, format!("{prefix}.b"), &self.b),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Apply a bound linear layer on the tape.
pub fn linear_t(tape: &mut Tape, x: Var, l: &LinearVars) -> Var {
    let prod = tape.matmul(x, l.w);
    tape.add_row(prod, l.b)
}

/// Value-level application for non-tape paths.
pub fn linear_value(x: &Tensor, l: &Linear) -> Tensor {
    let mut out = x.matmul(&l.w);
    let (m, d) = (out.rows(), out.cols());
    for i in 0..m {
        for j in 0..d {
            out.data_mut()[i * d + j] += l.b.data()[j];
        }
    }
    out
}
