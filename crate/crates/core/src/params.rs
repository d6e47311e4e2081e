//! Named parameter trees.
//!
//! Every model component lists its tensors in a fixed order under dotted
//! names. Gradient accumulation, plain gradient descent, EMA updates and the
//! checkpoint format are all written once against this listing.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub trait ParamTree<S: Scalar>: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>));

    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(S::zero()));
        z
    }

    fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn paired<'a, S: Scalar, P: ParamTree<S>>(
    a: &'a mut P,
    b: &'a P,
) -> Result<Vec<(String, &'a mut Tensor<S>, &'a Tensor<S>)>> {
    let other = b.named();
    let mine = a.named_mut();
    if mine.len() != other.len() {
        return Err(Error::Shape(format!(
            "parameter trees differ: {} vs {} tensors",
            mine.len(),
            other.len()
        )));
    }
    mine.into_iter()
        .zip(other)
        .map(|((n, t), (m, o))| {
            if n != m || t.dims() != o.dims() {
                Err(Error::Shape(format!(
                    "parameter `{n}` {:?} does not match `{m}` {:?}",
                    t.dims(),
                    o.dims()
                )))
            } else {
                Ok((n, t, o))
            }
        })
        .collect()
}

/// `acc += alpha · other`, tensor by tensor.
pub fn add_scaled<S: Scalar, P: ParamTree<S>>(acc: &mut P, alpha: S, other: &P) -> Result<()> {
    for (_, a, b) in paired(acc, other)? {
        a.axpy(alpha, b)?;
    }
    Ok(())
}

/// One plain gradient-descent step, `θ ← θ − lr · g`.
pub fn sgd_step<S: Scalar, P: ParamTree<S>>(params: &mut P, grads: &P, lr: S) -> Result<()> {
    add_scaled(params, -lr, grads)
}

/// `θ_t ← m · θ_t + (1 − m) · θ_s`.
pub fn ema_update<S: Scalar, P: ParamTree<S>>(teacher: &mut P, student: &P, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    let m = S::lit(momentum);
    let one_minus = S::lit(1.0 - momentum);
    for (_, t, s) in paired(teacher, student)? {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + one_minus * b;
        }
    }
    Ok(())
}

/// Largest absolute entry over the whole tree.
pub fn max_abs<S: Scalar, P: ParamTree<S>>(p: &P) -> f64 {
    p.named()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .fold(0.0, |m, v| m.max(v.as_f64().abs()))
}

/// A bare list of named tensors, handy in tests and for checkpoint loading.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors<S> {
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamTree<S> for NamedTensors<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (n, t) in &self.entries {
            f(join(prefix, n), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        for (n, t) in &mut self.entries {
            f(join(prefix, n), t);
        }
    }
}
