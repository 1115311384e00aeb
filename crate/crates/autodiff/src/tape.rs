//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op appends a node holding its value, its parents and a backward
//! closure mapping the output gradient to one gradient per parent. Complex
//! gradients follow `G = dL/dRe + i dL/dIm`, i.e. real and imaginary parts are
//! independent real variables.

use std::collections::HashMap;

use crate::error::{AdError, Result};
use crate::tensor::{DType, Tensor};

/// `(output gradient, parent values) -> parent gradients`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    /// Real scalar count, complex entries counted twice.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.real_scalars()).sum()
    }
}

/// Per-parameter gradients. A parameter the loss never reached gets a zero
/// gradient and `detached = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
    pub detached: Vec<bool>,
}

impl ParamGrads {
    pub fn zeros(set: &ParamSet) -> Self {
        Self {
            grads: set.values.iter().map(Tensor::zeros_like).collect(),
            detached: vec![true; set.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            self.grads[i].add_assign(g);
            self.detached[i] &= other.detached[i];
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(s));
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }

    pub fn detached_names<'a>(&self, set: &'a ParamSet) -> Vec<&'a str> {
        set.ids().filter(|id| self.detached[id.0]).map(|id| set.name(id)).collect()
    }
}

/// Gradients of every tape node that the loss depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward-only tape: backward rules are dropped and
    /// [`release_since`](Self::release_since) may free intermediate values.
    pub fn inference() -> Self {
        Self { no_grad: true, ..Self::default() }
    }

    pub fn is_inference(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// On an inference tape, free the values of nodes created at or after
    /// `mark` except `keep`. No-op on a gradient tape.
    pub fn release_since(&mut self, mark: usize, keep: &[Var]) {
        if !self.no_grad {
            return;
        }
        let bound: Vec<usize> = self.params.values().copied().collect();
        for i in mark..self.nodes.len() {
            if !keep.iter().any(|k| k.0 == i) && !bound.contains(&i) {
                self.nodes[i].value = Tensor::zeros(&[0], DType::F64);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let (parents, backward) = if self.no_grad { (Vec::new(), None) } else { (parents, backward) };
        self.nodes.push(Node { value, parents, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Leaf for a parameter; binding the same id twice returns the same var.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let v = self.push(set.get(id).clone(), Vec::new(), None);
        self.params.insert(id, v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Fused op with a caller-supplied backward rule.
    ///
    /// `backward` receives the output gradient and the parent values and must
    /// return one gradient per parent with the parent's shape and dtype.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, parents.iter().map(|p| p.0).collect(), Some(backward))
    }

    /// Gradients of the scalar `loss` with respect to every reachable node.
    pub fn backward_all(&self, loss: Var) -> Result<Gradients> {
        if self.no_grad {
            return Err(AdError::Contract("backward on an inference tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 || lv.dtype() != DType::F64 {
            return Err(AdError::Contract(format!("loss must be a real scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::real(lv.shape(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = bw(&g, &parents);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape(), "gradient shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients of the scalar `loss`.
    pub fn backward(&self, loss: Var, set: &ParamSet) -> Result<ParamGrads> {
        let all = self.backward_all(loss)?;
        let mut out = ParamGrads::zeros(set);
        for (id, &n) in &self.params {
            if let Some(g) = all.wrt(Var(n)) {
                out.grads[id.0] = g.clone();
                out.detached[id.0] = false;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inference_tape_matches_and_frees() {
        let x = Tensor::real(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut set = ParamSet::new();
        let id = set.insert("x", x);
        let mut a = Tape::new();
        let mut b = Tape::inference();
        let (pa, pb) = (a.param(&set, id), b.param(&set, id));
        let mark = b.len();
        let (ya, yb) = (a.gelu(pa).unwrap(), b.gelu(pb).unwrap());
        let (za, zb) = (a.scale(ya, 3.0), b.scale(yb, 3.0));
        assert_eq!(a.value(za), b.value(zb));
        b.release_since(mark, &[zb]);
        assert!(b.value(yb).is_empty());
        assert_eq!(b.value(pb).len(), 3);
        let l = b.sum(zb).unwrap();
        assert!(b.backward(l, &set).is_err());
    }
}
