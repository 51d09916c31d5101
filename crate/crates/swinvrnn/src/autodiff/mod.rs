//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! The engine is a define-by-run tape: every operation eagerly computes its
//! value and records pullback closures onto a [`Session`]. Calling
//! [`Session::backward`] walks the tape in reverse and accumulates gradients
//! for every leaf that requires them. All math is double precision, which
//! keeps finite-difference gradient checks meaningful and makes runs
//! bit-reproducible on a single device.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub mod check;
pub mod init;
pub mod ops;

/// Dynamically shaped double-precision array, the engine's value type.
pub type Arr = ArrayD<f64>;

pub(crate) struct Edge {
    parent: usize,
    pull: Box<dyn Fn(&Arr) -> Arr>,
}

pub(crate) struct Node {
    value: Rc<Arr>,
    edges: Vec<Edge>,
    needs_grad: bool,
}

/// One forward pass: a tape of nodes plus the parameter bindings used by it.
///
/// Sessions are cheap to create and are dropped after each training step or
/// inference rollout. Parameters from the backing [`ParamStore`] are bound
/// lazily by name; binding the same name twice yields the same tensor, so a
/// parameter reused across rollout steps accumulates gradient from every use.
pub struct Session<'p> {
    nodes: RefCell<Vec<Node>>,
    params: &'p ParamStore,
    bound: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a node in a [`Session`]'s tape.
#[derive(Clone, Copy)]
pub struct Tensor<'a> {
    pub(crate) sess: &'a Session<'a>,
    pub(crate) idx: usize,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Session {
            nodes: RefCell::new(Vec::new()),
            params,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push<'a>(&'a self, value: Arr, edges: Vec<Edge>) -> Tensor<'a> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            edges.iter().any(|e| nodes[e.parent].needs_grad)
        };
        self.push_node(value, edges, needs_grad)
    }

    fn push_node<'a>(&'a self, value: Arr, edges: Vec<Edge>, needs_grad: bool) -> Tensor<'a> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            edges,
            needs_grad,
        });
        Tensor {
            sess: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable leaf (gradients will be accumulated for it).
    pub fn leaf(&self, value: Arr) -> Tensor<'_> {
        self.push_node(value, Vec::new(), true)
    }

    /// A non-differentiable input (targets, masks, noise draws).
    pub fn constant(&self, value: Arr) -> Tensor<'_> {
        self.push_node(value, Vec::new(), false)
    }

    /// Binds the named parameter from the backing store as a leaf.
    ///
    /// Panics if the name is unknown; parameter names are fixed at model
    /// construction time, so a miss is a programming error.
    pub fn param(&self, name: &str) -> Tensor<'_> {
        if let Some(&idx) = self.bound.borrow().get(name) {
            return Tensor { sess: self, idx };
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone();
        let t = self.leaf(value);
        self.bound.borrow_mut().insert(name.to_string(), t.idx);
        t
    }

    /// Value of a tensor (shared, not copied).
    pub fn value(&self, t: Tensor<'_>) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[t.idx].value)
    }

    /// Reverse pass from a scalar loss. Returns gradients for leaves.
    pub fn backward(&self, loss: Tensor<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(loss.idx + 1);
        grads.resize_with(loss.idx + 1, || None);
        grads[loss.idx] = Some(ArrayD::ones(nodes[loss.idx].value.raw_dim()));
        for i in (0..=loss.idx).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            if nodes[i].edges.is_empty() {
                continue; // leaf: keep its gradient
            }
            let gi = grads[i].take().expect("present by check above");
            for e in &nodes[i].edges {
                if !nodes[e.parent].needs_grad {
                    continue;
                }
                let contrib = (e.pull)(&gi);
                debug_assert_eq!(
                    contrib.shape(),
                    nodes[e.parent].value.shape(),
                    "pullback shape mismatch"
                );
                match grads[e.parent].as_mut() {
                    Some(acc) => *acc += &contrib,
                    None => grads[e.parent] = Some(contrib),
                }
            }
        }
        Grads { grads }
    }

    /// Gradients of all bound parameters after a backward pass.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, &idx) in self.bound.borrow().iter() {
            if let Some(g) = grads.grads.get(idx).and_then(|g| g.as_ref()) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Leaf gradients produced by [`Session::backward`].
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, t: Tensor<'_>) -> Option<&Arr> {
        self.grads.get(t.idx).and_then(|g| g.as_ref())
    }
}

impl<'a> Tensor<'a> {
    pub fn value(&self) -> Rc<Arr> {
        self.sess.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.sess.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        v.iter().next().copied().expect("one element")
    }
}

/// Named parameter arrays, ordered deterministically by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Duplicate names are a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Arr> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Arr)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Replaces the value of an existing parameter, checking the shape.
    pub fn set(&mut self, name: &str, value: Arr) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::shape(format!(
                        "parameter {name:?}: stored shape {:?}, new shape {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::config(format!("unknown parameter {name:?}"))),
        }
    }
}

/// Convenience constructor for shapes.
pub fn dyn_shape(shape: &[usize]) -> IxDyn {
    IxDyn(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn param_binding_is_shared() {
        let mut ps = ParamStore::new();
        ps.insert("w", arr1(&[2.0, 3.0]).into_dyn());
        let sess = Session::new(&ps);
        let a = sess.param("w");
        let b = sess.param("w");
        assert_eq!(a.idx, b.idx);
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        // loss = sum(w + w) => dloss/dw = 2
        let mut ps = ParamStore::new();
        ps.insert("w", arr1(&[1.0, 4.0]).into_dyn());
        let sess = Session::new(&ps);
        let w = sess.param("w");
        let y = ops::add(w, w);
        let loss = ops::sum_all(y);
        let grads = sess.backward(loss);
        let gw = grads.get(w).expect("grad present");
        assert_eq!(gw, &arr1(&[2.0, 2.0]).into_dyn());
    }

    #[test]
    fn constants_get_no_grad() {
        let ps = ParamStore::new();
        let sess = Session::new(&ps);
        let c = sess.constant(arr1(&[1.0]).into_dyn());
        let loss = ops::sum_all(c);
        let grads = sess.backward(loss);
        assert!(grads.get(c).is_none() || !sess.nodes.borrow()[c.idx].needs_grad);
    }
}
