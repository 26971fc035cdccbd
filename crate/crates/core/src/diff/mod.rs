//! Minimal reverse-mode differentiation over shaped `f64` arrays.
//!
//! A [`Tape`] records every operation whose inputs require gradients.
//! Arrays that are not attached to a tape are plain immutable values; any
//! operation mixing them with taped arrays treats them as constants.
//! [`Tape::backward`] walks the recorded nodes once in reverse order and
//! returns a [`Gradients`] map keyed by leaf.
//!
//! The op set is closed and small (see [`ops`]); domain kernels elsewhere
//! in the crate register their own fused nodes through [`DualArray::custom`].

pub mod check;
pub mod checkpoint;
pub(crate) mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use check::{grad_check, grad_check_with, Stencil};
pub use ops::{elu, sigmoid};

/// Backward closure of a recorded node: receives the gradient of the node's
/// output and, per input, whether that input needs a gradient. Returns one
/// optional gradient per input, shaped like that input.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    len: usize,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of differentiable operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Arrays still referring to this tape must
    /// not be used for further differentiation.
    pub fn clear(&self) {
        self.inner.borrow_mut().nodes.clear();
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: DualArray) -> DualArray {
        let id = self.push(Node {
            inputs: Vec::new(),
            len: value.len(),
            backward: None,
        });
        DualArray {
            node: Some(NodeRef { tape: self.clone(), id }),
            ..value.detach()
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Reverse pass from a scalar root. Every node is visited at most once,
    /// in reverse recording order, so the result is deterministic.
    pub fn backward(&self, root: &DualArray) -> Result<Gradients> {
        let root_id = match &root.node {
            Some(n) if root.len() == 1 && n.tape.same(self) => n.id,
            _ => return Err(Error::NonScalarRoot(root.shape.to_vec())),
        };
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root_id + 1];
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            let Some(backward) = &node.backward else {
                grads[id] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let contributions = backward(&g, &needs);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(input), Some(contrib)) = (input, contrib) else {
                    continue;
                };
                debug_assert_eq!(contrib.len(), inner.nodes[*input].len);
                match &mut grads[*input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `x`, shaped like `x`. Leaves
    /// that the root does not depend on get zeros.
    pub fn get(&self, x: &DualArray) -> DualArray {
        let data = x
            .node
            .as_ref()
            .and_then(|n| self.grads.get(n.id).cloned().flatten())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        DualArray::from_parts(x.shape.to_vec(), data)
    }
}

/// Shaped row-major `f64` array, optionally attached to a [`Tape`].
#[derive(Clone)]
pub struct DualArray {
    shape: Rc<[usize]>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for DualArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualArray")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("values", &self.data)
            .finish()
    }
}

impl PartialEq for DualArray {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl DualArray {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.into(),
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::from_parts(vec![n], v)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![v; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// First value; intended for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same values, no tape attachment.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Records a custom node. `backward` maps the output gradient to one
    /// optional gradient per input (same order as `inputs`). When no input
    /// is attached to a tape the result is a constant and `backward` is
    /// dropped unused.
    pub fn custom(
        inputs: &[&DualArray],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<DualArray> {
        let mut out = DualArray::from_parts(shape, data);
        let mut tape: Option<&Tape> = None;
        for x in inputs {
            if let Some(n) = &x.node {
                match tape {
                    Some(t) if !t.same(&n.tape) => return Err(Error::invalid("operands recorded on different tapes")),
                    _ => tape = Some(&n.tape),
                }
            }
        }
        if let Some(tape) = tape {
            let id = tape.push(Node {
                inputs: inputs.iter().map(|x| x.node.as_ref().map(|n| n.id)).collect(),
                len: out.len(),
                backward: Some(Box::new(backward)),
            });
            out.node = Some(NodeRef { tape: tape.clone(), id });
        }
        Ok(out)
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.data.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_never_get_a_node() {
        let tape = Tape::new();
        let a = DualArray::vector(vec![1.0, 2.0]);
        let b = a.mul(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(DualArray::scalar(3.0));
        let y = tape.leaf(DualArray::vector(vec![1.0, 2.0]));
        let root = x.mul(&x).unwrap();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.get(&x).values(), &[6.0]);
        assert_eq!(g.get(&y).values(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(DualArray::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x),
            Err(Error::NonScalarRoot(s)) if s == vec![2]
        ));
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(DualArray::scalar(1.0));
        let b = t2.leaf(DualArray::scalar(1.0));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn shape_must_match_value_count() {
        assert!(DualArray::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(DualArray::new(vec![0], vec![]).is_err());
    }
}
