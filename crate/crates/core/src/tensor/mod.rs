//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Forward evaluation is eager: every operation computes its values
//! immediately and records a backward closure on the owning [`Graph`].
//! Because nodes are appended in construction order, the tape is already
//! topologically sorted and [`Var::backward`] is a single reverse sweep.
//!
//! Values are `f64` buffers behind `Arc`, so parameter tensors can be
//! shared into many per-sample graphs without copying. Graphs themselves
//! are single-threaded (`Rc`); parallel training builds one graph per
//! sample and merges the resulting gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod rng;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

pub type Buffer = Arc<Vec<f64>>;

/// Tensor shape, rank 1..=3. Stored smallest-first simply as a Vec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Shape {
        Shape(vec![1])
    }
    pub fn of(dims: &[usize]) -> Shape {
        assert!(!dims.is_empty() && dims.len() <= 3, "rank must be 1..=3");
        Shape(dims.to_vec())
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    pub fn rank(&self) -> usize {
        self.0.len()
    }
    /// Rows/cols of a rank-2 shape.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank-2 shape, got {:?}", self.0);
        (self.0[0], self.0[1])
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    /// Named leaves are interned: asking for the same name again returns
    /// the same node, so gradients for a parameter used in several places
    /// accumulate in one buffer.
    named: std::collections::HashMap<String, (usize, Shape, Buffer)>,
}

/// Gradient accumulator indexed by node id, populated by a backward sweep.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    pub fn get(&self, v: &Var) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }

    /// Lookup by node id (see [`Graph::named_node`]).
    pub fn by_id(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Accumulation buffer for node `id`, zero-initialised on first touch.
    fn buf(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn add_slice(&mut self, id: usize, contrib: &[f64]) {
        let buf = self.buf(id, contrib.len());
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }
}

/// Shared, append-only tape. Cloning is cheap (reference semantics).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Shape,
        values: Vec<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert_eq!(shape.numel(), values.len(), "shape/value length mismatch");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { requires_grad, backward });
        Var { graph: self.clone(), id, shape, values: Arc::new(values) }
    }

    fn push_arc(
        &self,
        shape: Shape,
        values: Buffer,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert_eq!(shape.numel(), values.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { requires_grad, backward });
        Var { graph: self.clone(), id, shape, values }
    }

    fn push_shared(&self, shape: Shape, values: Buffer, requires_grad: bool) -> Var {
        self.push_arc(shape, values, requires_grad, None)
    }

    /// Leaf that participates in gradients.
    pub fn param(&self, shape: Shape, values: Buffer) -> Var {
        self.push_shared(shape, values, true)
    }

    /// Interned gradient-tracking leaf: the first call creates the node,
    /// later calls with the same name return it (values are ignored then).
    pub fn named_param(&self, name: &str, shape: Shape, values: Buffer) -> Var {
        if let Some((id, s, v)) = self.inner.borrow().named.get(name) {
            return Var { graph: self.clone(), id: *id, shape: s.clone(), values: v.clone() };
        }
        let var = self.push_shared(shape, values, true);
        self.inner
            .borrow_mut()
            .named
            .insert(name.to_string(), (var.id, var.shape.clone(), var.values.clone()));
        var
    }

    /// Node id of an interned leaf, if it was materialised on this graph.
    pub fn named_node(&self, name: &str) -> Option<usize> {
        self.inner.borrow().named.get(name).map(|(id, _, _)| *id)
    }

    /// Leaf constant; gradients do not flow into it.
    pub fn constant(&self, shape: Shape, values: Vec<f64>) -> Var {
        self.push(shape, values, false, None)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Shape::scalar(), vec![v])
    }
}

/// Handle to one node: shape and value buffer are cached inline so reads
/// never touch the RefCell.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    shape: Shape,
    values: Buffer,
}

impl Var {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.values[0]
    }

    fn same_graph(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "operands from different graphs"
        );
    }

    /// Reverse sweep from a scalar node. Returns gradients for every node
    /// that received one; look them up by [`GradStore::get`].
    pub fn backward(&self) -> GradStore {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss");
        let inner = self.graph.inner.borrow();
        let mut store = GradStore { grads: vec![None; inner.nodes.len()] };
        store.grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad || node.backward.is_none() {
                continue;
            }
            if let Some(gout) = store.grads[id].take() {
                (node.backward.as_ref().unwrap())(&gout, &mut store);
                store.grads[id] = Some(gout);
            }
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_subexpression() {
        let g = Graph::new();
        let x = g.param(Shape::of(&[3]), Arc::new(vec![1.0, 2.0, 3.0]));
        // y = sum(x*x + x) -> dy/dx = 2x + 1
        let y = x.mul(&x).add(&x).sum_all();
        let grads = y.backward();
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx, &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.param(Shape::of(&[2]), Arc::new(vec![1.0, 2.0]));
        let c = g.constant(Shape::of(&[2]), vec![5.0, 5.0]);
        let y = x.mul(&c).sum_all();
        let grads = y.backward();
        assert_eq!(grads.get(&x).unwrap(), &[5.0, 5.0]);
        assert!(grads.get(&c).is_none());
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.param(Shape::of(&[2]), Arc::new(vec![1.0, 2.0]));
        let _ = x.backward();
    }

    #[test]
    #[should_panic(expected = "different graphs")]
    fn cross_graph_ops_panic() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.scalar(1.0);
        let b = g2.scalar(2.0);
        let _ = a.add(&b);
    }
}
