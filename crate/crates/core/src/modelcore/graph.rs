//! Eager reverse-mode differentiation over small dense vectors.
//!
//! Values are computed as nodes are recorded. Parameter leaves share storage
//! with the [`ParameterStore`], so recording costs no copies, and gradients
//! for a parameter used by several merged graphs accumulate into one buffer.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Const,
    Row { src: NodeId, row: usize },
    MatVec { w: NodeId, x: NodeId },
    Add(Vec<NodeId>),
    Tanh(NodeId),
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Softmax(NodeId),
    Mix { weights: NodeId, items: Vec<NodeId> },
    Mean(Vec<NodeId>),
    CrossEntropy { logits: NodeId, target: usize },
    Weighted(Vec<(f64, NodeId)>),
}

impl Op {
    fn shift(&mut self, by: usize) {
        let s = |n: &mut NodeId| n.0 += by;
        match self {
            Op::Param(_) | Op::Const => {}
            Op::Row { src, .. } => s(src),
            Op::MatVec { w, x } => {
                s(w);
                s(x);
            }
            Op::Tanh(a) | Op::Softmax(a) | Op::CrossEntropy { logits: a, .. } => s(a),
            Op::Dot(a, b) => {
                s(a);
                s(b);
            }
            Op::Add(v) | Op::Stack(v) | Op::Mean(v) => v.iter_mut().for_each(s),
            Op::Mix { weights, items } => {
                s(weights);
                items.iter_mut().for_each(s);
            }
            Op::Weighted(v) => v.iter_mut().for_each(|(_, n)| s(n)),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Arc<Vec<f64>>,
    cols: usize,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        let v = self.value(n);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, cols: usize, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            cols,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; recorded at most once per graph.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        if let Some(n) = self.params.get(&id) {
            return *n;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            value: Arc::clone(&t.data),
            cols: t.cols(),
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, 1, Op::Const)
    }

    /// Row `row` of matrix node `src` as a vector (embedding lookup).
    pub fn row(&mut self, src: NodeId, row: usize) -> NodeId {
        let node = &self.nodes[src.0];
        let c = node.cols;
        let v = node.value[row * c..(row + 1) * c].to_vec();
        self.push(v, 1, Op::Row { src, row })
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let wn = &self.nodes[w.0];
        let xv = &self.nodes[x.0].value;
        let c = wn.cols;
        assert_eq!(c, xv.len(), "matvec shape mismatch");
        let out: Vec<f64> = wn
            .value
            .chunks_exact(c)
            .map(|r| r.iter().zip(xv.iter()).map(|(a, b)| a * b).sum())
            .collect();
        self.push(out, 1, Op::MatVec { w, x })
    }

    pub fn add(&mut self, terms: &[NodeId]) -> NodeId {
        let mut out = self.nodes[terms[0].0].value.to_vec();
        for t in &terms[1..] {
            let v = &self.nodes[t.0].value;
            assert_eq!(v.len(), out.len(), "add shape mismatch");
            out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += x);
        }
        self.push(out, 1, Op::Add(terms.to_vec()))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(out, 1, Op::Tanh(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let d = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        self.push(vec![d], 1, Op::Dot(a, b))
    }

    /// Collect scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[NodeId]) -> NodeId {
        let out = scalars.iter().map(|s| self.nodes[s.0].value[0]).collect();
        self.push(out, 1, Op::Stack(scalars.to_vec()))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let out = softmax(&self.nodes[a.0].value);
        self.push(out, 1, Op::Softmax(a))
    }

    /// `Σ weights[i] · items[i]`.
    pub fn mix(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        let w = Arc::clone(&self.nodes[weights.0].value);
        assert_eq!(w.len(), items.len());
        let mut out = vec![0.0; self.nodes[items[0].0].value.len()];
        for (wi, it) in w.iter().zip(items) {
            out.iter_mut()
                .zip(self.nodes[it.0].value.iter())
                .for_each(|(o, x)| *o += wi * x);
        }
        self.push(out, 1, Op::Mix {
            weights,
            items: items.to_vec(),
        })
    }

    /// Element-wise mean of equally sized nodes.
    pub fn mean(&mut self, items: &[NodeId]) -> NodeId {
        let mut out = self.nodes[items[0].0].value.to_vec();
        for it in &items[1..] {
            out.iter_mut()
                .zip(self.nodes[it.0].value.iter())
                .for_each(|(o, x)| *o += x);
        }
        let n = items.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(out, 1, Op::Mean(items.to_vec()))
    }

    /// Negative log-likelihood of `target` under softmax(logits).
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let z = &self.nodes[logits.0].value;
        let loss = log_sum_exp(z) - z[target];
        self.push(vec![loss], 1, Op::CrossEntropy { logits, target })
    }

    /// `Σ w_i · x_i`, evaluated left to right.
    pub fn weighted(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let mut out = vec![0.0; self.nodes[terms[0].1 .0].value.len()];
        for (i, (w, n)) in terms.iter().enumerate() {
            let v = &self.nodes[n.0].value;
            if i == 0 {
                out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o = w * x);
            } else {
                out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
            }
        }
        self.push(out, 1, Op::Weighted(terms.to_vec()))
    }

    /// Append `other`'s nodes; returns the offset to apply to its node ids.
    fn absorb(&mut self, other: Graph) -> usize {
        let offset = self.nodes.len();
        for mut node in other.nodes {
            node.op.shift(offset);
            self.nodes.push(node);
        }
        offset
    }

    /// Gradients of scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);

        for k in (0..=root.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
                params: &mut params,
            };
            match &node.op {
                Op::Param(id) => {
                    let buf = sink.params.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                    buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
                }
                Op::Const => {}
                Op::Row { src, row } => {
                    let c = g.len();
                    let slot = sink.slot(*src);
                    slot[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(s, x)| *s += x);
                }
                Op::MatVec { w, x } => {
                    let wv = Arc::clone(&self.nodes[w.0].value);
                    let xv = Arc::clone(&self.nodes[x.0].value);
                    let c = xv.len();
                    {
                        let gw = sink.slot(*w);
                        for (i, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                gw[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(xv.iter())
                                    .for_each(|(s, xj)| *s += gi * xj);
                            }
                        }
                    }
                    let gx = sink.slot(*x);
                    for (i, gi) in g.iter().enumerate() {
                        if *gi != 0.0 {
                            gx.iter_mut()
                                .zip(&wv[i * c..(i + 1) * c])
                                .for_each(|(s, wij)| *s += gi * wij);
                        }
                    }
                }
                Op::Add(terms) => {
                    for t in terms {
                        sink.add(*t, &g, 1.0);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let local: Vec<f64> = g.iter().zip(y.iter()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    sink.add(*a, &local, 1.0);
                }
                Op::Dot(a, b) => {
                    let av = Arc::clone(&self.nodes[a.0].value);
                    let bv = Arc::clone(&self.nodes[b.0].value);
                    sink.add(*a, &bv, g[0]);
                    sink.add(*b, &av, g[0]);
                }
                Op::Stack(items) => {
                    for (it, gi) in items.iter().zip(&g) {
                        sink.add(*it, &[*gi], 1.0);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let inner: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    let local: Vec<f64> = g.iter().zip(y.iter()).map(|(gi, yi)| yi * (gi - inner)).collect();
                    sink.add(*a, &local, 1.0);
                }
                Op::Mix { weights, items } => {
                    let w = Arc::clone(&self.nodes[weights.0].value);
                    let gw: Vec<f64> = items
                        .iter()
                        .map(|it| self.nodes[it.0].value.iter().zip(&g).map(|(a, b)| a * b).sum())
                        .collect();
                    sink.add(*weights, &gw, 1.0);
                    for (it, wi) in items.iter().zip(w.iter()) {
                        sink.add(*it, &g, *wi);
                    }
                }
                Op::Mean(items) => {
                    let n = items.len() as f64;
                    let local: Vec<f64> = g.iter().map(|x| x / n).collect();
                    for it in items {
                        sink.add(*it, &local, 1.0);
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let mut p = softmax(&self.nodes[logits.0].value);
                    p[*target] -= 1.0;
                    sink.add(*logits, &p, g[0]);
                }
                Op::Weighted(terms) => {
                    for (w, n) in terms {
                        sink.add(*n, &g, *w);
                    }
                }
            }
        }
        Gradients { by_param: params }
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    params: &'a mut BTreeMap<ParamId, Vec<f64>>,
}

impl Sink<'_> {
    fn slot(&mut self, n: NodeId) -> &mut [f64] {
        let len = self.nodes[n.0].value.len();
        if let Op::Param(id) = self.nodes[n.0].op {
            return self.params.entry(id).or_insert_with(|| vec![0.0; len]);
        }
        self.grads[n.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn add(&mut self, n: NodeId, g: &[f64], scale: f64) {
        let slot = self.slot(n);
        if scale == 1.0 {
            slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
        } else {
            slot.iter_mut().zip(g).for_each(|(s, x)| *s += scale * x);
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-parameter gradient buffers, keyed in deterministic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a single scalar, zero if the parameter did not contribute.
    pub fn component(&self, id: ParamId, index: usize) -> f64 {
        self.get(id).map_or(0.0, |g| g[index])
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// A differentiable scalar: the recorded graph plus its output node.
#[derive(Debug, Clone)]
pub struct Loss {
    graph: Graph,
    root: NodeId,
}

impl Loss {
    pub fn new(graph: Graph, root: NodeId) -> Self {
        assert_eq!(graph.value(root).len(), 1, "loss must be a scalar");
        Self { graph, root }
    }

    /// A loss with no parameter dependence.
    pub fn constant(value: f64) -> Self {
        let mut graph = Graph::new();
        let root = graph.constant(vec![value]);
        Self { graph, root }
    }

    pub fn value(&self) -> f64 {
        self.graph.scalar(self.root)
    }

    pub fn backward(&self) -> Gradients {
        self.graph.backward(self.root)
    }

    fn merge(parts: Vec<Loss>) -> (Graph, Vec<NodeId>) {
        let mut iter = parts.into_iter();
        let first = iter.next().expect("at least one loss");
        let mut graph = first.graph;
        let mut roots = vec![first.root];
        for l in iter {
            let off = graph.absorb(l.graph);
            roots.push(NodeId(l.root.0 + off));
        }
        (graph, roots)
    }

    /// `Σ w_i · L_i` recorded as a single node over the merged graph, so one
    /// backward pass differentiates every term into the shared parameters.
    pub fn weighted_sum(terms: Vec<(f64, Loss)>) -> Self {
        let (weights, losses): (Vec<f64>, Vec<Loss>) = terms.into_iter().unzip();
        let (mut graph, roots) = Self::merge(losses);
        let pairs: Vec<(f64, NodeId)> = weights.into_iter().zip(roots).collect();
        let root = graph.weighted(&pairs);
        Self { graph, root }
    }

    pub fn mean(losses: Vec<Loss>) -> Self {
        let (mut graph, roots) = Self::merge(losses);
        let root = graph.mean(&roots);
        Self { graph, root }
    }
}
