use std::collections::BTreeMap;

use super::{opcount, softmax, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Combine {
        inputs: Vec<NodeId>,
        weights: NodeId,
        offset: usize,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Pick(NodeId, usize),
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    SquaredError {
        x: NodeId,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to an intermediate node, if it was reached.
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.nodes.get(node.0).and_then(|g| g.as_deref())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(p), None) => self.store.value(*p),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf; no gradient flows past it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, Some(t), false)
    }

    /// Leaf whose gradient is tracked (used to check gradients w.r.t. inputs).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, Some(t), true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Op::Param(id), None, true);
        self.param_nodes.insert(id, n);
        n
    }

    /// `W x + b` for a vector `x` and `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() != 1 || wv.shape()[1] != xv.len() {
            return Err(Error::dim("linear", wv.shape(), xv.shape()));
        }
        let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [rows] {
                return Err(Error::dim("linear bias", &[rows], bv.shape()));
            }
        }
        let (x_data, w_data) = (xv.data(), wv.data());
        let mut out: Vec<f64> = (0..rows)
            .map(|r| {
                let row = &w_data[r * cols..(r + 1) * cols];
                row.iter().zip(x_data).map(|(a, b)| a * b).sum()
            })
            .collect();
        opcount::add(2 * rows * cols);
        if let Some(b) = b {
            for (o, bi) in out.iter_mut().zip(self.value(b).data()) {
                *o += bi;
            }
            opcount::add(rows);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Op::Linear { x, w, b }, Some(Tensor::vector(out)), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::raw(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v.max(0.0)).collect(),
        );
        opcount::add(out.len());
        let rg = self.rg(x);
        self.push(Op::Relu(x), Some(out), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let out = Tensor::raw(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        opcount::add(out.len());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Some(out), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::raw(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * c).collect(),
        );
        opcount::add(out.len());
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), Some(out), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.data().iter().sum();
        opcount::add(xv.len());
        let rg = self.rg(x);
        self.push(Op::Sum(x), Some(Tensor::scalar(s)), rg)
    }

    /// `Σ_j weights[offset + j] · inputs[j]`.
    ///
    /// With `weights` a `k×k` matrix and `offset = i·k` this is row `i` of a
    /// cross-stitch unit; with a length-`k` vector and `offset = 0` it is a
    /// convex combination when the weights come from a softmax.
    pub fn combine(&mut self, inputs: &[NodeId], weights: NodeId, offset: usize) -> Result<NodeId> {
        let k = inputs.len();
        if k == 0 {
            return Err(Error::contract("combine over zero inputs"));
        }
        let wv = self.value(weights);
        if offset + k > wv.len() {
            return Err(Error::dim("combine weights", &[offset + k], wv.shape()));
        }
        let w: Vec<f64> = wv.data()[offset..offset + k].to_vec();
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(inputs[0]).len()];
        for (j, &inp) in inputs.iter().enumerate() {
            let v = self.value(inp);
            if v.shape() != shape.as_slice() {
                return Err(Error::dim("combine", &shape, v.shape()));
            }
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += w[j] * x;
            }
        }
        opcount::add(2 * k * out.len());
        let rg = self.rg(weights) || inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(
            Op::Combine {
                inputs: inputs.to_vec(),
                weights,
                offset,
            },
            Some(Tensor::raw(shape, out)),
            rg,
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let p = softmax(self.value(x).data());
        opcount::add(3 * p.len());
        let rg = self.rg(x);
        self.push(Op::Softmax(x), Some(Tensor::vector(p)), rg)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).data();
        let out = log_softmax(xs);
        opcount::add(3 * out.len());
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), Some(Tensor::vector(out)), rg)
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let v = *xv
            .data()
            .get(index)
            .ok_or_else(|| Error::dim("pick", &[index + 1], xv.shape()))?;
        let rg = self.rg(x);
        Ok(self.push(Op::Pick(x, index), Some(Tensor::scalar(v)), rg))
    }

    /// `-log softmax(logits)[target]`
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let xs = self.value(logits).data();
        if target >= xs.len() {
            return Err(Error::dim(
                "cross_entropy target",
                &[target + 1],
                &[xs.len()],
            ));
        }
        let loss = -log_softmax(xs)[target];
        opcount::add(3 * xs.len());
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, target },
            Some(Tensor::scalar(loss)),
            rg,
        ))
    }

    /// `(x - target)^2` for a scalar node `x`.
    pub fn squared_error(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(Error::dim("squared_error", &[1], xv.shape()));
        }
        let d = xv.data()[0] - target;
        opcount::add(2);
        let rg = self.rg(x);
        Ok(self.push(
            Op::SquaredError { x, target },
            Some(Tensor::scalar(d * d)),
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&g) {
                        *a += b;
                    }
                    opcount::add(g.len());
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                    let (rows, cols) = (g.len(), xv.len());
                    if self.rg(*x) {
                        let mut dx = vec![0.0; cols];
                        for r in 0..rows {
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (d, wi) in dx.iter_mut().zip(row) {
                                *d += g[r] * wi;
                            }
                        }
                        opcount::add(2 * rows * cols);
                        acc(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Vec::with_capacity(rows * cols);
                        for gr in &g {
                            dw.extend(xv.iter().map(|xi| gr * xi));
                        }
                        opcount::add(rows * cols);
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            acc(&mut grads, *b, g.clone());
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    opcount::add(g.len());
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, c) => {
                    opcount::add(g.len());
                    acc(&mut grads, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Combine {
                    inputs,
                    weights,
                    offset,
                } => {
                    let w = self.value(*weights).data();
                    if self.rg(*weights) {
                        let mut dw = vec![0.0; w.len()];
                        for (j, inp) in inputs.iter().enumerate() {
                            let v = self.value(*inp).data();
                            dw[offset + j] = g.iter().zip(v).map(|(a, b)| a * b).sum();
                        }
                        opcount::add(2 * inputs.len() * g.len());
                        acc(&mut grads, *weights, dw);
                    }
                    for (j, inp) in inputs.iter().enumerate() {
                        if self.rg(*inp) {
                            let wj = w[offset + j];
                            opcount::add(g.len());
                            acc(&mut grads, *inp, g.iter().map(|v| v * wj).collect());
                        }
                    }
                }
                Op::Softmax(x) => {
                    let p = node.value.as_ref().expect("softmax value").data();
                    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    let dx = p.iter().zip(&g).map(|(pi, gi)| pi * (gi - dot)).collect();
                    opcount::add(4 * p.len());
                    acc(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let ls = node.value.as_ref().expect("log_softmax value").data();
                    let gs: f64 = g.iter().sum();
                    let dx = ls.iter().zip(&g).map(|(l, gi)| gi - l.exp() * gs).collect();
                    opcount::add(4 * ls.len());
                    acc(&mut grads, *x, dx);
                }
                Op::Pick(x, index) => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    dx[*index] = g[0];
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, target } => {
                    let mut p = softmax(self.value(*logits).data());
                    p[*target] -= 1.0;
                    p.iter_mut().for_each(|v| *v *= g[0]);
                    opcount::add(4 * p.len());
                    acc(&mut grads, *logits, p);
                }
                Op::SquaredError { x, target } => {
                    let d = self.value(*x).data()[0] - target;
                    opcount::add(2);
                    acc(&mut grads, *x, vec![2.0 * d * g[0]]);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (pid, nid) in &self.param_nodes {
            if let Some(g) = grads[nid.0].take() {
                let shape = self.store.value(*pid).shape().to_vec();
                params.insert(*pid, Tensor::raw(shape, g));
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut s = ParamStore::new();
        let w = s.add(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = s.add_zeros(&[2]);
        let w0 = s.add_zeros(&[2, 2]);
        let b5 = s.add(Tensor::vector(vec![5.0, 5.0]));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![3.0, -1.0]));
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.linear(x, wn, Some(bn)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
        let (wn, bn) = (g.param(w0), g.param(b5));
        let y = g.linear(x, wn, Some(bn)).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn linear_shape_mismatch_reports_both_shapes() {
        let mut s = ParamStore::new();
        let w = s.add_zeros(&[2, 3]);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let wn = g.param(w);
        match g.linear(x, wn, None) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_sum_of_linear() {
        // loss = sum(W x) → dL/dW[r][c] = x[c]
        let mut s = ParamStore::new();
        let w = s.add(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![3.0, -1.0]));
        let wn = g.param(w);
        let y = g.linear(x, wn, None).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[3.0, -1.0, 3.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input_with_grad(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let mut s = ParamStore::new();
        let w = s.add(mat(1, 2, &[1.0, 2.0]));
        let unused = s.add(mat(1, 2, &[3.0, 4.0]));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![1.0, 1.0]));
        let wn = g.param(w);
        let _ = g.param(unused);
        let y = g.linear(x, wn, None).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.param(unused).is_none());
        let mut s2 = s.clone();
        s2.accumulate(&grads);
        assert!(s2.grad(unused).data().iter().all(|&v| v == 0.0));
        assert!(!s2.is_touched(unused));
    }

    #[test]
    fn relu_transparent_when_positive() {
        // two-layer net with positive pre-activations: dL/dx = W1ᵀ W2ᵀ 1
        let mut s = ParamStore::new();
        let w1 = s.add(mat(2, 2, &[1.0, 0.5, 0.25, 2.0]));
        let w2 = s.add(mat(1, 2, &[3.0, 1.0]));
        let mut g = Graph::new(&s);
        let x = g.input_with_grad(Tensor::vector(vec![1.0, 1.0]));
        let (a, b) = (g.param(w1), g.param(w2));
        let h = g.linear(x, a, None).unwrap();
        let h = g.relu(h);
        let y = g.linear(h, b, None).unwrap();
        let grads = g.backward(y).unwrap();
        // W2 W1 = [3*1 + 1*0.25, 3*0.5 + 1*2] = [3.25, 3.5]
        assert_eq!(grads.wrt(x).unwrap(), &[3.25, 3.5]);
    }

    #[test]
    fn linear_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let wt = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
        let bt = Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0));
        let xt = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));
        let w = s.add(wt.clone());
        let b = s.add(bt.clone());
        let mut g = Graph::new(&s);
        let x = g.input(xt.clone());
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.linear(x, wn, Some(bn)).unwrap();
        for r in 0..4 {
            let mut acc = bt.data()[r];
            for c in 0..3 {
                acc += wt.data()[r * 3 + c] * xt.data()[c];
            }
            assert!((g.value(y).data()[r] - acc).abs() < 1e-12);
        }
    }
}
