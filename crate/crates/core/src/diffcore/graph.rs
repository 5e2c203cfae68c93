//! A single-use reverse-mode tape over the primitives in this module.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over node ids
//! visits every consumer before its inputs.

use super::conv;
use super::ops::{self, NormCache};
use super::tensor::{ConvSpec, Shape4, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    InstanceNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        cache: NormCache,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    L1Mean(NodeId, NodeId),
    NegMeanLog {
        x: NodeId,
        complement: bool,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    GlobalAvgPool(NodeId),
    DotConst {
        x: NodeId,
        r: Tensor4,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `id`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
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

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor4) -> NodeId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor4) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, t: Tensor4) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    pub fn instance_norm2d(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let (out, cache) = ops::instance_norm2d(
            self.value(x),
            self.value(scale),
            self.value(shift),
            ops::INSTANCE_NORM_EPS,
        )?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(out, Op::InstanceNorm { x, scale, shift, cache }, rg))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::invalid(format!("leaky relu slope {slope} outside [0, 1)")));
        }
        let out = self.value(x).map(|v| ops::leaky_relu(v, slope));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LeakyRelu { x, slope }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(ops::relu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(ops::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(ops::sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ops::check_same("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor4::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::l1_mean(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor4::scalar(v), Op::L1Mean(a, b), rg))
    }

    /// `-mean(log p)`, or `-mean(log(1 - p))` with `complement`.
    pub fn neg_mean_log(&mut self, x: NodeId, complement: bool) -> NodeId {
        let v = ops::neg_mean_log(self.value(x), complement);
        let rg = self.rg(&[x]);
        self.push(Tensor4::scalar(v), Op::NegMeanLog { x, complement }, rg)
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            if v.shape() != Shape4::scalar() {
                return Err(Error::shape("weighted_sum", Shape4::scalar(), v.shape()));
            }
            total += w * v.item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor4::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// `Σ x ⊙ r` for a fixed tensor `r`; projects a tensor output onto a scalar.
    pub fn dot_const(&mut self, x: NodeId, r: Tensor4) -> Result<NodeId> {
        ops::check_same("dot_const", self.value(x), &r)?;
        let v = self.value(x).dot(&r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor4::scalar(v), Op::DotConst { x, r }, rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let out = ops::global_avg_pool(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor4::scalar(v),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != Shape4::scalar() {
            return Err(Error::shape("backward root", Shape4::scalar(), rv.shape()));
        }
        if !rv.all_finite() {
            return Err(Error::NonFinite(format!("backward root value {}", rv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            self.propagate(node, &dout, &mut grads)?;
            grads[idx] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
        if !self.requires_grad(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], x: NodeId, dout: &[f64], d: impl Fn(f64, f64) -> f64) {
        if !self.requires_grad(x) {
            return;
        }
        let xv = self.value(x).data();
        let g = xv.iter().zip(dout).map(|(&v, &dy)| d(v, dy)).collect();
        self.accumulate(grads, x, g);
    }

    fn propagate(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } | Op::ConvTranspose2d { x, w, b, spec } => {
                let want = [
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                ];
                let dt = Tensor4::from_vec(node.value.shape(), dout.to_vec())?;
                let (dx, dw, db) = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(self.value(*x), self.value(*w), spec, &dt, want)?
                } else {
                    conv::conv_transpose2d_backward(self.value(*x), self.value(*w), spec, &dt, want)?
                };
                if let Some(g) = dx {
                    self.accumulate(grads, *x, g);
                }
                if let Some(g) = dw {
                    self.accumulate(grads, *w, g);
                }
                if let (Some(b), Some(g)) = (b, db) {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::InstanceNorm { x, scale, shift, cache } => {
                let (dx, dscale, dshift) =
                    ops::instance_norm2d_backward(self.value(*x).shape(), self.value(*scale), cache, dout);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *scale, dscale);
                self.accumulate(grads, *shift, dshift);
            }
            Op::LeakyRelu { x, slope } => {
                self.elementwise(grads, *x, dout, |v, dy| if v > 0.0 { dy } else { slope * dy })
            }
            Op::Relu(x) => self.elementwise(grads, *x, dout, |v, dy| if v > 0.0 { dy } else { 0.0 }),
            Op::Tanh(x) => {
                if self.requires_grad(*x) {
                    let g = node.value.data().iter().zip(dout).map(|(y, dy)| dy * (1.0 - y * y)).collect();
                    self.accumulate(grads, *x, g);
                }
            }
            Op::Sigmoid(x) => {
                if self.requires_grad(*x) {
                    let g = node.value.data().iter().zip(dout).map(|(y, dy)| dy * y * (1.0 - y)).collect();
                    self.accumulate(grads, *x, g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dout.to_vec());
                self.accumulate(grads, *b, dout.to_vec());
            }
            Op::L1Mean(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = dout[0] / av.len() as f64;
                let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * ops::sign(x - y)).collect();
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ga.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NegMeanLog { x, complement } => {
                let g = ops::neg_mean_log_grad(self.value(*x), *complement)
                    .into_iter()
                    .map(|v| v * dout[0])
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::WeightedSum(terms) => {
                // Zero-weight terms are skipped so their subgraphs are never swept.
                for &(id, w) in terms.iter().filter(|t| t.1 != 0.0) {
                    self.accumulate(grads, id, vec![w * dout[0]]);
                }
            }
            Op::DotConst { x, r } => {
                self.accumulate(grads, *x, r.data().iter().map(|v| v * dout[0]).collect());
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let m = s.plane();
                let g = dout.iter().flat_map(|&d| std::iter::repeat_n(d / m as f64, m)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let n = labels.len() as f64;
                let mut g = Vec::with_capacity(lv.len());
                for (p, &l) in ops::softmax_rows(lv).into_iter().zip(labels) {
                    for (c, pc) in p.into_iter().enumerate() {
                        let t = if c == l { 1.0 } else { 0.0 };
                        g.push(dout[0] * (pc - t) / n);
                    }
                }
                self.accumulate(grads, *logits, g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::new();
        let x = g.variable(Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap());
        let z = g.constant(Tensor4::zeros(Shape4::new(1, 1, 1, 2)));
        let a = g.l1_mean(x, z).unwrap();
        let b = g.l1_mean(x, z).unwrap();
        let s = g.weighted_sum(&[(a, 1.0), (b, 2.0)]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.5, -1.5]);
        assert!(grads.get(z).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.variable(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }
}
