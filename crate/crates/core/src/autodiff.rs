//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so node ids are
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. A graph is single-use: build, run backward once, drop.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Parameter id → gradient.
pub type Gradients = BTreeMap<String, Tensor>;

/// Parameter id → value.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, kernel: NodeId, stride: usize, pad: usize },
    MaskMul { x: NodeId, mask: NodeId },
    Relu(NodeId),
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Expand(NodeId),
    RowSumSquares(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    consumed: bool,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Left-aligned broadcast of `mask` over `x`: every mask dim equals the
/// matching x dim or is 1; missing trailing dims broadcast.
fn mask_index_map(x: &[usize], mask: &[usize]) -> Option<Vec<usize>> {
    if mask.len() > x.len() {
        return None;
    }
    if mask.iter().zip(x).any(|(&m, &d)| m != d && m != 1) {
        return None;
    }
    let mut map = Vec::with_capacity(x.iter().product());
    let mut idx = vec![0usize; x.len()];
    let numel: usize = x.iter().product();
    for _ in 0..numel {
        let mut flat = 0;
        for (axis, &m) in mask.iter().enumerate() {
            flat = flat * m + if m == 1 { 0 } else { idx[axis] };
        }
        map.push(flat);
        for axis in (0..x.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < x[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Some(map)
}

/// Right-aligned (numpy-style) broadcast of `from` to `to`.
fn expand_index_map(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let offset = to.len() - from.len();
    if from.iter().zip(&to[offset..]).any(|(&f, &t)| f != t && f != 1) {
        return None;
    }
    let numel: usize = to.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..numel {
        let mut flat = 0;
        for (axis, &f) in from.iter().enumerate() {
            flat = flat * f + if f == 1 { 0 } else { idx[axis + offset] };
        }
        map.push(flat);
        for axis in (0..to.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < to[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Some(map)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Trainable leaf registered under `id`.
    pub fn param(&mut self, id: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(id) {
            return Err(Error::InvalidArgument(format!("parameter {id} registered twice")));
        }
        let node = self.push(Op::Param, value);
        self.params.insert(id.to_string(), node);
        Ok(node)
    }

    pub fn param_node(&self, id: &str) -> Option<NodeId> {
        self.params.get(id).copied()
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Dense { x, w, b }, y))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let y = kernels::conv2d(self.value(x), self.value(kernel), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, kernel, stride, pad }, y))
    }

    /// Elementwise `x * mask` with `mask` broadcast along its size-1 and
    /// missing trailing axes.
    pub fn mask_mul(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let (xv, mv) = (self.value(x), self.value(mask));
        let map = mask_index_map(xv.shape(), mv.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "mask_mul",
            left: xv.shape().to_vec(),
            right: mv.shape().to_vec(),
        })?;
        let data = xv
            .data()
            .iter()
            .zip(&map)
            .map(|(v, &m)| v * mv.data()[m])
            .collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskMul { x, mask }, y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::relu(self.value(x));
        self.push(Op::Relu(x), y)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), y))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (probs, nll) = kernels::softmax_nll(self.value(logits), labels)?;
        let loss = nll.iter().sum::<f64>() / labels.len() as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), y)
    }

    /// `x + c` for a scalar constant.
    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).map(|v| v + c);
        self.push(Op::Offset(x), y)
    }

    /// Clips into `[lo, hi]`; clipped entries pass no gradient.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(x, lo, hi), y)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(stable_sigmoid);
        self.push(Op::Sigmoid(x), y)
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(log_sigmoid);
        self.push(Op::LogSigmoid(x), y)
    }

    /// Right-aligned broadcast to `shape`; backward sums over the broadcast axes.
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let map = expand_index_map(xv.shape(), shape).ok_or_else(|| Error::ShapeMismatch {
            op: "expand",
            left: xv.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        let data = map.iter().map(|&m| xv.data()[m]).collect();
        let y = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::Expand(x), y))
    }

    /// `[R, ...] -> [R]` sum of squares of each row.
    pub fn row_sum_squares(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        let width = xv.len() / rows;
        let data = xv.data().chunks(width).map(|r| r.iter().map(|v| v * v).sum()).collect();
        self.push(Op::RowSumSquares(x), Tensor::vector(data))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(upstream);
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, inputs) = (xv.shape()[0], xv.shape()[1]);
                    let outputs = wv.shape()[1];
                    let g = upstream.data();
                    let mut gx = vec![0.0; batch * inputs];
                    let mut gw = vec![0.0; inputs * outputs];
                    let mut gb = vec![0.0; outputs];
                    for r in 0..batch {
                        let grow = &g[r * outputs..(r + 1) * outputs];
                        for (o, gv) in grow.iter().enumerate() {
                            gb[o] += gv;
                        }
                        for i in 0..inputs {
                            let xvv = xv.data()[r * inputs + i];
                            let wrow = &wv.data()[i * outputs..(i + 1) * outputs];
                            let mut acc = 0.0;
                            for o in 0..outputs {
                                acc += wrow[o] * grow[o];
                                gw[i * outputs + o] += xvv * grow[o];
                            }
                            gx[r * inputs + i] = acc;
                        }
                    }
                    let (x, w, b) = (*x, *w, *b);
                    accumulate(&mut grads, x, Tensor::new(vec![batch, inputs], gx)?);
                    accumulate(&mut grads, w, Tensor::new(vec![inputs, outputs], gw)?);
                    accumulate(&mut grads, b, Tensor::new(vec![outputs], gb)?);
                }
                Op::Conv2d { x, kernel, stride, pad } => {
                    let (gx, gk) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*kernel),
                        &upstream,
                        *stride,
                        *pad,
                    );
                    let (x, kernel) = (*x, *kernel);
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, kernel, gk);
                }
                Op::MaskMul { x, mask } => {
                    let (xv, mv) = (self.value(*x), self.value(*mask));
                    let map = mask_index_map(xv.shape(), mv.shape()).expect("checked in forward");
                    let mut gx = vec![0.0; xv.len()];
                    let mut gm = vec![0.0; mv.len()];
                    for (i, &m) in map.iter().enumerate() {
                        let g = upstream.data()[i];
                        gx[i] = g * mv.data()[m];
                        gm[m] += g * xv.data()[i];
                    }
                    let (xs, ms) = (xv.shape().to_vec(), mv.shape().to_vec());
                    let (x, mask) = (*x, *mask);
                    accumulate(&mut grads, x, Tensor::new(xs, gx)?);
                    accumulate(&mut grads, mask, Tensor::new(ms, gm)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    let g = Tensor::new(xv.shape().to_vec(), data)?;
                    accumulate(&mut grads, *x, g);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let area = s[2] * s[3];
                    let mut data = Vec::with_capacity(s.iter().product());
                    for g in upstream.data() {
                        data.extend(std::iter::repeat_n(g / area as f64, area));
                    }
                    accumulate(&mut grads, *x, Tensor::new(s, data)?);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let g = upstream.data()[0] / labels.len() as f64;
                    let classes = probs.len() / labels.len();
                    let mut data: Vec<f64> = probs.iter().map(|p| p * g).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        data[r * classes + label] -= g;
                    }
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut grads, *logits, Tensor::new(shape, data)?);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, upstream.clone());
                    accumulate(&mut grads, b, upstream);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(
                        va.shape().to_vec(),
                        upstream.data().iter().zip(vb.data()).map(|(g, v)| g * v).collect(),
                    )?;
                    let gb = Tensor::new(
                        vb.shape().to_vec(),
                        upstream.data().iter().zip(va.data()).map(|(g, v)| g * v).collect(),
                    )?;
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *x, upstream.map(|g| g * f));
                }
                Op::Offset(x) => accumulate(&mut grads, *x, upstream),
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(v, g)| if (*lo..=*hi).contains(v) { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("same shape"));
                }
                Op::Sum(x) => {
                    let g = upstream.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let data = y
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(s, g)| g * s * (1.0 - s))
                        .collect();
                    let g = Tensor::new(y.shape().to_vec(), data)?;
                    accumulate(&mut grads, *x, g);
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(v, g)| g * stable_sigmoid(-v))
                        .collect();
                    let g = Tensor::new(xv.shape().to_vec(), data)?;
                    accumulate(&mut grads, *x, g);
                }
                Op::Expand(x) => {
                    let xv = self.value(*x);
                    let map = expand_index_map(xv.shape(), node.value.shape()).expect("checked in forward");
                    let mut data = vec![0.0; xv.len()];
                    for (g, &m) in upstream.data().iter().zip(&map) {
                        data[m] += g;
                    }
                    let g = Tensor::new(xv.shape().to_vec(), data)?;
                    accumulate(&mut grads, *x, g);
                }
                Op::RowSumSquares(x) => {
                    let xv = self.value(*x);
                    let width = xv.len() / xv.shape()[0];
                    let data = xv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| 2.0 * v * upstream.data()[i / width])
                        .collect();
                    let g = Tensor::new(xv.shape().to_vec(), data)?;
                    accumulate(&mut grads, *x, g);
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect())
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter id and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences with `step`.
///
/// `build` registers every entry of the supplied map as a parameter (under the
/// same id) and returns the scalar loss node. It must be deterministic: any
/// noise it uses has to be fixed outside.
pub fn grad_check<F>(build: F, params: &ParamMap, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamMap) -> Result<NodeId>,
{
    let eval = |p: &ParamMap| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    if !g.value(loss).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let analytic = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{name} was not registered by build")))?;
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_passes_through() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = g.param("w", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.param("b", Tensor::zeros(&[2])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_weights_annihilate() {
        let mut g = Graph::new();
        let x = g.input(t(&[3, 2], &[1.0, -2.0, 3.0, 4.0, 5.5, 6.0]));
        let w = g.param("w", Tensor::zeros(&[2, 4])).unwrap();
        let b = g.param("b", Tensor::zeros(&[4])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_mul_hand_chain_rule() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![4.0])).unwrap();
        let m = g.param("m", Tensor::vector(vec![0.5])).unwrap();
        let y = g.mask_mul(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
        let s = g.sum(y);
        let l = g.scale(s, 3.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["m"].data(), &[12.0]);
        assert_eq!(grads["x"].data(), &[1.5]);
    }

    #[test]
    fn mask_mul_ones_and_zeros() {
        let xs = t(&[2, 3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut g = Graph::new();
        let x = g.param("x", xs.clone()).unwrap();
        let ones = g.input(Tensor::full(&[2, 3], 1.0));
        let y = g.mask_mul(x, ones).unwrap();
        assert_eq!(g.value(y), &xs);

        let mut g = Graph::new();
        let x = g.param("x", xs).unwrap();
        let zeros = g.input(Tensor::zeros(&[1, 3]));
        let y = g.mask_mul(x, zeros).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_mul_rejects_unbroadcastable() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let m = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.mask_mul(x, m), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[3, 4]));
        let l = g.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let mut g = Graph::new();
        let logits = g.input(t(&[1, 3], &[50.0, 0.0, 0.0]));
        let l = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);

        let mut g = Graph::new();
        let logits = g.input(t(&[1, 2], &[1.0, 0.0]));
        let l = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(l).data()[0] - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn sum_of_weights_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6])).unwrap();
        let unused = g.param("unused", Tensor::full(&[2], 7.0)).unwrap();
        let _ = unused;
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert!(grads["w"].data().iter().all(|&v| v == 1.0));
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(1.0)).unwrap();
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));
    }

    #[test]
    fn expand_broadcasts_and_reduces() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::vector(vec![2.0])).unwrap();
        let e = g.expand(p, &[3, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[2.0; 6]);
        let l = g.sum(e);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["p"].data(), &[6.0]);

        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 2.0]));
        let e = g.expand(p, &[2, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 2.0, 1.0, 2.0]);
        assert!(g.expand(p, &[2, 3]).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let mut params = ParamMap::new();
        params.insert("w".into(), t(&[2, 2], &[0.3, -1.2, 2.0, 0.7]));
        let report = grad_check(
            |g, p| {
                let w = g.param("w", p["w"].clone())?;
                let sq = g.row_sum_squares(w);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[3], &[-2.0, 0.5, 2.0])).unwrap();
        let c = g.clamp(w, 0.0, 1.0);
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(c);
        assert_eq!(g.backward(s).unwrap()["w"].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dead_relu_has_zero_error() {
        let mut params = ParamMap::new();
        params.insert("w".into(), t(&[1, 2], &[0.5, 0.25]));
        let report = grad_check(
            |g, p| {
                let x = g.input(t(&[1, 1], &[-1.0]));
                let w = g.param("w", p["w"].clone())?;
                let b = g.input(Tensor::vector(vec![0.0, 0.0]));
                let y = g.dense(x, w, b)?;
                let r = g.relu(y);
                Ok(g.sum(r))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::scalar(1.0));
        let res = grad_check(
            |g, p| {
                let w = g.param("w", p["w"].clone())?;
                Ok(g.scale(w, f64::INFINITY))
            },
            &params,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
