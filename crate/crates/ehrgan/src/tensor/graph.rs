//! Reverse-mode autodiff on a flat tape.
//!
//! Each op appends a node holding its forward value; `backward` walks the
//! tape in reverse, accumulating gradients into every node. Parameter leaves
//! are deduplicated by name so a weight used twice in one graph (e.g. a
//! decoder applied to two latents) accumulates both contributions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::layers::{self, BnCache};
use crate::tensor::optim::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv1d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
    Deconv1d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    MaxOverTime { x: NodeId, argmax: Vec<usize> },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache },
    BnInfer { x: NodeId, scale: Vec<f64> },
    ConcatCols { xs: Vec<NodeId> },
    Reshape { x: NodeId },
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    BinaryXent { p: NodeId, targets: Vec<f64>, clamped: Tensor },
    MaskMix { h: NodeId, z: NodeId, m: Tensor },
    ColScale { x: NodeId, s: Tensor },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    SqSum { x: NodeId },
}

pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        NodeId(self.ops.len() - 1)
    }

    /// Constant leaf; receives a gradient but is not reported as a parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Named parameter leaf. A second lease of the same name returns the
    /// existing node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf, value);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Lease an entry of a parameter set under `<set>/<entry>`.
    pub fn lease(&mut self, set: &ParamSet, entry: &str) -> Result<NodeId> {
        let value = set.value(entry)?.clone();
        Ok(self.param(&format!("{}/{}", set.name(), entry), value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradients of all parameter leaves, keyed by lease name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &id)| self.grads[id.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn conv1d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let v = layers::conv1d(&self.values[x.0], &self.values[k.0], &self.values[b.0], stride)?;
        Ok(self.push(Op::Conv1d { x, k, b, stride }, v))
    }

    pub fn deconv1d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let v = layers::deconv1d(&self.values[x.0], &self.values[k.0], &self.values[b.0], stride)?;
        Ok(self.push(Op::Deconv1d { x, k, b, stride }, v))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = layers::dense(&self.values[x.0], &self.values[w.0], &self.values[b.0])?;
        Ok(self.push(Op::Dense { x, w, b }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = layers::relu(&self.values[x.0]);
        self.push(Op::Relu { x }, v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = layers::tanh_act(&self.values[x.0]);
        self.push(Op::Tanh { x }, v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = layers::sigmoid_act(&self.values[x.0]);
        self.push(Op::Sigmoid { x }, v)
    }

    pub fn max_over_time(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = layers::max_over_time(&self.values[x.0])?;
        Ok(self.push(Op::MaxOverTime { x, argmax }, v))
    }

    /// Training-mode batch norm; also returns the batch mean and variance so
    /// the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let (v, cache) = layers::batch_norm_train(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        )?;
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let id = self.push(Op::BnTrain { x, gamma, beta, cache }, v);
        Ok((id, mean, var))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        run_mean: &[f64],
        run_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let v = layers::batch_norm_infer(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            run_mean,
            run_var,
            eps,
        )?;
        let g = &self.values[gamma.0];
        let scale: Vec<f64> =
            (0..g.len()).map(|i| g.data()[i] / (run_var[i] + eps).sqrt()).collect();
        Ok(self.push(Op::BnInfer { x, scale }, v))
    }

    /// Concatenate rank-2 tensors along columns: `[B,F_i] -> [B, sum F_i]`.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols: no inputs"));
        }
        let b = self.values[xs[0].0].shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &id in xs {
            let v = &self.values[id.0];
            v.expect_rank(2, "concat_cols")?;
            if v.shape()[0] != b {
                return Err(Error::shape("concat_cols: row count mismatch"));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; b * total];
        for bi in 0..b {
            let mut off = 0;
            for (i, &id) in xs.iter().enumerate() {
                let w = widths[i];
                let src = &self.values[id.0].data()[bi * w..(bi + 1) * w];
                out[bi * total + off..bi * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let v = Tensor::from_vec(&[b, total], out)?;
        Ok(self.push(Op::ConcatCols { xs: xs.to_vec() }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.values[x.0].reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, v))
    }

    /// Mean softmax cross-entropy; scalar node.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = layers::softmax_xent(&self.values[logits.0], labels)?;
        Ok(self.push(
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
        ))
    }

    /// Mean binary cross-entropy of probabilities vs targets; scalar node.
    pub fn binary_xent(&mut self, p: NodeId, targets: &[f64]) -> Result<NodeId> {
        let (loss, clamped) = layers::binary_xent(&self.values[p.0], targets)?;
        Ok(self.push(
            Op::BinaryXent { p, targets: targets.to_vec(), clamped },
            Tensor::scalar(loss),
        ))
    }

    /// `m*z + (1-m)*h` with a constant mask.
    pub fn mask_mix(&mut self, h: NodeId, z: NodeId, m: Tensor) -> Result<NodeId> {
        let v = layers::mask_mix(&self.values[h.0], &self.values[z.0], &m)?;
        Ok(self.push(Op::MaskMix { h, z, m }, v))
    }

    /// Scale the last axis by a constant per-channel vector.
    pub fn col_scale(&mut self, x: NodeId, s: Tensor) -> Result<NodeId> {
        let v = layers::col_scale(&self.values[x.0], &s)?;
        Ok(self.push(Op::ColScale { x, s }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("sub: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(Op::Sub { a, b }, v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.values[x.0].data().iter().map(|v| v * c).collect();
        let v = Tensor::from_vec(self.values[x.0].shape(), data).unwrap();
        self.push(Op::Scale { x, c }, v)
    }

    /// Sum of squares of all elements; scalar node.
    pub fn sq_sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.values[x.0].data().iter().map(|v| v * v).sum();
        self.push(Op::SqSum { x }, Tensor::scalar(s))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a finite scalar loss. Callable once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward already ran on this graph"));
        }
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.data()[0])));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::from_vec(lv.shape(), vec![1.0]).unwrap());

        for i in (0..self.ops.len()).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let mut deltas: Vec<(NodeId, Tensor)> = Vec::new();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv1d { x, k, b, stride } => {
                    let (dx, dk, db) = layers::conv1d_backward(
                        &self.values[x.0],
                        &self.values[k.0],
                        *stride,
                        &g,
                    )?;
                    deltas.push((*x, dx));
                    deltas.push((*k, dk));
                    deltas.push((*b, db));
                }
                Op::Deconv1d { x, k, b, stride } => {
                    let (dx, dk, db) = layers::deconv1d_backward(
                        &self.values[x.0],
                        &self.values[k.0],
                        *stride,
                        &g,
                    )?;
                    deltas.push((*x, dx));
                    deltas.push((*k, dk));
                    deltas.push((*b, db));
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) =
                        layers::dense_backward(&self.values[x.0], &self.values[w.0], &g)?;
                    deltas.push((*x, dx));
                    deltas.push((*w, dw));
                    deltas.push((*b, db));
                }
                Op::Relu { x } => deltas.push((*x, layers::relu_backward(&self.values[x.0], &g))),
                Op::Tanh { x } => deltas.push((*x, layers::tanh_backward(&self.values[i], &g))),
                Op::Sigmoid { x } => {
                    deltas.push((*x, layers::sigmoid_backward(&self.values[i], &g)))
                }
                Op::MaxOverTime { x, argmax } => {
                    let shape = self.values[x.0].shape().to_vec();
                    deltas.push((*x, layers::max_over_time_backward(&shape, argmax, &g)?));
                }
                Op::BnTrain { x, gamma, beta, cache } => {
                    let (dx, dg, db) = layers::batch_norm_train_backward(
                        &self.values[x.0],
                        &self.values[gamma.0],
                        cache,
                        &g,
                    )?;
                    deltas.push((*x, dx));
                    deltas.push((*gamma, dg));
                    deltas.push((*beta, db));
                }
                Op::BnInfer { x, scale } => {
                    let c = scale.len();
                    let mut dx = g.data().to_vec();
                    for row in dx.chunks_mut(c) {
                        for (v, s) in row.iter_mut().zip(scale) {
                            *v *= s;
                        }
                    }
                    deltas.push((*x, Tensor::from_vec(self.values[x.0].shape(), dx)?));
                }
                Op::ConcatCols { xs } => {
                    let b = self.values[i].shape()[0];
                    let total = self.values[i].shape()[1];
                    let mut off = 0;
                    for &xid in xs {
                        let w = self.values[xid.0].shape()[1];
                        let mut dx = vec![0.0; b * w];
                        for bi in 0..b {
                            dx[bi * w..(bi + 1) * w]
                                .copy_from_slice(&g.data()[bi * total + off..bi * total + off + w]);
                        }
                        deltas.push((xid, Tensor::from_vec(&[b, w], dx)?));
                        off += w;
                    }
                }
                Op::Reshape { x } => {
                    let shape = self.values[x.0].shape().to_vec();
                    deltas.push((*x, g.reshaped(&shape)?));
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let mut d = layers::softmax_xent_backward(probs, labels);
                    for v in d.data_mut() {
                        *v *= g.item();
                    }
                    deltas.push((*logits, d));
                }
                Op::BinaryXent { p, targets, clamped } => {
                    let mut d = layers::binary_xent_backward(clamped, targets);
                    for v in d.data_mut() {
                        *v *= g.item();
                    }
                    deltas.push((*p, d));
                }
                Op::MaskMix { h, z, m } => {
                    let (dh, dz) = layers::mask_mix_backward(m, &g);
                    deltas.push((*h, dh));
                    deltas.push((*z, dz));
                }
                Op::ColScale { x, s } => {
                    let (dx, _) = layers::col_scale_backward(&self.values[x.0], s, &g);
                    deltas.push((*x, dx));
                }
                Op::Add { a, b } => {
                    deltas.push((*a, g.clone()));
                    deltas.push((*b, g));
                }
                Op::Sub { a, b } => {
                    let neg =
                        Tensor::from_vec(g.shape(), g.data().iter().map(|v| -v).collect())?;
                    deltas.push((*a, g));
                    deltas.push((*b, neg));
                }
                Op::Scale { x, c } => {
                    let d = Tensor::from_vec(g.shape(), g.data().iter().map(|v| v * c).collect())?;
                    deltas.push((*x, d));
                }
                Op::SqSum { x } => {
                    let gv = g.item();
                    let d = self.values[x.0].data().iter().map(|v| 2.0 * v * gv).collect();
                    deltas.push((*x, Tensor::from_vec(self.values[x.0].shape(), d)?));
                }
            }
            for (id, delta) in deltas {
                self.accumulate(id, delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check;
    use crate::tensor::optim::{ParamKind, ParamSet};
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap()
    }

    /// Small conv -> pool -> dense -> softmax net; FD over every parameter.
    #[test]
    fn finite_difference_through_composite_graph() {
        let mut rng = crate::rng::substream(21, "test.graph.fd");
        let x = rand_tensor(&mut rng, &[3, 8, 2]);
        let labels = vec![0usize, 1, 0];
        let mut params = ParamSet::new("net");
        params.insert("k", rand_tensor(&mut rng, &[4, 3, 2]), ParamKind::Weight).unwrap();
        params.insert("kb", rand_tensor(&mut rng, &[4]), ParamKind::Bias).unwrap();
        params.insert("w", rand_tensor(&mut rng, &[4, 2]), ParamKind::Weight).unwrap();
        params.insert("wb", rand_tensor(&mut rng, &[2]), ParamKind::Bias).unwrap();

        let loss_of = |ps: &ParamSet| -> crate::Result<f64> {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let k = g.lease(ps, "k")?;
            let kb = g.lease(ps, "kb")?;
            let c = g.conv1d(xn, k, kb, 1)?;
            let r = g.relu(c);
            let p = g.max_over_time(r)?;
            let w = g.lease(ps, "w")?;
            let wb = g.lease(ps, "wb")?;
            let logits = g.dense(p, w, wb)?;
            let loss = g.softmax_xent(logits, &labels)?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let k = g.lease(&params, "k").unwrap();
        let kb = g.lease(&params, "kb").unwrap();
        let c = g.conv1d(xn, k, kb, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_over_time(r).unwrap();
        let w = g.lease(&params, "w").unwrap();
        let wb = g.lease(&params, "wb").unwrap();
        let logits = g.dense(p, w, wb).unwrap();
        let loss = g.softmax_xent(logits, &labels).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.param_grads();

        let numeric = check::central_diff_params(&mut params, 1e-5, loss_of).unwrap();
        let report = check::compare_grads(&analytic, &numeric, "net");
        assert!(report.max_rel <= 1e-4, "worst {:?}", report);
    }

    /// A parameter leased twice accumulates both gradient paths.
    #[test]
    fn shared_param_accumulates_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.param("w", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.input(Tensor::zeros(&[2]));
        let h1 = g.dense(x, w, b).unwrap();
        let h2 = g.dense(h1, w, b).unwrap(); // same leaf again
        let s = g.sq_sum(h2);
        g.backward(s).unwrap();
        // f = sum((x W W)^2); with W=I, df/dW = 2 * (x^T (x W W) W^T + (x W)^T (x W W))
        // both terms equal [[2,4],[4,8]] for x=[1,2], so total [[4,8],[8,16]].
        let grads = g.param_grads();
        assert_eq!(grads["w"].data(), &[4.0, 8.0, 8.0, 16.0]);
    }

    #[test]
    fn backward_twice_rejected_and_nonscalar_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let s = g.sq_sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());

        let mut g2 = Graph::new();
        let x2 = g2.input(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(g2.backward(x2).is_err());
    }

    #[test]
    fn nonfinite_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(f64::INFINITY));
        assert!(matches!(g.backward(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_cols_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap());
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.sq_sum(cat);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[10.0, 12.0]);
    }
}
