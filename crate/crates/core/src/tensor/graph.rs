//! Eager reverse-mode tape.
//!
//! Every op computes its value when it is recorded, so a [`Graph`] doubles as
//! the forward pass. Nodes are appended in evaluation order, which makes the
//! node list a topological order by construction.

use std::collections::HashMap;

use super::conv::conv2d_backward;
use super::ops;
use super::{conv2d, Conv2dParams, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        p: Conv2dParams,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    MulConst {
        x: NodeId,
        c: T,
    },
    LeakyRelu {
        x: NodeId,
        alpha: T,
    },
    Sigmoid {
        x: NodeId,
    },
    PixelShuffle {
        x: NodeId,
        r: usize,
    },
    Upsample2x {
        x: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    SteRound {
        x: NodeId,
    },
    Clip {
        x: NodeId,
        lo: T,
        hi: T,
    },
    Sum {
        x: NodeId,
    },
    Charbonnier {
        pred: NodeId,
        target: NodeId,
        eps: f64,
    },
    PsnrLoss {
        pred: NodeId,
        target: NodeId,
        mse: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with its trainable leaves.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    overrides: HashMap<String, Tensor<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that requires one.
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
    names: HashMap<String, NodeId>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&id| self.get(id))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
            overrides: HashMap::new(),
        }
    }

    /// A graph whose named parameters take these values instead of the ones
    /// passed to [`Graph::param`]. Used to probe a block in higher precision.
    pub fn with_overrides(overrides: HashMap<String, Tensor<T>>) -> Self {
        Self {
            overrides,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        let value = match self.overrides.get(name) {
            Some(o) if o.shape() != value.shape() => {
                return Err(Error::Shape(format!(
                    "override for {name} has shape {}, expected {}",
                    o.shape(),
                    value.shape()
                )))
            }
            Some(o) => o.clone(),
            None => value,
        };
        let id = self.leaf(value, true);
        self.names.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        p: Conv2dParams,
    ) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, p }, &ins))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply by a single-element node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item()?;
        let v = self.value(x).scale(sv);
        Ok(self.push(v, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn mul_const(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(v, Op::MulConst { x, c }, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: T) -> NodeId {
        let v = ops::leaky_relu(self.value(x), alpha);
        self.push(v, Op::LeakyRelu { x, alpha }, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid { x }, &[x])
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = ops::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(v, Op::PixelShuffle { x, r }, &[x]))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let v = ops::nearest_upsample2x(self.value(x));
        self.push(v, Op::Upsample2x { x }, &[x])
    }

    /// Training-mode batch norm. Also returns the batch mean and biased
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (mean, var) = ops::channel_stats(xv);
        let (v, _, _) = ops::batch_norm_train(xv, self.value(gamma), self.value(beta), eps)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let s = xv.shape();
        let mut xhat = Tensor::<f64>::zeros(s.dims());
        for n in 0..s.n {
            for c in 0..s.c {
                for (o, &v) in xhat.plane_mut(n, c).iter_mut().zip(xv.plane(n, c)) {
                    *o = (v.to_f64_lossy() - mean[c]) * inv_std[c];
                }
            }
        }
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push(v, op, &[x, gamma, beta]), mean, var))
    }

    /// Eval-mode batch norm with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let v = ops::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        let mean_v = mean.data().iter().map(|m| m.to_f64_lossy()).collect();
        let inv_std = var
            .data()
            .iter()
            .map(|v| 1.0 / (v.to_f64_lossy() + eps).sqrt())
            .collect();
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean_v,
            inv_std,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_channels(&vals)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(v, Op::Slice { x, start }, &[x]))
    }

    /// Round in the forward pass, identity in the backward pass.
    pub fn ste_round(&mut self, x: NodeId) -> NodeId {
        let v = ops::round(self.value(x));
        self.push(v, Op::SteRound { x }, &[x])
    }

    pub fn clip(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let v = ops::clip(self.value(x), lo, hi);
        self.push(v, Op::Clip { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum { x }, &[x])
    }

    /// Mean of `sqrt((pred - target)² + eps²)`.
    pub fn charbonnier(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        let v = crate::metrics::charbonnier_loss(self.value(pred), self.value(target), eps)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(v)),
            Op::Charbonnier { pred, target, eps },
            &[pred, target],
        ))
    }

    /// Negative PSNR against `max_val`, with `floor` added to the MSE.
    pub fn psnr_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        max_val: f64,
        floor: f64,
    ) -> Result<NodeId> {
        let mse = crate::metrics::mse(self.value(pred), self.value(target))? + floor;
        if mse <= 0.0 {
            return Err(Error::Numeric(
                "psnr loss undefined at zero MSE; add a floor".into(),
            ));
        }
        let v = 10.0 * mse.log10() - 20.0 * max_val.log10();
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(v)),
            Op::PsnrLoss { pred, target, mse },
            &[pred, target],
        ))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.dims(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            names: self.names.clone(),
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, t: Tensor<T>| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, p } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dx, dw, db) = conv2d_backward(xv, wv, g, *p, needs(*x))?;
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if needs(*w) {
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let bv = self.value(*b);
                        acc(*b, db.reshape(bv.dims())?)?;
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if needs(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s);
                if needs(*x) {
                    acc(*x, g.scale(sv.item()?))?;
                }
                if needs(*s) {
                    let ds = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    acc(*s, Tensor::full(sv.dims(), ds))?;
                }
            }
            Op::MulConst { x, c } => acc(*x, g.scale(*c))?,
            Op::LeakyRelu { x, alpha } => {
                let d = g.zip_map(
                    self.value(*x),
                    |g, v| if v >= T::zero() { g } else { g * *alpha },
                )?;
                acc(*x, d)?;
            }
            Op::Sigmoid { x } => {
                let d = g.zip_map(&node.value, |g, y| g * y * (T::one() - y))?;
                acc(*x, d)?;
            }
            Op::PixelShuffle { x, r } => acc(*x, ops::pixel_unshuffle(g, *r)?)?,
            Op::Upsample2x { x } => {
                let s = self.value(*x).shape();
                let mut d = Tensor::zeros(s.dims());
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = g.plane(n, c);
                        let dst = d.plane_mut(n, c);
                        let w2 = 2 * s.w;
                        for y in 0..2 * s.h {
                            for xx in 0..w2 {
                                let o = (y / 2) * s.w + xx / 2;
                                dst[o] = dst[o] + src[y * w2 + xx];
                            }
                        }
                    }
                }
                acc(*x, d)?;
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = g.shape();
                let m = (s.n * s.plane()) as f64;
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0f64; s.c];
                let mut dbeta = vec![0.0f64; s.c];
                for c in 0..s.c {
                    for n in 0..s.n {
                        for (&gv, &xh) in g.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            let gv = gv.to_f64_lossy();
                            dgamma[c] += gv * xh;
                            dbeta[c] += gv;
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = Tensor::zeros(s.dims());
                    for c in 0..s.c {
                        let gc = gam.data()[c].to_f64_lossy();
                        let k = gc * inv_std[c] / m;
                        for n in 0..s.n {
                            let out = dx.plane_mut(n, c);
                            for ((o, &gv), &xh) in
                                out.iter_mut().zip(g.plane(n, c)).zip(xhat.plane(n, c))
                            {
                                let v = k * (m * gv.to_f64_lossy() - dbeta[c] - xh * dgamma[c]);
                                *o = T::from_f64_lossy(v);
                            }
                        }
                    }
                    acc(*x, dx)?;
                }
                if needs(*gamma) {
                    let t = to_vec_tensor(&dgamma, gam.dims())?;
                    acc(*gamma, t)?;
                }
                if needs(*beta) {
                    let t = to_vec_tensor(&dbeta, self.value(*beta).dims())?;
                    acc(*beta, t)?;
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = g.shape();
                let xv = self.value(*x);
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0f64; s.c];
                let mut dbeta = vec![0.0f64; s.c];
                let mut dx = Tensor::zeros(s.dims());
                for c in 0..s.c {
                    let k = T::from_f64_lossy(gam.data()[c].to_f64_lossy() * inv_std[c]);
                    for n in 0..s.n {
                        for ((&gv, &xv), o) in g
                            .plane(n, c)
                            .iter()
                            .zip(xv.plane(n, c))
                            .zip(dx.plane_mut(n, c).iter_mut())
                        {
                            let gf = gv.to_f64_lossy();
                            dgamma[c] += gf * (xv.to_f64_lossy() - mean[c]) * inv_std[c];
                            dbeta[c] += gf;
                            *o = gv * k;
                        }
                    }
                }
                if needs(*x) {
                    acc(*x, dx)?;
                }
                if needs(*gamma) {
                    acc(*gamma, to_vec_tensor(&dgamma, gam.dims())?)?;
                }
                if needs(*beta) {
                    acc(*beta, to_vec_tensor(&dbeta, self.value(*beta).dims())?)?;
                }
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).shape().c;
                    if needs(*p) {
                        acc(*p, ops::slice_channels(g, start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let s = self.value(*x).shape();
                let len = g.shape().c;
                let mut d = Tensor::zeros(s.dims());
                let p = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * p;
                    d.data_mut()[dst..dst + len * p]
                        .copy_from_slice(&g.data()[n * len * p..(n + 1) * len * p]);
                }
                acc(*x, d)?;
            }
            Op::SteRound { x } => acc(*x, g.clone())?,
            Op::Clip { x, lo, hi } => {
                let d = g.zip_map(self.value(*x), |g, v| {
                    if v >= *lo && v <= *hi {
                        g
                    } else {
                        T::zero()
                    }
                })?;
                acc(*x, d)?;
            }
            Op::Sum { x } => {
                let gv = g.item()?;
                acc(*x, Tensor::full(self.value(*x).dims(), gv))?;
            }
            Op::Charbonnier { pred, target, eps } => {
                let gv = g.item()?.to_f64_lossy();
                let pv = self.value(*pred);
                let m = pv.numel() as f64;
                let eps2 = eps * eps;
                let d = pv.zip_map(self.value(*target), |p, t| {
                    let diff = p.to_f64_lossy() - t.to_f64_lossy();
                    T::from_f64_lossy(gv * diff / (diff * diff + eps2).sqrt() / m)
                })?;
                if needs(*target) {
                    acc(*target, d.scale(-T::one()))?;
                }
                if needs(*pred) {
                    acc(*pred, d)?;
                }
            }
            Op::PsnrLoss { pred, target, mse } => {
                let gv = g.item()?.to_f64_lossy();
                let pv = self.value(*pred);
                let m = pv.numel() as f64;
                let k = gv * 10.0 / (std::f64::consts::LN_10 * mse) * 2.0 / m;
                let d = pv.zip_map(self.value(*target), |p, t| {
                    T::from_f64_lossy(k * (p.to_f64_lossy() - t.to_f64_lossy()))
                })?;
                if needs(*target) {
                    acc(*target, d.scale(-T::one()))?;
                }
                if needs(*pred) {
                    acc(*pred, d)?;
                }
            }
        }
        Ok(())
    }
}

fn to_vec_tensor<T: Element>(v: &[f64], dims: [usize; 4]) -> Result<Tensor<T>> {
    Tensor::from_vec(dims, v.iter().map(|&x| T::from_f64_lossy(x)).collect())
}
