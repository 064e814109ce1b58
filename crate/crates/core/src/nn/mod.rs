//! Network building blocks. Every block has two forward routes: a plain
//! eval-mode `forward` over tensors, and `forward_graph` which records onto a
//! [`Graph`] for training and gradient checks.

mod afdb;
mod downsample;
mod mbrconv;
mod sgu;
mod tail;

pub use afdb::{split_channels, Afdb, AfdbTaps};
pub use downsample::{haar_basis, Downsample, DownsampleMode};
pub use mbrconv::{MbrBranch, MbrConv, EXPANSION};
pub use sgu::Sgu;
pub use tail::Tail;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{conv2d, ops, Conv2dParams, Element, Graph, NodeId, Tensor};

pub const LEAKY_SLOPE: f32 = 0.1;

/// How a named tensor participates in training.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Part of the model but excluded from optimisation (frozen Haar basis).
    Frozen,
    /// Running statistics.
    Buffer,
}

/// Named-tensor traversal. Names are dot-joined paths and are stable across
/// runs; the weight container and the trainer key everything by them.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));

    /// Number of trainable and frozen scalars; running statistics excluded.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k != ParamKind::Buffer {
                n += t.numel();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Record a model tensor on the graph: named trainable leaf or constant.
pub(crate) fn bind<T: Element>(
    g: &mut Graph<T>,
    prefix: &str,
    name: &str,
    t: &Tensor,
    kind: ParamKind,
) -> Result<NodeId> {
    match kind {
        ParamKind::Trainable => g.param(&join(prefix, name), t.cast()),
        _ => Ok(g.input(t.cast())),
    }
}

/// Kaiming-uniform init for a conv weight `[cout, cin_g, kh, kw]`, with the
/// gain of a LeakyReLU of slope [`LEAKY_SLOPE`].
pub fn kaiming_uniform<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Tensor {
    let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
    let a = LEAKY_SLOPE as f64;
    let bound = (6.0 / ((1.0 + a * a) * fan_in)).sqrt();
    Tensor::uniform(dims, -bound, bound, rng)
}

/// Dense or grouped convolution layer with bias. This is also the shape every
/// fused multi-branch block collapses to.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub params: Conv2dParams,
    pub weight_kind: ParamKind,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, params: Conv2dParams) -> Self {
        Self {
            weight,
            bias,
            params,
            weight_kind: ParamKind::Trainable,
        }
    }

    /// Kaiming-initialised weight, zero bias.
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        params: Conv2dParams,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = kaiming_uniform([cout, cin / params.groups, kernel, kernel], rng);
        let bias = bias.then(|| Tensor::vector(vec![0.0; cout]));
        Self::new(weight, bias, params)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.params.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.params)
    }

    pub fn forward_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        let w = bind(g, prefix, "weight", &self.weight, self.weight_kind)?;
        let b = match &self.bias {
            Some(b) => Some(bind(g, prefix, "bias", b, ParamKind::Trainable)?),
            None => None,
        };
        g.conv2d(x, w, b, self.params)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, self.weight_kind);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, self.weight_kind);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::vector(vec![1.0; channels]),
            beta: Tensor::vector(vec![0.0; channels]),
            running_mean: Tensor::vector(vec![0.0; channels]),
            running_var: Tensor::vector(vec![1.0; channels]),
            eps: ops::BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::batch_norm_eval(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    /// Training mode normalises with batch statistics and updates the running
    /// statistics in place.
    pub fn forward_graph<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
        training: bool,
    ) -> Result<NodeId> {
        let gamma = bind(g, prefix, "gamma", &self.gamma, ParamKind::Trainable)?;
        let beta = bind(g, prefix, "beta", &self.beta, ParamKind::Trainable)?;
        if training {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
            let s = g.value(x).shape();
            ops::update_running_stats(
                &mut self.running_mean,
                &mut self.running_var,
                &mean,
                &var,
                s.n * s.plane(),
                ops::BN_MOMENTUM,
            );
            Ok(y)
        } else {
            g.batch_norm_eval(
                x,
                gamma,
                beta,
                &self.running_mean.cast(),
                &self.running_var.cast(),
                self.eps,
            )
        }
    }

    /// Draw non-trivial affine parameters and statistics, for equivalence tests
    /// that need batch norms that are not the identity.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let c = self.channels();
        self.gamma = Tensor::uniform([1, c, 1, 1], 0.5, 1.5, rng);
        self.beta = Tensor::uniform([1, c, 1, 1], -0.2, 0.2, rng);
        self.running_mean = Tensor::uniform([1, c, 1, 1], -0.2, 0.2, rng);
        self.running_var = Tensor::uniform([1, c, 1, 1], 0.5, 2.0, rng);
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            &self.running_mean,
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &self.running_var,
            ParamKind::Buffer,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(
            &join(prefix, "gamma"),
            &mut self.gamma,
            ParamKind::Trainable,
        );
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            &mut self.running_mean,
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &mut self.running_var,
            ParamKind::Buffer,
        );
    }
}

/// A block's convolution, either in multi-branch training form or collapsed
/// into one dense convolution.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit {
    Multi(MbrConv),
    Fused(Conv2d),
}

impl ConvUnit {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Multi(m) => m.forward(x),
            Self::Fused(c) => c.forward(x),
        }
    }

    pub fn forward_graph<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
        training: bool,
    ) -> Result<NodeId> {
        match self {
            Self::Multi(m) => m.forward_graph(g, x, prefix, training),
            Self::Fused(c) => c.forward_graph(g, x, prefix),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, Self::Fused(_))
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Multi(m) => m.out_ch,
            Self::Fused(c) => c.out_channels(),
        }
    }

    pub fn randomize_norms<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if let Self::Multi(m) = self {
            for b in &mut m.branches {
                b.bn.randomize(rng);
            }
        }
    }
}

impl Module for ConvUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            Self::Multi(m) => m.visit(prefix, f),
            Self::Fused(c) => c.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            Self::Multi(m) => m.visit_mut(prefix, f),
            Self::Fused(c) => c.visit_mut(prefix, f),
        }
    }
}
