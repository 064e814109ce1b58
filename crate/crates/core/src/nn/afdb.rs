use rand::Rng;

use super::{bind, join, ConvUnit, MbrConv, Module, ParamKind, LEAKY_SLOPE};
use crate::error::{shape_err, Result};
use crate::tensor::{ops, Element, Graph, NodeId, Tensor};

pub const LF_KERNEL: usize = 5;
pub const HF_KERNEL: usize = 3;

/// `(lf, hf)` channel counts. The LF path takes the first
/// `floor(lf_ratio * channels)` channels.
pub fn split_channels(channels: usize, lf_ratio: f64) -> (usize, usize) {
    let lf = ((lf_ratio * channels as f64).floor() as usize).min(channels);
    (lf, channels - lf)
}

/// Asymmetric frequency denoising block.
///
/// ```text
/// out = x + s * Fuse1x1(concat(LReLU(LF5x5(x[..lf])), LReLU(HF3x3(x[lf..]))))
/// ```
///
/// Either path disappears when its share of channels is zero. After the
/// residual scale has been folded into `fuse`, `res_scale` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Afdb {
    pub channels: usize,
    pub lf_channels: usize,
    pub lf: Option<ConvUnit>,
    pub hf: Option<ConvUnit>,
    pub fuse: ConvUnit,
    pub res_scale: Option<Tensor>,
}

/// Output of a block plus the post-activation branch features.
pub struct AfdbTaps {
    pub out: Tensor,
    pub lf: Option<Tensor>,
    pub hf: Option<Tensor>,
}

impl Afdb {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        lf_ratio: f64,
        res_scale_init: f32,
        rng: &mut R,
    ) -> Self {
        let (lf_c, hf_c) = split_channels(channels, lf_ratio);
        let lf = (lf_c > 0).then(|| ConvUnit::Multi(MbrConv::new(lf_c, lf_c, LF_KERNEL, rng)));
        let hf = (hf_c > 0).then(|| ConvUnit::Multi(MbrConv::new(hf_c, hf_c, HF_KERNEL, rng)));
        let fuse = ConvUnit::Multi(MbrConv::new(channels, channels, 1, rng));
        Self {
            channels,
            lf_channels: lf_c,
            lf,
            hf,
            fuse,
            res_scale: Some(Tensor::scalar(res_scale_init)),
        }
    }

    pub fn hf_channels(&self) -> usize {
        self.channels - self.lf_channels
    }

    fn check_input(&self, x: &Tensor<impl Element>) -> Result<()> {
        if x.shape().c != self.channels {
            return Err(shape_err!(
                "AFDB expects {} channels, got {}",
                self.channels,
                x.shape().c
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taps(x)?.out)
    }

    pub fn forward_taps(&self, x: &Tensor) -> Result<AfdbTaps> {
        self.check_input(x)?;
        let alpha = LEAKY_SLOPE;
        let lf = match &self.lf {
            Some(u) => {
                let xs = ops::slice_channels(x, 0, self.lf_channels)?;
                Some(ops::leaky_relu(&u.forward(&xs)?, alpha))
            }
            None => None,
        };
        let hf = match &self.hf {
            Some(u) => {
                let xs = ops::slice_channels(x, self.lf_channels, self.hf_channels())?;
                Some(ops::leaky_relu(&u.forward(&xs)?, alpha))
            }
            None => None,
        };
        let parts: Vec<&Tensor> = lf.iter().chain(hf.iter()).collect();
        let cat = ops::concat_channels(&parts)?;
        let mut f = self.fuse.forward(&cat)?;
        if let Some(s) = &self.res_scale {
            f = f.scale(s.item()?);
        }
        let out = x.add(&f)?;
        Ok(AfdbTaps { out, lf, hf })
    }

    pub fn forward_graph<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
        training: bool,
    ) -> Result<NodeId> {
        self.check_input(g.value(x))?;
        let alpha = T::from_f64_lossy(LEAKY_SLOPE as f64);
        let mut parts = Vec::with_capacity(2);
        if let Some(u) = &mut self.lf {
            let xs = g.slice_channels(x, 0, self.lf_channels)?;
            let y = u.forward_graph(g, xs, &join(prefix, "lf"), training)?;
            parts.push(g.leaky_relu(y, alpha));
        }
        let hf_c = self.channels - self.lf_channels;
        if let Some(u) = &mut self.hf {
            let xs = g.slice_channels(x, self.lf_channels, hf_c)?;
            let y = u.forward_graph(g, xs, &join(prefix, "hf"), training)?;
            parts.push(g.leaky_relu(y, alpha));
        }
        let cat = g.concat_channels(&parts)?;
        let mut f = self
            .fuse
            .forward_graph(g, cat, &join(prefix, "fuse"), training)?;
        if let Some(s) = &self.res_scale {
            let s = bind(g, prefix, "res_scale", s, ParamKind::Trainable)?;
            f = g.scale_by(f, s)?;
        }
        g.add(x, f)
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit> {
        self.lf
            .iter_mut()
            .chain(self.hf.iter_mut())
            .chain(std::iter::once(&mut self.fuse))
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        self.lf
            .iter()
            .chain(self.hf.iter())
            .chain(std::iter::once(&self.fuse))
    }
}

impl Module for Afdb {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let Some(u) = &self.lf {
            u.visit(&join(prefix, "lf"), f);
        }
        if let Some(u) = &self.hf {
            u.visit(&join(prefix, "hf"), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
        if let Some(s) = &self.res_scale {
            f(&join(prefix, "res_scale"), s, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let Some(u) = &mut self.lf {
            u.visit_mut(&join(prefix, "lf"), f);
        }
        if let Some(u) = &mut self.hf {
            u.visit_mut(&join(prefix, "hf"), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        if let Some(s) = &mut self.res_scale {
            f(&join(prefix, "res_scale"), s, ParamKind::Trainable);
        }
    }
}
