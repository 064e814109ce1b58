use rand::Rng;

use super::{join, Conv2d, Module, ParamKind};
use crate::error::Result;
use crate::tensor::{ops, Conv2dParams, Element, Graph, NodeId, Tensor};

/// Residual head: `1 x 1` conv to 12 channels, then PixelShuffle by 2 to a
/// full-resolution RGB residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Tail {
    pub conv: Conv2d,
}

impl Tail {
    pub const OUT_CHANNELS: usize = 3;

    /// Factor on the Kaiming bound of the head's weights. An untrained
    /// network then predicts residuals of a few grey levels instead of
    /// thousands, so it starts close to the identity.
    pub const INIT_GAIN: f32 = 0.01;

    pub fn new<R: Rng + ?Sized>(cin: usize, rng: &mut R) -> Self {
        let mut conv = Conv2d::init(
            cin,
            4 * Self::OUT_CHANNELS,
            1,
            Conv2dParams::default(),
            true,
            rng,
        );
        conv.weight = conv.weight.scale(Self::INIT_GAIN);
        Self { conv }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pixel_shuffle(&self.conv.forward(x)?, 2)
    }

    pub fn forward_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        let y = self.conv.forward_graph(g, x, &join(prefix, "conv"))?;
        g.pixel_shuffle(y, 2)
    }

    pub fn zero(&mut self) {
        self.conv.weight = Tensor::zeros(self.conv.weight.dims());
        if let Some(b) = &mut self.conv.bias {
            *b = Tensor::zeros(b.dims());
        }
    }
}

impl Module for Tail {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}
