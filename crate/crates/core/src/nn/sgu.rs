use rand::Rng;

use super::{join, Conv2d, Module, ParamKind, LEAKY_SLOPE};
use crate::error::{shape_err, Result};
use crate::tensor::{ops, Conv2dParams, Element, Graph, NodeId, Tensor};

/// Spatially gated upsampler.
///
/// ```text
/// M   = sigmoid(DW3x3(Up2x(LReLU(Conv1x1_mask(F_lr)))))
/// out = PixelShuffle2(Conv1x1_main(F_lr)) + F_hr * M
/// ```
///
/// Without `mask_dw` the depthwise refinement step is skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgu {
    pub in_ch_lr: usize,
    pub out_ch_hr: usize,
    pub proj_main: Conv2d,
    pub proj_mask: Conv2d,
    pub mask_dw: Option<Conv2d>,
}

impl Sgu {
    pub fn new<R: Rng + ?Sized>(c_lr: usize, c_hr: usize, dw_refine: bool, rng: &mut R) -> Self {
        let pw = Conv2dParams::default();
        Self {
            in_ch_lr: c_lr,
            out_ch_hr: c_hr,
            proj_main: Conv2d::init(c_lr, 4 * c_hr, 1, pw, true, rng),
            proj_mask: Conv2d::init(c_lr, c_hr, 1, pw, true, rng),
            mask_dw: dw_refine
                .then(|| Conv2d::init(c_hr, c_hr, 3, Conv2dParams::new(1, 1, c_hr), true, rng)),
        }
    }

    fn check(&self, lr: &Tensor<impl Element>, hr: &Tensor<impl Element>) -> Result<()> {
        let (l, h) = (lr.shape(), hr.shape());
        if l.c != self.in_ch_lr || h.c != self.out_ch_hr {
            return Err(shape_err!(
                "SGU expects {}/{} channels, got {}/{}",
                self.in_ch_lr,
                self.out_ch_hr,
                l.c,
                h.c
            ));
        }
        if l.n != h.n || h.h != 2 * l.h || h.w != 2 * l.w {
            return Err(shape_err!(
                "SGU high-res input {h} must be exactly twice low-res {l}"
            ));
        }
        Ok(())
    }

    /// Spatial gate in (0, 1), shaped like the high-resolution feature.
    pub fn mask(&self, f_lr: &Tensor) -> Result<Tensor> {
        let m = ops::leaky_relu(&self.proj_mask.forward(f_lr)?, LEAKY_SLOPE);
        let mut m = ops::nearest_upsample2x(&m);
        if let Some(dw) = &self.mask_dw {
            m = dw.forward(&m)?;
        }
        Ok(ops::sigmoid(&m))
    }

    pub fn forward(&self, f_lr: &Tensor, f_hr: &Tensor) -> Result<Tensor> {
        self.check(f_lr, f_hr)?;
        let main = ops::pixel_shuffle(&self.proj_main.forward(f_lr)?, 2)?;
        let gated = f_hr.mul(&self.mask(f_lr)?)?;
        main.add(&gated)
    }

    pub fn forward_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        f_lr: NodeId,
        f_hr: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        self.check(g.value(f_lr), g.value(f_hr))?;
        let main = self
            .proj_main
            .forward_graph(g, f_lr, &join(prefix, "main"))?;
        let main = g.pixel_shuffle(main, 2)?;
        let m = self
            .proj_mask
            .forward_graph(g, f_lr, &join(prefix, "mask"))?;
        let m = g.leaky_relu(m, T::from_f64_lossy(LEAKY_SLOPE as f64));
        let mut m = g.upsample2x(m);
        if let Some(dw) = &self.mask_dw {
            m = dw.forward_graph(g, m, &join(prefix, "mask_dw"))?;
        }
        let m = g.sigmoid(m);
        let gated = g.mul(f_hr, m)?;
        g.add(main, gated)
    }
}

impl Module for Sgu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.proj_main.visit(&join(prefix, "main"), f);
        self.proj_mask.visit(&join(prefix, "mask"), f);
        if let Some(dw) = &self.mask_dw {
            dw.visit(&join(prefix, "mask_dw"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.proj_main.visit_mut(&join(prefix, "main"), f);
        self.proj_mask.visit_mut(&join(prefix, "mask"), f);
        if let Some(dw) = &mut self.mask_dw {
            dw.visit_mut(&join(prefix, "mask_dw"), f);
        }
    }
}
