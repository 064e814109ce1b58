//! The full two-scale network and its named configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    join, Afdb, AfdbTaps, ConvUnit, Downsample, DownsampleMode, Module, ParamKind, Sgu, Tail,
};
use crate::tensor::{ops, Element, Graph, NodeId, Tensor};

pub const PIXEL_SCALE: f32 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastShadeConfig {
    pub c1: usize,
    pub c2: usize,
    pub n1: usize,
    pub n2: usize,
    /// Share of AFDB channels routed to the 5x5 path. 0.25 is the 1:3 split,
    /// 0.5 the 1:1 split and 1.0 sends everything through the 5x5 path.
    pub lf_ratio: f64,
    pub downsample_mode: DownsampleMode,
    pub sgu_dw_refine: bool,
    pub res_scale_init: f32,
}

impl FastShadeConfig {
    fn with_sizes(c1: usize, c2: usize, n1: usize, n2: usize) -> Self {
        Self {
            c1,
            c2,
            n1,
            n2,
            lf_ratio: 0.25,
            downsample_mode: DownsampleMode::Conv2x2,
            sgu_dw_refine: true,
            res_scale_init: 0.2,
        }
    }

    pub fn m() -> Self {
        Self::with_sizes(16, 64, 2, 3)
    }

    pub fn l() -> Self {
        Self::with_sizes(24, 96, 2, 3)
    }

    pub fn xl() -> Self {
        Self::with_sizes(32, 128, 3, 5)
    }

    /// Smallest useful network, for toy training runs. At eight channels the
    /// Haar front end with its normalised projection trains several times
    /// faster than a bare strided conv.
    pub fn tiny() -> Self {
        Self {
            downsample_mode: DownsampleMode::HaarLearnable,
            ..Self::with_sizes(8, 16, 1, 1)
        }
    }

    /// Case-insensitive lookup of `m`, `l`, `xl` or `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "m" => Ok(Self::m()),
            "l" => Ok(Self::l()),
            "xl" => Ok(Self::xl()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown variant {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.c1 < 4 {
            bad.push(format!("c1 = {} < 4", self.c1));
        }
        if self.c2 < 4 {
            bad.push(format!("c2 = {} < 4", self.c2));
        }
        if self.n1 < 1 {
            bad.push("n1 = 0 < 1".to_owned());
        }
        if self.n2 < 1 {
            bad.push("n2 = 0 < 1".to_owned());
        }
        if !(0.0..=1.0).contains(&self.lf_ratio) {
            bad.push(format!("lf_ratio = {} outside [0, 1]", self.lf_ratio));
        }
        if !self.res_scale_init.is_finite() {
            bad.push(format!(
                "res_scale_init = {} not finite",
                self.res_scale_init
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Which weights the model currently carries.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Multi-branch blocks with batch norms; I/O scalars applied at runtime.
    Training,
    /// Every block collapsed to one conv, I/O scalars still applied at runtime.
    BranchesFused,
    /// Branches collapsed and every scalar folded into weights.
    Fused,
}

/// Selects one AFDB by stage (1 or 2) and index within that stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BlockTap {
    pub stage: usize,
    pub index: usize,
}

impl Default for BlockTap {
    fn default() -> Self {
        Self { stage: 2, index: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastShadeModel {
    pub config: FastShadeConfig,
    pub down1: Downsample,
    pub stage1: Vec<Afdb>,
    pub down2: Downsample,
    pub stage2: Vec<Afdb>,
    pub sgu: Sgu,
    pub tail: Tail,
    /// True once the 1/255 and x255 scalars live inside the weights.
    pub io_folded: bool,
}

/// Deterministic construction from a seed.
pub fn build_model(config: &FastShadeConfig, seed: u64) -> Result<FastShadeModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FastShadeModel::new(config.clone(), &mut rng))
}

impl FastShadeModel {
    fn new<R: Rng + ?Sized>(config: FastShadeConfig, rng: &mut R) -> Self {
        let c = &config;
        let down1 = Downsample::new(c.downsample_mode, 3, c.c1, rng);
        let stage1 = (0..c.n1)
            .map(|_| Afdb::new(c.c1, c.lf_ratio, c.res_scale_init, rng))
            .collect();
        let down2 = Downsample::new(c.downsample_mode, c.c1, c.c2, rng);
        let stage2 = (0..c.n2)
            .map(|_| Afdb::new(c.c2, c.lf_ratio, c.res_scale_init, rng))
            .collect();
        let sgu = Sgu::new(c.c2, c.c1, c.sgu_dw_refine, rng);
        let tail = Tail::new(c.c1, rng);
        Self {
            config,
            down1,
            stage1,
            down2,
            stage2,
            sgu,
            tail,
            io_folded: false,
        }
    }

    /// Every block convolution, in a fixed order.
    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        self.down1
            .projection
            .iter()
            .chain(self.stage1.iter().flat_map(|b| b.units()))
            .chain(self.down2.projection.iter())
            .chain(self.stage2.iter().flat_map(|b| b.units()))
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit> {
        self.down1
            .projection
            .iter_mut()
            .chain(self.stage1.iter_mut().flat_map(|b| b.units_mut()))
            .chain(self.down2.projection.iter_mut())
            .chain(self.stage2.iter_mut().flat_map(|b| b.units_mut()))
    }

    pub fn topology(&self) -> Topology {
        if self.units().any(|u| !u.is_fused()) {
            Topology::Training
        } else if self.io_folded {
            Topology::Fused
        } else {
            Topology::BranchesFused
        }
    }

    /// Replace every batch norm's affine parameters and running statistics
    /// with random non-trivial values.
    pub fn randomize_norm_stats<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for u in self.units_mut() {
            u.randomize_norms(rng);
        }
    }

    fn check_image(image: &Tensor<impl Element>) -> Result<()> {
        let s = image.shape();
        if s.c != 3 {
            return Err(shape_err!("expected a 3-channel image, got {s}"));
        }
        if !s.h.is_multiple_of(4) || !s.w.is_multiple_of(4) {
            return Err(shape_err!(
                "image height and width must be divisible by 4, got {s}"
            ));
        }
        Ok(())
    }

    /// Output before rounding, on the [0, 255] scale. Batch norms use running
    /// statistics.
    pub fn forward_raw(&self, image: &Tensor) -> Result<Tensor> {
        Self::check_image(image)?;
        let x = if self.io_folded {
            image.clone()
        } else {
            image.scale(1.0 / PIXEL_SCALE)
        };
        let mut h = self.down1.forward(&x)?;
        for b in &self.stage1 {
            h = b.forward(&h)?;
        }
        let skip = h;
        let mut h = self.down2.forward(&skip)?;
        for b in &self.stage2 {
            h = b.forward(&h)?;
        }
        let r = self.tail.forward(&self.sgu.forward(&h, &skip)?)?;
        if self.io_folded {
            image.add(&r)
        } else {
            // Single rounding for `image + 255 * r`.
            image.zip_map(&r, |i, r| r.mul_add(PIXEL_SCALE, i))
        }
    }

    /// Eval output: rounded and clipped to integers in [0, 255].
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let raw = self.forward_raw(image)?;
        Ok(ops::clip(&ops::round(&raw), 0.0, PIXEL_SCALE))
    }

    /// Post-activation branch features of one AFDB.
    pub fn block_taps(&self, image: &Tensor, tap: BlockTap) -> Result<AfdbTaps> {
        Self::check_image(image)?;
        let blocks = match tap.stage {
            1 => &self.stage1,
            2 => &self.stage2,
            s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        };
        if tap.index >= blocks.len() {
            return Err(Error::Config(format!(
                "stage {} has {} blocks, asked for block {}",
                tap.stage,
                blocks.len(),
                tap.index
            )));
        }
        let x = if self.io_folded {
            image.clone()
        } else {
            image.scale(1.0 / PIXEL_SCALE)
        };
        let mut h = self.down1.forward(&x)?;
        let run =
            |blocks: &[Afdb], h: &mut Tensor, stop: Option<usize>| -> Result<Option<AfdbTaps>> {
                for (i, b) in blocks.iter().enumerate() {
                    if Some(i) == stop {
                        return b.forward_taps(h).map(Some);
                    }
                    *h = b.forward(h)?;
                }
                Ok(None)
            };
        if tap.stage == 1 {
            return Ok(run(&self.stage1, &mut h, Some(tap.index))?.expect("index checked"));
        }
        run(&self.stage1, &mut h, None)?;
        let mut h = self.down2.forward(&h)?;
        Ok(run(&self.stage2, &mut h, Some(tap.index))?.expect("index checked"))
    }

    /// Pre-rounding output recorded on `g`. `training` selects batch
    /// statistics in the norms (and updates their running estimates).
    pub fn forward_graph_raw<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        image: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        Self::check_image(g.value(image))?;
        let x = if self.io_folded {
            image
        } else {
            g.mul_const(image, T::from_f64_lossy(1.0 / PIXEL_SCALE as f64))
        };
        let mut h = self.down1.forward_graph(g, x, "down1", training)?;
        for (i, b) in self.stage1.iter_mut().enumerate() {
            h = b.forward_graph(g, h, &format!("stage1.{i}"), training)?;
        }
        let skip = h;
        let mut h = self.down2.forward_graph(g, skip, "down2", training)?;
        for (i, b) in self.stage2.iter_mut().enumerate() {
            h = b.forward_graph(g, h, &format!("stage2.{i}"), training)?;
        }
        let f = self.sgu.forward_graph(g, h, skip, "sgu")?;
        let mut r = self.tail.forward_graph(g, f, "tail")?;
        if !self.io_folded {
            r = g.mul_const(r, T::from_f64_lossy(PIXEL_SCALE as f64));
        }
        g.add(image, r)
    }

    /// Training output: rounding with a straight-through gradient.
    pub fn forward_graph<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        image: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let raw = self.forward_graph_raw(g, image, training)?;
        Ok(g.ste_round(raw))
    }

    /// Names of all trainable tensors.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _, k| {
            if k == ParamKind::Trainable {
                names.push(n.to_owned());
            }
        });
        names
    }
}

impl Module for FastShadeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.down1.visit(&join(prefix, "down1"), f);
        for (i, b) in self.stage1.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage1.{i}")), f);
        }
        self.down2.visit(&join(prefix, "down2"), f);
        for (i, b) in self.stage2.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage2.{i}")), f);
        }
        self.sgu.visit(&join(prefix, "sgu"), f);
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.down1.visit_mut(&join(prefix, "down1"), f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage1.{i}")), f);
        }
        self.down2.visit_mut(&join(prefix, "down2"), f);
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage2.{i}")), f);
        }
        self.sgu.visit_mut(&join(prefix, "sgu"), f);
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}
