use rand::Rng;

use super::{join, kaiming_uniform, BatchNorm, Conv2d, Module, ParamKind};
use crate::error::{shape_err, Result};
use crate::tensor::{ops, Conv2dParams, Element, Graph, NodeId, Tensor};

/// Channel expansion of every branch.
pub const EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct MbrBranch {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl MbrBranch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?)
    }
}

/// Multi-branch re-parameterisable convolution.
///
/// Three parallel branches (`k x k`, `1 x 1`, and a `k x k` started near the
/// identity) each expand to `out_ch * EXPANSION` channels and carry their own
/// batch norm. Their outputs are concatenated and projected back to `out_ch`
/// by a `1 x 1` convolution. In eval mode the whole block is affine in its
/// input and collapses to a single `k x k` convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MbrConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub expansion: usize,
    pub branches: Vec<MbrBranch>,
    pub projection: Conv2d,
}

impl MbrConv {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let wide = out_ch * EXPANSION;
        let same = Conv2dParams::same(kernel);
        let dense = Conv2d::new(
            kaiming_uniform([wide, in_ch, kernel, kernel], rng),
            None,
            same,
        );
        let point = Conv2d::new(
            kaiming_uniform([wide, in_ch, 1, 1], rng),
            None,
            Conv2dParams::default(),
        );
        let mut ident = kaiming_uniform([wide, in_ch, kernel, kernel], rng).scale(0.1);
        let centre = kernel / 2;
        for o in 0..wide {
            let v = ident.at(o, o % in_ch, centre, centre) + 1.0;
            ident.set(o, o % in_ch, centre, centre, v);
        }
        let ident = Conv2d::new(ident, None, same);
        let branches = [dense, point, ident]
            .into_iter()
            .map(|conv| MbrBranch {
                conv,
                bn: BatchNorm::new(wide),
            })
            .collect::<Vec<_>>();
        let proj_in = wide * branches.len();
        let projection = Conv2d::new(
            kaiming_uniform([out_ch, proj_in, 1, 1], rng),
            Some(Tensor::vector(vec![0.0; out_ch])),
            Conv2dParams::default(),
        );
        Self {
            in_ch,
            out_ch,
            kernel,
            expansion: EXPANSION,
            branches,
            projection,
        }
    }

    /// Build from explicit branches and projection.
    pub fn from_parts(kernel: usize, branches: Vec<MbrBranch>, projection: Conv2d) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| shape_err!("MBRConv needs at least one branch"))?;
        let in_ch = first.conv.in_channels();
        let wide = first.conv.out_channels();
        let mut total = 0;
        for b in &branches {
            if b.conv.in_channels() != in_ch || b.bn.channels() != b.conv.out_channels() {
                return Err(shape_err!("inconsistent MBRConv branch"));
            }
            total += b.conv.out_channels();
        }
        if projection.in_channels() != total || projection.kernel() != 1 {
            return Err(shape_err!(
                "projection expects {} inputs, branches give {total}",
                projection.in_channels()
            ));
        }
        Ok(Self {
            in_ch,
            out_ch: projection.out_channels(),
            kernel,
            expansion: wide / projection.out_channels().max(1),
            branches,
            projection,
        })
    }

    fn check_input(&self, c: usize) -> Result<()> {
        if c != self.in_ch {
            return Err(shape_err!(
                "MBRConv expects {} input channels, got {c}",
                self.in_ch
            ));
        }
        Ok(())
    }

    /// Eval mode: batch norms use running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape().c)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = outs.iter().collect();
        self.projection.forward(&ops::concat_channels(&refs)?)
    }

    pub fn forward_graph<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
        training: bool,
    ) -> Result<NodeId> {
        self.check_input(g.value(x).shape().c)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter_mut().enumerate() {
            let p = join(prefix, &format!("branches.{i}"));
            let y = b.conv.forward_graph(g, x, &join(&p, "conv"))?;
            outs.push(b.bn.forward_graph(g, y, &join(&p, "bn"), training)?);
        }
        let cat = g.concat_channels(&outs)?;
        self.projection.forward_graph(g, cat, &join(prefix, "proj"))
    }
}

impl Module for MbrConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, b) in self.branches.iter().enumerate() {
            let p = join(prefix, &format!("branches.{i}"));
            b.conv.visit(&join(&p, "conv"), f);
            b.bn.visit(&join(&p, "bn"), f);
        }
        self.projection.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            let p = join(prefix, &format!("branches.{i}"));
            b.conv.visit_mut(&join(&p, "conv"), f);
            b.bn.visit_mut(&join(&p, "bn"), f);
        }
        self.projection.visit_mut(&join(prefix, "proj"), f);
    }
}
