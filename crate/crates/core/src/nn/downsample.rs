use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Conv2d, ConvUnit, MbrConv, Module, ParamKind};
use crate::error::{shape_err, Result};
use crate::tensor::{Conv2dParams, Element, Graph, NodeId, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    Conv2x2,
    Conv3x3,
    HaarFrozen,
    HaarLearnable,
}

impl DownsampleMode {
    pub const ALL: [Self; 4] = [
        Self::Conv2x2,
        Self::Conv3x3,
        Self::HaarFrozen,
        Self::HaarLearnable,
    ];

    pub fn is_haar(self) -> bool {
        matches!(self, Self::HaarFrozen | Self::HaarLearnable)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv2x2 => "conv2x2",
            Self::Conv3x3 => "conv3x3",
            Self::HaarFrozen => "haar_frozen",
            Self::HaarLearnable => "haar_learnable",
        }
    }
}

impl std::fmt::Display for DownsampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DownsampleMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv2x2" => Ok(Self::Conv2x2),
            "conv3x3" => Ok(Self::Conv3x3),
            "haar_frozen" => Ok(Self::HaarFrozen),
            "haar_learnable" => Ok(Self::HaarLearnable),
            other => Err(crate::Error::Config(format!(
                "unknown downsample mode {other:?}"
            ))),
        }
    }
}

/// Orthonormal 2x2 Haar basis as a depthwise weight `[4 * channels, 1, 2, 2]`.
/// Output channel `4c + k` holds sub-band `k` (LL, LH, HL, HH) of input `c`.
pub fn haar_basis(channels: usize) -> Tensor {
    const BANDS: [[f32; 4]; 4] = [
        [0.5, 0.5, 0.5, 0.5],
        [0.5, 0.5, -0.5, -0.5],
        [0.5, -0.5, 0.5, -0.5],
        [0.5, -0.5, -0.5, 0.5],
    ];
    let data = (0..channels)
        .flat_map(|_| BANDS.into_iter().flatten())
        .collect();
    Tensor::from_vec([4 * channels, 1, 2, 2], data).expect("haar basis size")
}

/// Halves the spatial resolution. Conv modes map straight to the output
/// width; Haar modes split each channel into four sub-bands and project them
/// with a `1 x 1` MBRConv.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    pub mode: DownsampleMode,
    pub conv: Conv2d,
    pub projection: Option<ConvUnit>,
}

impl Downsample {
    pub fn new<R: Rng + ?Sized>(
        mode: DownsampleMode,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        match mode {
            DownsampleMode::Conv2x2 => Self {
                mode,
                conv: Conv2d::init(cin, cout, 2, Conv2dParams::new(2, 0, 1), true, rng),
                projection: None,
            },
            DownsampleMode::Conv3x3 => Self {
                mode,
                conv: Conv2d::init(cin, cout, 3, Conv2dParams::new(2, 1, 1), true, rng),
                projection: None,
            },
            DownsampleMode::HaarFrozen | DownsampleMode::HaarLearnable => {
                let mut conv = Conv2d::new(haar_basis(cin), None, Conv2dParams::new(2, 0, cin));
                if mode == DownsampleMode::HaarFrozen {
                    conv.weight_kind = ParamKind::Frozen;
                }
                let proj = MbrConv::new(4 * cin, cout, 1, rng);
                Self {
                    mode,
                    conv,
                    projection: Some(ConvUnit::Multi(proj)),
                }
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.projection {
            Some(p) => p.out_channels(),
            None => self.conv.out_channels(),
        }
    }

    fn check(&self, x: &Tensor<impl Element>) -> Result<()> {
        let s = x.shape();
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(shape_err!("downsampling needs even spatial dims, got {s}"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let y = self.conv.forward(x)?;
        match &self.projection {
            Some(p) => p.forward(&y),
            None => Ok(y),
        }
    }

    pub fn forward_graph<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        prefix: &str,
        training: bool,
    ) -> Result<NodeId> {
        self.check(g.value(x))?;
        let y = self.conv.forward_graph(g, x, &join(prefix, "conv"))?;
        match &mut self.projection {
            Some(p) => p.forward_graph(g, y, &join(prefix, "proj"), training),
            None => Ok(y),
        }
    }
}

impl Module for Downsample {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(p) = &self.projection {
            p.visit(&join(prefix, "proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(&join(prefix, "proj"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2x2_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Downsample::new(DownsampleMode::Conv2x2, 1, 1, &mut rng);
        d.conv.weight = Tensor::full([1, 1, 2, 2], 1.0);
        d.conv.bias = Some(Tensor::vector(vec![0.0]));
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap().data(), &[10.0]);
    }

    #[test]
    fn haar_on_constant_image() {
        let v = 7.0;
        let x = Tensor::full([1, 2, 4, 4], v);
        let y =
            crate::tensor::conv2d(&x, &haar_basis(2), None, Conv2dParams::new(2, 0, 2)).unwrap();
        assert_eq!(y.dims(), [1, 8, 2, 2]);
        for c in 0..8 {
            let want = if c % 4 == 0 { 2.0 * v } else { 0.0 };
            assert!(y.plane(0, c).iter().all(|&p| p == want), "channel {c}");
        }
    }

    #[test]
    fn haar_basis_is_orthonormal() {
        let b = haar_basis(1);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f32 = (0..4)
                    .map(|k| b.data()[4 * i + k] * b.data()[4 * j + k])
                    .sum();
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn shapes_and_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
        for mode in DownsampleMode::ALL {
            let d = Downsample::new(mode, 3, 16, &mut rng);
            assert_eq!(d.forward(&x).unwrap().dims(), [1, 16, 32, 32], "{mode:?}");
            assert_eq!(d.out_channels(), 16);
        }
        let frozen = Downsample::new(DownsampleMode::HaarFrozen, 3, 16, &mut rng);
        let mut kinds = Vec::new();
        frozen.visit("", &mut |n, _, k| kinds.push((n.to_owned(), k)));
        assert_eq!(kinds[0], ("conv.weight".to_owned(), ParamKind::Frozen));
        let d = Downsample::new(DownsampleMode::Conv2x2, 3, 16, &mut rng);
        assert!(d.forward(&Tensor::zeros([1, 3, 5, 4])).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DownsampleMode::ALL {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s.trim_matches('"').parse::<DownsampleMode>().unwrap(), m);
        }
        assert!("pool".parse::<DownsampleMode>().is_err());
    }
}
