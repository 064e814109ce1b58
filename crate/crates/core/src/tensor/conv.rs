//! 2-D cross-correlation. The production path lowers each (batch item, group)
//! to one GEMM over an im2col buffer; [`conv2d_direct`] is the naive
//! seven-loop baseline it is tested against.

use super::{Element, Shape, Tensor};
use crate::error::{shape_err, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, zero padding `k / 2`, dense.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2, 1)
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

#[derive(Copy, Clone, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: Conv2dParams,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, p: Conv2dParams) -> Result<Self> {
        if p.stride == 0 || p.groups == 0 {
            return Err(shape_err!("stride and groups must be >= 1"));
        }
        let (cout, cin_g, kh, kw) = (weight.n, weight.c, weight.h, weight.w);
        if !input.c.is_multiple_of(p.groups) || cout % p.groups != 0 {
            return Err(shape_err!(
                "channels in={} out={} not divisible by groups={}",
                input.c,
                cout,
                p.groups
            ));
        }
        if cin_g * p.groups != input.c {
            return Err(shape_err!(
                "input has {} channels but weight {} expects {} per group x {} groups",
                input.c,
                weight,
                cin_g,
                p.groups
            ));
        }
        let hp = input.h + 2 * p.padding;
        let wp = input.w + 2 * p.padding;
        if hp < kh || wp < kw {
            return Err(shape_err!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            ));
        }
        Ok(Self {
            n: input.n,
            cin: input.c,
            h: input.h,
            w: input.w,
            cout,
            cin_g,
            cout_g: cout / p.groups,
            kh,
            kw,
            ho: (hp - kh) / p.stride + 1,
            wo: (wp - kw) / p.stride + 1,
            p,
        })
    }

    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }
}

/// Unfold the channels of one group into a `(cin_g*kh*kw) x (ho*wo)` matrix.
fn im2col<T: Element>(g: &ConvGeometry, src: &[T], cols: &mut [T]) {
    let plane = g.h * g.w;
    let op = g.out_plane();
    let pad = g.p.padding as isize;
    let s = g.p.stride as isize;
    for c in 0..g.cin_g {
        let chan = &src[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * op..(row + 1) * op];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto the input planes of one group.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], dst: &mut [T]) {
    let plane = g.h * g.w;
    let op = g.out_plane();
    let pad = g.p.padding as isize;
    let s = g.p.stride as isize;
    for c in 0..g.cin_g {
        let chan = &mut dst[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * op..(row + 1) * op];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            chan[base + ix as usize] =
                                chan[base + ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(shape_err!(
                "bias has {} entries, expected {cout}",
                b.numel()
            ));
        }
    }
    Ok(())
}

/// Zero-padded strided grouped cross-correlation.
///
/// `weight` is `[cout, cin / groups, kh, kw]`; `bias`, when present, holds
/// `cout` values in any 4-D layout.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), p)?;
    check_bias(bias, g.cout)?;
    let out_shape = g.out_shape();
    let mut out = vec![T::zero(); out_shape.numel()];
    let op = g.out_plane();
    let k = g.k();
    let in_item = g.cin * g.h * g.w;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * op]
    };
    let wdata = weight.data();
    for n in 0..g.n {
        let src_item = &input.data()[n * in_item..(n + 1) * in_item];
        let dst_item = &mut out[n * g.cout * op..(n + 1) * g.cout * op];
        for grp in 0..p.groups {
            let src = &src_item[grp * g.cin_g * g.h * g.w..(grp + 1) * g.cin_g * g.h * g.w];
            let b: &[T] = if g.is_pointwise() {
                src
            } else {
                im2col(&g, src, &mut cols);
                &cols
            };
            let wg = &wdata[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
            let dst = &mut dst_item[grp * g.cout_g * op..(grp + 1) * g.cout_g * op];
            T::gemm(
                g.cout_g,
                k,
                op,
                T::one(),
                wg,
                k as isize,
                1,
                b,
                op as isize,
                1,
                T::zero(),
                dst,
                op as isize,
                1,
            );
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst_item[c * op..(c + 1) * op] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Input gradient (when requested), weight gradient and bias gradient.
pub(crate) type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: Conv2dParams,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), p)?;
    if grad_out.shape() != g.out_shape() {
        return Err(shape_err!(
            "conv grad {} vs output {}",
            grad_out.shape(),
            g.out_shape()
        ));
    }
    let op = g.out_plane();
    let k = g.k();
    let in_item = g.cin * g.h * g.w;
    let in_group = g.cin_g * g.h * g.w;
    let mut dw = Tensor::zeros_like(weight);
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_input.then(|| Tensor::zeros_like(input));
    let mut cols = vec![T::zero(); k * op];
    let mut dcols = vec![T::zero(); k * op];
    for n in 0..g.n {
        let src_item = &input.data()[n * in_item..(n + 1) * in_item];
        let go_item = &grad_out.data()[n * g.cout * op..(n + 1) * g.cout * op];
        for (c, acc) in db.iter_mut().enumerate() {
            *acc = *acc + go_item[c * op..(c + 1) * op].iter().copied().sum();
        }
        for grp in 0..p.groups {
            let src = &src_item[grp * in_group..(grp + 1) * in_group];
            let go = &go_item[grp * g.cout_g * op..(grp + 1) * g.cout_g * op];
            let b: &[T] = if g.is_pointwise() {
                src
            } else {
                im2col(&g, src, &mut cols);
                &cols
            };
            // dW_g += dY_g · colsᵀ
            let dwg = &mut dw.data_mut()[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
            T::gemm(
                g.cout_g,
                op,
                k,
                T::one(),
                go,
                op as isize,
                1,
                b,
                1,
                op as isize,
                T::one(),
                dwg,
                k as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                let wg = &weight.data()[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
                let dst_start = n * in_item + grp * in_group;
                let dst = &mut dx.data_mut()[dst_start..dst_start + in_group];
                if g.is_pointwise() {
                    // dX_g = W_gᵀ · dY_g, written straight into the input planes.
                    T::gemm(
                        k,
                        g.cout_g,
                        op,
                        T::one(),
                        wg,
                        1,
                        k as isize,
                        go,
                        op as isize,
                        1,
                        T::one(),
                        dst,
                        op as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        k,
                        g.cout_g,
                        op,
                        T::one(),
                        wg,
                        1,
                        k as isize,
                        go,
                        op as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        op as isize,
                        1,
                    );
                    col2im(&g, &dcols, dst);
                }
            }
        }
    }
    let db = Tensor::vector(db);
    Ok((dx, dw, db))
}

/// Reference convolution: one multiply-add per tap, no lowering, f64
/// accumulation like the lowered path.
pub fn conv2d_direct<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), p)?;
    check_bias(bias, g.cout)?;
    let mut out = Tensor::zeros(g.out_shape().dims());
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / g.cout_g;
            let b = bias.map_or(T::zero(), |b| b.data()[co]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0f64;
                    for ci in 0..g.cin_g {
                        for ki in 0..g.kh {
                            let iy = (oy * p.stride + ki) as isize - p.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let ix = (ox * p.stride + kj) as isize - p.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += input
                                    .at(n, grp * g.cin_g + ci, iy as usize, ix as usize)
                                    .to_f64_lossy()
                                    * weight.at(co, ci, ki, kj).to_f64_lossy();
                            }
                        }
                    }
                    out.set(n, co, oy, ox, T::from_f64_lossy(acc + b.to_f64_lossy()));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_case() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        let y = conv2d(&x, &w, Some(&b), Conv2dParams::default()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform([2, 1, 5, 7], -1.0, 1.0, &mut rng);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &w, None, Conv2dParams::same(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_sum() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, Conv2dParams::new(2, 0, 1)).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dParams::same(3)),
            Err(crate::Error::Shape(_))
        ));
        let w = Tensor::zeros([3, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dParams::new(1, 1, 2)).is_err());
    }

    #[test]
    fn gemm_path_matches_direct_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            ([2, 4, 9, 7], [6, 4, 3, 3], Conv2dParams::new(1, 1, 1)),
            ([1, 4, 8, 8], [4, 1, 3, 3], Conv2dParams::new(1, 1, 4)),
            ([1, 6, 8, 10], [4, 3, 5, 5], Conv2dParams::new(1, 2, 2)),
            ([2, 3, 8, 8], [5, 3, 2, 2], Conv2dParams::new(2, 0, 1)),
            ([1, 3, 9, 9], [5, 3, 3, 3], Conv2dParams::new(2, 1, 1)),
            ([3, 8, 5, 5], [12, 8, 1, 1], Conv2dParams::default()),
        ];
        for (xd, wd, p) in cases {
            let x = Tensor::<f32>::uniform(xd, -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(wd, -1.0, 1.0, &mut rng);
            let b = Tensor::uniform([1, wd[0], 1, 1], -1.0, 1.0, &mut rng);
            let fast = conv2d(&x, &w, Some(&b), p).unwrap();
            let slow = conv2d_direct(&x, &w, Some(&b), p).unwrap();
            assert!(
                fast.max_abs_diff(&slow).unwrap() <= 1e-6,
                "{xd:?} {wd:?} {p:?}"
            );
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform([2, 5, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([5, 1, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &w, None, Conv2dParams::new(1, 1, 5)).unwrap();
        for c in 0..5 {
            let xc = Tensor::from_vec(
                [2, 1, 6, 6],
                (0..2).flat_map(|n| x.plane(n, c).to_vec()).collect(),
            )
            .unwrap();
            let wc = Tensor::from_vec([1, 1, 3, 3], w.plane(c, 0).to_vec()).unwrap();
            let yc = conv2d_direct(&xc, &wc, None, Conv2dParams::same(3)).unwrap();
            for n in 0..2 {
                for (a, b) in y.plane(n, c).iter().zip(yc.plane(n, 0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
