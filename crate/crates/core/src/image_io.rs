//! 8-bit RGB PNG reading and writing, plus the reflect-pad and crop used to
//! feed arbitrary image sizes through the network.

use std::path::Path;

use image::{DynamicImage, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, Tensor};

/// Load an 8-bit RGB PNG as a `(1, 3, H, W)` tensor of integers in [0, 255].
/// Other colour types are rejected rather than converted.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?;
    let DynamicImage::ImageRgb8(rgb) = img else {
        return Err(Error::Format(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            img.color()
        )));
    };
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p[c] as f32);
        }
    }
    t
}

/// Round and clip to 8 bits. Non-finite values are an error, never encoded.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(shape_err!("expected a (1, 3, H, W) image, got {s}"));
    }
    if !t.all_finite() {
        return Err(Error::Numeric("image contains non-finite values".into()));
    }
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = t.at(0, c, y as usize, x as usize).round().clamp(0.0, 255.0);
            p[c] = v as u8;
        }
    }
    Ok(img)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    to_rgb8(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reflect-pad bottom and right edges so H and W become multiples of `m`.
pub fn reflect_pad_to_multiple(t: &Tensor, m: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    if (h, w) == (s.h, s.w) {
        return t.clone();
    }
    let mut out = Tensor::zeros([s.n, s.c, h, w]);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                let sy = ops::reflect_index(y as isize, s.h);
                for x in 0..w {
                    dst[y * w + x] = src[sy * s.w + ops::reflect_index(x as isize, s.w)];
                }
            }
        }
    }
    out
}

/// Top-left `h x w` window.
pub fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if top + h > s.h || left + w > s.w || h == 0 || w == 0 {
        return Err(shape_err!("crop {h}x{w} at ({top}, {left}) outside {s}"));
    }
    let mut out = Tensor::zeros([s.n, s.c, h, w]);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                let row = (top + y) * s.w + left;
                dst[y * w..(y + 1) * w].copy_from_slice(&src[row..row + w]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_and_rgb_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::from_vec([1, 3, 2, 3], (0..18).map(|v| (v * 14) as f32).collect()).unwrap();
        write_png(&p, &t).unwrap();
        assert_eq!(read_png(&p).unwrap(), t);
        let grey = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&grey).unwrap();
        assert!(matches!(read_png(&grey), Err(Error::Format(_))));
        let bad = Tensor::full([1, 3, 1, 1], f32::NAN);
        assert!(write_png(&p, &bad).is_err());
    }

    #[test]
    fn pad_then_crop() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = reflect_pad_to_multiple(&t, 4);
        assert_eq!(p.dims(), [1, 1, 4, 4]);
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(&p.data()[12..], &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(crop(&p, 0, 0, 2, 2).unwrap(), t);
        assert!(crop(&p, 3, 0, 2, 2).is_err());
    }
}
