//! Conversions from tensors and masks to 8-bit images, and the lane overlay.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::data::BinaryMask;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor4;

/// Opacity of the red tint painted over lane pixels.
pub const OVERLAY_ALPHA: f64 = 0.5;
const TINT: [f64; 3] = [1.0, 0.0, 0.0];

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Item `n` of a `(?, 3, h, w)` tensor as an RGB image.
pub fn tensor_to_rgb(t: &Tensor4, n: usize) -> Result<RgbImage> {
    let d = t.dims();
    contract!(d.c == 3 && n < d.n, "expected a 3-channel tensor with item {n}, got {d}");
    let plane = d.plane();
    let item = t.item(n);
    Ok(RgbImage::from_fn(d.w as u32, d.h as u32, |x, y| {
        let i = y as usize * d.w + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(item[c * plane + i])))
    }))
}

/// Lane pixels become 255, background 0.
pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.w as u32, mask.h as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    })
}

/// Blends the tint into lane pixels at [`OVERLAY_ALPHA`]; other pixels are
/// the source unchanged.
pub fn overlay(image: &Tensor4, mask: &BinaryMask) -> Result<RgbImage> {
    let d = image.dims();
    contract!(
        d.c == 3 && (d.h, d.w) == (mask.h, mask.w),
        "overlay needs a 3-channel image matching the {}x{} mask, got {d}",
        mask.h,
        mask.w
    );
    let plane = d.plane();
    let item = image.item(0);
    Ok(RgbImage::from_fn(d.w as u32, d.h as u32, |x, y| {
        let i = y as usize * d.w + x as usize;
        let lane = mask.data[i] == 1;
        Rgb([0, 1, 2].map(|c| {
            let v = item[c * plane + i];
            to_u8(if lane {
                (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * TINT[c]
            } else {
                v
            })
        }))
    }))
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::ImageEncode {
                path: path.display().to_string(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn overlay_tints_only_lane_pixels() {
        let img = Tensor4::filled(Dims::new(1, 3, 1, 2), 0.4).unwrap();
        let mask = BinaryMask::from_vec(1, 2, vec![0, 1]).unwrap();
        let o = overlay(&img, &mask).unwrap();
        assert_eq!(o.get_pixel(0, 0).0, [102, 102, 102]);
        assert_eq!(o.get_pixel(1, 0).0, [179, 51, 51]);
    }

    #[test]
    fn background_overlay_equals_source() {
        let img = Tensor4::filled(Dims::new(1, 3, 2, 2), 0.7).unwrap();
        let o = overlay(&img, &BinaryMask::zeros(2, 2)).unwrap();
        assert_eq!(o, tensor_to_rgb(&img, 0).unwrap());
    }

    #[test]
    fn mask_is_binary_gray() {
        let m = BinaryMask::from_vec(1, 3, vec![1, 0, 1]).unwrap();
        assert_eq!(mask_to_gray(&m).into_raw(), vec![255, 0, 255]);
    }
}
