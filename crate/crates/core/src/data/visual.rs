//! 8-bit image conversion for views, masks and error maps.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Errors at or above this many pixels get the saturated colour.
pub const ERROR_SATURATION: f32 = 3.0;

fn plane(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(Error::shape("image", format!("unsupported image tensor {shape:?}"))),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads any image as RGB, returning `[3,H,W]` in `[0,1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c]
    }))
}

pub fn rgb_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = plane(t.shape())?;
    if c != 3 {
        return Err(Error::shape("image", format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    }))
}

pub fn write_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    rgb_image(t)?.save(path)?;
    Ok(())
}

/// Single-channel map in `[0,1]` to 8-bit grayscale.
pub fn gray_image(t: &Tensor<f32>) -> Result<GrayImage> {
    let (c, h, w) = plane(t.shape())?;
    if c != 1 {
        return Err(Error::shape("image", format!("expected 1 channel, got {c}")));
    }
    Ok(GrayImage::from_raw(w as u32, h as u32, t.data().iter().map(|&v| to_u8(v)).collect())
        .expect("buffer matches extents"))
}

pub fn write_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    gray_image(t)?.save(path)?;
    Ok(())
}

/// Reads a grayscale image as `[1,H,W]` in `[0,1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(&[1, h, w], img.into_raw())
}

/// Reads a mask image, thresholding at one half.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    Ok(read_gray(path)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

/// Absolute disparity error on a linear green-to-red ramp that saturates
/// at [`ERROR_SATURATION`] pixels; pixels without ground truth are black.
pub fn colorize_error(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = plane(pred.shape())?;
    if c != 1 || pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::shape("colorize_error", "prediction, ground truth and mask must match"));
    }
    let (p, g, m) = (pred.data(), gt.data(), valid.data());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if m[i] <= 0.5 {
            return Rgb([0, 0, 0]);
        }
        let t = ((p[i] - g[i]).abs() / ERROR_SATURATION).min(1.0);
        Rgb([to_u8(t), to_u8(1.0 - t), 0])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_ramp_saturates() {
        let gt = Tensor::zeros(&[1, 1, 4]);
        let pred = Tensor::new(&[1, 1, 4], vec![0.0, 1.5, 3.0, 10.0]).unwrap();
        let valid = Tensor::new(&[1, 1, 4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let img = colorize_error(&pred, &gt, &valid).unwrap();
        assert_eq!(img.get_pixel(0, 0), &Rgb([0, 255, 0]));
        assert_eq!(img.get_pixel(1, 0), &Rgb([128, 128, 0]));
        assert_eq!(img.get_pixel(2, 0), &Rgb([255, 0, 0]));
        assert_eq!(img.get_pixel(3, 0), &Rgb([0, 0, 0]));
    }

    #[test]
    fn rgb_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let t = Tensor::from_fn(&[3, 2, 3], |i| (i * 15) as f32 / 255.0);
        write_rgb(&path, &t).unwrap();
        let back = read_rgb(&path).unwrap();
        assert!(back.max_abs_diff(&t).unwrap() < 1e-6);
    }
}
