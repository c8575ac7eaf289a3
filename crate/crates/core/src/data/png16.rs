//! 16-bit PNG disparity maps: `round(256 * d)`, with 0 marking invalid
//! pixels.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Png16 = ImageBuffer<Luma<u16>, Vec<u16>>;

pub const SUBPIXEL: f32 = 256.0;
pub const MAX_DISPARITY: f32 = 255.0;

fn extents(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("png16", format!("expected a single-channel map, got {shape:?}"))),
    }
}

/// Pixels outside `valid` (or with `d == 0`) are stored as 0.
pub fn encode_png16(disparity: &Tensor<f32>, valid: Option<&Tensor<f32>>) -> Result<Png16> {
    let (h, w) = extents(disparity.shape())?;
    if valid.is_some_and(|m| m.len() != disparity.len()) {
        return Err(Error::shape("png16", "mask and disparity sizes differ"));
    }
    let mut out = Vec::with_capacity(h * w);
    for (i, &d) in disparity.data().iter().enumerate() {
        if valid.is_some_and(|m| m.data()[i] <= 0.5) {
            out.push(0);
            continue;
        }
        if !(0.0..=MAX_DISPARITY).contains(&d) {
            return Err(Error::InvalidArgument(format!(
                "disparity {d} outside [0, {MAX_DISPARITY}] cannot be stored as 16-bit PNG"
            )));
        }
        out.push((d * SUBPIXEL).round() as u16);
    }
    Ok(ImageBuffer::from_raw(w as u32, h as u32, out).expect("buffer matches extents"))
}

/// Returns `(disparity, valid)`, both `[1,1,H,W]`.
pub fn decode_png16(img: &Png16) -> (Tensor<f32>, Tensor<f32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let d = raw.iter().map(|&v| v as f32 / SUBPIXEL).collect();
    let m = raw.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
    (
        Tensor::new(&[1, 1, h, w], d).expect("extents"),
        Tensor::new(&[1, 1, h, w], m).expect("extents"),
    )
}

pub fn write_png16(path: &Path, disparity: &Tensor<f32>, valid: Option<&Tensor<f32>>) -> Result<()> {
    encode_png16(disparity, valid)?.save(path)?;
    Ok(())
}

pub fn read_png16(path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => Ok(decode_png16(&buf)),
        other => Err(Error::Format {
            format: "PNG16",
            reason: format!("{}: expected 16-bit grayscale, found {:?}", path.display(), other.color()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convention_arithmetic() {
        let d = Tensor::new(&[1, 3], vec![1.0, 0.0, 2.5]).unwrap();
        let img = encode_png16(&d, None).unwrap();
        assert_eq!(img.as_raw(), &[256, 0, 640]);
        let (back, valid) = decode_png16(&img);
        assert_eq!(back.data(), &[1.0, 0.0, 2.5]);
        assert_eq!(valid.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_and_out_of_range() {
        let d = Tensor::new(&[1, 2], vec![3.0, 300.0]).unwrap();
        assert!(encode_png16(&d, None).is_err());
        let m = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(encode_png16(&d, Some(&m)).unwrap().as_raw(), &[768, 0]);
        assert!(encode_png16(&Tensor::new(&[1, 1], vec![-0.5]).unwrap(), None).is_err());
    }
}
