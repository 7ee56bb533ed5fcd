//! 8-bit RGB PNG encoding of `3 × H × W` images in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_rgb(image: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("png", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let data = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::shape("png", "buffer size mismatch"))
}

pub fn to_png_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let rgb = to_rgb(image)?;
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Generation(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = to_png_bytes(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes any 8-bit PNG to RGB values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, None, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantises() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 7) as f32 / 6.0);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn encoding_is_stable() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i as f32 * 0.37).sin().abs());
        assert_eq!(to_png_bytes(&img).unwrap(), to_png_bytes(&img).unwrap());
    }
}
