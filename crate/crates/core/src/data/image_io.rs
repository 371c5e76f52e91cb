//! PNG reading and writing in the `[-1, 1]` convention.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::{pixel_to_unit, unit_to_pixel};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Reads an 8-bit gray or RGB(A) PNG as `[channels, h, w]`. One channel
/// yields luma; three yields RGB.
pub fn read_png(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    decode(img, channels)
}

fn decode(img: DynamicImage, channels: usize) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            Tensor::new(&[1, h, w], g.into_raw().into_iter().map(pixel_to_unit).collect())
        }
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut data = vec![0f32; 3 * h * w];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = pixel_to_unit(px[c]);
                }
            }
            Tensor::new(&[3, h, w], data)
        }
        other => Err(Error::Invalid(format!("unsupported channel count {other}"))),
    }
}

/// Writes a `[1|3, h, w]` tensor as an 8-bit PNG.
pub fn write_png<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("write_png", &[1, 0, 0], s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    match c {
        1 => {
            let raw: Vec<u8> = d.iter().map(|&v| unit_to_pixel(v)).collect();
            let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
            img.save(path).map_err(|e| image_err(path, e))
        }
        3 => {
            let mut raw = vec![0u8; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    raw[3 * i + ch] = unit_to_pixel(d[ch * h * w + i]);
                }
            }
            write_rgb8(path, w, h, raw)
        }
        other => Err(Error::Invalid(format!("cannot write {other}-channel image"))),
    }
}

/// Writes interleaved RGB bytes.
pub fn write_rgb8(path: &Path, width: usize, height: usize, raw: Vec<u8>) -> Result<()> {
    if raw.len() != 3 * width * height {
        return Err(Error::Invalid(format!(
            "rgb buffer of {} bytes does not match {width}x{height}",
            raw.len()
        )));
    }
    let img = RgbImage::from_raw(width as u32, height as u32, raw).expect("length checked");
    img.save(path).map_err(|e| image_err(path, e))
}
