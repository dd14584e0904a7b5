//! PNG input and output for `[3, h, w]` unit-interval images, `[h, w]`
//! grayscale maps, and binary masks.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn image_err(e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, h, w]` image with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image_png<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, h, w] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let data = image.data();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = [
                to_byte(data[i].to_f64()),
                to_byte(data[plane + i].to_f64()),
                to_byte(data[2 * plane + i].to_f64()),
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(image_err)
}

/// Reads an RGB PNG back into a `[3, h, w]` tensor with values in `[0, 1]`.
pub fn read_image_png<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = ImageReader::open(path)?.decode().map_err(image_err)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![S::zero(); 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = S::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes an `[h, w]` map as an 8-bit grayscale PNG, clamping to `[0, 1]`.
pub fn write_gray_png<S: Scalar>(path: &Path, map: &Tensor<S>) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("expected an [h, w] map, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let data = map.data();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([to_byte(data[y * w + x].to_f64())]));
        }
    }
    out.save(path).map_err(image_err)
}

/// Reads a grayscale PNG into an `[h, w]` tensor with values in `[0, 1]`.
pub fn read_gray_png<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = ImageReader::open(path)?.decode().map_err(image_err)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![S::zero(); h * w];
    for (x, y, px) in img.enumerate_pixels() {
        data[y as usize * w + x as usize] = S::from_f64(px.0[0] as f64 / 255.0);
    }
    Tensor::new(vec![h, w], data)
}

/// Reads a grayscale PNG as a binary mask, thresholding at one half.
pub fn read_mask_png<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let gray = read_gray_png::<S>(path)?;
    let half = S::from_f64(0.5);
    Ok(gray.map(|v| if v >= half { S::one() } else { S::zero() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_roundtrip_is_exact_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = Tensor::<f32>::rand_uniform(vec![3, 5, 4], 0.0, 1.0, &mut rng).map(|v: f32| {
            let b = (v.to_f64() * 255.0).round();
            f32::from_f64(b / 255.0)
        });
        write_image_png(&path, &src).unwrap();
        let back: Tensor<f32> = read_image_png(&path).unwrap();
        assert_eq!(back.shape(), src.shape());
        for (a, b) in src.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gray_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask =
            Tensor::<f32>::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        write_gray_png(&path, &mask).unwrap();
        let back: Tensor<f32> = read_mask_png(&path).unwrap();
        assert_eq!(back.data(), mask.data());
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 4, 4]);
        assert!(matches!(
            write_image_png(&dir.path().join("x.png"), &img),
            Err(Error::Shape(_))
        ));
        let map = Tensor::<f32>::zeros(vec![4]);
        assert!(matches!(
            write_gray_png(&dir.path().join("y.png"), &map),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = Tensor::<f32>::new(vec![3, 1, 1], vec![-0.5, 0.5, 1.5]).unwrap();
        write_image_png(&path, &img).unwrap();
        let back: Tensor<f32> = read_image_png(&path).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[2], 1.0);
    }
}
