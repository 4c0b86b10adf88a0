//! RGB images in `[-1, 1]`, stored height x width x channel.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// `0 -> -1.0`, `255 -> 1.0`, affine in between.
pub fn byte_to_unit(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest byte and clamping.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                "image construction",
                height * width * CHANNELS,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().copied().map(byte_to_unit).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let raw = self.to_bytes();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().copied().map(unit_to_byte).collect()
    }

    /// Opens any decodable raster, center-crops it to a square and resizes
    /// it to `resolution x resolution`.
    pub fn load(path: &Path, resolution: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self::from_rgb(&square_resize(&img, resolution as u32)))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Luminance in `[0, 1]` as a row-major `height x width` plane.
    pub fn to_gray_unit(&self) -> Vec<f64> {
        self.data
            .chunks(CHANNELS)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] + 1.0) / 2.0)
            .collect()
    }
}

fn square_resize(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    let cropped = imageops::crop_imm(img, (w - s) / 2, (h - s) / 2, s, s).to_image();
    if s == side {
        cropped
    } else {
        imageops::resize(&cropped, side, side, FilterType::Triangle)
    }
}

/// Packs HWC images into an NCHW batch.
pub fn images_to_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut out = Tensor::zeros(&[images.len(), CHANNELS, h, w]);
    for (n, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(Error::shape("image batch", (h, w), (img.height, img.width)));
        }
        let item = out.item_mut(n);
        for (p, px) in img.data.chunks(CHANNELS).enumerate() {
            for (c, v) in px.iter().enumerate() {
                item[c * h * w + p] = *v;
            }
        }
    }
    Ok(out)
}

/// Unpacks an NCHW batch with three channels.
pub fn batch_to_images(batch: &Tensor) -> Vec<Image> {
    let shape = batch.shape();
    let (h, w) = (shape[2], shape[3]);
    (0..batch.batch())
        .map(|n| {
            let item = batch.item(n);
            let mut data = vec![0.0; h * w * CHANNELS];
            for p in 0..h * w {
                for c in 0..CHANNELS {
                    data[p * CHANNELS + c] = item[c * h * w + p];
                }
            }
            Image {
                height: h,
                width: w,
                data,
            }
        })
        .collect()
}

/// Solid-color helper used by tests and the synthetic renderer.
pub fn rgb(r: u8, g: u8, b: u8) -> Rgb<u8> {
    Rgb([r, g, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_endpoints() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(byte_to_unit(0), -1.0);
    }

    #[test]
    fn center_crop_keeps_middle() {
        let mut img = RgbImage::from_pixel(6, 4, rgb(0, 0, 0));
        img.put_pixel(1, 0, rgb(255, 0, 0));
        img.put_pixel(2, 0, rgb(0, 255, 0));
        let out = square_resize(&img, 4);
        assert_eq!(out.dimensions(), (4, 4));
        assert_eq!(*out.get_pixel(1, 0), rgb(0, 255, 0));
    }

    #[test]
    fn batch_layout_round_trip() {
        let a = Image::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let b = Image::filled(2, 2, -0.5);
        let batch = images_to_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 2, 2]);
        assert_eq!(batch.item(0)[4], a.pixel(0, 0)[1]);
        assert_eq!(batch_to_images(&batch), vec![a, b]);
    }

    proptest! {
        #[test]
        fn byte_mapping_is_a_bijection(b in any::<u8>()) {
            prop_assert_eq!(unit_to_byte(byte_to_unit(b)), b);
            prop_assert!((-1.0..=1.0).contains(&byte_to_unit(b)));
        }
    }
}
