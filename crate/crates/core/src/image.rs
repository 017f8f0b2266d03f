//! RGB image buffer shared by every stage.
//!
//! Pixels are stored planar (channel-major) as `f32` in `[0, 1]`. Tensor
//! conversions map to `[-1, 1]`, the range the latent backends work in.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar RGB data in `[0, 1]`.
    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("image dimensions must be non-zero".into()));
        }
        if data.len() != CHANNELS * width * height {
            return Err(Error::Input(format!(
                "expected {} planar values for a {width}x{height} image, got {}",
                CHANNELS * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite pixels".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = width * height;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self::from_planar(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[channel * self.width * self.height + y * self.width + x]
    }

    /// True when every pixel carries the same colour.
    pub fn is_constant(&self) -> bool {
        let plane = self.width * self.height;
        (0..CHANNELS).all(|c| {
            let p = &self.data[c * plane..(c + 1) * plane];
            p.iter().all(|v| *v == p[0])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; CHANNELS * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[c * w * h + y as usize * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::from_planar(w, h, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let v = self.data[c * w * h + y as usize * w + x as usize];
                *slot = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            image::Rgb(px)
        })
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Input(format!("undecodable image: {e}")))?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Writes a lossless PNG and returns the SHA-256 of the written bytes.
    pub fn save_png(&self, path: &Path) -> Result<String> {
        let bytes = self.encode_png()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(&bytes))
    }

    /// `[3, H, W]` tensor in `[-1, 1]`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let values: Vec<f32> = self.data.iter().map(|v| v * 2.0 - 1.0).collect();
        Ok(Tensor::from_vec(values, (CHANNELS, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != CHANNELS {
            return Err(Error::Input(format!("expected {CHANNELS} channels, got {c}")));
        }
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let data = values
            .into_iter()
            .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        Self::from_planar(w, h, data)
    }

    /// Bilinear resize.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 {
            return Err(Error::Input("resize target must be non-zero".into()));
        }
        let mut out = vec![0f32; CHANNELS * width * height];
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..CHANNELS {
                    let top = self.pixel(c, y0, x0) * (1.0 - wx) + self.pixel(c, y0, x1) * wx;
                    let bottom = self.pixel(c, y1, x0) * (1.0 - wx) + self.pixel(c, y1, x1) * wx;
                    out[c * width * height + y * width + x] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        Self::from_planar(width, height, out)
    }

    /// Crops a `width`×`height` window centred in the image.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::Input(format!(
                "crop {width}x{height} larger than image {}x{}",
                self.width, self.height
            )));
        }
        let ox = (self.width - width) / 2;
        let oy = (self.height - height) / 2;
        let mut out = Vec::with_capacity(CHANNELS * width * height);
        for c in 0..CHANNELS {
            for y in 0..height {
                let start = c * self.width * self.height + (oy + y) * self.width + ox;
                out.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Self::from_planar(width, height, out)
    }
}

/// Hex SHA-256 of a byte buffer.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let mut data = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(((x + y * w + c * 7) % 256) as f32 / 255.0);
                }
            }
        }
        Image::from_planar(w, h, data).unwrap()
    }

    #[test]
    fn png_round_trip_is_lossless_at_8_bit() {
        let img = gradient(5, 4);
        let back = Image::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn tensor_round_trip() {
        let img = gradient(6, 3);
        let t = img.to_tensor(&Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[3, 3, 6]);
        let back = Image::from_tensor(&t).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::from_planar(2, 2, vec![0.0; 5]).is_err());
        assert!(Image::from_planar(0, 2, vec![]).is_err());
        assert!(Image::decode(b"not an image").is_err());
    }

    #[test]
    fn center_crop_takes_middle() {
        let img = gradient(6, 6);
        let crop = img.center_crop(2, 2).unwrap();
        assert_eq!(crop.pixel(0, 0, 0), img.pixel(0, 2, 2));
        assert_eq!(crop.pixel(2, 1, 1), img.pixel(2, 3, 3));
    }

    #[test]
    fn constant_detection() {
        assert!(Image::filled(3, 3, [1.0, 1.0, 1.0]).unwrap().is_constant());
        assert!(!gradient(3, 3).is_constant());
    }
}
