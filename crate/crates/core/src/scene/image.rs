use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// RGB image with values in `[0, 1]`, stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{width}x{height}x3 needs {} values, got {}", width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
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

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean of every `factor x factor` block.
    pub fn downscale_box(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Self::from_fn(w, h, |x, y| {
            let mut acc = [0f64; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.pixel(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            [(acc[0] * norm) as f32, (acc[1] * norm) as f32, (acc[2] * norm) as f32]
        }))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([3, h, w], |i| {
            let (c, rest) = (i / (w * h), i % (w * h));
            T::c(self.data[rest * 3 + c] as f64)
        })
    }

    /// Inverse of [`Image::to_tensor`].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::shape("image", format!("[3, H, W] tensor expected, got {:?}", t.shape())));
        };
        let v = t.data();
        Ok(Self::from_fn(w, h, |x, y| {
            let i = y * w + x;
            [v[i].as_f64() as f32, v[h * w + i].as_f64() as f32, v[2 * h * w + i].as_f64() as f32]
        }))
    }

    /// Reads an 8-bit RGB or RGBA PNG; alpha is composited over white.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let rgba = img.to_rgba8();
        let (w, h) = (rgba.width() as usize, rgba.height() as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for px in rgba.pixels() {
            let a = px[3] as f32 / 255.0;
            for c in 0..3 {
                data.push(px[c] as f32 / 255.0 * a + (1.0 - a));
            }
        }
        Self::new(w, h, data)
    }

    /// 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded half-to-even.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image { path: path.into(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_downscale_of_constant_is_constant() {
        let img = Image::filled(8, 4, [0.2, 0.5, 0.9]);
        let low = img.downscale_box(4).unwrap();
        assert_eq!((low.width(), low.height()), (2, 1));
        for v in low.data().chunks(3) {
            assert!((v[0] - 0.2).abs() < 1e-6 && (v[1] - 0.5).abs() < 1e-6 && (v[2] - 0.9).abs() < 1e-6);
        }
        assert!(img.downscale_box(3).is_err());
    }

    #[test]
    fn tensor_roundtrip_and_quantization() {
        let img = Image::from_fn(3, 2, |x, y| [x as f32 / 4.0, y as f32, 0.5]);
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
        // 0.5 * 255 = 127.5 rounds to the even neighbour.
        assert_eq!(Image::filled(1, 1, [0.5, 1.5, -1.0]).to_rgb8(), vec![128, 255, 0]);
    }
}
