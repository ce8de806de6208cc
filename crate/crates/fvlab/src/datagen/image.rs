use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Planar `[channels, height, width]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::shape("empty image"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Builds an image from arbitrary values, clipping them into `[0, 1]`.
    pub fn from_clipped(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(channels, height, width, data)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value.clamp(0.0, 1.0); channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Luminance in `[0, 1]` as a single-channel buffer of length `h*w`.
    pub fn luminance(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        if self.channels == 1 {
            return self.data.clone();
        }
        (0..hw)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[hw + i] + 0.114 * self.data[2 * hw + i])
            .collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Pastes `self` into the centre of a zero canvas of the given size.
    pub fn zero_pad_to(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::shape("padding target smaller than image"));
        }
        let mut out = Self::zeros(self.channels, height, width);
        let oy = (height - self.height) / 2;
        let ox = (width - self.width) / 2;
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * height + y + oy) * width + x + ox] = self.get(c, y, x);
                }
            }
        }
        Ok(out)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Self { channels: self.channels, height, width, data })
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Self::zeros(self.channels, height, width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let v = (1.0 - wy) * ((1.0 - wx) * self.get(c, y0, x0) as f64 + wx * self.get(c, y0, x1) as f64)
                        + wy * ((1.0 - wx) * self.get(c, y1, x0) as f64 + wx * self.get(c, y1, x1) as f64);
                    out.data[(c * height + y) * width + x] = v as f32;
                }
            }
        }
        out
    }

    pub fn to_gray(&self) -> Self {
        Self { channels: 1, height: self.height, width: self.width, data: self.luminance() }
    }

    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Self { channels: 3, height: self.height, width: self.width, data }
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mse between images of different shapes"));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Quantizes to 8 bit and back, the exact representation stored on disk.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        Self { data, ..*self }
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Reads a `[C,H,W]` tensor, clipping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Self::from_clipped(c, h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let hw = self.height * self.width;
        let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
                image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .ok_or_else(|| Error::shape("png buffer"))?
                    .save(path)?;
            }
            _ => {
                let mut buf = Vec::with_capacity(3 * hw);
                for i in 0..hw {
                    for c in 0..3 {
                        buf.push(q(self.data[c * hw + i]));
                    }
                }
                image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .ok_or_else(|| Error::shape("png buffer"))?
                    .save(path)?;
            }
        }
        Ok(())
    }

    /// Loads an 8-bit image; `channels` selects grayscale or RGB conversion.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => {
                let g = img.to_luma8();
                Self::new(1, h, w, g.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
            }
            3 => {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                let mut data = vec![0f32; 3 * h * w];
                for i in 0..h * w {
                    for c in 0..3 {
                        data[c * h * w + i] = raw[3 * i + c] as f32 / 255.0;
                    }
                }
                Self::new(3, h, w, data)
            }
            n => Err(Error::shape(format!("unsupported channel count {n}"))),
        }
    }
}

/// Boolean `[height, width]` mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask buffer size"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.get(y, self.width - 1 - x);
            }
        }
        out
    }

    /// Zeroes every pixel of `image` outside the mask.
    pub fn apply(&self, image: &ImageTensor) -> Result<ImageTensor> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::shape("mask and image sizes differ"));
        }
        let mut out = image.clone();
        let hw = self.height * self.width;
        for c in 0..image.channels() {
            for (i, &keep) in self.data.iter().enumerate() {
                if !keep {
                    out.data[c * hw + i] = 0.0;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new(2, 1, 1, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ImageTensor::new(1, 2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.flip_horizontal().get(0, 0, 0), 0.2);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ImageTensor::new(3, 2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        img.save_png(&p).unwrap();
        let back = ImageTensor::load(&p, 3).unwrap();
        assert_eq!(back, img.quantized());
    }
}
