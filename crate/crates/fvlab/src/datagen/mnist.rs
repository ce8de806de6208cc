//! MNIST targets: an IDX reader for the real files and a procedural stroke
//! renderer that stands in when no raw data is available.

use std::io::Read;
use std::path::Path;

use rand::Rng;

use super::image::ImageTensor;
use crate::rng::rng_from;
use crate::{Error, Result};

pub const MNIST_SIDE: usize = 28;
pub const FUSION_MNIST_SIDE: usize = 32;

/// Reads an IDX3 ubyte image file (optionally gzip-free `.idx3-ubyte`).
pub fn read_idx_images(path: &Path) -> Result<Vec<ImageTensor>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 {
        return Err(Error::invalid(format!("{} is too short for an IDX header", path.display())));
    }
    let be = |o: usize| u32::from_be_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as usize;
    if be(0) != 0x0000_0803 {
        return Err(Error::invalid(format!("{}: bad IDX3 magic", path.display())));
    }
    let (n, rows, cols) = (be(4), be(8), be(12));
    if buf.len() != 16 + n * rows * cols {
        return Err(Error::invalid(format!("{}: truncated IDX payload", path.display())));
    }
    (0..n)
        .map(|i| {
            let px = &buf[16 + i * rows * cols..16 + (i + 1) * rows * cols];
            ImageTensor::new(1, rows, cols, px.iter().map(|&v| v as f32 / 255.0).collect())
        })
        .collect()
}

/// Zero-pads a 28x28 digit to the 32x32 fusion resolution.
pub fn pad_digit(digit: &ImageTensor) -> Result<ImageTensor> {
    digit.zero_pad_to(FUSION_MNIST_SIDE, FUSION_MNIST_SIDE)
}

// Glyph skeletons in a unit box (x right, y down), one polyline per stroke.
fn glyph(class: usize) -> Vec<Vec<(f64, f64)>> {
    let arc = |cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let t = (a0 + (a1 - a0) * i as f64 / n as f64).to_radians();
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    };
    match class {
        0 => vec![arc(0.5, 0.5, 0.28, 0.42, 0.0, 360.0, 24)],
        1 => vec![vec![(0.38, 0.22), (0.55, 0.08), (0.55, 0.92)]],
        2 => {
            let mut s = arc(0.5, 0.32, 0.27, 0.24, 200.0, 360.0, 10);
            s.extend([(0.72, 0.45), (0.25, 0.92), (0.78, 0.92)]);
            vec![s]
        }
        3 => vec![arc(0.48, 0.3, 0.25, 0.22, 210.0, 450.0, 12), arc(0.48, 0.71, 0.27, 0.22, 270.0, 510.0, 12)],
        4 => vec![vec![(0.62, 0.92), (0.62, 0.08), (0.2, 0.65), (0.82, 0.65)]],
        5 => {
            let mut s = vec![(0.75, 0.08), (0.32, 0.08), (0.28, 0.45)];
            s.extend(arc(0.48, 0.66, 0.28, 0.26, 240.0, 495.0, 12));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.68, 0.1), (0.4, 0.35)];
            s.extend(arc(0.5, 0.68, 0.25, 0.24, 200.0, 560.0, 18));
            vec![s]
        }
        7 => vec![vec![(0.22, 0.1), (0.8, 0.1), (0.42, 0.92)]],
        8 => vec![arc(0.5, 0.3, 0.22, 0.2, 0.0, 360.0, 16), arc(0.5, 0.71, 0.27, 0.22, 0.0, 360.0, 16)],
        _ => {
            let mut s = arc(0.5, 0.33, 0.25, 0.23, 0.0, 360.0, 16);
            s.extend([(0.75, 0.33), (0.62, 0.92)]);
            vec![s]
        }
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders a handwriting-like digit into a 28x28 canvas with random affine
/// jitter and stroke width.
pub fn render_digit<R: Rng + ?Sized>(class: usize, rng: &mut R) -> ImageTensor {
    let strokes = glyph(class % 10);
    let angle = (rng.random::<f64>() - 0.5) * 30f64.to_radians();
    let shear = (rng.random::<f64>() - 0.5) * 0.4;
    let scale = 15.0 + rng.random::<f64>() * 5.0;
    let aspect = 0.85 + rng.random::<f64>() * 0.3;
    let (tx, ty) = (14.0 + (rng.random::<f64>() - 0.5) * 3.0, 14.0 + (rng.random::<f64>() - 0.5) * 3.0);
    let width = 1.1 + rng.random::<f64>() * 1.0;
    let (s, c) = angle.sin_cos();
    let warp = |(x, y): (f64, f64)| {
        let (x, y) = ((x - 0.5) * scale * aspect, (y - 0.5) * scale);
        let x = x + shear * y;
        (c * x - s * y + tx, s * x + c * y + ty)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = strokes
        .iter()
        .flat_map(|st| st.windows(2).map(|w| (warp(w[0]), warp(w[1]))).collect::<Vec<_>>())
        .collect();
    let mut data = vec![0f32; MNIST_SIDE * MNIST_SIDE];
    for y in 0..MNIST_SIDE {
        for x in 0..MNIST_SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments.iter().map(|&(a, b)| dist_to_segment(p, a, b)).fold(f64::INFINITY, f64::min);
            data[y * MNIST_SIDE + x] = (width + 0.5 - d).clamp(0.0, 1.0) as f32;
        }
    }
    ImageTensor::new(1, MNIST_SIDE, MNIST_SIDE, data).expect("rendered digit is in range")
}

/// Deterministic stream of procedural digits: image `i` depends only on `(seed, i)`.
#[derive(Debug, Clone)]
pub struct ProceduralDigits {
    pub seed: u64,
    pub len: usize,
}

impl ProceduralDigits {
    pub fn get(&self, index: usize) -> ImageTensor {
        let mut rng = rng_from(self.seed, &[0xD161_7, index as u64]);
        let class = rng.random_range(0..10);
        render_digit(class, &mut rng)
    }
}
