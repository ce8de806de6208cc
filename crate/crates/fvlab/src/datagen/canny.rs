//! Canny edge detection and object cut-out for occluder sprites.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::image::{BinaryMask, ImageTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannyConfig {
    /// Hysteresis thresholds on the Sobel gradient magnitude of 8-bit intensities.
    pub low: f64,
    pub high: f64,
    pub blur_sigma: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self { low: 50.0, high: 150.0, blur_sigma: 1.4 }
    }
}

fn gaussian_blur5(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (-2i32..=2).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5).map(|i| k[i] * src[y * w + clampi(x as isize + i as isize - 2, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|i| k[i] * tmp[clampi(y as isize + i as isize - 2, h) * w + x]).sum();
        }
    }
    out
}

/// Binary edge map of a single-channel intensity plane with values in `[0, 255]`.
pub fn canny(intensity: &[f64], h: usize, w: usize, cfg: &CannyConfig) -> Vec<bool> {
    let blurred = gaussian_blur5(intensity, h, w, cfg.blur_sigma);
    let at = |y: isize, x: isize| blurred[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let deg = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match deg {
                d if !(22.5..157.5).contains(&d) => 0,
                d if d < 67.5 => 1,
                d if d < 112.5 => 2,
                _ => 3,
            };
        }
    }
    // non-maximum suppression
    let mut thin = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let (a, b) = match dir[i] {
                0 => (mag[i - 1], mag[i + 1]),
                1 => (mag[i - w - 1], mag[i + w + 1]),
                2 => (mag[i - w], mag[i + w]),
                _ => (mag[i - w + 1], mag[i + w - 1]),
            };
            if mag[i] >= a && mag[i] >= b {
                thin[i] = mag[i];
            }
        }
    }
    // hysteresis
    let mut edges = vec![false; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= cfg.high {
            edges[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] >= cfg.low {
                    edges[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

fn morph(src: &[bool], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    let v = if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        false
                    } else {
                        src[ny as usize * w + nx as usize]
                    };
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Filled outer contour of the Canny edges: every pixel not reachable from the
/// image border without crossing a (closed) edge.
pub fn filled_edge_region(image: &ImageTensor, cfg: &CannyConfig) -> BinaryMask {
    let (h, w) = (image.height(), image.width());
    let intensity: Vec<f64> = image.luminance().iter().map(|&v| v as f64 * 255.0).collect();
    let edges = canny(&intensity, h, w, cfg);
    let closed = morph(&morph(&edges, h, w, true), h, w, false);
    let closed: Vec<bool> = closed.iter().zip(&edges).map(|(a, b)| *a || *b).collect();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !closed[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back(y * w + x);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in nbrs {
            if ny < h && nx < w {
                let j = ny * w + nx;
                if !outside[j] && !closed[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    // A blurred step yields contour pixels on both sides of the true boundary.
    // Drop contour pixels that touch the outside but not the enclosed interior,
    // so the mask ends near the middle of the contour band.
    let interior: Vec<bool> = (0..h * w).map(|i| !outside[i] && !closed[i]).collect();
    let touches = |flags: &[bool], i: usize| {
        let (y, x) = (i / w, i % w);
        [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)]
            .into_iter()
            .any(|(ny, nx)| ny < h && nx < w && flags[ny * w + nx])
    };
    let region: Vec<bool> = (0..h * w).map(|i| !outside[i]).collect();
    let peeled: Vec<bool> = (0..h * w)
        .map(|i| region[i] && !(closed[i] && touches(&outside, i) && !touches(&interior, i)))
        .collect();
    let data = if peeled.iter().any(|&v| v) { peeled } else { region };
    BinaryMask::new(h, w, data).expect("mask size")
}

/// An occluder cut-out with its tight alpha mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub image: ImageTensor,
    pub alpha: BinaryMask,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpriteSet {
    pub sprites: Vec<Sprite>,
    pub source_classes: Vec<u32>,
}

impl SpriteSet {
    pub fn is_empty(&self) -> bool {
        self.sprites.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sprites.len()
    }

    pub fn push(&mut self, sprite: Sprite, class: u32) {
        self.sprites.push(sprite);
        self.source_classes.push(class);
    }
}

/// Cuts the object out of an occluder image. Returns `Ok(None)` (and logs a
/// warning) when no closed contour is found.
pub fn cut_objects_canny(image: &ImageTensor, cfg: &CannyConfig) -> Result<Option<Sprite>> {
    let region = filled_edge_region(image, cfg);
    if !region.any() {
        log::warn!("no contour found in occluder image, skipping");
        return Ok(None);
    }
    let (h, w) = (image.height(), image.width());
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    let (ch, cw) = (y1 - y0 + 1, x1 - x0 + 1);
    let crop = image.crop(y0, x0, ch, cw)?;
    let mut alpha = BinaryMask::filled(ch, cw, false);
    for y in 0..ch {
        for x in 0..cw {
            alpha.set(y, x, region.get(y + y0, x + x0));
        }
    }
    if alpha.count() == 0 {
        return Err(Error::invalid("empty sprite after crop"));
    }
    Ok(Some(Sprite { image: crop, alpha }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn disk(side: usize, r: f64) -> ImageTensor {
        let c = side as f64 / 2.0;
        let data = (0..side * side)
            .map(|i| {
                let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
                if (x - c).hypot(y - c) <= r { 1.0 } else { 0.0 }
            })
            .collect();
        ImageTensor::new(1, side, side, data).unwrap()
    }

    #[test]
    fn disk_sprite_matches_disk() {
        let img = disk(64, 12.0);
        let sprite = cut_objects_canny(&img, &CannyConfig::default()).unwrap().unwrap();
        let truth = img.data().iter().filter(|&&v| v > 0.5).count();
        let diff = sprite.alpha.count() as i64 - truth as i64;
        assert!(diff.unsigned_abs() as f64 <= 0.1 * truth as f64, "{} vs {truth}", sprite.alpha.count());
        // tight bounds
        assert!((sprite.alpha.height() as i64 - 24).abs() <= 2);
    }

    #[test]
    fn disk_area_close_to_pi_r2() {
        let r = 20.0;
        let img = disk(128, r);
        let sprite = cut_objects_canny(&img, &CannyConfig::default()).unwrap().unwrap();
        let area = sprite.alpha.count() as f64;
        let expect = std::f64::consts::PI * r * r;
        assert!((area - expect).abs() / expect < 0.05, "area {area} vs {expect}");
    }

    #[test]
    fn black_image_is_skipped() {
        let img = ImageTensor::zeros(3, 32, 32);
        assert!(cut_objects_canny(&img, &CannyConfig::default()).unwrap().is_none());
    }
}
