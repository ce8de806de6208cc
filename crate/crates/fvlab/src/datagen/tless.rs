//! FusionT-LESS: targets from the power-socket classes overlaid with 5-8
//! occluders cut from other classes.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::canny::{cut_objects_canny, CannyConfig, SpriteSet};
use super::image::ImageTensor;
use crate::{Error, Result};

pub const TLESS_SIDE: usize = 64;
pub const TARGET_CLASSES: [u32; 6] = [19, 20, 21, 22, 23, 24];
pub const TRAIN_OCCLUDER_CLASSES: [u32; 12] = [1, 2, 5, 6, 7, 11, 12, 13, 14, 25, 26, 27];
pub const EVAL_OCCLUDER_CLASSES: [u32; 12] = [3, 4, 8, 9, 10, 15, 16, 17, 18, 28, 29, 30];

pub fn occluder_classes(train: bool) -> &'static [u32] {
    if train { &TRAIN_OCCLUDER_CLASSES } else { &EVAL_OCCLUDER_CLASSES }
}

/// Every tenth target image is held out for evaluation.
pub fn is_eval_index(index: usize) -> bool {
    index % 10 == 9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Rotation range in degrees.
    pub max_rotation_deg: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { min_sprites: 5, max_sprites: 8, min_scale: 0.5, max_scale: 1.2, max_rotation_deg: 360.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub sprite: usize,
    pub scale: f64,
    pub rotation_deg: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pastes sprites over `target`, later sprites over earlier ones.
pub fn compose_tless_occlusion<R: Rng + ?Sized>(
    target: &ImageTensor,
    sprites: &SpriteSet,
    rng: &mut R,
    cfg: &OcclusionConfig,
) -> Result<(ImageTensor, Vec<Placement>)> {
    if cfg.min_sprites > cfg.max_sprites {
        return Err(Error::config("occluder count range"));
    }
    if cfg.max_sprites == 0 {
        return Ok((target.clone(), Vec::new()));
    }
    if sprites.is_empty() {
        return Err(Error::invalid("occlusion needs a non-empty sprite set"));
    }
    let n = rng.random_range(cfg.min_sprites..=cfg.max_sprites);
    let (h, w) = (target.height(), target.width());
    let mut out = target.clone();
    let mut placements = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..sprites.len());
        let sprite = &sprites.sprites[idx];
        let mut scale = cfg.min_scale + rng.random::<f64>() * (cfg.max_scale - cfg.min_scale);
        let rotation_deg = rng.random::<f64>() * cfg.max_rotation_deg;
        let (sh, sw) = (sprite.alpha.height() as f64, sprite.alpha.width() as f64);
        // the rotated bounding box must fit the canvas, otherwise shrink
        let diag = sh.hypot(sw) * scale;
        let limit = h.min(w) as f64;
        if diag > limit {
            scale *= limit / diag;
        }
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        paste(&mut out, sprite, scale, rotation_deg, cx, cy);
        placements.push(Placement { sprite: idx, scale, rotation_deg, cx, cy });
    }
    Ok((out, placements))
}

fn paste(canvas: &mut ImageTensor, sprite: &super::canny::Sprite, scale: f64, rotation_deg: f64, cx: f64, cy: f64) {
    let (h, w) = (canvas.height(), canvas.width());
    let (sh, sw) = (sprite.alpha.height(), sprite.alpha.width());
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let reach = (sh as f64).hypot(sw as f64) * scale / 2.0 + 1.0;
    let y_lo = (cy - reach).floor().max(0.0) as usize;
    let y_hi = ((cy + reach).ceil() as usize).min(h);
    let x_lo = (cx - reach).floor().max(0.0) as usize;
    let x_hi = ((cx + reach).ceil() as usize).min(w);
    let img = if sprite.image.channels() == canvas.channels() {
        sprite.image.clone()
    } else if canvas.channels() == 3 {
        sprite.image.to_rgb()
    } else {
        sprite.image.to_gray()
    };
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            // inverse map canvas pixel centre into sprite coordinates
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (c * dx + s * dy) / scale + sw as f64 / 2.0;
            let v = (-s * dx + c * dy) / scale + sh as f64 / 2.0;
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let (ui, vi) = (u as usize, v as usize);
            if ui >= sw || vi >= sh || !sprite.alpha.get(vi, ui) {
                continue;
            }
            for ch in 0..canvas.channels() {
                canvas.set(ch, y, x, img.get(ch, vi, ui));
            }
        }
    }
}

/// Square centre crop followed by bilinear resize to `side`.
pub fn square_resize(image: &ImageTensor, side: usize) -> Result<ImageTensor> {
    let s = image.height().min(image.width());
    let top = (image.height() - s) / 2;
    let left = (image.width() - s) / 2;
    Ok(image.crop(top, left, s, s)?.resize_bilinear(side, side))
}

/// Image paths of one T-LESS training class (`<root>/train_primesense/<cc>/rgb/*.png`).
pub fn class_images(root: &Path, class: u32) -> Result<Vec<PathBuf>> {
    let base = if root.join("train_primesense").is_dir() { root.join("train_primesense") } else { root.to_path_buf() };
    let dir = base.join(format!("{class:02}")).join("rgb");
    let dir = if dir.is_dir() { dir } else { base.join(format!("{class:02}")) };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "jpg" | "jpeg")))
        .collect();
    files.sort();
    Ok(files)
}

/// Cuts sprites from every occluder class of the requested split.
pub fn build_sprite_set(root: &Path, train: bool, canny: &CannyConfig, per_class_limit: Option<usize>) -> Result<SpriteSet> {
    let mut set = SpriteSet::default();
    for &class in occluder_classes(train) {
        let files = class_images(root, class)?;
        for path in files.iter().take(per_class_limit.unwrap_or(usize::MAX)) {
            let img = square_resize(&ImageTensor::load(path, 3)?, TLESS_SIDE)?;
            if let Some(sprite) = cut_objects_canny(&img, canny)? {
                set.push(sprite, class);
            }
        }
    }
    Ok(set)
}
