use std::path::{Path, PathBuf};

use super::image::ImageTensor;
use crate::{Error, Result};

pub const CELEBA_RAW: (usize, usize) = (218, 178);
pub const CELEBA_CROP: usize = 148;
pub const CELEBA_SIDE: usize = 64;

/// Top-left offset of the centred 148x148 crop in an aligned 218x178 image.
pub fn crop_offsets() -> (usize, usize) {
    ((CELEBA_RAW.0 - CELEBA_CROP) / 2, (CELEBA_RAW.1 - CELEBA_CROP) / 2)
}

/// Centre-crops an aligned CelebA image to 148x148 and resizes it to 64x64.
pub fn make_celeba_target(raw: &ImageTensor) -> Result<ImageTensor> {
    if raw.shape() != (3, CELEBA_RAW.0, CELEBA_RAW.1) {
        return Err(Error::shape(format!(
            "expected an aligned 3x218x178 CelebA image, got {:?}",
            raw.shape()
        )));
    }
    let (top, left) = crop_offsets();
    Ok(raw.crop(top, left, CELEBA_CROP, CELEBA_CROP)?.resize_bilinear(CELEBA_SIDE, CELEBA_SIDE))
}

/// Lists CelebA images under `root` and splits them. With the official
/// `list_eval_partition.txt` present, partition 0 is train and 2 is test;
/// otherwise every tenth file is held out.
pub fn list_split(root: &Path, train: bool) -> Result<Vec<PathBuf>> {
    let img_dir = if root.join("img_align_celeba").is_dir() { root.join("img_align_celeba") } else { root.to_path_buf() };
    let partition = root.join("list_eval_partition.txt");
    if partition.is_file() {
        let text = std::fs::read_to_string(&partition).map_err(|e| Error::io(&partition, e))?;
        let want = if train { "0" } else { "2" };
        return Ok(text
            .lines()
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(name), Some(p)) if p == want => Some(img_dir.join(name)),
                    _ => None,
                }
            })
            .collect());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jpg" | "jpeg" | "png")))
        .collect();
    files.sort();
    Ok(files.into_iter().enumerate().filter(|(i, _)| (i % 10 == 9) != train).map(|(_, p)| p).collect())
}
