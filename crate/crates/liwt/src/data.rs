//! Image ingestion and training batch synthesis.
//!
//! Training pairs are built by cropping a high-resolution patch, shrinking
//! it bicubically to the low-resolution patch size, and sampling query
//! pixels from the original crop. The scale each pair is built at follows
//! a curriculum: early epochs draw from a narrow range and later epochs
//! from progressively wider ones, unless a fixed scale is configured.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::DataConfig;
use crate::coords::{self, CoordSpace};
use crate::nn::{resample, Resample};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read directory {dir}: {source}")]
    ReadDir {
        dir: String,
        source: std::io::Error,
    },
    #[error("no usable images in {dir}")]
    Empty { dir: String },
    #[error("crop of {need} per side exceeds the {h}x{w} image")]
    CropTooLarge { need: usize, h: usize, w: usize },
    #[error("cannot write {path}: {source}")]
    Encode {
        path: String,
        source: image::ImageError,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
}

/// Decoded training images, smallest usable size enforced at load.
pub struct ImageSet<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub paths: Vec<PathBuf>,
    /// Human-readable reasons for every file that was skipped.
    pub skipped: Vec<String>,
}

/// One training example: a low-res patch plus query points into its
/// high-res source crop.
pub struct TrainItem<T: Scalar> {
    pub lr: Tensor<T>,
    pub queries: Vec<(f64, f64)>,
    /// Ground-truth RGB per query, `[m, 3]`.
    pub gt: Tensor<T>,
    pub cell_scaled: (f64, f64),
    pub scale: f64,
}

/// Smallest image side `load_images` accepts for this config: the
/// largest high-res crop any curriculum draw can request.
pub fn min_image_side(cfg: &DataConfig) -> usize {
    let max_scale = cfg.fixed_scale.unwrap_or(cfg.curriculum_caps[2]);
    (cfg.patch as f64 * max_scale).ceil() as usize
}

/// Loads every PNG under `dir` in lexicographic path order, mapping
/// 8-bit samples to reals by v/255. Undecodable or too-small files are
/// recorded in `skipped` and the load continues; an empty result is an
/// error.
pub fn load_images<T: Scalar>(dir: &Path, min_side: usize) -> Result<ImageSet<T>, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::ReadDir {
        dir: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();

    let mut set = ImageSet {
        images: Vec::new(),
        paths: Vec::new(),
        skipped: Vec::new(),
    };
    for path in paths {
        let img = match load_png::<T>(&path) {
            Ok(t) => t,
            Err(e) => {
                set.skipped.push(e.to_string());
                continue;
            }
        };
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if h < min_side || w < min_side {
            set.skipped.push(format!(
                "{}: {h}x{w} is smaller than the {min_side} per side this config needs",
                path.display()
            ));
            continue;
        }
        set.images.push(img);
        set.paths.push(path);
    }
    if set.images.is_empty() {
        return Err(DataError::Empty {
            dir: dir.display().to_string(),
        });
    }
    Ok(set)
}

/// Decodes one PNG to an `[h, w, 3]` tensor with values in [0, 1].
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Decode {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<T> = img
        .into_raw()
        .into_iter()
        .map(|v| T::from_f64(v as f64 / 255.0))
        .collect();
    Ok(Tensor::from_vec(&[h as usize, w as usize, 3], data))
}

/// Writes an `[h, w, 3]` tensor as 8-bit PNG, clamping to [0, 1] and
/// rounding each channel to the nearest byte.
pub fn save_png<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<(), DataError> {
    assert_eq!(t.shape().len(), 3, "save_png: need [h, w, 3], got {:?}", t.shape());
    assert_eq!(t.shape()[2], 3, "save_png: need 3 channels, got {:?}", t.shape());
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("byte count matches dimensions");
    img.save(path).map_err(|source| DataError::Encode {
        path: path.display().to_string(),
        source,
    })
}

/// Draws a scale for the given epoch. The curriculum stages widen the
/// uniform range at the configured epoch fractions; a fixed scale
/// short-circuits the draw.
pub fn sample_scale(cfg: &DataConfig, epoch: usize, total: usize, rng: &mut ChaCha8Rng) -> f64 {
    if let Some(s) = cfg.fixed_scale {
        return s;
    }
    let frac = if total == 0 { 0.0 } else { epoch as f64 / total as f64 };
    let cap = if frac < cfg.curriculum_boundaries[0] {
        cfg.curriculum_caps[0]
    } else if frac < cfg.curriculum_boundaries[1] {
        cfg.curriculum_caps[1]
    } else {
        cfg.curriculum_caps[2]
    };
    rng.random_range(1.0..cap)
}

/// Crops a random ⌊ps⌋-sided high-res patch and bicubically shrinks it
/// to p per side. Returns (lr, hr, effective scale): the scale is
/// recomputed as ⌊ps⌋/p so the cell geometry matches the actual crop.
pub fn make_pair<T: Scalar>(
    img: &Tensor<T>,
    s: f64,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>, f64), DataError> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let hp = (p as f64 * s).floor() as usize;
    if hp > h || hp > w {
        return Err(DataError::CropTooLarge { need: hp, h, w });
    }
    let top = rng.random_range(0..=h - hp);
    let left = rng.random_range(0..=w - hp);
    let src = img.data();
    let mut crop = Vec::with_capacity(hp * hp * c);
    for i in 0..hp {
        let row = ((top + i) * w + left) * c;
        crop.extend_from_slice(&src[row..row + hp * c]);
    }
    let hr = Tensor::from_vec(&[hp, hp, c], crop);
    let lr = resample(&hr, p, p, Resample::Bicubic);
    Ok((lr, hr, hp as f64 / p as f64))
}

/// Picks `m` distinct pixels of the patch uniformly without replacement
/// and returns their centers in [-1,1]^2 plus their RGB rows.
pub fn sample_queries<T: Scalar>(
    hr: &Tensor<T>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(f64, f64)>, Tensor<T>) {
    let (h, w, c) = (hr.shape()[0], hr.shape()[1], hr.shape()[2]);
    let n = h * w;
    assert!(m <= n, "sample_queries: {m} requested from {n} pixels");
    // partial Fisher-Yates: the first m slots become the sample
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let space = CoordSpace::new(h, w);
    let src = hr.data();
    let mut queries = Vec::with_capacity(m);
    let mut rgb = Vec::with_capacity(m * c);
    for &flat in &idx[..m] {
        let (i, j) = (flat / w, flat % w);
        queries.push(space.center(i, j));
        rgb.extend_from_slice(&src[flat * c..(flat + 1) * c]);
    }
    (queries, Tensor::from_vec(&[m, c], rgb))
}

/// Builds one training item from a random image of the set.
pub fn make_item<T: Scalar>(
    set: &ImageSet<T>,
    cfg: &DataConfig,
    epoch: usize,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainItem<T>, DataError> {
    let img = &set.images[rng.random_range(0..set.images.len())];
    let s = sample_scale(cfg, epoch, total, rng);
    let (lr, hr, eff) = make_pair(img, s, cfg.patch, rng)?;
    let m = cfg.patch * cfg.patch;
    let (queries, gt) = sample_queries(&hr, m, rng);
    Ok(TrainItem {
        lr,
        queries,
        gt,
        cell_scaled: coords::cell_scaled(eff, eff),
        scale: eff,
    })
}

/// One batch of independent items.
pub fn make_batch<T: Scalar>(
    set: &ImageSet<T>,
    cfg: &DataConfig,
    epoch: usize,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainItem<T>>, DataError> {
    (0..cfg.batch).map(|_| make_item(set, cfg, epoch, total, rng)).collect()
}
