//! Offline augmentation of image/mask pairs: crop, rotation, flips and grid
//! distortion. Images are resampled bilinearly, masks by nearest neighbor.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::image_io::{load_image, load_mask, resize_bilinear, resize_nearest, save_binary_mask_png, save_image_png};
use crate::data::manifest::{Manifest, SampleRecord, Split};
use crate::data::synthetic::sample_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MULTIPLIER: usize = 5;
const CROP_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Keeps a window covering a random fraction of the area, then resizes
    /// back to the input size.
    RandomCrop { min_area: f64, max_area: f64 },
    /// Rotation about the center by a uniform angle in ±`max_degrees`.
    RandomRotation { max_degrees: f64 },
    HorizontalFlip,
    VerticalFlip,
    /// Piecewise-linear warp on a `cells` x `cells` grid whose cell sizes are
    /// scaled by factors in 1 ± `magnitude`.
    GridDistortion { cells: usize, magnitude: f64 },
}

impl AugmentOp {
    /// The five operations with their default magnitudes.
    pub fn defaults() -> Vec<AugmentOp> {
        vec![
            AugmentOp::RandomCrop {
                min_area: 0.7,
                max_area: 1.0,
            },
            AugmentOp::RandomRotation { max_degrees: 45.0 },
            AugmentOp::HorizontalFlip,
            AugmentOp::VerticalFlip,
            AugmentOp::GridDistortion {
                cells: 5,
                magnitude: 0.3,
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::RandomCrop { .. } => "crop",
            AugmentOp::RandomRotation { .. } => "rotate",
            AugmentOp::HorizontalFlip => "hflip",
            AugmentOp::VerticalFlip => "vflip",
            AugmentOp::GridDistortion { .. } => "grid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Interp {
    Bilinear,
    Nearest,
}

/// Resamples every channel at source coordinates `map(y, x)` (pixel centers
/// at integers). Samples falling outside the source are zero.
fn remap(x: &Tensor, interp: Interp, map: impl Fn(usize, usize) -> (f64, f64)) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h as f64, s.w as f64);
    let coords: Vec<(f64, f64)> = (0..s.h).flat_map(|y| (0..s.w).map(move |xx| (y, xx))).map(|(y, xx)| map(y, xx)).collect();
    Tensor::from_fn(s, |n, c, y, xx| {
        let (sy, sx) = coords[y * s.w + xx];
        if sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > w - 0.5 {
            return 0.0;
        }
        let p = x.plane(n, c);
        match interp {
            Interp::Nearest => {
                let iy = (sy.round().max(0.0) as usize).min(s.h - 1);
                let ix = (sx.round().max(0.0) as usize).min(s.w - 1);
                p[iy * s.w + ix]
            }
            Interp::Bilinear => {
                let sy = sy.clamp(0.0, h - 1.0);
                let sx = sx.clamp(0.0, w - 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
                let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                let top = p[y0 * s.w + x0] * (1.0 - fx) + p[y0 * s.w + x1] * fx;
                let bot = p[y1 * s.w + x0] * (1.0 - fx) + p[y1 * s.w + x1] * fx;
                top * (1.0 - fy) + bot * fy
            }
        }
    })
}

pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, y, xx| x.at(n, c, y, s.w - 1 - xx))
}

pub fn flip_vertical(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, y, xx| x.at(n, c, s.h - 1 - y, xx))
}

/// Rotates counter-clockwise (as displayed, rows growing downwards) by
/// `degrees` about the image center.
pub fn rotate(image: &Tensor, mask: &Tensor, degrees: f64) -> (Tensor, Tensor) {
    let s = image.shape();
    let (cy, cx) = ((s.h as f64 - 1.0) / 2.0, (s.w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    // inverse map: output pixel -> source pixel
    let map = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    };
    (remap(image, Interp::Bilinear, map), remap(mask, Interp::Nearest, map))
}

/// Crops the window (top, left, height, width) and resizes it back.
pub fn crop_resize(image: &Tensor, mask: &Tensor, window: (usize, usize, usize, usize)) -> Result<(Tensor, Tensor)> {
    let s = image.shape();
    let (top, left, ch, cw) = window;
    if ch == 0 || cw == 0 || top + ch > s.h || left + cw > s.w {
        return Err(Error::Augment(format!("empty or out-of-range crop window {window:?} for {s}")));
    }
    let crop = |t: &Tensor| {
        let ts = t.shape();
        Tensor::from_fn((ts.n, ts.c, ch, cw), |n, c, y, x| t.at(n, c, top + y, left + x))
    };
    Ok((resize_bilinear(&crop(image), s.h, s.w), resize_nearest(&crop(mask), s.h, s.w)))
}

/// Cumulative source positions for a distorted axis of `len` pixels.
fn distorted_axis(len: usize, cells: usize, steps: &[f64]) -> Vec<f64> {
    let cells = cells.max(1);
    let total: f64 = steps.iter().sum();
    // knots of the output grid and their (rescaled) source positions
    let mut src_knots = vec![0.0];
    for s in steps {
        src_knots.push(src_knots.last().unwrap() + s / total);
    }
    (0..len)
        .map(|i| {
            let u = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
            let k = ((u * cells as f64).floor() as usize).min(cells - 1);
            let t = u * cells as f64 - k as f64;
            let v = src_knots[k] + t * (src_knots[k + 1] - src_knots[k]);
            v * (len - 1) as f64
        })
        .collect()
}

pub fn grid_distort(image: &Tensor, mask: &Tensor, cells: usize, xs: &[f64], ys: &[f64]) -> (Tensor, Tensor) {
    let s = image.shape();
    let col = distorted_axis(s.w, cells, xs);
    let row = distorted_axis(s.h, cells, ys);
    let map = |y: usize, x: usize| (row[y], col[x]);
    (remap(image, Interp::Bilinear, map), remap(mask, Interp::Nearest, map))
}

/// Applies one operation to an image/mask pair sharing H and W.
pub fn apply(op: &AugmentOp, image: &Tensor, mask: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let (si, sm) = (image.shape(), mask.shape());
    if si.h != sm.h || si.w != sm.w || si.n != 1 || sm.n != 1 {
        return Err(Error::Shape {
            op: "augment",
            lhs: si,
            rhs: sm,
        });
    }
    Ok(match *op {
        AugmentOp::HorizontalFlip => (flip_horizontal(image), flip_horizontal(mask)),
        AugmentOp::VerticalFlip => (flip_vertical(image), flip_vertical(mask)),
        AugmentOp::RandomRotation { max_degrees } => {
            let a = if max_degrees > 0.0 {
                rng.gen_range(-max_degrees..=max_degrees)
            } else {
                0.0
            };
            rotate(image, mask, a)
        }
        AugmentOp::RandomCrop { min_area, max_area } => {
            if !(0.0 < min_area && min_area <= max_area && max_area <= 1.0) {
                return Err(Error::Augment(format!("crop area range [{min_area}, {max_area}] is invalid")));
            }
            let mut last = None;
            for _ in 0..CROP_RETRIES {
                let f = if min_area < max_area {
                    rng.gen_range(min_area..=max_area)
                } else {
                    min_area
                };
                let ch = (si.h as f64 * f.sqrt()).round() as usize;
                let cw = (si.w as f64 * f.sqrt()).round() as usize;
                if ch == 0 || cw == 0 || ch > si.h || cw > si.w {
                    last = Some(format!("{ch}x{cw}"));
                    continue;
                }
                let top = rng.gen_range(0..=si.h - ch);
                let left = rng.gen_range(0..=si.w - cw);
                return crop_resize(image, mask, (top, left, ch, cw));
            }
            return Err(Error::Augment(format!(
                "no valid crop window after {CROP_RETRIES} attempts (last {})",
                last.unwrap_or_default()
            )));
        }
        AugmentOp::GridDistortion { cells, magnitude } => {
            let cells = cells.max(1);
            let mut draw = || -> Vec<f64> {
                (0..cells)
                    .map(|_| 1.0 + if magnitude > 0.0 { rng.gen_range(-magnitude..=magnitude) } else { 0.0 })
                    .collect()
            };
            let xs = draw();
            let ys = draw();
            grid_distort(image, mask, cells, &xs, &ys)
        }
    })
}

#[derive(Clone, Debug, Default)]
pub struct AugmentSummary {
    pub manifest: Manifest,
    /// (source image, reason) for every pair that could not be processed.
    pub failures: Vec<(String, String)>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn copy_into(root: &Path, rel: &Path, out_dir: &Path, sub: &str) -> Result<PathBuf> {
    let name = rel.file_name().ok_or_else(|| Error::Augment(format!("no file name in {}", rel.display())))?;
    let dst_rel = PathBuf::from(sub).join(name);
    let dst = out_dir.join(&dst_rel);
    std::fs::copy(root.join(rel), &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(dst_rel)
}

/// Materializes `multiplier` augmented copies of every training pair (one
/// operation each, cycling through `ops`) next to copies of all originals,
/// writes `manifest.csv` into `out_dir` and returns the new manifest.
/// Validation and test pairs are copied unchanged.
pub fn augment_dataset(manifest: &Manifest, ops: &[AugmentOp], multiplier: usize, out_dir: &Path, seed: u64) -> Result<AugmentSummary> {
    if multiplier == 0 {
        return Err(Error::Config("augmentation multiplier must be at least 1".into()));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let per_record: Vec<std::result::Result<Vec<SampleRecord>, (String, String)>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(index, rec)| {
            let id = rec.image.display().to_string();
            process_record(manifest, rec, index as u64, ops, multiplier, out_dir, seed).map_err(|e| (id, e.to_string()))
        })
        .collect();
    let mut summary = AugmentSummary {
        manifest: Manifest {
            root: out_dir.to_path_buf(),
            ..Manifest::default()
        },
        failures: Vec::new(),
    };
    for r in per_record {
        match r {
            Ok(recs) => summary.manifest.records.extend(recs),
            Err(f) => {
                log::warn!("augment: {}: {}", f.0, f.1);
                summary.failures.push(f);
            }
        }
    }
    summary.manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(summary)
}

fn process_record(
    manifest: &Manifest,
    rec: &SampleRecord,
    index: u64,
    ops: &[AugmentOp],
    multiplier: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let image = copy_into(&manifest.root, &rec.image, out_dir, "images")?;
    let mask = copy_into(&manifest.root, &rec.mask, out_dir, "masks")?;
    let mut out = vec![SampleRecord {
        image,
        mask,
        ..rec.clone()
    }];
    if rec.split != Split::Train || ops.is_empty() {
        return Ok(out);
    }
    let im = load_image(&manifest.root.join(&rec.image))?;
    let m = load_mask(&manifest.root.join(&rec.mask))?.mask;
    if (im.shape().h, im.shape().w) != (m.shape().h, m.shape().w) {
        return Err(Error::Augment(format!("image {} and mask {} differ in size", im.shape(), m.shape())));
    }
    let mut rng = sample_rng(seed, index);
    let base = stem(&rec.image);
    for k in 0..multiplier {
        let op = &ops[k % ops.len()];
        let (ai, am) = apply(op, &im, &m, &mut rng)?;
        let img_rel = PathBuf::from("images").join(format!("{base}_aug{k}_{}.png", op.name()));
        let mask_rel = PathBuf::from("masks").join(format!("{base}_aug{k}_{}.png", op.name()));
        save_image_png(&ai, &out_dir.join(&img_rel))?;
        save_binary_mask_png(&am, &out_dir.join(&mask_rel))?;
        out.push(SampleRecord {
            image: img_rel,
            mask: mask_rel,
            split: Split::Train,
            original_size: rec.original_size,
        });
    }
    Ok(out)
}
