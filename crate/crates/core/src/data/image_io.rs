//! Image and mask decoding, resizing, and PNG output.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MASK_THRESHOLD: u8 = 128;

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn is_jpeg(path: &Path) -> bool {
    if let Ok(f) = image::ImageReader::open(path).and_then(|r| r.with_guessed_format()) {
        if let Some(fmt) = f.format() {
            return fmt == ImageFormat::Jpeg;
        }
    }
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg")
    )
}

/// Bilinear resize of a (1, C, H, W) tensor with half-pixel centers.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return x.clone();
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = taps(s.h, out_h);
    let cols = taps(s.w, out_w);
    Tensor::from_fn((s.n, s.c, out_h, out_w), |n, c, y, xo| {
        let p = x.plane(n, c);
        let (r0, r1, fy) = rows[y];
        let (c0, c1, fx) = cols[xo];
        let top = p[r0 * s.w + c0] * (1.0 - fx) + p[r0 * s.w + c1] * fx;
        let bot = p[r1 * s.w + c0] * (1.0 - fx) + p[r1 * s.w + c1] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Source index for output index `o` under nearest-neighbor resampling.
pub fn nearest_index(o: usize, inp: usize, out: usize) -> usize {
    (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
}

pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return x.clone();
    }
    Tensor::from_fn((s.n, s.c, out_h, out_w), |n, c, y, xo| {
        x.at(n, c, nearest_index(y, s.h, out_h), nearest_index(xo, s.w, out_w))
    })
}

/// RGB image as (1, 3, H, W) with values raw/255.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn((1, 3, h, w), |_, c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Loaded mask plus whether any value needed the 128 threshold.
pub struct MaskLoad {
    pub mask: Tensor,
    pub was_binary: bool,
}

/// Single-channel mask thresholded at 128 of its 8-bit luma.
pub fn load_mask(path: &Path) -> Result<MaskLoad> {
    if is_jpeg(path) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "JPEG masks are not accepted; use a lossless format".into(),
        });
    }
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let was_binary = raw.iter().all(|&v| v == 0 || v == 255 || v == 1);
    let mask = Tensor::from_fn((1, 1, h, w), |_, _, y, x| {
        if raw[y * w + x] >= MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    });
    Ok(MaskLoad { mask, was_binary })
}

/// Image and mask resized to `target` (height, width).
pub fn load_pair(image: &Path, mask: &Path, target: (usize, usize)) -> Result<(Tensor, Tensor)> {
    let im = load_image(image)?;
    let m = load_mask(mask)?;
    if !m.was_binary {
        log::warn!("{}: non-binary mask normalized at threshold {MASK_THRESHOLD}", mask.display());
    }
    Ok((resize_bilinear(&im, target.0, target.1), resize_nearest(&m.mask, target.0, target.1)))
}

/// Writes channel 0 of a (1, C, H, W) probability map as a {0, 255} PNG.
pub fn save_mask_png(prob: &Tensor, threshold: f64, path: &Path) -> Result<()> {
    let s = prob.shape();
    let buf: Vec<u8> = prob
        .plane(0, 0)
        .iter()
        .map(|&v| if f64::from(v) > threshold { 255 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(s.w as u32, s.h as u32, buf).expect("buffer sized from shape");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Draws the boundary of the predicted mask in green over the image.
pub fn save_overlay_png(image: &Tensor, prob: &Tensor, threshold: f64, path: &Path) -> Result<()> {
    let s = image.shape();
    let m = resize_nearest(prob, s.h, s.w);
    let fg = |y: usize, x: usize| f64::from(m.at(0, 0, y, x)) > threshold;
    let mut out = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = |c| (image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            let edge = fg(y, x)
                && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    ny < 0 || nx < 0 || ny >= s.h as isize || nx >= s.w as isize || !fg(ny as usize, nx as usize)
                });
            let p = if edge { Rgb([0, 255, 0]) } else { Rgb([px(0), px(1), px(2)]) };
            out.put_pixel(x as u32, y as u32, p);
        }
    }
    out.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a (1, 3, H, W) tensor in [0, 1] as an 8-bit RGB PNG.
pub fn save_image_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    let mut out = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = |c| (image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    out.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a (1, 1, H, W) {0, 1} mask as a {0, 255} PNG.
pub fn save_binary_mask_png(mask: &Tensor, path: &Path) -> Result<()> {
    save_mask_png(mask, 0.5, path)
}
