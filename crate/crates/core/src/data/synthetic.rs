//! Seeded synthetic segmentation set: textured background with one or two
//! filled ellipses as foreground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SegDataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobConfig {
    pub size: usize,
    pub max_ellipses: usize,
    /// Semi-axis range as a fraction of the image side.
    pub min_axis: f64,
    pub max_axis: f64,
    pub noise: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            size: 64,
            max_ellipses: 2,
            min_axis: 0.1,
            max_axis: 0.28,
            noise: 0.05,
        }
    }
}

/// Stream for sample `index` of a set seeded with `seed`; independent of how
/// many samples are drawn or in which order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn blob_sample(cfg: &BlobConfig, seed: u64, index: u64) -> (Tensor, Tensor) {
    let mut rng = sample_rng(seed, index);
    let s = cfg.size;
    let sf = s as f64;
    let count = rng.gen_range(1..=cfg.max_ellipses.max(1));
    let ellipses: Vec<(f64, f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let a = rng.gen_range(cfg.min_axis..cfg.max_axis) * sf;
            let b = rng.gen_range(cfg.min_axis..cfg.max_axis) * sf;
            let cy = rng.gen_range(0.2..0.8) * sf;
            let cx = rng.gen_range(0.2..0.8) * sf;
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            (cy, cx, a, b, th)
        })
        .collect();
    let bg: [f64; 3] = [rng.gen_range(0.25..0.45), rng.gen_range(0.15..0.3), rng.gen_range(0.15..0.3)];
    let fg: [f64; 3] = [rng.gen_range(0.65..0.85), rng.gen_range(0.4..0.6), rng.gen_range(0.3..0.5)];
    let (gy, gx) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));

    let mut mask = vec![0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let inside = ellipses.iter().any(|&(cy, cx, a, b, th)| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = dx * th.cos() + dy * th.sin();
                let v = -dx * th.sin() + dy * th.cos();
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            });
            mask[y * s + x] = if inside { 1.0 } else { 0.0 };
        }
    }
    let mut image = vec![0f32; 3 * s * s];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let base = if mask[y * s + x] > 0.5 { fg[c] } else { bg[c] };
                let shade = gy * (y as f64 / sf - 0.5) + gx * (x as f64 / sf - 0.5);
                let n = rng.gen_range(-1.0..1.0) * cfg.noise;
                image[(c * s + y) * s + x] = (base + shade + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    (
        Tensor::new((1, 3, s, s), image).expect("finite by construction"),
        Tensor::new((1, 1, s, s), mask).expect("finite by construction"),
    )
}

/// `n` samples with ids `blob_{index:05}`, indices starting at `offset`.
pub fn blob_dataset(cfg: &BlobConfig, n: usize, seed: u64, offset: u64) -> SegDataset {
    let mut ids = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let (im, m) = blob_sample(cfg, seed, offset + i);
        ids.push(format!("blob_{:05}", offset + i));
        images.push(im);
        masks.push(m);
    }
    SegDataset { ids, images, masks }
}
