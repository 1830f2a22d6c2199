//! Deterministic synthetic images for fixtures, tests and demos.

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::zoo::faces::{SKIN_BASE, TEXTURE_AMPLITUDE};

/// 8x8 identity texture: a 2-D Walsh pattern, so distinct identities are
/// orthogonal after mean removal. 63 identities are available (`k % 63`).
pub fn identity_texture(k: u32) -> [[i32; 8]; 8] {
    let idx = k % 63 + 1;
    let (kx, ky) = (idx % 8, idx / 8);
    let mut tex = [[0i32; 8]; 8];
    for (y, row) in tex.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let parity = ((kx & x as u32).count_ones() + (ky & y as u32).count_ones()) % 2;
            *cell = if parity == 0 {
                TEXTURE_AMPLITUDE
            } else {
                -TEXTURE_AMPLITUDE
            };
        }
    }
    tex
}

/// Paints a face rectangle; out-of-bounds parts are clipped.
pub fn draw_face(image: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, texture: &[[i32; 8]; 8]) {
    for dy in 0..h {
        for dx in 0..w {
            let (px, py) = (x + dx, y + dy);
            if px >= image.width() || py >= image.height() {
                continue;
            }
            let delta = texture[(dy * 8 / h) as usize][(dx * 8 / w) as usize];
            let c = SKIN_BASE.map(|v| (v as i32 + delta).clamp(0, 255) as u8);
            image.put_pixel(px, py, Rgb(c));
        }
    }
}

/// "Photograph-like" scene: gradients, soft blobs and hard-edged blocks,
/// red channel kept below the skin range.
pub fn natural_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.1..0.4) * w.max(h) as f64,
                [
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                ],
            )
        })
        .collect();
    let base = [
        rng.random_range(40.0..100.0),
        rng.random_range(60.0..140.0),
        rng.random_range(80.0..180.0),
    ];
    let edge_x = rng.random_range(0.2..0.8) * w as f64;
    let blocks: Vec<(f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let (bw, bh) = (
                rng.random_range(0.15..0.35) * w as f64,
                rng.random_range(0.2..0.5) * h as f64,
            );
            (
                rng.random_range(0.0..w as f64 - bw),
                h as f64 - bh,
                bw,
                bh,
                if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(30.0..60.0),
            )
        })
        .collect();
    RgbImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut c = [
            base[0] + 30.0 * fx / w as f64,
            base[1] + 40.0 * fy / h as f64,
            base[2] - 20.0 * fx / w as f64,
        ];
        for (bx, by, r, col) in &blobs {
            let d2 = ((fx - bx).powi(2) + (fy - by).powi(2)) / (r * r);
            let wgt = (-d2).exp();
            for i in 0..3 {
                c[i] += wgt * col[i];
            }
        }
        if fx > edge_x {
            c[1] += 25.0;
        }
        for (bx, by, bw, bh, shade) in &blocks {
            if fx >= *bx && fx < bx + bw && fy >= *by && fy < by + bh {
                c.iter_mut().for_each(|v| *v += shade);
            }
        }
        Rgb([
            c[0].clamp(0.0, 150.0) as u8,
            c[1].clamp(0.0, 255.0) as u8,
            c[2].clamp(0.0, 255.0) as u8,
        ])
    })
}

/// Independent uniform noise per pixel and channel.
pub fn noise_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Gaussian blur followed by an unsharp mask.
pub fn blur_then_sharpen(image: &RgbImage, sigma: f32) -> RgbImage {
    let blurred = imageops::blur(image, sigma);
    imageops::unsharpen(&blurred, sigma, 2)
}

pub fn flat_image(w: u32, h: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb(color))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_orthogonal() {
        let flat = |k| {
            identity_texture(k)
                .iter()
                .flatten()
                .map(|v| *v as f64)
                .collect::<Vec<_>>()
        };
        for a in 0..63 {
            for b in 0..63 {
                let dot: f64 = flat(a).iter().zip(flat(b)).map(|(x, y)| x * y).sum();
                if a == b {
                    assert!(dot > 0.0);
                } else {
                    assert_eq!(dot, 0.0);
                }
            }
        }
    }
}
