use image::{imageops, GrayImage, RgbImage};

use super::{resize_short_side, CropBox};
use crate::Result;

/// Shannon entropy (bits) of a 256-bin histogram. Counts are summed in sorted
/// order so that permuted histograms produce bit-identical values.
pub fn histogram_entropy(hist: &[u32; 256]) -> f64 {
    let mut counts: Vec<u32> = hist.iter().copied().filter(|&c| c > 0).collect();
    counts.sort_unstable();
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// 1 px when the long side is at most twice the target, 8 px otherwise.
pub fn window_stride(long_side: u32, target: u32) -> u32 {
    if long_side <= 2 * target {
        1
    } else {
        8
    }
}

/// Resizes the short side to `target`, then returns the `target`-square window
/// along the long axis with the highest grayscale entropy, in resized-image
/// coordinates.
pub fn entropy_crop(image: &RgbImage, target: u32) -> Result<CropBox> {
    let (resized, _) = resize_short_side(image, target)?;
    Ok(entropy_window(&imageops::grayscale(&resized), target))
}

/// Window search on an image whose short side already equals `target`.
/// Ties go to the window whose center is nearest the image center, then to
/// the smaller offset.
pub fn entropy_window(gray: &GrayImage, target: u32) -> CropBox {
    let (w, h) = gray.dimensions();
    let horizontal = w >= h;
    let (long, t) = (if horizontal { w } else { h }, target.min(w.min(h)));
    if long == t {
        return CropBox::new(0, 0, t, t);
    }
    let max_off = long - t;
    let stride = window_stride(long, t);
    let mut offsets: Vec<u32> = (0..=max_off).step_by(stride as usize).collect();
    if *offsets.last().unwrap() != max_off {
        offsets.push(max_off);
    }

    // Histogram of one line across the short axis at position `line` of the long axis.
    let add_line = |hist: &mut [u32; 256], line: u32, sign: i32| {
        for k in 0..t {
            let v = if horizontal {
                gray.get_pixel(line, k)[0]
            } else {
                gray.get_pixel(k, line)[0]
            };
            if sign > 0 {
                hist[v as usize] += 1;
            } else {
                hist[v as usize] -= 1;
            }
        }
    };

    let mut hist = [0u32; 256];
    for line in 0..t {
        add_line(&mut hist, line, 1);
    }
    let mut prev = 0u32;
    let mut best: Option<(f64, u64, u32)> = None;
    for &off in &offsets {
        if off != prev {
            if off - prev < t {
                for line in prev..off {
                    add_line(&mut hist, line, -1);
                    add_line(&mut hist, line + t, 1);
                }
            } else {
                hist = [0; 256];
                for line in off..off + t {
                    add_line(&mut hist, line, 1);
                }
            }
            prev = off;
        }
        let e = histogram_entropy(&hist);
        let center_gap = (2 * off as i64 + t as i64 - long as i64).unsigned_abs();
        let better = match best {
            None => true,
            Some((be, bgap, boff)) => {
                e > be || (e == be && (center_gap < bgap || (center_gap == bgap && off < boff)))
            }
        };
        if better {
            best = Some((e, center_gap, off));
        }
    }
    let (_, _, off) = best.expect("at least one offset");
    if horizontal {
        CropBox::new(off, 0, t, t)
    } else {
        CropBox::new(0, off, t, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    #[test]
    fn uniform_image_picks_center() {
        let img = RgbImage::from_pixel(100, 40, Rgb([128, 128, 128]));
        let b = entropy_crop(&img, 40).unwrap();
        // 8 px grid: 32 is the grid offset nearest the exact center 30
        assert_eq!(b, CropBox::new(32, 0, 40, 40));
        let tall = RgbImage::from_pixel(40, 79, Rgb([9, 9, 9]));
        // offsets 19 and 20 are equally close to the center -> smaller offset
        assert_eq!(
            entropy_crop(&tall, 40).unwrap(),
            CropBox::new(0, 19, 40, 40)
        );
    }

    #[test]
    fn square_is_identity() {
        let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 7) as u8, (y * 3) as u8, 0]));
        assert_eq!(entropy_crop(&img, 32).unwrap(), CropBox::new(0, 0, 32, 32));
    }

    #[test]
    fn textured_half_attracts_window() {
        let gray = GrayImage::from_fn(64, 32, |x, y| {
            if x >= 32 {
                Luma([((x * 37 + y * 91) % 251) as u8])
            } else {
                Luma([10])
            }
        });
        assert_eq!(entropy_window(&gray, 32), CropBox::new(32, 0, 32, 32));
    }

    #[test]
    fn wide_images_use_coarse_stride() {
        assert_eq!(window_stride(64, 32), 1);
        assert_eq!(window_stride(65, 32), 8);
        let gray = GrayImage::from_fn(100, 10, |x, _| {
            Luma([if x >= 95 { (x * 40) as u8 } else { 0 }])
        });
        let b = entropy_window(&gray, 10);
        // last offset is always a candidate even off the stride grid
        assert_eq!(b.x, 90);
    }

    #[test]
    fn permuted_histograms_tie_exactly() {
        let mut a = [0u32; 256];
        let mut b = [0u32; 256];
        a[3] = 5;
        a[200] = 11;
        b[3] = 11;
        b[17] = 5;
        assert_eq!(
            histogram_entropy(&a).to_bits(),
            histogram_entropy(&b).to_bits()
        );
    }
}
