//! Positive view pairs with exactly recorded crop geometry.
//!
//! Geometry (random resized crop plus horizontal flip) is sampled first
//! and recorded as a [`CropBox`]; pixels are then resampled bilinearly to
//! a square output and the photometric transforms run on the result.
//! Photometric ops never touch the recorded geometry.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::overlap_region;
use crate::image::Image;
use crate::math::{ceil, exp, floor, ln, round, sqrt};
use crate::types::CropBox;
use crate::{Error, Result};

/// Which column of the two-transform recipe to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Crop area as a fraction of the source image, sampled uniformly.
    pub crop_area_range: (f64, f64),
    /// Crop aspect ratio (w / h), sampled log-uniformly.
    pub aspect_ratio_range: (f64, f64),
    pub hflip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob_t1: f64,
    pub blur_prob_t2: f64,
    pub blur_sigma_range: (f64, f64),
    pub solarize_prob_t1: f64,
    pub solarize_prob_t2: f64,
    /// Minimum crop overlap as a fraction of the smaller crop's area.
    pub min_overlap_frac: f64,
    pub max_retries: usize,
    pub output_side: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop_area_range: (0.08, 1.0),
            aspect_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob_t1: 1.0,
            blur_prob_t2: 0.1,
            blur_sigma_range: (0.1, 2.0),
            solarize_prob_t1: 0.0,
            solarize_prob_t2: 0.2,
            min_overlap_frac: 0.01,
            max_retries: 10,
            output_side: 224,
        }
    }
}

impl AugmentParams {
    /// Crops and flips only: every photometric probability set to zero.
    pub fn geometry_only() -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob_t1: 0.0,
            blur_prob_t2: 0.0,
            solarize_prob_t1: 0.0,
            solarize_prob_t2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob_t1", self.blur_prob_t1),
            ("blur_prob_t2", self.blur_prob_t2),
            ("solarize_prob_t1", self.solarize_prob_t1),
            ("solarize_prob_t2", self.solarize_prob_t2),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let ranges = [
            ("crop_area_range", self.crop_area_range),
            ("aspect_ratio_range", self.aspect_ratio_range),
            ("blur_sigma_range", self.blur_sigma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(alloc::format!("{name} must be positive and ordered, got ({lo}, {hi})")));
            }
        }
        if self.crop_area_range.1 > 1.0 {
            return Err(Error::Config("crop_area_range cannot exceed 1".into()));
        }
        for (name, v) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(alloc::format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(alloc::format!("hue must lie in [0, 0.5], got {}", self.hue)));
        }
        if self.output_side == 0 {
            return Err(Error::Config("output_side must be positive".into()));
        }
        Ok(())
    }
}

/// Two augmented views of one source image and their geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub image1: Image,
    pub image2: Image,
    pub crop1: CropBox,
    pub crop2: CropBox,
    pub seed: u64,
}

/// Random resized crop: area fraction uniform, aspect ratio log-uniform,
/// integer pixel box; after ten misses falls back to the largest centered
/// box whose ratio is inside the range.
pub fn sample_crop<R: Rng + ?Sized>(width: usize, height: usize, params: &AugmentParams, rng: &mut R) -> CropBox {
    let (w_img, h_img) = (width as f64, height as f64);
    let area = w_img * h_img;
    let (log_lo, log_hi) = (ln(params.aspect_ratio_range.0), ln(params.aspect_ratio_range.1));
    let mut crop = None;
    for _ in 0..10 {
        let target = area * uniform(rng, params.crop_area_range.0, params.crop_area_range.1);
        let ratio = exp(uniform(rng, log_lo, log_hi));
        let w = round(sqrt(target * ratio));
        let h = round(sqrt(target / ratio));
        if w > 0.0 && h > 0.0 && w <= w_img && h <= h_img {
            let x = rng.random_range(0..=(w_img - w) as usize) as f64;
            let y = rng.random_range(0..=(h_img - h) as usize) as f64;
            crop = Some((x, y, w, h));
            break;
        }
    }
    let (x, y, w, h) = crop.unwrap_or_else(|| {
        let in_ratio = w_img / h_img;
        let (w, h) = if in_ratio < params.aspect_ratio_range.0 {
            (w_img, round(w_img / params.aspect_ratio_range.0))
        } else if in_ratio > params.aspect_ratio_range.1 {
            (round(h_img * params.aspect_ratio_range.1), h_img)
        } else {
            (w_img, h_img)
        };
        (floor((w_img - w) / 2.0), floor((h_img - h) / 2.0), w, h)
    });
    let hflip = rng.random::<f64>() < params.hflip_prob;
    CropBox { x, y, w, h, hflip }
}

#[inline]
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn enough_overlap(a: &CropBox, b: &CropBox, min_frac: f64) -> bool {
    let area = overlap_region(a, b).map_or(0.0, |r| r.area());
    area > 0.0 && area >= min_frac * a.area().min(b.area())
}

/// Draws two crop geometries, resampling the pair until they overlap by at
/// least `min_overlap_frac` of the smaller crop; after `max_retries`
/// resamples the second crop copies the first.
pub fn sample_crop_pair<R: Rng + ?Sized>(width: usize, height: usize, params: &AugmentParams, rng: &mut R) -> (CropBox, CropBox) {
    let mut c1 = sample_crop(width, height, params, rng);
    let mut c2 = sample_crop(width, height, params, rng);
    let mut retries = 0;
    while !enough_overlap(&c1, &c2, params.min_overlap_frac) {
        if retries == params.max_retries {
            return (c1, c1);
        }
        c1 = sample_crop(width, height, params, rng);
        c2 = sample_crop(width, height, params, rng);
        retries += 1;
    }
    (c1, c2)
}

/// Samples a positive pair from `image` with an RNG seeded by `seed`.
pub fn sample_view_pair(image: &Image, params: &AugmentParams, seed: u64) -> Result<ViewPair> {
    if image.width < 32 || image.height < 32 {
        return Err(Error::Input(alloc::format!("source image is {}x{}, need at least 32x32", image.width, image.height)));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (crop1, crop2) = sample_crop_pair(image.width, image.height, params, &mut rng);
    let view1 = resample(image, &crop1, params.output_side);
    let view2 = resample(image, &crop2, params.output_side);
    let image1 = apply_photometric(&view1, Transform::First, params, &mut rng);
    let image2 = apply_photometric(&view2, Transform::Second, params, &mut rng);
    Ok(ViewPair { image1, image2, crop1, crop2, seed })
}

/// Bilinear resampling of `crop` to a `side x side` view, pixel-center
/// aligned, with coordinates clamped to the image border. A flipped crop
/// reads its columns right to left.
pub fn resample(image: &Image, crop: &CropBox, side: usize) -> Image {
    let mut out = Image::new(side, side);
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;
    let xs: Vec<(usize, usize, f64)> = (0..side)
        .map(|j| {
            let mut u = (j as f64 + 0.5) / side as f64;
            if crop.hflip {
                u = 1.0 - u;
            }
            let sx = (crop.x + u * crop.w - 0.5).clamp(0.0, max_x);
            let x0 = floor(sx) as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    for i in 0..side {
        let sy = (crop.y + (i as f64 + 0.5) / side as f64 * crop.h - 0.5).clamp(0.0, max_y);
        let y0 = floor(sy) as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = sy - y0 as f64;
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b, c, d) = (image.pixel(x0, y0), image.pixel(x1, y0), image.pixel(x0, y1), image.pixel(x1, y1));
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                rgb[ch] = top + (bottom - top) * fy;
            }
            out.set_pixel(j, i, rgb);
        }
    }
    out
}

/// Color jitter, grayscale, Gaussian blur and solarization with the
/// probabilities of the selected transform column, in that order.
///
/// Jitter factors are drawn uniformly from `[1 - s, 1 + s]` (hue shift
/// from `[-hue, hue]`) and applied as brightness, contrast, saturation,
/// hue.
pub fn apply_photometric<R: Rng + ?Sized>(image: &Image, which: Transform, params: &AugmentParams, rng: &mut R) -> Image {
    let mut img = image.clone();
    let (blur_p, solarize_p) = match which {
        Transform::First => (params.blur_prob_t1, params.solarize_prob_t1),
        Transform::Second => (params.blur_prob_t2, params.solarize_prob_t2),
    };
    if rng.random::<f64>() < params.jitter_prob {
        let b = uniform(rng, 1.0 - params.brightness, 1.0 + params.brightness);
        let c = uniform(rng, 1.0 - params.contrast, 1.0 + params.contrast);
        let s = uniform(rng, 1.0 - params.saturation, 1.0 + params.saturation);
        let h = uniform(rng, -params.hue, params.hue);
        adjust_brightness(&mut img, b);
        adjust_contrast(&mut img, c);
        adjust_saturation(&mut img, s);
        adjust_hue(&mut img, h);
    }
    if rng.random::<f64>() < params.grayscale_prob {
        to_grayscale(&mut img);
    }
    if rng.random::<f64>() < blur_p {
        let sigma = uniform(rng, params.blur_sigma_range.0, params.blur_sigma_range.1);
        img = gaussian_blur(&img, sigma);
    }
    if rng.random::<f64>() < solarize_p {
        solarize(&mut img, 0.5);
    }
    img
}

#[inline]
fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    for v in &mut img.data {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let n = img.width * img.height;
    let mean = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n as f64;
    for v in &mut img.data {
        *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
    }
}

pub fn adjust_saturation(img: &mut Image, factor: f64) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma([p[0], p[1], p[2]]);
        for v in p.iter_mut() {
            *v = ((*v - g) * factor + g).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &mut Image, shift: f64) {
    if shift == 0.0 {
        return;
    }
    for p in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let mut h = h + shift;
        h -= floor(h);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        p[0] = r.clamp(0.0, 1.0);
        p[1] = g.clamp(0.0, 1.0);
        p[2] = b.clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        {
        let x = (g - b) / delta;
        (if x < 0.0 { x + 6.0 } else { x }) / 6.0
    }
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = floor(h6);
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64) % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn to_grayscale(img: &mut Image) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma([p[0], p[1], p[2]]).clamp(0.0, 1.0);
        p.fill(g);
    }
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = ceil(3.0 * sigma).max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x + ki as isize - radius).clamp(0, w - 1);
                let p = img.pixel(sx as usize, y as usize);
                for ch in 0..3 {
                    acc[ch] += k * p[ch];
                }
            }
            tmp.set_pixel(x as usize, y as usize, acc);
        }
    }
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y + ki as isize - radius).clamp(0, h - 1);
                let p = tmp.pixel(x as usize, sy as usize);
                for ch in 0..3 {
                    acc[ch] += k * p[ch];
                }
            }
            out.set_pixel(x as usize, y as usize, [acc[0].clamp(0.0, 1.0), acc[1].clamp(0.0, 1.0), acc[2].clamp(0.0, 1.0)]);
        }
    }
    out
}

/// `v -> 1 - v` for samples at or above `threshold`.
pub fn solarize(img: &mut Image, threshold: f64) {
    for v in &mut img.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}
