//! Procedural training images: gradient backgrounds with 3 to 8 solid or
//! gradient rectangles and discs, seeded per index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::math::{cos, sin};
use crate::trainer::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub side: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { side: 256, min_shapes: 3, max_shapes: 8 }
    }
}


#[derive(Clone, Copy)]
enum Fill {
    Solid([f64; 3]),
    /// Colors at the two ends and the axis (0 = x, 1 = y).
    Gradient([f64; 3], [f64; 3], usize),
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Image `index` of the synthetic source with `seed`.
pub fn synthetic_image(params: &SyntheticParams, seed: u64, index: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
    let n = params.side;
    let side = n as f64;
    let mut img = Image::new(n, n);

    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random::<f64>() * core::f64::consts::TAU;
    let (dx, dy) = (cos(angle), sin(angle));
    let span = dx.abs() + dy.abs();
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / side - 0.5, (y as f64 + 0.5) / side - 0.5);
            let t = ((u * dx + v * dy) / span + 0.5).clamp(0.0, 1.0);
            img.set_pixel(x, y, lerp(c0, c1, t));
        }
    }

    let count = rng.random_range(params.min_shapes..=params.max_shapes.max(params.min_shapes));
    for _ in 0..count {
        let fill = if rng.random::<bool>() {
            Fill::Solid(color(&mut rng))
        } else {
            Fill::Gradient(color(&mut rng), color(&mut rng), rng.random_range(0..2))
        };
        let disc = rng.random::<bool>();
        let (x0, y0, x1, y1);
        if disc {
            let r = side * rng.random_range(0.05..0.25);
            let (cx, cy) = (side * rng.random::<f64>(), side * rng.random::<f64>());
            (x0, y0, x1, y1) = (cx - r, cy - r, cx + r, cy + r);
        } else {
            let (w, h) = (side * rng.random_range(0.1..0.5), side * rng.random_range(0.1..0.5));
            let (x, y) = (rng.random::<f64>() * (side - w), rng.random::<f64>() * (side - h));
            (x0, y0, x1, y1) = (x, y, x + w, y + h);
        }
        let (cx, cy, r2) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, ((x1 - x0) / 2.0) * ((x1 - x0) / 2.0));
        let ys = (y0.max(0.0) as usize)..(y1.min(side).max(0.0) as usize).min(n);
        for y in ys {
            let xs = (x0.max(0.0) as usize)..(x1.min(side).max(0.0) as usize).min(n);
            for x in xs {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if disc && (px - cx) * (px - cx) + (py - cy) * (py - cy) > r2 {
                    continue;
                }
                let rgb = match fill {
                    Fill::Solid(c) => c,
                    Fill::Gradient(a, b, axis) => {
                        let t = if axis == 0 { (px - x0) / (x1 - x0) } else { (py - y0) / (y1 - y0) };
                        lerp(a, b, t.clamp(0.0, 1.0))
                    }
                };
                img.set_pixel(x, y, rgb);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index_and_seed() {
        let p = SyntheticParams::default();
        assert_eq!(synthetic_image(&p, 3, 7), synthetic_image(&p, 3, 7));
        assert_ne!(synthetic_image(&p, 3, 7), synthetic_image(&p, 3, 8));
        assert_ne!(synthetic_image(&p, 3, 7), synthetic_image(&p, 4, 7));
    }

    #[test]
    fn values_in_unit_range_with_structure() {
        let p = SyntheticParams::default();
        for i in 0..5 {
            let img = synthetic_image(&p, 0, i);
            assert_eq!((img.width, img.height), (256, 256));
            let (lo, hi) = img.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            assert!(hi - lo > 0.1);
        }
    }
}
