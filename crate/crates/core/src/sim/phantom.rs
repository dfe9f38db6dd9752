//! Procedural jaw-like phantoms.

use std::f64::consts::PI;

use rand::Rng;

use super::{gaussian_blur, PhantomImage, HU_MIN, MIN_METAL_PIXELS, PARTIAL_VOLUME_SIGMA};
use crate::error::{Error, Result};

/// Field of view of every phantom, in mm.
pub const FOV_MM: f64 = 128.0;
const MAX_METAL_PIXELS: usize = 200;

/// A clean slice together with the metal implant mask that goes with it.
#[derive(Debug, Clone)]
pub struct JawPhantom {
    pub image: PhantomImage,
    pub metal_mask: Vec<bool>,
}

impl JawPhantom {
    pub fn metal_pixels(&self) -> usize {
        self.metal_mask.iter().filter(|&&m| m).count()
    }
}

/// Uniform disk of `hu` on air, radius in pixels.
pub fn disk_phantom(size: usize, radius: f64, hu: f64) -> PhantomImage {
    let c = (size as f64 - 1.0) / 2.0;
    let mut img = PhantomImage::filled(size, size, FOV_MM / size as f64, HU_MIN);
    for r in 0..size {
        for col in 0..size {
            let (dy, dx) = (r as f64 - c, col as f64 - c);
            if dx * dx + dy * dy <= radius * radius {
                img.hu[r * size + col] = hu;
            }
        }
    }
    img
}

/// Filled disk mask centred at `(row, col)`.
pub fn metal_blob(size: usize, row: f64, col: f64, radius: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 - row, c as f64 - col);
            mask[r * size + c] = dx * dx + dy * dy <= radius * radius;
        }
    }
    mask
}

fn paint_ellipse(img: &mut PhantomImage, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64, hu: f64) {
    let (s, c) = angle.sin_cos();
    for r in 0..img.height {
        for col in 0..img.width {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                img.hu[r * img.width + col] = hu;
            }
        }
    }
}

/// Axial slice through a lower jaw: a soft-tissue head outline, a U-shaped
/// mandible arc and a row of teeth, with one metal filling or crown on a
/// tooth. Edges are softened by a small Gaussian blur. Extents scale with
/// `size`; the metal blob covers between 10 and 200 pixels.
pub fn jaw_phantom<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<JawPhantom> {
    if size < 32 {
        return Err(Error::InvalidArgument(format!("phantom size must be at least 32, got {size}")));
    }
    let n = size as f64;
    let c = (n - 1.0) / 2.0;
    let mut img = PhantomImage::filled(size, size, FOV_MM / n, HU_MIN);

    // Head outline and tongue.
    let soft = rng.gen_range(20.0..80.0);
    paint_ellipse(&mut img, c, c, 0.44 * n * rng.gen_range(0.92..1.0), 0.42 * n * rng.gen_range(0.92..1.0), 0.0, soft);
    paint_ellipse(&mut img, c + 0.05 * n, c, 0.12 * n, 0.16 * n, 0.0, soft + rng.gen_range(-30.0..30.0));

    // Mandible: arc of overlapping bone ellipses opening downwards.
    let arc_ry = 0.27 * n * rng.gen_range(0.9..1.05);
    let arc_rx = 0.25 * n * rng.gen_range(0.9..1.05);
    let arc_cy = c + 0.08 * n;
    let bone = rng.gen_range(900.0..1400.0);
    let n_bone = 40;
    for i in 0..=n_bone {
        let phi = PI * (0.05 + 0.9 * i as f64 / n_bone as f64);
        let (y, x) = (arc_cy - arc_ry * phi.sin(), c + arc_rx * phi.cos());
        paint_ellipse(&mut img, y, x, 0.035 * n, 0.035 * n, 0.0, bone);
    }

    // Teeth along the arc.
    let n_teeth = rng.gen_range(8..=12);
    let mut teeth = Vec::with_capacity(n_teeth);
    let tooth_r = 0.028 * n;
    for i in 0..n_teeth {
        let phi = PI * (0.12 + 0.76 * (i as f64 + 0.5) / n_teeth as f64);
        let (y, x) = (arc_cy - arc_ry * phi.sin(), c + arc_rx * phi.cos());
        paint_ellipse(&mut img, y, x, tooth_r * 1.1, tooth_r, phi, rng.gen_range(1800.0..2500.0));
        teeth.push((y, x));
    }

    img.hu = gaussian_blur(&img.hu, size, size, PARTIAL_VOLUME_SIGMA);

    // Metal on one tooth, radius chosen to land inside the pixel budget.
    let (ty, tx) = teeth[rng.gen_range(0..teeth.len())];
    let r_min = (MIN_METAL_PIXELS as f64 / PI).sqrt() + 0.3;
    let r_max = (MAX_METAL_PIXELS as f64 / PI).sqrt() - 0.3;
    let r_hi = r_max.min(0.04 * n).max(r_min + 0.1);
    let radius = rng.gen_range(r_min..r_hi);
    let mut metal_mask = metal_blob(size, ty, tx, radius);
    let mut count = metal_mask.iter().filter(|&&m| m).count();
    let mut r = radius;
    while count < MIN_METAL_PIXELS {
        r += 0.25;
        metal_mask = metal_blob(size, ty, tx, r);
        count = metal_mask.iter().filter(|&&m| m).count();
    }
    while count > MAX_METAL_PIXELS {
        r -= 0.25;
        metal_mask = metal_blob(size, ty, tx, r);
        count = metal_mask.iter().filter(|&&m| m).count();
    }
    Ok(JawPhantom { image: img, metal_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metal_within_budget() {
        for seed in 0..20 {
            for size in [64, 128] {
                let p = jaw_phantom(size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let n = p.metal_pixels();
                assert!((MIN_METAL_PIXELS..=MAX_METAL_PIXELS).contains(&n), "seed {seed} size {size}: {n}");
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = jaw_phantom(64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = jaw_phantom(64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.metal_mask, b.metal_mask);
    }

    #[test]
    fn disk_area() {
        let d = disk_phantom(64, 10.0, 100.0);
        let n = d.count_at_least(100.0) as f64;
        assert!((n - PI * 100.0).abs() / (PI * 100.0) < 0.05);
    }
}
