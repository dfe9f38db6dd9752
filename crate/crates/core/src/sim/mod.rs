//! Simplified metal-artifact simulation for paired training data.
//!
//! Clean phantoms are converted to attenuation, metal is inserted, the
//! slice is forward projected with a parallel-beam geometry, rays through
//! metal are distorted by a beam-hardening polynomial, and the result is
//! reconstructed with filtered back-projection. This is a stand-in for a
//! polychromatic cone-beam simulation, not a physical model.

mod dataset;
mod phantom;
mod projector;

pub use dataset::{load_pair, make_dataset, read_manifest, DatasetManifest, ManifestRow, Pair, Split, MANIFEST_FILE};
pub use phantom::{disk_phantom, jaw_phantom, metal_blob, JawPhantom};
pub use projector::{default_detectors, fbp_reconstruct, radon_forward, Sinogram};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{DType, Tensor};

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 2800.0;
/// Linear attenuation of water, 1/mm.
pub const MU_WATER: f64 = 0.0192;
/// Minimum number of metal pixels that marks a slice as artifact-degraded.
pub const MIN_METAL_PIXELS: usize = 10;
/// Default edge blur, in pixels, for phantoms and implants.
pub const PARTIAL_VOLUME_SIGMA: f64 = 0.7;

/// Separable Gaussian blur of an `h × w` plane with edge clamping.
pub fn gaussian_blur(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let tap = |i: usize, d: isize, n: usize| (i as isize + d).clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            rows[i * w + j] = (-r..=r).zip(&k).map(|(d, kv)| kv * x[i * w + tap(j, d, w)]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-r..=r).zip(&k).map(|(d, kv)| kv * rows[tap(i, d, h) * w + j]).sum::<f64>() / norm;
        }
    }
    out
}

/// A 2-D slice in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub height: usize,
    pub width: usize,
    /// Pixel pitch in mm.
    pub spacing: f64,
    pub hu: Vec<f64>,
}

impl PhantomImage {
    pub fn new(height: usize, width: usize, spacing: f64, hu: Vec<f64>) -> Result<Self> {
        if hu.len() != height * width {
            return shape_err(format!("{} values for a {height}x{width} image", hu.len()));
        }
        Ok(PhantomImage { height, width, spacing, hu })
    }

    pub fn filled(height: usize, width: usize, spacing: f64, value: f64) -> Self {
        PhantomImage { height, width, spacing, hu: vec![value; height * width] }
    }

    pub fn clipped(&self) -> PhantomImage {
        PhantomImage { hu: self.hu.iter().map(|v| v.clamp(HU_MIN, HU_MAX)).collect(), ..self.clone() }
    }

    /// `[1, H, W]` f32 tensor of HU values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.hu.clone(), DType::F32).expect("shape matches data")
    }

    pub fn from_tensor(t: &Tensor, spacing: f64) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, h, w] => PhantomImage::new(h, w, spacing, t.data().to_vec()),
            ref s => shape_err(format!("expected [H, W] or [1, H, W], got {s:?}")),
        }
    }

    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.hu.iter().filter(|&&v| v >= threshold).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub n_angles: usize,
    /// Defaults to the image diagonal.
    pub n_detectors: Option<usize>,
    /// HU value written into metal pixels before projection (not clipped).
    pub metal_hu: f64,
    /// Strength `β` of `s' = s + β·s²/(1+s)` on rays through metal.
    pub beam_hardening: f64,
    pub metal_threshold: f64,
    /// Gaussian σ, in pixels, softening the metal edge before projection
    /// (partial-volume effect). Zero inserts a hard-edged implant.
    pub partial_volume: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams { n_angles: 180, n_detectors: None, metal_hu: 30_000.0, beam_hardening: 0.3, metal_threshold: HU_MAX, partial_volume: PARTIAL_VOLUME_SIGMA }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_angles < 8 {
            return Err(Error::InvalidArgument(format!("n_angles must be >= 8, got {}", self.n_angles)));
        }
        if !(self.beam_hardening >= 0.0) {
            return Err(Error::InvalidArgument(format!("beam_hardening must be >= 0, got {}", self.beam_hardening)));
        }
        if !(self.partial_volume >= 0.0) {
            return Err(Error::InvalidArgument(format!("partial_volume must be >= 0, got {}", self.partial_volume)));
        }
        if self.n_detectors == Some(0) {
            return Err(Error::InvalidArgument("n_detectors must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn hu_value_to_mu(hu: f64) -> f64 {
    MU_WATER * (1.0 + hu / 1000.0)
}

#[inline]
pub fn mu_value_to_hu(mu: f64) -> f64 {
    1000.0 * (mu / MU_WATER - 1.0)
}

/// Clips to `[−1000, 2800]` HU and converts to attenuation, `[H, W]`.
pub fn hu_to_mu(image: &PhantomImage) -> Tensor {
    let data = image.hu.iter().map(|v| hu_value_to_mu(v.clamp(HU_MIN, HU_MAX))).collect();
    Tensor::new(&[image.height, image.width], data, DType::F64).expect("shape matches data")
}

/// Converts attenuation back to HU and clips to the display window.
pub fn mu_to_hu(mu: &Tensor, spacing: f64) -> Result<PhantomImage> {
    let clipped = mu.map(|m| mu_value_to_hu(m).clamp(HU_MIN, HU_MAX));
    PhantomImage::from_tensor(&clipped, spacing)
}

/// Projects and reconstructs without any degradation.
pub fn fbp_roundtrip(image: &PhantomImage, params: &SimParams) -> Result<PhantomImage> {
    let sino = radon_forward(&hu_to_mu(image), image.spacing, params)?;
    let mu = fbp_reconstruct(&sino, image.height, image.width)?;
    mu_to_hu(&mu, image.spacing)
}

/// Produces `(ma, clean)` for one slice.
///
/// Both outputs go through the same projector and reconstruction, so their
/// difference is caused by the metal alone: `clean` is the metal-free
/// reconstruction with the implant pixels set to the top of the HU window,
/// where they also land in the degraded slice. An empty mask yields a
/// metal-free pair; masks with 1 to 9 pixels are rejected.
pub fn simulate_ma_pair(clean: &PhantomImage, metal_mask: &[bool], params: &SimParams) -> Result<(PhantomImage, PhantomImage)> {
    params.validate()?;
    if metal_mask.len() != clean.hu.len() {
        return shape_err(format!("mask has {} pixels, image has {}", metal_mask.len(), clean.hu.len()));
    }
    let n_metal = metal_mask.iter().filter(|&&m| m).count();
    if n_metal > 0 && n_metal < MIN_METAL_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "metal mask has {n_metal} pixels, need at least {MIN_METAL_PIXELS}"
        )));
    }
    let (h, w) = (clean.height, clean.width);

    let mu = hu_to_mu(clean);
    let clean_sino = radon_forward(&mu, clean.spacing, params)?;
    let mut target = mu_to_hu(&fbp_reconstruct(&clean_sino, h, w)?, clean.spacing)?;
    if n_metal == 0 {
        return Ok((target.clone(), target));
    }

    let hard: Vec<f64> = metal_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let fraction = gaussian_blur(&hard, h, w, params.partial_volume);
    let mut with_metal = mu;
    let mu_metal = hu_value_to_mu(params.metal_hu);
    for (v, &f) in with_metal.data_mut().iter_mut().zip(&fraction) {
        *v = (1.0 - f) * *v + f * mu_metal;
    }
    let mut sino = radon_forward(&with_metal, clean.spacing, params)?;
    if params.beam_hardening > 0.0 {
        let trace = radon_forward(&Tensor::new(&[h, w], fraction, DType::F64)?, clean.spacing, params)?;
        let beta = params.beam_hardening;
        for (s, &t) in sino.values.iter_mut().zip(&trace.values) {
            if t > 0.0 {
                *s += beta * *s * *s / (1.0 + *s);
            }
        }
    }
    let ma = mu_to_hu(&fbp_reconstruct(&sino, h, w)?, clean.spacing)?;
    for (v, &m) in target.hu.iter_mut().zip(metal_mask) {
        if m {
            *v = HU_MAX;
        }
    }
    Ok((ma, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hu_mu_anchor_points() {
        let img = PhantomImage::new(1, 4, 1.0, vec![-1000.0, 0.0, 2800.0, 5000.0]).unwrap();
        let mu = hu_to_mu(&img);
        assert_eq!(mu.data()[0], 0.0);
        assert!((mu.data()[1] - 0.0192).abs() < 1e-15);
        assert!((mu.data()[2] - 0.07296).abs() < 1e-15);
        assert_eq!(mu.data()[3], mu.data()[2]);
        assert!(mu.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn undersized_mask_rejected() {
        let img = PhantomImage::filled(16, 16, 1.0, 0.0);
        let mut mask = vec![false; 256];
        for m in mask.iter_mut().take(5) {
            *m = true;
        }
        assert!(simulate_ma_pair(&img, &mask, &SimParams::default()).is_err());
        assert!(simulate_ma_pair(&img, &mask[..10], &SimParams::default()).is_err());
    }

    #[test]
    fn params_validation() {
        let p = SimParams { n_angles: 4, ..SimParams::default() };
        assert!(p.validate().is_err());
        let p = SimParams { beam_hardening: -0.1, ..SimParams::default() };
        assert!(p.validate().is_err());
    }
}
