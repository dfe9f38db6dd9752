use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Reported in place of an infinite PSNR when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Width of the clipped HU window, the data range used for HU images.
pub const HU_DATA_RANGE: f64 = 3800.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Tensor, b: &Tensor, data_range: f64) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data_range must be positive, got {data_range}")));
    }
    Ok(())
}

pub fn psnr(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable 'valid' filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over every full 11×11 Gaussian window (σ = 1.5), per image
/// plane; leading axes are treated as separate planes.
pub fn ssim(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    let s = a.shape();
    if s.len() < 2 || s[s.len() - 2] < SSIM_WINDOW || s[s.len() - 1] < SSIM_WINDOW {
        return shape_err(format!("ssim needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub data_range: f64,
}

impl MetricsReport {
    pub fn mean_psnr(&self) -> f64 {
        self.per_image.iter().map(|m| m.psnr).sum::<f64>() / self.per_image.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.per_image.iter().map(|m| m.ssim).sum::<f64>() / self.per_image.len().max(1) as f64
    }

    /// `image_id,psnr,ssim` rows followed by a `mean` row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for m in &self.per_image {
            w.serialize(m)?;
        }
        w.serialize(ImageMetrics { image_id: "mean".into(), psnr: self.mean_psnr(), ssim: self.mean_ssim() })?;
        w.flush()?;
        Ok(())
    }
}
