//! Parallel-beam forward projection and filtered back-projection.
//!
//! The image is centred on the rotation axis; pixel `(row, col)` sits at
//! `x = (col − (W−1)/2)·Δ`, `y = (row − (H−1)/2)·Δ`. Detector bins share the
//! pixel pitch `Δ`, and angle `i` is `i·π/n_angles`.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::SimParams;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{DType, Tensor};

/// Line integrals, `n_angles × n_detectors`, in attenuation × mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_angles: usize,
    pub n_detectors: usize,
    /// Detector pitch in mm.
    pub detector_spacing: f64,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_angles: usize, n_detectors: usize, detector_spacing: f64) -> Self {
        Sinogram { n_angles, n_detectors, detector_spacing, values: vec![0.0; n_angles * n_detectors] }
    }

    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * PI / self.n_angles as f64
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_detectors..(i + 1) * self.n_detectors]
    }

    fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// `a·self + b·other` on identical geometry.
    pub fn combine(&self, a: f64, other: &Sinogram, b: f64) -> Result<Sinogram> {
        if (self.n_angles, self.n_detectors) != (other.n_angles, other.n_detectors) {
            return shape_err("sinogram geometries differ");
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Sinogram { values, ..self.clone() })
    }
}

/// Detector count covering the image diagonal, rounded up to an odd number
/// so one bin sits on the rotation axis.
pub fn default_detectors(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt().ceil() as usize;
    diag | 1
}

fn hw_of(mu: &Tensor) -> Result<(usize, usize)> {
    match *mu.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => shape_err(format!("expected an [H, W] image, got {s:?}")),
    }
}

#[inline]
fn bilinear(img: &[f64], h: usize, w: usize, row: f64, col: f64) -> f64 {
    let r0 = row.floor();
    let c0 = col.floor();
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
        + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}

/// Each detector bin averages two rays a quarter pixel either side of its
/// centre, which suppresses aliasing of the bilinear footprint.
const SUB_RAYS: [f64; 2] = [-0.25, 0.25];

/// Forward projection by bilinear ray marching with a half-pixel step.
///
/// `mu` is `[H, W]` (or `[1, H, W]`) in 1/mm; `spacing` is the pixel pitch
/// in mm.
pub fn radon_forward(mu: &Tensor, spacing: f64, params: &SimParams) -> Result<Sinogram> {
    let (h, w) = hw_of(mu)?;
    if h != w {
        return shape_err(format!("projector expects a square image, got {h}x{w}"));
    }
    params.validate()?;
    if !(spacing > 0.0) {
        return Err(Error::InvalidArgument(format!("pixel spacing must be positive, got {spacing}")));
    }
    let n_det = params.n_detectors.unwrap_or_else(|| default_detectors(h, w));
    let mut sino = Sinogram::zeros(params.n_angles, n_det, spacing);
    let img = mu.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Half-length of every ray, in pixels, with one pixel of margin.
    let half = (((h * h + w * w) as f64).sqrt() / 2.0 + 1.0).ceil();
    let steps = (4.0 * half) as usize + 1;
    let ds = 0.5;
    let offsets: Vec<f64> = (0..n_det).map(|k| sino.detector_offset(k) / spacing).collect();
    let angles: Vec<f64> = (0..params.n_angles).map(|i| sino.angle(i)).collect();

    sino.values.par_chunks_mut(n_det).zip(&angles).for_each(|(row, &theta)| {
        let (c, s) = (theta.cos(), theta.sin());
        for (out, &t0) in row.iter_mut().zip(&offsets) {
            let mut acc = 0.0;
            for sub in SUB_RAYS {
                let t = t0 + sub;
                for step in 0..steps {
                    let along = -half + step as f64 * ds;
                    let x = t * c - along * s;
                    let y = t * s + along * c;
                    acc += bilinear(img, h, w, y + cy, x + cx);
                }
            }
            *out = acc * ds * spacing / SUB_RAYS.len() as f64;
        }
    });
    Ok(sino)
}

/// Ram-Lak filtered back-projection onto an `h × w` grid with the
/// sinogram's detector pitch as pixel pitch. Returns `[H, W]` in 1/mm.
pub fn fbp_reconstruct(sino: &Sinogram, h: usize, w: usize) -> Result<Tensor> {
    if sino.values.len() != sino.n_angles * sino.n_detectors || sino.n_angles == 0 || sino.n_detectors == 0 {
        return shape_err("sinogram values do not match its geometry");
    }
    if h == 0 || w == 0 {
        return shape_err("output extents must be positive");
    }
    let n = sino.n_detectors;
    let tau = sino.detector_spacing;
    let len = (2 * n).next_power_of_two();

    // Spatial-domain Ram-Lak kernel, wrapped circularly.
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * tau * tau);
    for m in (1..n).step_by(2) {
        let v = -1.0 / (PI * PI * (m * m) as f64 * tau * tau);
        kernel[m].re = v;
        kernel[len - m].re = v;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fwd.process(&mut kernel);

    let filtered: Vec<Vec<f64>> = (0..sino.n_angles)
        .into_par_iter()
        .map(|i| {
            let mut buf = vec![Complex::new(0.0, 0.0); len];
            for (b, &v) in buf.iter_mut().zip(sino.row(i)) {
                b.re = v;
            }
            fwd.process(&mut buf);
            for (b, k) in buf.iter_mut().zip(&kernel) {
                *b *= k;
            }
            inv.process(&mut buf);
            // rustfft leaves the inverse unnormalised.
            buf[..n].iter().map(|c| c.re * tau / len as f64).collect()
        })
        .collect();

    let trig: Vec<(f64, f64)> = (0..sino.n_angles).map(|i| (sino.angle(i).cos(), sino.angle(i).sin())).collect();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let centre = (n as f64 - 1.0) / 2.0;
    let scale = PI / sino.n_angles as f64;
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let y = r as f64 - cy;
        for (col, px) in row.iter_mut().enumerate() {
            let x = col as f64 - cx;
            let mut acc = 0.0;
            for (q, &(c, s)) in filtered.iter().zip(&trig) {
                let pos = x * c + y * s + centre;
                let k0 = pos.floor();
                let f = pos - k0;
                let k0 = k0 as isize;
                let at = |k: isize| if k < 0 || k >= n as isize { 0.0 } else { q[k as usize] };
                acc += (1.0 - f) * at(k0) + f * at(k0 + 1);
            }
            *px = acc * scale;
        }
    });
    Tensor::new(&[h, w], out, DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n_angles: usize) -> SimParams {
        SimParams { n_angles, ..SimParams::default() }
    }

    #[test]
    fn zero_image_zero_sinogram() {
        let s = radon_forward(&Tensor::zeros(&[16, 16], DType::F64), 1.0, &params(12)).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        let img = fbp_reconstruct(&s, 16, 16).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_conserves_mass() {
        let n = 33;
        let c = (n / 2) as f64;
        let img: Vec<f64> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
                if x * x + y * y <= 36.0 { 0.5 } else { 0.0 }
            })
            .collect();
        let mass: f64 = img.iter().sum();
        let mu = Tensor::from_f64(&[n, n], img).unwrap();
        let spacing = 0.8;
        let s = radon_forward(&mu, spacing, &params(24)).unwrap();
        // Summing bins integrates over the detector in units of its pitch.
        let expected = mass * spacing;
        for i in 0..s.n_angles {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - expected).abs() / expected < 0.01, "angle {i}: {total} vs {expected}");
        }
    }

    #[test]
    fn single_pixel_mass_is_conserved() {
        let n = 33;
        let mut img = vec![0.0; n * n];
        img[(n / 2) * n + n / 2] = 1.0;
        let mu = Tensor::from_f64(&[n, n], img).unwrap();
        let spacing = 0.8;
        let s = radon_forward(&mu, spacing, &params(36)).unwrap();
        for i in 0..s.n_angles {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - spacing).abs() / spacing < 0.02, "angle {i}: {total}");
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(radon_forward(&Tensor::zeros(&[8, 16], DType::F64), 1.0, &params(8)).is_err());
    }

    #[test]
    fn detector_count_is_odd_and_covers_diagonal() {
        assert_eq!(default_detectors(64, 64), 91);
        assert!(default_detectors(128, 128) >= 182);
    }
}
