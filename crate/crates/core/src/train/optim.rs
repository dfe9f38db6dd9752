use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).unzip();
        AdamState { step: 0, m, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update, applied in place. Increments
/// `state.step` first, so the first call runs with step 1.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    let AdamHyper { lr, beta1, beta2, eps } = hyper;
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return shape_err(format!("adam: parameter {i} shape {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            if gj == 0.0 && m[j] == 0.0 {
                continue;
            }
            let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            let w = p.data()[j] - update;
            p.set(j, w);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at fraction 0 to `lr_min` at fraction 1.
pub fn cosine_lr(fraction: f64, lr_max: f64, lr_min: f64) -> f64 {
    let f = fraction.clamp(0.0, 1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * f).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = vec![Tensor::scalar(1.0, DType::F64)];
        let mut s = AdamState::new(&w);
        adam_step(w.iter_mut(), &[Tensor::scalar(1.0, DType::F64)], &mut s, hyper(0.1)).unwrap();
        assert!((w[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut w = vec![Tensor::from_f64(&[3], vec![0.5, -2.0, 7.0]).unwrap()];
        let before = w.clone();
        let mut s = AdamState::new(&w);
        for _ in 0..5 {
            adam_step(w.iter_mut(), &[Tensor::zeros(&[3], DType::F64)], &mut s, hyper(0.1)).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn mismatched_shapes() {
        let mut w = vec![Tensor::zeros(&[3], DType::F64)];
        let mut s = AdamState::new(&w);
        assert!(adam_step(w.iter_mut(), &[Tensor::zeros(&[2], DType::F64)], &mut s, hyper(0.1)).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 1e-3, 1e-7), 1e-3);
        assert!((cosine_lr(1.0, 1e-3, 1e-7) - 1e-7).abs() < 1e-20);
        assert!((cosine_lr(0.5, 1e-3, 1e-7) - 5.0005e-4).abs() < 1e-15);
    }
}
