use super::{DType, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
///
/// Each element is perturbed by `±h` in turn; `f` must be deterministic.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_dtype(DType::F64);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_f64(x.shape(), out)
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let x = Tensor::from_f64(&[3], vec![0.1, -2.0, 5.0]).unwrap();
        let coeffs = [2.0, -0.5, 0.25];
        for h in [1e-6, 1e-2, 1.0, 8.0] {
            let g = finite_diff_grad(|t| Ok(t.data().iter().zip(coeffs).map(|(a, c)| a * c).sum()), &x, h).unwrap();
            for (gv, c) in g.data().iter().zip(coeffs) {
                assert!((gv - c).abs() < 1e-9, "h={h}: {gv} vs {c}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[1], DType::F64);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
