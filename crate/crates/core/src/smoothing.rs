//! Per-channel migration of quantization difficulty from activations into
//! weights.
//!
//! `delta_j = max|X_j|^alpha / max|W_j|^(1 - alpha)`; activations are divided
//! by `delta` column-wise and weight rows are multiplied by it, so the layer
//! product is unchanged.

use crate::error::{Result, TrdqError};
use crate::tensor::{Scope, Tensor2D};
use serde::{Deserialize, Serialize};

/// Floor applied to channel maxima before exponentiation.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingDiag {
    delta: Vec<f64>,
    alpha: f64,
}

impl SmoothingDiag {
    pub fn new(delta: Vec<f64>, alpha: f64) -> Result<Self> {
        if let Some(bad) = delta.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(TrdqError::domain(format!(
                "smoothing factor {bad} is not positive and finite"
            )));
        }
        Ok(Self { delta, alpha })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            delta: vec![1.0; channels],
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// `x * diag(delta)^-1`
    pub fn scale_activations(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.cols() != self.delta.len() {
            return Err(TrdqError::shape(format!(
                "activations have {} channels, smoothing has {}",
                x.cols(),
                self.delta.len()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (v, d) in out.row_mut(i).iter_mut().zip(&self.delta) {
                *v /= d;
            }
        }
        Ok(out)
    }

    /// `diag(delta) * w`
    pub fn scale_weights(&self, w: &Tensor2D) -> Result<Tensor2D> {
        if w.rows() != self.delta.len() {
            return Err(TrdqError::shape(format!(
                "weights have {} input channels, smoothing has {}",
                w.rows(),
                self.delta.len()
            )));
        }
        let mut out = w.clone();
        for (i, d) in self.delta.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= d;
            }
        }
        Ok(out)
    }
}

pub fn compute_delta(x: &Tensor2D, w: &Tensor2D, alpha: f64) -> Result<SmoothingDiag> {
    if x.cols() != w.rows() {
        return Err(TrdqError::shape(format!(
            "activation channels {} != weight input channels {}",
            x.cols(),
            w.rows()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrdqError::domain(format!("alpha {alpha} outside [0, 1]")));
    }
    x.ensure_finite("calibration activations")?;
    w.ensure_finite("weights")?;
    let act_max = x.max_abs(Scope::PerCol)?;
    let w_max = w.max_abs(Scope::PerRow)?;
    let delta = act_max
        .iter()
        .zip(&w_max)
        .map(|(&a, &b)| {
            a.max(MAGNITUDE_FLOOR).powf(alpha) / b.max(MAGNITUDE_FLOOR).powf(1.0 - alpha)
        })
        .collect();
    SmoothingDiag::new(delta, alpha)
}

pub fn apply_smoothing(
    x: &Tensor2D,
    w: &Tensor2D,
    d: &SmoothingDiag,
) -> Result<(Tensor2D, Tensor2D)> {
    Ok((d.scale_activations(x)?, d.scale_weights(w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rel_close(a: &Tensor2D, b: &Tensor2D, tol: f64) -> bool {
        let scale = b.frobenius_norm().max(1e-300);
        a.sub(b).unwrap().frobenius_norm() / scale <= tol
    }

    #[test]
    fn symmetric_case_gives_unit_delta() {
        let x = Tensor2D::filled(3, 4, -4.0);
        let w = Tensor2D::filled(4, 2, 4.0);
        let d = compute_delta(&x, &w, 0.5).unwrap();
        assert!(d.delta().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn alpha_one_uses_activation_max() {
        let x = Tensor2D::from_rows(&[vec![1.0, -7.0], vec![3.0, 2.0]]).unwrap();
        let w = Tensor2D::from_rows(&[vec![0.1, 9.0], vec![5.0, 0.2]]).unwrap();
        let d = compute_delta(&x, &w, 1.0).unwrap();
        assert_eq!(d.delta(), &[3.0, 7.0]);
    }

    #[test]
    fn hand_evaluated_delta() {
        let x = Tensor2D::from_rows(&[vec![8.0], vec![-1.0]]).unwrap();
        let w = Tensor2D::from_rows(&[vec![-2.0, 1.0]]).unwrap();
        let d = compute_delta(&x, &w, 0.5).unwrap();
        assert!((d.delta()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dead_channels_stay_finite() {
        let x = Tensor2D::zeros(4, 3);
        let w = Tensor2D::zeros(3, 2);
        for alpha in [0.0, 0.5, 1.0] {
            let d = compute_delta(&x, &w, alpha).unwrap();
            assert!(d.delta().iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn identity_delta_is_noop() {
        let mut rng = seeded(4);
        let x = Tensor2D::randn(4, 6, 1.0, &mut rng);
        let w = Tensor2D::randn(6, 3, 1.0, &mut rng);
        let (xh, wh) = apply_smoothing(&x, &w, &SmoothingDiag::identity(6)).unwrap();
        assert_eq!((xh, wh), (x, w));
    }

    #[test]
    fn product_invariance_and_balance() {
        let mut rng = seeded(44);
        let mut x = Tensor2D::randn(8, 8, 1.0, &mut rng);
        for i in 0..8 {
            x.set(i, 3, x.get(i, 3) * 30.0);
        }
        let w = Tensor2D::randn(8, 8, 0.2, &mut rng);
        let d = compute_delta(&x, &w, 0.5).unwrap();
        let (xh, wh) = apply_smoothing(&x, &w, &d).unwrap();
        assert!(rel_close(
            &xh.matmul(&wh).unwrap(),
            &x.matmul(&w).unwrap(),
            1e-10
        ));
        let ax = xh.max_abs(Scope::PerCol).unwrap();
        let aw = wh.max_abs(Scope::PerRow).unwrap();
        for (a, b) in ax.iter().zip(&aw) {
            assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn errors() {
        let x = Tensor2D::zeros(2, 3);
        let w = Tensor2D::zeros(4, 2);
        assert!(matches!(
            compute_delta(&x, &w, 0.5),
            Err(TrdqError::Shape(_))
        ));
        let w = Tensor2D::zeros(3, 2);
        assert!(compute_delta(&x, &w, 1.5).is_err());
    }
}
