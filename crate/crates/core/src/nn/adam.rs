use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip each gradient coordinate to `[-c, c]` before the update.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: None }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad Adam config {self:?}")))
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter. Gradients
/// are read, not cleared.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in params.iter() {
        if p.trainable {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at index {i}")));
            }
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let clip = cfg.clip.map(T::from_f64);
    for (_, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let mut g = p.grad[i];
            if let Some(c) = clip {
                g = g.max(-c).min(c);
            }
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut p = Param::new(Tensor::scalar(value), true);
        p.grad[0] = grad;
        ps.insert("theta", p).unwrap();
        ps
    }

    #[test]
    fn first_step_from_zero() {
        let mut ps = single(0.0, 1.0);
        adam_step(&mut ps, &AdamConfig::with_lr(1e-3)).unwrap();
        assert_eq!(ps.step, 1);
        let theta = ps.value("theta").unwrap().item();
        assert!((theta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15, "{theta}");
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut ps = single(0.7, 0.0);
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        assert_eq!(ps.value("theta").unwrap().item(), 0.7);
    }

    #[test]
    fn grads_are_not_cleared() {
        let mut ps = single(0.0, 0.25);
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        assert_eq!(ps.get("theta").unwrap().grad[0], 0.25);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut ps = single(0.0, f64::NAN);
        let err = adam_step(&mut ps, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(ps.step, 0);
    }

    #[test]
    fn clipping_bounds_the_gradient() {
        let mut a = single(0.0, 100.0);
        let mut b = single(0.0, 1.0);
        let cfg = AdamConfig { clip: Some(1.0), ..AdamConfig::default() };
        for _ in 0..3 {
            adam_step(&mut a, &cfg).unwrap();
            adam_step(&mut b, &cfg).unwrap();
        }
        assert_eq!(a.value("theta").unwrap().item(), b.value("theta").unwrap().item());
    }

    #[test]
    fn update_magnitude_bounded_by_lr_for_constant_gradient() {
        let mut ps = single(0.0, 3.0);
        let cfg = AdamConfig::with_lr(1e-2);
        let mut prev = 0.0;
        for _ in 0..50 {
            adam_step(&mut ps, &cfg).unwrap();
            let now = ps.value("theta").unwrap().item();
            assert!((now - prev).abs() <= cfg.lr * (1.0 + 1e-6));
            prev = now;
        }
    }
}
