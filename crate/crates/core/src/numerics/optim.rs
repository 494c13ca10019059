use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Float, Tensor};
use crate::{Error, Result};

/// A named trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Float> Parameter<F> {
    pub fn new(name: &str, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.to_string(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(F::ZERO);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm ceiling applied to the gradients before the moments.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: 0.5,
        }
    }
}

/// Bias-corrected Adam with global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

/// What one optimizer update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, params: &[Parameter<F>]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Global L2 norm of all gradients, accumulated in f64 in parameter order.
    pub fn grad_norm(params: &[Parameter<F>]) -> Result<f64> {
        let mut ss = 0.0f64;
        for p in params {
            for &g in p.grad.data() {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGrad(p.name.clone()));
                }
                let g = g.to_f64();
                ss += g * g;
            }
        }
        Ok(libm::sqrt(ss))
    }

    /// Applies one update with learning rate `lr`. Gradients are left in
    /// place; the caller zeroes them before the next accumulation.
    pub fn step(&mut self, params: &mut [Parameter<F>], lr: f64) -> Result<StepStats> {
        if params.len() != self.m.len() {
            return Err(Error::Config("optimizer state does not match parameters".into()));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let norm = Self::grad_norm(params)?;
        let clip_scale = if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let scale = F::from_f64(clip_scale);
        let step_size = F::from_f64(lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i] * scale;
                let mi = b1 * m.data()[i] + one_b1 * g;
                let vi = b2 * v.data()[i] + one_b2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                values[i] -= step_size * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_param(x: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("x", Tensor::scalar(x));
        p.grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = vec![scalar_param(1.5, 0.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, 1e-3).unwrap();
        assert_eq!(params[0].value.data(), &[1.5]);
    }

    #[test]
    fn clipping_scales_by_ratio() {
        // grads (3, 4) have norm 5; clip 0.5 scales them by 0.1.
        let mut params = vec![scalar_param(0.0, 3.0), scalar_param(0.0, 4.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let stats = adam.step(&mut params, 1e-3).unwrap();
        assert!((stats.grad_norm - 5.0).abs() < 1e-12);
        assert!((stats.clip_scale - 0.1).abs() < 1e-12);
        assert!((adam.m[0].data()[0] - 0.1 * 0.3).abs() < 1e-12);
        assert!((adam.m[1].data()[0] - 0.1 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut params = vec![scalar_param(0.0, 1.0), scalar_param(0.0, f64::NAN)];
        params[1].name = "blocks.0.w_k".into();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, 1e-3).unwrap_err();
        assert_eq!(err, Error::NonFiniteGrad("blocks.0.w_k".into()));
        assert_eq!(adam.step, 0);
        assert_eq!(params[0].value.data(), &[0.0]);
    }
}
