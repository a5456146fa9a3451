use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// One pair of zeroed moment buffers per parameter, sized from `sizes`.
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.v[i]
    }

    /// Apply one bias-corrected Adam update.
    ///
    /// `params[i]` pairs a name (used in diagnostics) with its tensor and
    /// `grads[i]` is its gradient; parameters with no gradient are skipped.
    /// Any non-finite gradient aborts the whole step before anything changes.
    pub fn update(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &[Option<&[f32]>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "adam tracks {} tensors but got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(Error::Dimension(format!(
                        "gradient for {name} has {} elements, tensor has {}",
                        g.len(),
                        p.numel()
                    )));
                }
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {name} at element {pos}"
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f32;
        let bc1 = 1.0 - libm::powf(beta1, t);
        let bc2 = 1.0 - libm::powf(beta2, t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= learning_rate * m_hat / (libm::sqrtf(v_hat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut w = Tensor::filled(&[2], 0.5);
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(0.1), [2]);
        adam.update(&mut [("w", &mut w)], &[Some(&[1.0, -1.0])])
            .unwrap();
        let before = w.clone();
        let m_before = adam.first_moment(0).to_vec();
        adam.update(&mut [("w", &mut w)], &[Some(&[0.0, 0.0])])
            .unwrap();
        assert_eq!(adam.first_moment(0)[0], 0.9 * m_before[0]);
        // momentum still moves the weights, but a fresh state with zero grad does not
        let mut fresh = AdamState::new(AdamConfig::with_learning_rate(0.1), [2]);
        let mut w2 = before.clone();
        fresh
            .update(&mut [("w", &mut w2)], &[Some(&[0.0, 0.0])])
            .unwrap();
        assert_eq!(w2, before);
        assert_eq!(fresh.step(), 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut w = Tensor::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(1e-3), [1]);
        for step in 1..=3 {
            let before = w.item();
            adam.update(&mut [("w", &mut w)], &[Some(&[1.0])]).unwrap();
            assert!(((before - w.item()) - 1e-3).abs() < 1e-8, "step {step}");
            assert_eq!(adam.step(), step);
        }
    }

    #[test]
    fn nan_gradient_names_the_tensor() {
        let mut w = Tensor::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), [1]);
        let err = adam
            .update(
                &mut [("layers.0.ffn.up.weight", &mut w)],
                &[Some(&[f32::NAN])],
            )
            .unwrap_err();
        assert!(err.to_string().contains("layers.0.ffn.up.weight"));
        assert_eq!(adam.step(), 0);
        assert_eq!(w.item(), 1.0);
    }
}
