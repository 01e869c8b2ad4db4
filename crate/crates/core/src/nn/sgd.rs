use crate::error::{Error, Result};

use super::network::Network;
use super::scalar::Scalar;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// Iterations between learning-rate drops.
    pub lr_step: usize,
    /// Multiplier applied at every drop.
    pub lr_factor: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 120,
            base_lr: 0.001,
            lr_step: 10_000,
            lr_factor: 0.1,
            max_iter: 100_000,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 1,
            classes: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.base_lr > 0.0
            && self.lr_step > 0
            && self.lr_factor > 0.0
            && self.max_iter > 0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.classes >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Step schedule: `base_lr * lr_factor^floor(iter / lr_step)`.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        self.base_lr * self.lr_factor.powi((iter / self.lr_step) as i32)
    }
}

/// One momentum update: `v <- momentum v - lr (g + wd w)`, `w <- w + v`.
pub fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd lengths w={} g={} v={}",
            w.len(),
            g.len(),
            v.len()
        )));
    }
    let (lr, mo, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mo * *v - lr * (g + wd * *w);
        *w += *v;
    }
    Ok(())
}

/// Momentum buffers for every trainable parameter of a network.
pub struct Sgd<T: Scalar> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self {
            velocity: net.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies the gradients currently stored in `net`.
    pub fn step(&mut self, net: &mut Network<T>, cfg: &TrainConfig, iter: usize) -> Result<()> {
        let lr = cfg.learning_rate(iter);
        let params = net.params_mut();
        if params.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch("optimizer built for another network".into()));
        }
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            sgd_update(p.value.data_mut(), p.grad.data(), v, lr, cfg.momentum, cfg.weight_decay)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut w = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut w, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w, vec![1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.001);
        assert_eq!(cfg.learning_rate(9_999), 0.001);
        assert!((cfg.learning_rate(10_000) - 0.0001).abs() < 1e-18);
        let ninety = TrainConfig { lr_factor: 0.9, ..cfg };
        assert!((ninety.learning_rate(20_000) - 0.001 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut w = vec![0.0f64];
        let mut v = vec![1.0];
        sgd_update(&mut w, &[0.0], &mut v, 0.01, 0.9, 0.0).unwrap();
        assert_eq!(v[0], 0.9);
        sgd_update(&mut w, &[0.0], &mut v, 0.01, 0.9, 0.0).unwrap();
        assert_eq!(v[0], 0.9 * 0.9);
        assert_eq!(w[0], 0.9 + 0.9 * 0.9);
    }

    #[test]
    fn length_mismatch() {
        let mut w = vec![0.0f32; 2];
        let mut v = vec![0.0f32; 2];
        assert!(matches!(
            sgd_update(&mut w, &[0.0], &mut v, 0.1, 0.9, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
