use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed by parameter slot
/// and allocated on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every slot. `params[i]` and `grads[i]` must keep the same
    /// length across calls.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("parameter count changed between steps".into()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape(format!("slot {slot} changed size")));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` epochs without improvement of
/// the monitored loss, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement needed to reset the counter.
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.5, 10, 1e-6)
    }
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if self.best.is_infinite() || metric < self.best - self.threshold * self.best.abs() {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut a = Adam::<f64>::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut p = vec![1.0, -1.0, 0.0];
        a.update(&mut [&mut p], &[&[3.0, -0.5, 0.0]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut a = Adam::<f64>::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|&x| 2.0 * (x - 1.0)).collect();
            a.update(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.iter().all(|&x| (x - 1.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(0.5, 2, 1e-6);
        let mut lr = 1e-4;
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 1e-4);
        for _ in 0..2 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 1e-4);
        }
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 5e-5);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 5e-5);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = PlateauScheduler::new(0.5, 0, 1e-6);
        let mut lr = 1e-4;
        s.observe(1.0, lr);
        for _ in 0..40 {
            lr = s.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-6);
    }
}
