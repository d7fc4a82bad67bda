//! Adam, the per-epoch halving schedule, early stopping and gradient
//! clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// The epoch improved on every earlier one.
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if !(val_loss < best) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.bad_epochs = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_schedule() {
        let lrs: Vec<f64> = (0..4).map(|e| lr_at_epoch(1e-4, 0.5, e)).collect();
        assert_eq!(lrs, vec![1e-4, 5e-5, 2.5e-5, 1.25e-5]);
    }

    #[test]
    fn patience_arithmetic() {
        let mut es = EarlyStopping::new(3);
        let decisions: Vec<_> = [5.0, 4.0, 4.1, 4.2, 4.3]
            .iter()
            .enumerate()
            .map(|(e, &l)| es.observe(e, l))
            .collect();
        assert_eq!(decisions[4], StopDecision::Stop);
        assert!(decisions[..4].iter().all(|d| *d != StopDecision::Stop));
        assert_eq!(es.best_epoch(), Some(1));
    }

    #[test]
    fn adam_matches_hand_steps() {
        // f(w) = (w - 3)², grad 2(w - 3).
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg);
        let mut p = vec![Tensor::scalar(0.0)];
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let lr = 0.1;
        for t in 1..=3 {
            let g = 2.0 * (p[0].data()[0] - 3.0);
            adam.step(&mut p, &[Tensor::scalar(g)], lr).unwrap();
            let gh = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * gh;
            v = 0.999 * v + 0.001 * gh * gh;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            let before = w;
            w -= lr * mh / (vh.sqrt() + 1e-8);
            assert!(w > before, "moves toward the minimizer");
            assert!((p[0].data()[0] - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::from_rows(&[[3.0, 4.0]])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
