//! Training losses and evaluation metrics.
//!
//! The combined loss used by MLinear is
//!
//! ```text
//!            ⎧ ½e² + |e|              |e| ≤ σ
//! L_σ(e) =   ⎨
//!            ⎩ (σ + 1)|e| − ½σ²       |e| > σ
//! ```
//!
//! averaged over all elements. Both branches meet at `|e| = σ` with value
//! `½σ² + σ`, and so do their slopes (`σ + 1`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    MLoss,
    Huber,
    Mae,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "m_loss" => Ok(Self::MLoss),
            "huber" => Ok(Self::Huber),
            "mae" => Ok(Self::Mae),
            "mse" => Ok(Self::Mse),
            other => Err(format!("expected m_loss|huber|mae|mse, got {other:?}")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MLoss => "m_loss",
            Self::Huber => "huber",
            Self::Mae => "mae",
            Self::Mse => "mse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::MLoss,
            sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn pointwise(&self) -> Pointwise {
        match self.kind {
            LossKind::MLoss => Pointwise::MLoss { sigma: self.sigma },
            LossKind::Huber => Pointwise::Huber { sigma: self.sigma },
            LossKind::Mae => Pointwise::Abs,
            LossKind::Mse => Pointwise::Squared,
        }
    }
}

/// Per-element penalty of the residual `e = pred - target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    MLoss { sigma: f64 },
    Huber { sigma: f64 },
    Abs,
    Squared,
}

impl Pointwise {
    pub fn value(self, e: f64) -> f64 {
        let a = e.abs();
        match self {
            Self::MLoss { sigma } if a <= sigma => 0.5 * e * e + a,
            Self::MLoss { sigma } => (sigma + 1.0) * a - 0.5 * sigma * sigma,
            Self::Huber { sigma } if a <= sigma => 0.5 * e * e,
            Self::Huber { sigma } => sigma * (a - 0.5 * sigma),
            Self::Abs => a,
            Self::Squared => e * e,
        }
    }

    /// Derivative in `e`; the subgradient at `e = 0` is 0.
    pub fn derivative(self, e: f64) -> f64 {
        let s = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        let a = e.abs();
        match self {
            Self::MLoss { sigma } if a <= sigma => e + s,
            Self::MLoss { sigma } => (sigma + 1.0) * s,
            Self::Huber { sigma } if a <= sigma => e,
            Self::Huber { sigma } => sigma * s,
            Self::Abs => s,
            Self::Squared => 2.0 * e,
        }
    }
}

/// Element-mean M-Loss between two equally shaped tensors.
pub fn m_loss(pred: &Tensor, target: &Tensor, sigma: f64) -> Result<f64> {
    LossConfig {
        kind: LossKind::MLoss,
        sigma,
    }
    .validate()?;
    pointwise_mean(pred, target, Pointwise::MLoss { sigma })
}

pub fn pointwise_mean(pred: &Tensor, target: &Tensor, f: Pointwise) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| f.value(p - t))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Recorded loss on the graph.
pub fn loss_var(g: &mut Graph, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    g.pointwise_mean(pred, target, cfg.pointwise())
}

/// Weights of the three supervised heads. `None` disables deep
/// supervision: only the mixed head contributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub ci: f64,
    pub cd: f64,
    pub mix: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self {
            ci: 1.0,
            cd: 1.0,
            mix: 1.0,
        }
    }
}

/// Graph handles of a deep-supervised loss.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedLoss {
    pub total: Var,
    /// `(ci, cd, mix)` component losses; the first two are `None` in
    /// single-loss mode.
    pub ci: Option<Var>,
    pub cd: Option<Var>,
    pub mix: Var,
}

/// `L(Y, X_CD) + L(Y, X_CI) + L(Y, X_mix)` (weighted), or just the mixed
/// term when `weights` is `None`.
pub fn deep_supervised_loss(
    g: &mut Graph,
    heads: (Var, Var, Var),
    target: Var,
    cfg: &LossConfig,
    weights: Option<HeadWeights>,
) -> Result<SupervisedLoss> {
    let (x_ci, x_cd, x_mix) = heads;
    let mix = loss_var(g, x_mix, target, cfg)?;
    let Some(w) = weights else {
        return Ok(SupervisedLoss {
            total: mix,
            ci: None,
            cd: None,
            mix,
        });
    };
    let cd = loss_var(g, x_cd, target, cfg)?;
    let ci = loss_var(g, x_ci, target, cfg)?;
    let terms = [(cd, w.cd), (ci, w.ci), (mix, w.mix)];
    let mut total: Option<Var> = None;
    for (v, weight) in terms {
        let term = if weight == 1.0 { v } else { g.scale(v, weight) };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(SupervisedLoss {
        total: total.expect("three terms"),
        ci: Some(ci),
        cd: Some(cd),
        mix,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Mean squared and mean absolute error over all elements.
pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    let mut acc = MetricAccumulator::default();
    acc.push(pred, target)?;
    Ok(acc.finish())
}

/// Streams predictions; the result equals [`metrics`] on the concatenation.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape {
                op: "metrics",
                left: pred.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        for (p, t) in pred.data().iter().zip(target.data()) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += pred.len();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Metrics {
        if self.count == 0 {
            return Metrics::default();
        }
        Metrics {
            mse: self.sq / self.count as f64,
            mae: self.abs / self.count as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v])
    }

    #[test]
    fn m_loss_hand_values() {
        assert_eq!(m_loss(&t(&[1.0, 2.0]), &t(&[1.0, 2.0]), 1.0).unwrap(), 0.0);
        // e = 3 beyond sigma = 1: (1 + 1) * 3 - 0.5
        assert_eq!(m_loss(&t(&[3.0]), &t(&[0.0]), 1.0).unwrap(), 5.5);
        // Knee: inner 0.5 + 1, outer 2 - 0.5.
        let f = Pointwise::MLoss { sigma: 1.0 };
        assert_eq!(f.value(1.0), 1.5);
        assert_eq!(2.0 * 1.0 - 0.5, 1.5);
    }

    #[test]
    fn m_loss_rejects_bad_input() {
        assert!(m_loss(&t(&[1.0]), &t(&[1.0]), 0.0).is_err());
        assert!(m_loss(&t(&[1.0]), &t(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn knee_continuity() {
        for sigma in [0.5f64, 1.0, 2.0] {
            let inner = 0.5 * sigma * sigma + sigma;
            let outer = (sigma + 1.0) * sigma - 0.5 * sigma * sigma;
            assert!((inner - outer).abs() <= 1e-9);
            let f = Pointwise::MLoss { sigma };
            let just_out = f.value(sigma * (1.0 + 1e-12));
            assert!((f.value(sigma) - just_out).abs() <= 1e-9);
        }
    }

    #[test]
    fn metrics_constant_offset() {
        let p = t(&[3.0, 4.0, 5.0]);
        let y = t(&[1.0, 2.0, 3.0]);
        assert_eq!(metrics(&p, &y).unwrap(), Metrics { mse: 4.0, mae: 2.0 });
        assert_eq!(metrics(&y, &y).unwrap(), Metrics { mse: 0.0, mae: 0.0 });
    }

    #[test]
    fn single_loss_mode_returns_mix_only() {
        let mut g = Graph::new();
        let y = g.constant(t(&[0.0, 0.0]));
        let a = g.constant(t(&[1.0, 0.0]));
        let b = g.constant(t(&[0.0, 2.0]));
        let c = g.constant(t(&[0.5, 0.5]));
        let cfg = LossConfig::default();
        let out = deep_supervised_loss(&mut g, (a, b, c), y, &cfg, None).unwrap();
        assert!(out.ci.is_none() && out.cd.is_none());
        let expected = m_loss(&t(&[0.5, 0.5]), &t(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(g.value(out.total).data()[0], expected);
    }

    proptest! {
        #[test]
        fn m_loss_even_nonnegative(e in -10.0f64..10.0, sigma in 0.1f64..3.0) {
            let f = Pointwise::MLoss { sigma };
            prop_assert_eq!(f.value(e), f.value(-e));
            prop_assert!(f.value(e) >= 0.0);
            prop_assert_eq!(f.value(e) == 0.0, e == 0.0);
        }

        #[test]
        fn derivative_matches_difference(e in -5.0f64..5.0, sigma in 0.2f64..3.0) {
            let f = Pointwise::MLoss { sigma };
            prop_assume!(e.abs() > 1e-3 && (e.abs() - sigma).abs() > 1e-3);
            let h = 1e-6;
            let fd = (f.value(e + h) - f.value(e - h)) / (2.0 * h);
            prop_assert!((fd - f.derivative(e)).abs() < 1e-6);
        }
    }
}
