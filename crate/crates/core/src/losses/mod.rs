//! Cosine-scored ranking and contrastive losses with hand-derived gradients.

mod bpr;
mod contrastive;
mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpr::{bpr_loss_grad, BprTriple, PairwiseGrads};
pub use contrastive::{contrastive_unlearn_loss_grad, infonce_cl_loss_grad, ViewGrads};
pub use gradcheck::finite_diff_check;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// ℓ2 weight on touched rows.
    pub lambda_reg: f64,
    /// Weight of the contrastive term on the server.
    pub lambda_cl: f64,
    pub negatives_per_positive: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            lambda_reg: 1e-4,
            lambda_cl: 0.3,
            negatives_per_positive: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda_reg >= 0.0) || !(self.lambda_cl >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::InvalidArgument("need at least one negative".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity.
pub fn score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// A vector split into its norm and direction.
#[derive(Debug, Clone)]
pub(crate) struct Unit {
    pub norm: f64,
    pub dir: Vec<f64>,
}

impl Unit {
    pub fn new(v: &[f64]) -> Result<Self> {
        let n = norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(if n == 0.0 {
                Error::ZeroNorm
            } else {
                Error::NonFinite("embedding norm".into())
            });
        }
        Ok(Unit {
            norm: n,
            dir: v.iter().map(|x| x / n).collect(),
        })
    }

    pub fn cos(&self, other: &Unit) -> f64 {
        dot(&self.dir, &other.dir)
    }

    /// Accumulates `scale · ∂cos(self, other)/∂self` into `out`:
    /// `(other_dir − c · self_dir) / |self|`.
    pub fn add_cos_grad(&self, other: &Unit, c: f64, scale: f64, out: &mut [f64]) {
        let s = scale / self.norm;
        for ((o, a), b) in out.iter_mut().zip(&self.dir).zip(&other.dir) {
            *o += s * (b - c * a);
        }
    }
}

/// `-ln σ(x)` computed without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((score(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((score(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn stable_helpers() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(neg_log_sigmoid(800.0) >= 0.0 && neg_log_sigmoid(800.0) < 1e-300);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let mut c = LossConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c = LossConfig::default();
        c.negatives_per_positive = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn cosine_invariant_under_positive_scaling(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let a = score(&u, &v).unwrap();
            let b = score(&scaled, &v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
