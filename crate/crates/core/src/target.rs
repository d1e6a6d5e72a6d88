//! Target Gaussians for the two pair classes and the linear decision rule
//! they induce.
//!
//! Both targets are isotropic with constant mean vectors, `N(mu * 1_p, sigma^2 I_p)`.
//! With equal variances the Bayes-optimal boundary is the perpendicular
//! bisector of the two means, so a pair is accepted when
//! `(mu_m - mu_n)ᵀ z > (mu_m - mu_n)ᵀ (mu_m + mu_n) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Matching,
    NonMatching,
}

impl PairLabel {
    pub fn is_matching(self) -> bool {
        matches!(self, PairLabel::Matching)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub mu_m: f64,
    pub mu_n: f64,
    pub sigma_m: f64,
    pub sigma_n: f64,
    pub p: usize,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            mu_m: 0.0,
            mu_n: 40.0,
            sigma_m: 1.0,
            sigma_n: 1.0,
            p: 1,
        }
    }
}

/// One of the two target Gaussians, as seen by the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetGaussian {
    pub mu: f64,
    pub sigma: f64,
    pub p: usize,
}

impl TargetSpec {
    pub fn new(mu_m: f64, mu_n: f64, sigma: f64, p: usize) -> Result<Self> {
        let spec = Self {
            mu_m,
            mu_n,
            sigma_m: sigma,
            sigma_n: sigma,
            p,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_m.is_finite() && self.mu_n.is_finite()) {
            return Err(Error::Config("target means must be finite".into()));
        }
        if self.mu_m == self.mu_n {
            return Err(Error::Config(format!(
                "target means must differ (mu_m = mu_n = {})",
                self.mu_m
            )));
        }
        for (name, s) in [("sigma_m", self.sigma_m), ("sigma_n", self.sigma_n)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {s}")));
            }
        }
        if self.p == 0 {
            return Err(Error::Config("latent dimensionality p must be >= 1".into()));
        }
        Ok(())
    }

    pub fn has_equal_sigmas(&self) -> bool {
        self.sigma_m == self.sigma_n
    }

    pub fn side(&self, label: PairLabel) -> TargetGaussian {
        match label {
            PairLabel::Matching => TargetGaussian {
                mu: self.mu_m,
                sigma: self.sigma_m,
                p: self.p,
            },
            PairLabel::NonMatching => TargetGaussian {
                mu: self.mu_n,
                sigma: self.sigma_n,
                p: self.p,
            },
        }
    }

    pub fn mean_vector(&self, label: PairLabel) -> Vec<f64> {
        vec![self.side(label).mu; self.p]
    }

    pub fn decision_rule(&self) -> DecisionRule {
        DecisionRule::from_target(self)
    }
}

/// Hyperplane test separating the two target means.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRule {
    pub normal: Vec<f64>,
    pub offset: f64,
    /// Scalar threshold `(mu_m + mu_n) / 2`; the whole rule when `p = 1`.
    pub tau: f64,
}

impl DecisionRule {
    pub fn from_target(target: &TargetSpec) -> Self {
        let p = target.p;
        let diff = target.mu_m - target.mu_n;
        let sum = target.mu_m + target.mu_n;
        Self {
            normal: vec![diff; p],
            offset: p as f64 * diff * sum / 2.0,
            tau: sum / 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// Signed distance-like score: `normalᵀ z - offset`. Positive means matching.
    pub fn margin(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.normal.len() {
            return Err(Error::shape(
                "margin",
                format!("latent point has {} coordinates, rule expects {}", z.len(), self.dim()),
            ));
        }
        let proj: f64 = self.normal.iter().zip(z).map(|(n, v)| n * v).sum();
        Ok(proj - self.offset)
    }

    /// Matching iff the margin is strictly positive; an exact tie is rejected.
    pub fn decide(&self, z: &[f64]) -> Result<PairLabel> {
        Ok(label_for_margin(self.margin(z)?))
    }

    /// Same rule with the normal and offset multiplied by `factor > 0`.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            normal: self.normal.iter().map(|v| v * factor).collect(),
            offset: self.offset * factor,
            tau: self.tau,
        }
    }
}

pub fn label_for_margin(margin: f64) -> PairLabel {
    if margin > 0.0 {
        PairLabel::Matching
    } else {
        PairLabel::NonMatching
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nearest_mean(target: &TargetSpec, z: &[f64]) -> Option<PairLabel> {
        let d = |mu: f64| z.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
        let (dm, dn) = (d(target.mu_m), d(target.mu_n));
        if dm < dn {
            Some(PairLabel::Matching)
        } else if dn < dm {
            Some(PairLabel::NonMatching)
        } else {
            None
        }
    }

    #[test]
    fn default_operating_point() {
        let rule = TargetSpec::default().decision_rule();
        assert_eq!(rule.tau, 20.0);
        assert_eq!(rule.decide(&[5.0]).unwrap(), PairLabel::Matching);
        assert_eq!(rule.decide(&[0.0]).unwrap(), PairLabel::Matching);
        assert_eq!(rule.decide(&[40.0]).unwrap(), PairLabel::NonMatching);
    }

    #[test]
    fn two_dimensional_hyperplane() {
        let t = TargetSpec::new(0.0, 40.0, 1.0, 2).unwrap();
        let rule = t.decision_rule();
        assert_eq!(rule.offset, -1600.0);
        let lhs: f64 = rule.normal.iter().map(|n| n * 10.0).sum();
        assert_eq!(lhs, -800.0);
        assert_eq!(rule.decide(&[10.0, 10.0]).unwrap(), PairLabel::Matching);
    }

    #[test]
    fn margin_values() {
        let rule = TargetSpec::default().decision_rule();
        assert_eq!(rule.margin(&[0.0]).unwrap(), 800.0);
        assert_eq!(rule.margin(&[20.0]).unwrap(), 0.0);
        assert_eq!(rule.decide(&[20.0]).unwrap(), PairLabel::NonMatching);
    }

    #[test]
    fn dimension_mismatch() {
        let rule = TargetSpec::default().decision_rule();
        assert!(matches!(rule.decide(&[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn equal_means_rejected() {
        assert!(TargetSpec::new(3.0, 3.0, 1.0, 1).is_err());
        assert!(TargetSpec::new(0.0, 1.0, 0.0, 1).is_err());
        assert!(TargetSpec::new(0.0, 1.0, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn matches_nearest_mean(
            mu_m in -50.0f64..50.0,
            gap in prop::sample::select(vec![-40.0, -3.0, 0.5, 7.0, 40.0]),
            z in prop::collection::vec(-100.0f64..100.0, 1..9),
        ) {
            let t = TargetSpec::new(mu_m, mu_m + gap, 1.0, z.len()).unwrap();
            let rule = t.decision_rule();
            if let Some(expected) = nearest_mean(&t, &z) {
                prop_assert_eq!(rule.decide(&z).unwrap(), expected);
            }
        }

        #[test]
        fn permutation_invariant(z in prop::collection::vec(-60.0f64..60.0, 2..8), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let t = TargetSpec::new(0.0, 40.0, 1.0, z.len()).unwrap();
            let rule = t.decision_rule();
            let mut shuffled = z.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(rule.decide(&z).unwrap(), rule.decide(&shuffled).unwrap());
        }

        #[test]
        fn margin_is_affine(
            a in prop::collection::vec(-60.0f64..60.0, 3),
            b in prop::collection::vec(-60.0f64..60.0, 3),
            alpha in 0.0f64..1.0,
        ) {
            let rule = TargetSpec::new(0.0, 40.0, 1.0, 3).unwrap().decision_rule();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
            let lhs = rule.margin(&mix).unwrap();
            let rhs = alpha * rule.margin(&a).unwrap() + (1.0 - alpha) * rule.margin(&b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn class_centres_are_antisymmetric(mu_m in -30.0f64..30.0, gap in 0.5f64..100.0, p in 1usize..6) {
            let t = TargetSpec::new(mu_m, mu_m + gap, 1.0, p).unwrap();
            let rule = t.decision_rule();
            let m = rule.margin(&t.mean_vector(PairLabel::Matching)).unwrap();
            let n = rule.margin(&t.mean_vector(PairLabel::NonMatching)).unwrap();
            prop_assert!((m + n).abs() < 1e-9 * m.abs());
            prop_assert!(m > 0.0);
        }

        #[test]
        fn positive_rescaling_keeps_decisions(z in prop::collection::vec(-60.0f64..60.0, 2), k in 0.01f64..100.0) {
            let rule = TargetSpec::new(0.0, 40.0, 1.0, 2).unwrap().decision_rule();
            let scaled = rule.rescaled(k);
            let m = rule.margin(&z).unwrap();
            prop_assume!(m.abs() > 1e-6);
            prop_assert_eq!(rule.decide(&z).unwrap(), scaled.decide(&z).unwrap());
        }
    }
}
