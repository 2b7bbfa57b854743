//! Group-normalized advantages and policy-derived predictive advantages.

use serde::{Deserialize, Serialize};

use crate::envs::TaskInstance;
use crate::policy::{SeqLogprob, TokenId};
use crate::rewards::{population_std, VANISHING_TOL};
use crate::{Error, Result};

/// Guard added to σ_ρ in the predictive-advantage denominator.
pub const SIGMA_GUARD: f64 = 1e-6;

/// One sampled response with its log-probabilities at sampling time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub current: SeqLogprob,
    pub old: SeqLogprob,
    pub reference: SeqLogprob,
}

/// `G` responses to one input sharing one reward normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    /// The input the responses were generated for (after any augmentation).
    pub sample: TaskInstance,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

impl GroupRollout {
    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    /// Fill `rewards` by scoring every trajectory.
    pub fn assign_rewards(&mut self, mut score: impl FnMut(&[TokenId]) -> f64) {
        self.rewards = self.trajectories.iter().map(|t| score(&t.tokens)).collect();
    }

    pub fn validate(&self) -> Result<()> {
        if self.rewards.len() != self.trajectories.len() {
            return Err(Error::InvalidInput(format!(
                "{} rewards for {} trajectories",
                self.rewards.len(),
                self.trajectories.len()
            )));
        }
        if let Some(r) = self.rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite reward {r}")));
        }
        Ok(())
    }
}

/// Â with the group statistics it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub values: Vec<f64>,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub vanished: bool,
}

/// Â_θ = (ρ − μ_ρ)/(σ_ρ + guard), ρ = log π_θ(y|x) − log π_old(y|x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveAdvantages {
    pub rhos: Vec<f64>,
    pub mean_rho: f64,
    pub std_rho: f64,
    pub values: Vec<f64>,
}

/// Standardize rewards with population statistics. A constant group
/// short-circuits to the vanished state with all-zero advantages.
pub fn normalize_group(rewards: &[f64]) -> Result<GroupAdvantages> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "group statistics need at least 2 rewards (got {})",
            rewards.len()
        )));
    }
    let (mean, std) = population_std(rewards);
    if std < VANISHING_TOL {
        return Ok(GroupAdvantages {
            values: vec![0.0; rewards.len()],
            mean_reward: mean,
            std_reward: std,
            vanished: true,
        });
    }
    Ok(GroupAdvantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        mean_reward: mean,
        std_reward: std,
        vanished: false,
    })
}

/// Predictive advantages from sequence-level log-ratios.
pub fn predictive_from_rhos(rhos: Vec<f64>) -> PredictiveAdvantages {
    let (mean, std) = population_std(&rhos);
    let values = rhos.iter().map(|r| (r - mean) / (std + SIGMA_GUARD)).collect();
    PredictiveAdvantages {
        rhos,
        mean_rho: mean,
        std_rho: std,
        values,
    }
}

/// Predictive advantages from the log-probabilities stored in the rollout.
pub fn predictive_advantage(rollout: &GroupRollout) -> PredictiveAdvantages {
    predictive_from_rhos(
        rollout
            .trajectories
            .iter()
            .map(|t| t.current.total - t.old.total)
            .collect(),
    )
}

pub fn detect_vanishing(adv: &GroupAdvantages) -> bool {
    adv.vanished
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn two_level_group() {
        let a = normalize_group(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(close(&a.values, &[1.0, -1.0, -1.0, 1.0], 1e-15));
        assert_eq!((a.mean_reward, a.std_reward), (0.5, 0.5));
        assert!(!detect_vanishing(&a));
        let b = normalize_group(&[2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(close(&b.values, &a.values, 1e-15));
    }

    #[test]
    fn constant_group_vanishes() {
        for r in [[1.0; 4], [0.0; 4]] {
            let a = normalize_group(&r).unwrap();
            assert!(detect_vanishing(&a));
            assert_eq!(a.values, vec![0.0; 4]);
        }
        assert!(normalize_group(&[1.0]).is_err());
    }

    #[test]
    fn predictive_examples() {
        let p = predictive_from_rhos(vec![0.0; 5]);
        assert_eq!(p.values, vec![0.0; 5]);
        let p = predictive_from_rhos(vec![0.2, -0.2]);
        assert!((p.values[0] - 1.0).abs() < 1e-5 && (p.values[1] + 1.0).abs() < 1e-5);
        // Exact value with the guard.
        assert!((p.values[0] - 0.2 / (0.2 + SIGMA_GUARD)).abs() < 1e-15);
    }

    fn nonconstant() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0..5.0f64, 2..12)
            .prop_filter("non-constant", |v| population_std(v).1 > 1e-3)
    }

    proptest! {
        #[test]
        fn standardized_moments(r in nonconstant()) {
            let a = normalize_group(&r).unwrap();
            let n = a.values.len() as f64;
            let m = a.values.iter().sum::<f64>() / n;
            let v = a.values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-9);
        }

        #[test]
        fn affine_invariance(r in nonconstant(), scale in 0.01..100.0f64, shift in -50.0..50.0f64) {
            let a = normalize_group(&r).unwrap();
            let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let b = normalize_group(&moved).unwrap();
            prop_assert!(close(&a.values, &b.values, 1e-9));
        }

        #[test]
        fn permutation_equivariance(r in nonconstant(), rot in 0usize..12) {
            let k = rot % r.len();
            let mut p = r.clone();
            p.rotate_left(k);
            let mut a = normalize_group(&r).unwrap().values;
            a.rotate_left(k);
            prop_assert!(close(&a, &normalize_group(&p).unwrap().values, 1e-12));
            let mut pa = predictive_from_rhos(r.clone()).values;
            pa.rotate_left(k);
            prop_assert!(close(&pa, &predictive_from_rhos(p).values, 1e-12));
        }
    }
}
