//! Exact-enumeration checks of the KL-regularized closed form.
//!
//! For a fixed old policy and reward, the optimum of
//! `max E[R] − λ·KL(π ‖ π_old)` is `π* = π_old·exp(R/λ)/Z`. This module
//! enumerates the whole output space to compute `Z`, `π*`, the inverted
//! reward `R = λ(log Z + log π*/π_old)` and the Z-free advantage identity,
//! and provides the central-difference gradient oracle.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantages::normalize_group;
use crate::envs::TaskInstance;
use crate::policy::{enumerate_support, logprob_sequence, PolicyParams, PolicyShape, TokenId};
use crate::{seed, Error, Result};

pub const IDENTITY_TOL: f64 = 1e-10;
/// A substituted (non-optimal) policy must miss the reward identity by more
/// than this for the negative control to count as detected.
pub const NEGATIVE_CONTROL_MIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionValue {
    pub z: f64,
    pub log_z: f64,
    pub lambda: f64,
    pub support_size: usize,
}

/// π* over the full support of π_old for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactPolicy {
    pub sample: TaskInstance,
    pub support: Vec<(Vec<TokenId>, f64)>,
}

impl ExactPolicy {
    pub fn total_mass(&self) -> f64 {
        self.support.iter().map(|(_, p)| p).sum()
    }

    pub fn prob_map(&self) -> HashMap<&[TokenId], f64> {
        self.support.iter().map(|(y, p)| (y.as_slice(), *p)).collect()
    }

    /// The support of `params` itself, used as a (usually wrong) stand-in
    /// for π* by negative controls.
    pub fn of_policy(params: &PolicyParams, sample: &TaskInstance, len: usize) -> Result<Self> {
        Ok(Self {
            sample: sample.clone(),
            support: enumerate_support(params, sample, len)?,
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be > 0 (got {lambda})")));
    }
    Ok(())
}

/// `(y, log π_old(y), R(y)/λ)` for every sequence in the support.
fn weighted_support(
    old: &PolicyParams,
    sample: &TaskInstance,
    reward_fn: &dyn Fn(&[TokenId]) -> f64,
    lambda: f64,
    len: usize,
) -> Result<Vec<(Vec<TokenId>, f64, f64)>> {
    check_lambda(lambda)?;
    enumerate_support(old, sample, len)?
        .into_iter()
        .map(|(y, _)| {
            let lp = logprob_sequence(old, sample, &y)?.total;
            let r = reward_fn(&y);
            if !r.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite reward for {y:?}")));
            }
            Ok((y, lp, r / lambda))
        })
        .collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `Z = Σ_y π_old(y) exp(R(y)/λ)`, computed in log space.
pub fn partition_function(
    old: &PolicyParams,
    sample: &TaskInstance,
    reward_fn: &dyn Fn(&[TokenId]) -> f64,
    lambda: f64,
    len: usize,
) -> Result<PartitionValue> {
    let ws = weighted_support(old, sample, reward_fn, lambda, len)?;
    let log_z = log_sum_exp(ws.iter().map(|(_, lp, s)| lp + s));
    Ok(PartitionValue {
        z: log_z.exp(),
        log_z,
        lambda,
        support_size: ws.len(),
    })
}

/// `π*(y) = π_old(y) exp(R(y)/λ) / Z`.
pub fn optimal_policy(
    old: &PolicyParams,
    sample: &TaskInstance,
    reward_fn: &dyn Fn(&[TokenId]) -> f64,
    lambda: f64,
    len: usize,
) -> Result<ExactPolicy> {
    let ws = weighted_support(old, sample, reward_fn, lambda, len)?;
    let log_z = log_sum_exp(ws.iter().map(|(_, lp, s)| lp + s));
    Ok(ExactPolicy {
        sample: sample.clone(),
        support: ws.into_iter().map(|(y, lp, s)| (y, (lp + s - log_z).exp())).collect(),
    })
}

/// `max_y |R(y) − λ(log Z + log π*(y)/π_old(y))|` over the support.
pub fn reward_identity_check(
    exact: &ExactPolicy,
    old: &PolicyParams,
    reward_fn: &dyn Fn(&[TokenId]) -> f64,
    lambda: f64,
    z: &PartitionValue,
) -> Result<f64> {
    check_lambda(lambda)?;
    let mut worst = 0.0f64;
    for (y, p) in &exact.support {
        let lp_old = logprob_sequence(old, &exact.sample, y)?.total;
        let inverted = lambda * (z.log_z + p.ln() - lp_old);
        worst = worst.max((reward_fn(y) - inverted).abs());
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageCheck {
    pub max_abs_error: f64,
    /// The group's rewards were constant; both sides are then all zero.
    pub vanished: bool,
}

/// Compare `normalize(R)` with `normalize(ρ*)`, `ρ* = log π*/π_old`, on a
/// group of sequences from the support. Z cancels in the standardization.
pub fn advantage_identity_check(
    exact: &ExactPolicy,
    old: &PolicyParams,
    group: &[Vec<TokenId>],
    reward_fn: &dyn Fn(&[TokenId]) -> f64,
) -> Result<AdvantageCheck> {
    let probs = exact.prob_map();
    let rewards: Vec<f64> = group.iter().map(|y| reward_fn(y)).collect();
    let rho_star = group
        .iter()
        .map(|y| {
            let p = probs
                .get(y.as_slice())
                .ok_or_else(|| Error::InvalidInput(format!("{y:?} is outside the enumerated support")))?;
            Ok(p.ln() - logprob_sequence(old, &exact.sample, y)?.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let from_rewards = normalize_group(&rewards)?;
    let from_policy = normalize_group(&rho_star)?;
    let max_abs_error = from_rewards
        .values
        .iter()
        .zip(&from_policy.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(AdvantageCheck {
        max_abs_error,
        vanished: from_rewards.vanished,
    })
}

/// Central differences `(f(θ + h e_k) − f(θ − h e_k)) / 2h` per coordinate.
pub fn finite_diff_grad(
    f: impl Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidInput(format!("step h must be > 0 (got {h})")));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + h;
        let up = f(&x)?;
        x[k] = theta[k] - h;
        let down = f(&x)?;
        x[k] = theta[k];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite differences of a loss over policy parameters.
pub fn finite_diff_params(
    loss: impl Fn(&PolicyParams) -> Result<f64>,
    params: &PolicyParams,
    h: f64,
) -> Result<Vec<f64>> {
    let shape = *params.shape();
    finite_diff_grad(
        |theta| loss(&PolicyParams::from_vec(shape, theta.to_vec())?),
        params.theta(),
        h,
    )
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e−6)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(1e-6);
    diff / scale
}

/// One line of the oracle table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub check: String,
    pub vocab: usize,
    pub len: usize,
    pub lambda: f64,
    pub max_error: f64,
    /// Rows marked `must_exceed` pass when the error is above the threshold.
    pub threshold: f64,
    pub must_exceed: bool,
    pub passed: bool,
}

impl OracleRow {
    fn new(check: &str, vocab: usize, len: usize, lambda: f64, max_error: f64, threshold: f64, must_exceed: bool) -> Self {
        let passed = if must_exceed {
            max_error > threshold
        } else {
            max_error <= threshold
        };
        Self {
            check: check.to_string(),
            vocab,
            len,
            lambda,
            max_error,
            threshold,
            must_exceed,
            passed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OracleRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    /// Largest error among rows of kind `check`.
    pub fn max_error(&self, check: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.check == check)
            .map(|r| r.max_error)
            .reduce(f64::max)
    }
}

pub const SWEEP_VOCABS: [usize; 3] = [2, 3, 4];
pub const SWEEP_LENS: [usize; 3] = [1, 2, 3];
pub const SWEEP_LAMBDAS: [f64; 3] = [0.5, 1.0, 2.0];

/// Options for [`run_sweep`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SweepOptions {
    pub seed: u64,
    /// Substitute π_old for π* in every reward-identity row, which must then
    /// fail.
    pub substitute_old_policy: bool,
    pub groups_per_config: usize,
}

/// Random reward table over a support, uniform in [−10, 10].
fn reward_table(support: &[(Vec<TokenId>, f64)], seed: u64) -> HashMap<Vec<TokenId>, f64> {
    let mut rng = seed::rng(seed, &[0x4e]);
    support
        .iter()
        .map(|(y, _)| (y.clone(), rng.random_range(-10.0..=10.0)))
        .collect()
}

/// The two-token example: vocab {a, b}, one step, uniform π_old,
/// R(a) = 1, R(b) = 0, λ = 1.
pub fn partition_example() -> Result<(PolicyParams, TaskInstance, impl Fn(&[TokenId]) -> f64)> {
    let old = PolicyParams::zeros(PolicyShape::tabular(2, 1, None))?;
    let sample = TaskInstance::bare(vec![], vec![]);
    Ok((old, sample, |y: &[TokenId]| if y == [0] { 1.0 } else { 0.0 }))
}

/// Reward identity, advantage identity and normalization over
/// vocab × length × λ, plus the partition example and its negative control.
pub fn run_sweep(opts: &SweepOptions) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    let groups = opts.groups_per_config.max(1);

    let (old, sample, reward) = partition_example()?;
    let z = partition_function(&old, &sample, &reward, 1.0, 1)?;
    let e = std::f64::consts::E;
    report.rows.push(OracleRow::new("partition-example", 2, 1, 1.0, (z.z - (e + 1.0) / 2.0).abs(), 1e-12, false));
    let exact = optimal_policy(&old, &sample, &reward, 1.0, 1)?;
    report.rows.push(OracleRow::new(
        "optimal-example",
        2,
        1,
        1.0,
        (exact.support[0].1 - e / (e + 1.0)).abs(),
        1e-12,
        false,
    ));
    let substitute = ExactPolicy::of_policy(&old, &sample, 1)?;
    let control = reward_identity_check(&substitute, &old, &reward, 1.0, &z)?;
    report.rows.push(OracleRow::new("negative-control", 2, 1, 1.0, control, NEGATIVE_CONTROL_MIN, true));

    for &v in &SWEEP_VOCABS {
        for &len in &SWEEP_LENS {
            let cfg_seed = seed::derive(opts.seed, &[v as u64, len as u64]);
            let old = PolicyParams::random(PolicyShape::tabular(v, len, None), cfg_seed, 1.0)?;
            let support = enumerate_support(&old, &sample, len)?;
            let table = reward_table(&support, cfg_seed);
            let reward = |y: &[TokenId]| table[y];
            for &lambda in &SWEEP_LAMBDAS {
                let z = partition_function(&old, &sample, &reward, lambda, len)?;
                let exact = if opts.substitute_old_policy {
                    ExactPolicy::of_policy(&old, &sample, len)?
                } else {
                    optimal_policy(&old, &sample, &reward, lambda, len)?
                };
                report.rows.push(OracleRow::new(
                    "normalization",
                    v,
                    len,
                    lambda,
                    (exact.total_mass() - 1.0).abs(),
                    1e-12,
                    false,
                ));
                let err = reward_identity_check(&exact, &old, &reward, lambda, &z)?;
                report.rows.push(OracleRow::new("reward-identity", v, len, lambda, err, IDENTITY_TOL, false));

                let mut rng = seed::rng(cfg_seed, &[lambda.to_bits()]);
                let mut worst = 0.0f64;
                let mut checked = 0;
                let mut attempts = 0;
                while checked < groups && attempts < 100 * groups {
                    attempts += 1;
                    let g = 2 + rng.random_range(0..3usize);
                    let group: Vec<Vec<TokenId>> = (0..g)
                        .map(|_| support[rng.random_range(0..support.len())].0.clone())
                        .collect();
                    let rs: Vec<f64> = group.iter().map(|y| reward(y)).collect();
                    if rs.iter().all(|r| *r == rs[0]) {
                        continue;
                    }
                    worst = worst.max(advantage_identity_check(&exact, &old, &group, &reward)?.max_abs_error);
                    checked += 1;
                }
                if checked > 0 {
                    report.rows.push(OracleRow::new("advantage-identity", v, len, lambda, worst, IDENTITY_TOL, false));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_example_values() {
        let (old, sample, reward) = partition_example().unwrap();
        let z = partition_function(&old, &sample, &reward, 1.0, 1).unwrap();
        assert!((z.z - 1.859_140_914_229_522_6).abs() < 1e-12);
        assert_eq!(z.support_size, 2);
        let exact = optimal_policy(&old, &sample, &reward, 1.0, 1).unwrap();
        assert!((exact.support[0].1 - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(reward_identity_check(&exact, &old, &reward, 1.0, &z).unwrap() <= 1e-10);
        let adv = advantage_identity_check(&exact, &old, &[vec![0], vec![1]], &reward).unwrap();
        assert!(adv.max_abs_error <= 1e-10 && !adv.vanished);
    }

    #[test]
    fn constant_reward_identities() {
        let old = PolicyParams::random(PolicyShape::tabular(3, 2, None), 5, 1.0).unwrap();
        let s = TaskInstance::bare(vec![], vec![]);
        let c = 2.5;
        for lambda in [0.5, 1.0, 2.0] {
            let z = partition_function(&old, &s, &|_| c, lambda, 2).unwrap();
            assert!((z.z - (c / lambda).exp()).abs() < 1e-12 * z.z);
            let exact = optimal_policy(&old, &s, &|_| c, lambda, 2).unwrap();
            for ((y, p), (y2, q)) in exact.support.iter().zip(enumerate_support(&old, &s, 2).unwrap()) {
                assert_eq!(y, &y2);
                assert!((p - q).abs() < 1e-15);
            }
            let a = advantage_identity_check(&exact, &old, &[vec![0, 1], vec![2, 2]], &|_| c).unwrap();
            assert!(a.vanished && a.max_abs_error == 0.0);
        }
        let big = partition_function(&old, &s, &|y| (y[0] as f64) / 3.0, 1e6, 2).unwrap();
        assert!((big.z - 1.0).abs() < 1e-5);
    }

    #[test]
    fn substituted_policy_is_detected() {
        let (old, sample, reward) = partition_example().unwrap();
        let z = partition_function(&old, &sample, &reward, 1.0, 1).unwrap();
        let wrong = ExactPolicy::of_policy(&old, &sample, 1).unwrap();
        assert!(reward_identity_check(&wrong, &old, &reward, 1.0, &z).unwrap() > NEGATIVE_CONTROL_MIN);
    }

    #[test]
    fn partition_increases_with_reward() {
        let old = PolicyParams::random(PolicyShape::tabular(3, 2, None), 8, 1.0).unwrap();
        let s = TaskInstance::bare(vec![], vec![]);
        let base = |y: &[TokenId]| (y[0] + 2 * y[1]) as f64 * 0.3;
        let bumped = |y: &[TokenId]| base(y) + if y == [1, 2] { 0.1 } else { 0.0 };
        let a = partition_function(&old, &s, &base, 1.0, 2).unwrap().z;
        let b = partition_function(&old, &s, &bumped, 1.0, 2).unwrap().z;
        assert!(b > a);
    }

    #[test]
    fn finite_differences_of_known_functions() {
        let theta = [0.3, -1.2, 2.0];
        let g = finite_diff_grad(|x| Ok(x.iter().map(|v| v * v).sum::<f64>() / 2.0), &theta, 1e-5).unwrap();
        assert!(g.iter().zip(&theta).all(|(a, b)| (a - b).abs() < 1e-8));
        let g = finite_diff_grad(|x| Ok(3.0 * x[0] - 2.0 * x[2]), &theta, 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9 && g[1] == 0.0 && (g[2] + 2.0).abs() < 1e-9);
        assert!(finite_diff_grad(|_| Ok(0.0), &theta, 0.0).is_err());
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!(relative_error(&[1e-9], &[2e-9]) < 1e-2);
    }

    #[test]
    fn sweep_passes_and_control_fails() {
        let opts = SweepOptions {
            seed: 1,
            groups_per_config: 5,
            ..SweepOptions::default()
        };
        let report = run_sweep(&opts).unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
        let bad = run_sweep(&SweepOptions {
            substitute_old_policy: true,
            ..opts
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
