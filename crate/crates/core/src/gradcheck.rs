//! Randomized analytic-vs-numeric gradient sweeps over every algorithm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantages::{predictive_advantage, GroupRollout};
use crate::algorithms::{compute_loss, Algorithm, Hyperparams, LossContext, Mode, ValueParams};
use crate::envs::TaskInstance;
use crate::oracle::{finite_diff_params, relative_error};
use crate::policy::{sample_group_from, PolicyParams, PolicyShape, PolicyTriple, TokenId};
use crate::{par, seed, Result};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Instances with a token ratio this close to a clip boundary are redrawn,
/// since the clipped surrogate is not differentiable there.
pub const CLIP_MARGIN: f64 = 1e-3;
/// Reg-GRPO instances whose ρ spread is below this are redrawn: the
/// standardized prediction has curvature of order 1/σ², which central
/// differences cannot resolve.
pub const RHO_STD_MIN: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub algorithms: Vec<Algorithm>,
    /// Test hook: perturb this algorithm's analytic gradient.
    pub corrupt: Option<Algorithm>,
}

impl GradcheckOptions {
    pub fn new(seed: u64, trials: usize) -> Self {
        Self {
            seed,
            trials,
            algorithms: Algorithm::ALL.to_vec(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmResult {
    pub algorithm: Algorithm,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Instance seed of the worst trial; rerun with [`random_instance`].
    pub worst_seed: u64,
    pub redrawn: usize,
}

impl AlgorithmResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOL
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub results: Vec<AlgorithmResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(AlgorithmResult::passed)
    }
}

/// A random small configuration: policy triple with distinct members, a
/// sampled group with rewards, and hyperparameters.
#[derive(Clone, Debug)]
pub struct Instance {
    pub triple: PolicyTriple,
    pub rollout: GroupRollout,
    pub value: ValueParams,
    pub hp: Hyperparams,
}

fn perturbed(p: &PolicyParams, seed: u64, scale: f64) -> Result<PolicyParams> {
    let noise = PolicyParams::random(*p.shape(), seed, scale)?;
    let theta = p.theta().iter().zip(noise.theta()).map(|(a, b)| a + b).collect();
    PolicyParams::from_vec(*p.shape(), theta)
}

/// Vocab 3–8, length 2–4, tabular or linear, group size 2–6.
pub fn random_instance(alg: Algorithm, instance_seed: u64) -> Result<Instance> {
    let mut rng = seed::rng(instance_seed, &[]);
    let v = rng.random_range(3..=8usize);
    let len = rng.random_range(2..=4usize);
    let shape = if rng.random_bool(0.5) {
        PolicyShape::linear(v, rng.random_range(1..=4), len)
    } else {
        let stop = rng.random_bool(0.5).then_some(0 as TokenId);
        PolicyShape::tabular(v, len, stop)
    };
    let current = PolicyParams::random(shape, rng.random(), 0.7)?;
    let old = perturbed(&current, rng.random(), 0.25)?;
    let reference = perturbed(&current, rng.random(), 0.25)?;
    let triple = PolicyTriple::from_parts(current, old, reference)?;
    let observation: Vec<f64> = (0..shape.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prompt: Vec<TokenId> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..v as TokenId)).collect();
    let sample = TaskInstance::bare(observation, prompt);
    let g = rng.random_range(2..=6usize);
    let mut rollout = sample_group_from(&triple, &sample, g, rng.random(), alg.sampler())?;
    loop {
        rollout.rewards = (0..g).map(|_| rng.random_range(0..=4) as f64 * 0.5).collect();
        if rollout.rewards.iter().any(|r| *r != rollout.rewards[0]) {
            break;
        }
    }
    let value = ValueParams {
        weights: (0..shape.feature_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
        bias: rng.random_range(-0.5..0.5),
    };
    let hp = Hyperparams {
        kl_beta: rng.random_range(0.0..0.5),
        lambda_temp: rng.random_range(0.5..2.0),
        dpo_beta: rng.random_range(0.1..1.0),
        full_diff_stats: alg == Algorithm::RegGrpo && rng.random_bool(0.5),
        ..Hyperparams::default()
    };
    Ok(Instance {
        triple,
        rollout,
        value,
        hp,
    })
}

fn near_clip_boundary(inst: &Instance) -> Result<bool> {
    let eps = inst.hp.clip_epsilon;
    for tr in &inst.rollout.trajectories {
        let cur = crate::policy::logprob_sequence(&inst.triple.current, &inst.rollout.sample, &tr.tokens)?;
        for (c, o) in cur.per_token.iter().zip(&tr.old.per_token) {
            let r = (c - o).exp();
            if (r - (1.0 - eps)).abs() < CLIP_MARGIN || (r - (1.0 + eps)).abs() < CLIP_MARGIN {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Relative error between the analytic gradient and central differences of
/// the same loss. For detached Reg-GRPO the ρ statistics are frozen at the
/// base point so both sides differentiate the same function.
pub fn check_instance(alg: Algorithm, inst: &Instance, corrupt: bool) -> Result<f64> {
    let frozen = predictive_advantage(&inst.rollout);
    let detached = alg == Algorithm::RegGrpo && !inst.hp.full_diff_stats;
    let ctx = LossContext {
        value: Some(&inst.value),
        frozen_stats: None,
    };
    let fd_ctx = LossContext {
        frozen_stats: detached.then_some(&frozen),
        ..ctx
    };
    let mut analytic = compute_loss(alg, &inst.triple.current, &inst.rollout, &inst.hp, ctx, Mode::WithGrad)?.grad;
    if corrupt {
        let n = analytic.len();
        analytic[0] += 1e-2;
        analytic[n - 1] *= 1.1;
    }
    let numeric = finite_diff_params(
        |p| Ok(compute_loss(alg, p, &inst.rollout, &inst.hp, fd_ctx, Mode::LossOnly)?.loss),
        &inst.triple.current,
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(opts.algorithms.len());
    for (a, &alg) in opts.algorithms.iter().enumerate() {
        let trials = par::map_indexed(opts.trials, |t| -> Result<(f64, u64, usize)> {
            let mut redrawn = 0;
            for attempt in 0u64.. {
                let s = seed::derive(opts.seed, &[a as u64, t as u64, attempt]);
                let inst = random_instance(alg, s)?;
                let ill_conditioned = match alg {
                    Algorithm::Ppo | Algorithm::Grpo => near_clip_boundary(&inst)?,
                    Algorithm::RegGrpo => predictive_advantage(&inst.rollout).std_rho < RHO_STD_MIN,
                    _ => false,
                };
                if ill_conditioned {
                    redrawn += 1;
                    continue;
                }
                let err = check_instance(alg, &inst, opts.corrupt == Some(alg))?;
                return Ok((err, s, redrawn));
            }
            unreachable!("attempt counter is unbounded")
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut res = AlgorithmResult {
            algorithm: alg,
            trials: trials.len(),
            max_rel_error: 0.0,
            worst_seed: 0,
            redrawn: 0,
        };
        for (err, s, r) in trials {
            res.redrawn += r;
            if err > res.max_rel_error || err.is_nan() {
                res.max_rel_error = err;
                res.worst_seed = s;
            }
        }
        results.push(res);
    }
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_passes() {
        let report = run(&GradcheckOptions::new(5, 8)).unwrap();
        for r in &report.results {
            assert!(r.passed(), "{}: {}", r.algorithm, r.max_rel_error);
        }
        assert!(report.passed());
    }

    #[test]
    fn corruption_is_caught() {
        let opts = GradcheckOptions {
            corrupt: Some(Algorithm::Rloo),
            algorithms: vec![Algorithm::Rloo, Algorithm::Rebel],
            ..GradcheckOptions::new(5, 3)
        };
        let report = run(&opts).unwrap();
        assert!(!report.results[0].passed());
        assert!(report.results[1].passed());
    }

    #[test]
    fn instances_are_reproducible() {
        let a = random_instance(Algorithm::Grpo, 99).unwrap();
        let b = random_instance(Algorithm::Grpo, 99).unwrap();
        assert_eq!(a.rollout, b.rollout);
        assert_eq!(a.triple, b.triple);
    }
}
