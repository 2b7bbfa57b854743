//! Loss values and parameter gradients for every supported algorithm.
//!
//! All functions return a loss to minimize. Every loss depends on θ only
//! through the current log-probabilities of the stored trajectories, so each
//! one is computed in two stages: a per-token weight `w_t = ∂L/∂ log π_θ(y_t)`
//! and a single scatter `Σ_t w_t ∇ log π_θ(y_t)`. Old and reference
//! log-probabilities are read from the rollout and act as constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::advantages::{normalize_group, predictive_from_rhos, GroupAdvantages, GroupRollout, PredictiveAdvantages, SIGMA_GUARD};
use crate::policy::{accumulate_weighted_grad, k3, logprob_sequence, PolicyParams, Sampler, SeqLogprob};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "ppo")]
    Ppo,
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "reg-grpo")]
    RegGrpo,
    #[serde(rename = "reinforce")]
    Reinforce,
    #[serde(rename = "rloo")]
    Rloo,
    #[serde(rename = "rebel")]
    Rebel,
    #[serde(rename = "reward-regression")]
    RewardRegression,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "online-dpo")]
    OnlineDpo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Ppo,
        Algorithm::Grpo,
        Algorithm::RegGrpo,
        Algorithm::Reinforce,
        Algorithm::Rloo,
        Algorithm::Rebel,
        Algorithm::RewardRegression,
        Algorithm::Dpo,
        Algorithm::OnlineDpo,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
            Algorithm::RegGrpo => "reg-grpo",
            Algorithm::Reinforce => "reinforce",
            Algorithm::Rloo => "rloo",
            Algorithm::Rebel => "rebel",
            Algorithm::RewardRegression => "reward-regression",
            Algorithm::Dpo => "dpo",
            Algorithm::OnlineDpo => "online-dpo",
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL.map(|a| a.id()).join(", ")
    }

    /// Offline DPO learns from reference-policy samples; everything else
    /// samples from π_old.
    pub fn sampler(&self) -> Sampler {
        match self {
            Algorithm::Dpo => Sampler::Reference,
            _ => Sampler::Old,
        }
    }

    pub fn uses_value_model(&self) -> bool {
        *self == Algorithm::Ppo
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}' (valid: {})", Self::valid_ids())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub lambda_temp: f64,
    pub group_size: usize,
    pub window: usize,
    pub dpo_beta: f64,
    pub learning_rate: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    /// `false` replaces the min/clip surrogate with the plain ratio surrogate.
    pub clip_enabled: bool,
    /// Differentiate Reg-GRPO through μ_ρ and σ_ρ instead of detaching them.
    pub full_diff_stats: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.1,
            lambda_temp: 1.0,
            group_size: 8,
            window: 100,
            dpo_beta: 0.1,
            learning_rate: 0.05,
            max_grad_norm: 1.0,
            clip_enabled: true,
            full_diff_stats: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be >= 0");
        }
        if !(self.lambda_temp > 0.0 && self.lambda_temp.is_finite()) {
            return bad("lambda_temp must be > 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if !(self.dpo_beta > 0.0 && self.dpo_beta.is_finite()) {
            return bad("dpo_beta must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("max_grad_norm must be >= 0");
        }
        Ok(())
    }
}

/// Linear value predictor `V_ψ(x) = w·v + b` used by PPO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ValueParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            weights: vec![0.0; feature_dim],
            bias: 0.0,
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>()
    }

    /// Squared-error regression toward the group's rewards.
    pub fn loss_grad(&self, rollout: &GroupRollout) -> Result<ValueGrad> {
        let x = &rollout.sample.observation;
        if x.len() != self.weights.len() {
            return Err(Error::InvalidInput(format!(
                "value model has {} weights for {} features",
                self.weights.len(),
                x.len()
            )));
        }
        let v = self.predict(x);
        let g = rollout.rewards.len() as f64;
        let loss = rollout.rewards.iter().map(|r| (v - r) * (v - r)).sum::<f64>() / g;
        let dv = rollout.rewards.iter().map(|r| 2.0 * (v - r)).sum::<f64>() / g;
        Ok(ValueGrad {
            loss,
            weights: x.iter().map(|f| dv * f).collect(),
            bias: dv,
        })
    }

    pub fn apply(&mut self, grad: &ValueGrad, learning_rate: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= learning_rate * g;
        }
        self.bias -= learning_rate * grad.bias;
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGrad {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fraction of tokens on which the clipped branch strictly wins the min.
    pub clip_active_fraction: f64,
    pub kl_value: f64,
    pub mean_abs_advantage: f64,
    /// Groups without a usable preference pair (DPO variants).
    pub skipped_pairs: usize,
    pub vanished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// ∂loss/∂θ; empty when only the value was requested.
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// PPO only: the value model's regression loss and gradient.
    pub value: Option<ValueGrad>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Extra inputs some algorithms need besides θ, the rollout and `hp`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossContext<'a> {
    /// PPO's value model; `None` means `V ≡ 0`.
    pub value: Option<&'a ValueParams>,
    /// Reg-GRPO: hold μ_ρ and σ_ρ at these values instead of recomputing.
    pub frozen_stats: Option<&'a PredictiveAdvantages>,
}

/// Which optional outputs to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    LossOnly,
    WithGrad,
}

/// Per-trajectory current log-probs plus the token weights being built.
struct Work<'a> {
    params: &'a PolicyParams,
    rollout: &'a GroupRollout,
    current: Vec<SeqLogprob>,
    weights: Vec<Vec<f64>>,
}

impl<'a> Work<'a> {
    fn new(params: &'a PolicyParams, rollout: &'a GroupRollout) -> Result<Self> {
        rollout.validate()?;
        if rollout.trajectories.is_empty() {
            return Err(Error::InvalidInput("empty rollout".into()));
        }
        let current = rollout
            .trajectories
            .iter()
            .map(|t| logprob_sequence(params, &rollout.sample, &t.tokens))
            .collect::<Result<Vec<_>>>()?;
        let weights = current.iter().map(|c| vec![0.0; c.per_token.len()]).collect();
        Ok(Self {
            params,
            rollout,
            current,
            weights,
        })
    }

    fn g(&self) -> f64 {
        self.current.len() as f64
    }

    /// ρ_i = log π_θ(y_i) − base_i.
    fn rhos(&self, base: impl Fn(usize) -> f64) -> Vec<f64> {
        self.current.iter().enumerate().map(|(i, c)| c.total - base(i)).collect()
    }

    fn rhos_vs_old(&self) -> Vec<f64> {
        self.rhos(|i| self.rollout.trajectories[i].old.total)
    }

    /// Add `c_i` to every token weight of trajectory `i` (sequence-level term).
    fn add_sequence_coefs(&mut self, coefs: &[f64]) {
        for (w, c) in self.weights.iter_mut().zip(coefs) {
            for x in w.iter_mut() {
                *x += c;
            }
        }
    }

    /// Token-averaged k3 KL to the reference, scaled by β, with its weights.
    fn add_kl(&mut self, beta: f64) -> f64 {
        let g = self.g();
        let mut kl = 0.0;
        for (i, tr) in self.rollout.trajectories.iter().enumerate() {
            let n = tr.tokens.len() as f64;
            let cur = &self.current[i].per_token;
            let mut s = 0.0;
            for (t, (&c, &r)) in cur.iter().zip(&tr.reference.per_token).enumerate() {
                s += k3(c, r);
                if beta != 0.0 {
                    self.weights[i][t] += beta / (g * n) * (1.0 - (r - c).exp());
                }
            }
            kl += s / n;
        }
        kl / g
    }

    /// Token-averaged clipped surrogate `(1/G) Σ_i (1/|y_i|) Σ_t min(...)`,
    /// subtracted from the loss. Returns (surrogate, clip-active fraction).
    fn add_surrogate(&mut self, advantages: &[f64], hp: &Hyperparams) -> (f64, f64) {
        let g = self.g();
        let (lo, hi) = (1.0 - hp.clip_epsilon, 1.0 + hp.clip_epsilon);
        let (mut total, mut clipped, mut tokens) = (0.0, 0usize, 0usize);
        for (i, tr) in self.rollout.trajectories.iter().enumerate() {
            let a = advantages[i];
            let n = tr.tokens.len() as f64;
            let mut s = 0.0;
            for (t, (&c, &o)) in self.current[i].per_token.iter().zip(&tr.old.per_token).enumerate() {
                let r = (c - o).exp();
                let unclipped = r * a;
                let (value, active) = if hp.clip_enabled {
                    let alt = r.clamp(lo, hi) * a;
                    if alt < unclipped {
                        (alt, true)
                    } else {
                        (unclipped, false)
                    }
                } else {
                    (unclipped, false)
                };
                s += value;
                tokens += 1;
                if active {
                    clipped += 1;
                } else {
                    self.weights[i][t] -= unclipped / (g * n);
                }
            }
            total += s / n;
        }
        (total / g, clipped as f64 / tokens.max(1) as f64)
    }

    fn finish(self, loss: f64, diagnostics: Diagnostics, mode: Mode) -> Result<LossReport> {
        let mut grad = Vec::new();
        if mode == Mode::WithGrad {
            grad = vec![0.0; self.params.num_params()];
            for (tr, w) in self.rollout.trajectories.iter().zip(&self.weights) {
                accumulate_weighted_grad(self.params, &self.rollout.sample, &tr.tokens, w, &mut grad)?;
            }
        }
        Ok(LossReport {
            loss,
            grad,
            diagnostics,
            value: None,
        })
    }
}

fn mean_abs(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len().max(1) as f64
}

fn check_adv_len(rollout: &GroupRollout, n: usize) -> Result<()> {
    if n != rollout.trajectories.len() {
        return Err(Error::InvalidInput(format!(
            "{n} advantages for {} trajectories",
            rollout.trajectories.len()
        )));
    }
    Ok(())
}

fn require_group(rollout: &GroupRollout) -> Result<()> {
    if rollout.trajectories.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "this loss needs a group of at least 2 (got {})",
            rollout.trajectories.len()
        )));
    }
    Ok(())
}

/// PPO-clip with the terminal-reward advantage `A = R − V_ψ(x)`.
pub fn ppo_loss(
    params: &PolicyParams,
    rollout: &GroupRollout,
    value: &ValueParams,
    hp: &Hyperparams,
    mode: Mode,
) -> Result<LossReport> {
    let v = value.predict(&rollout.sample.observation);
    let adv: Vec<f64> = rollout.rewards.iter().map(|r| r - v).collect();
    let mut w = Work::new(params, rollout)?;
    let (surrogate, clip) = w.add_surrogate(&adv, hp);
    let diagnostics = Diagnostics {
        clip_active_fraction: clip,
        mean_abs_advantage: mean_abs(&adv),
        ..Diagnostics::default()
    };
    let mut report = w.finish(-surrogate, diagnostics, mode)?;
    if mode == Mode::WithGrad {
        report.value = Some(value.loss_grad(rollout)?);
    }
    Ok(report)
}

pub fn ppo_loss_grad(
    params: &PolicyParams,
    rollout: &GroupRollout,
    value: &ValueParams,
    hp: &Hyperparams,
) -> Result<LossReport> {
    ppo_loss(params, rollout, value, hp, Mode::WithGrad)
}

/// Clipped group-relative surrogate plus β·KL(π_θ ‖ π_ref).
pub fn grpo_loss(
    params: &PolicyParams,
    rollout: &GroupRollout,
    adv: &GroupAdvantages,
    hp: &Hyperparams,
    mode: Mode,
) -> Result<LossReport> {
    check_adv_len(rollout, adv.values.len())?;
    let mut w = Work::new(params, rollout)?;
    let (surrogate, clip) = w.add_surrogate(&adv.values, hp);
    let kl = w.add_kl(hp.kl_beta);
    let diagnostics = Diagnostics {
        clip_active_fraction: clip,
        kl_value: kl,
        mean_abs_advantage: mean_abs(&adv.values),
        vanished: adv.vanished,
        ..Diagnostics::default()
    };
    w.finish(-surrogate + hp.kl_beta * kl, diagnostics, mode)
}

pub fn grpo_loss_grad(
    params: &PolicyParams,
    rollout: &GroupRollout,
    adv: &GroupAdvantages,
    hp: &Hyperparams,
) -> Result<LossReport> {
    grpo_loss(params, rollout, adv, hp, Mode::WithGrad)
}

/// `(1/G) Σ (Â_i − Â_θ,i)² + β·KL`.
///
/// With `frozen_stats` the group statistics of ρ are taken from it and held
/// constant; otherwise they are recomputed at `params` and, unless
/// `hp.full_diff_stats`, still treated as constants for the gradient.
pub fn reg_grpo_loss(
    params: &PolicyParams,
    rollout: &GroupRollout,
    adv: &GroupAdvantages,
    frozen_stats: Option<&PredictiveAdvantages>,
    hp: &Hyperparams,
    mode: Mode,
) -> Result<LossReport> {
    check_adv_len(rollout, adv.values.len())?;
    require_group(rollout)?;
    let mut w = Work::new(params, rollout)?;
    let rhos = w.rhos_vs_old();
    let g = w.g();
    let (mu, sigma) = match frozen_stats {
        Some(p) => (p.mean_rho, p.std_rho),
        None => {
            let p = predictive_from_rhos(rhos.clone());
            (p.mean_rho, p.std_rho)
        }
    };
    let denom = sigma + SIGMA_GUARD;
    let pred: Vec<f64> = rhos.iter().map(|r| (r - mu) / denom).collect();
    let resid: Vec<f64> = adv.values.iter().zip(&pred).map(|(a, p)| a - p).collect();
    let fit = resid.iter().map(|e| e * e).sum::<f64>() / g;

    let coefs: Vec<f64> = if hp.full_diff_stats && frozen_stats.is_none() {
        // ∂Â_θ,i/∂ρ_j = (δ_ij − 1/G)/d − (ρ_i − μ)/d² · ∂σ/∂ρ_j,
        // ∂σ/∂ρ_j = (ρ_j − μ)/(Gσ), taken as 0 at σ = 0.
        let dsigma: Vec<f64> = rhos
            .iter()
            .map(|r| if sigma > 0.0 { (r - mu) / (g * sigma) } else { 0.0 })
            .collect();
        let sum_e: f64 = resid.iter().sum();
        let sum_e_dev: f64 = resid.iter().zip(&rhos).map(|(e, r)| e * (r - mu)).sum();
        (0..rhos.len())
            .map(|j| {
                let dpred_dot_e = (resid[j] - sum_e / g) / denom - sum_e_dev / (denom * denom) * dsigma[j];
                -2.0 / g * dpred_dot_e
            })
            .collect()
    } else {
        resid.iter().map(|e| -2.0 * e / (g * denom)).collect()
    };
    w.add_sequence_coefs(&coefs);
    let kl = w.add_kl(hp.kl_beta);
    let diagnostics = Diagnostics {
        kl_value: kl,
        mean_abs_advantage: mean_abs(&adv.values),
        vanished: adv.vanished,
        ..Diagnostics::default()
    };
    w.finish(fit + hp.kl_beta * kl, diagnostics, mode)
}

pub fn reg_grpo_loss_grad(
    params: &PolicyParams,
    rollout: &GroupRollout,
    adv: &GroupAdvantages,
    hp: &Hyperparams,
) -> Result<LossReport> {
    reg_grpo_loss(params, rollout, adv, None, hp, Mode::WithGrad)
}

/// `−(1/G) Σ c_i log π_θ(y_i)` for fixed per-trajectory weights `c`.
fn weighted_likelihood(params: &PolicyParams, rollout: &GroupRollout, c: &[f64], mode: Mode) -> Result<LossReport> {
    let mut w = Work::new(params, rollout)?;
    let g = w.g();
    let loss = -w.current.iter().zip(c).map(|(lp, c)| c * lp.total).sum::<f64>() / g;
    let coefs: Vec<f64> = c.iter().map(|c| -c / g).collect();
    w.add_sequence_coefs(&coefs);
    let diagnostics = Diagnostics {
        mean_abs_advantage: mean_abs(c),
        ..Diagnostics::default()
    };
    w.finish(loss, diagnostics, mode)
}

pub fn reinforce_loss(params: &PolicyParams, rollout: &GroupRollout, mode: Mode) -> Result<LossReport> {
    weighted_likelihood(params, rollout, &rollout.rewards, mode)
}

pub fn reinforce_loss_grad(params: &PolicyParams, rollout: &GroupRollout, _hp: &Hyperparams) -> Result<LossReport> {
    reinforce_loss(params, rollout, Mode::WithGrad)
}

/// `R_i − mean_{j≠i} R_j`.
pub fn rloo_weights(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidInput(format!("leave-one-out baseline needs G >= 2 (got {g})")));
    }
    let sum: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| r - (sum - r) / (g - 1) as f64).collect())
}

pub fn rloo_loss(params: &PolicyParams, rollout: &GroupRollout, mode: Mode) -> Result<LossReport> {
    let c = rloo_weights(&rollout.rewards)?;
    weighted_likelihood(params, rollout, &c, mode)
}

pub fn rloo_loss_grad(params: &PolicyParams, rollout: &GroupRollout, _hp: &Hyperparams) -> Result<LossReport> {
    rloo_loss(params, rollout, Mode::WithGrad)
}

/// Mean over all unordered pairs of `((ρ_i − ρ_j) − (R_i − R_j)/λ)²`.
pub fn rebel_loss(params: &PolicyParams, rollout: &GroupRollout, hp: &Hyperparams, mode: Mode) -> Result<LossReport> {
    require_group(rollout)?;
    let mut w = Work::new(params, rollout)?;
    let rhos = w.rhos_vs_old();
    let r = &rollout.rewards;
    let n = rhos.len();
    let pairs = (n * (n - 1) / 2) as f64;
    let mut loss = 0.0;
    let mut coefs = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let e = (rhos[i] - rhos[j]) - (r[i] - r[j]) / hp.lambda_temp;
            loss += e * e;
            coefs[i] += 2.0 * e / pairs;
            coefs[j] -= 2.0 * e / pairs;
        }
    }
    w.add_sequence_coefs(&coefs);
    w.finish(loss / pairs, Diagnostics::default(), mode)
}

pub fn rebel_loss_grad(params: &PolicyParams, rollout: &GroupRollout, hp: &Hyperparams) -> Result<LossReport> {
    rebel_loss(params, rollout, hp, Mode::WithGrad)
}

/// `ln Ẑ` with `Ẑ = (1/G) Σ exp(R_j/λ)`, via log-sum-exp.
pub fn log_mc_partition(rewards: &[f64], lambda: f64) -> f64 {
    let m = rewards.iter().map(|r| r / lambda).fold(f64::NEG_INFINITY, f64::max);
    m + (rewards.iter().map(|r| (r / lambda - m).exp()).sum::<f64>() / rewards.len() as f64).ln()
}

/// `(1/G) Σ (λ(ln Ẑ + ρ_i) − R_i)²` with Ẑ held constant.
pub fn reward_regression_loss(
    params: &PolicyParams,
    rollout: &GroupRollout,
    hp: &Hyperparams,
    mode: Mode,
) -> Result<LossReport> {
    require_group(rollout)?;
    let mut w = Work::new(params, rollout)?;
    let rhos = w.rhos_vs_old();
    let g = w.g();
    let lam = hp.lambda_temp;
    let log_z = log_mc_partition(&rollout.rewards, lam);
    let resid: Vec<f64> = rhos
        .iter()
        .zip(&rollout.rewards)
        .map(|(rho, r)| lam * (log_z + rho) - r)
        .collect();
    let loss = resid.iter().map(|e| e * e).sum::<f64>() / g;
    let coefs: Vec<f64> = resid.iter().map(|e| 2.0 * lam * e / g).collect();
    w.add_sequence_coefs(&coefs);
    w.finish(loss, Diagnostics::default(), mode)
}

pub fn reward_regression_loss_grad(params: &PolicyParams, rollout: &GroupRollout, hp: &Hyperparams) -> Result<LossReport> {
    reward_regression_loss(params, rollout, hp, Mode::WithGrad)
}

/// Best-vs-worst pair: (argmax, argmin), ties to the lowest index.
/// `None` when all rewards are equal.
pub fn preference_pair(rewards: &[f64]) -> Option<(usize, usize)> {
    let (mut w, mut l) = (0, 0);
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[w] {
            w = i;
        }
        if r < rewards[l] {
            l = i;
        }
    }
    (rewards[w] > rewards[l]).then_some((w, l))
}

/// `softplus(x) = ln(1 + eˣ)`, stable for large |x|.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(β(ρ_w − ρ_l))`, ρ against π_ref (offline) or π_old (online).
/// A group without distinct rewards is skipped with zero loss and gradient.
pub fn dpo_loss(
    params: &PolicyParams,
    rollout: &GroupRollout,
    hp: &Hyperparams,
    online: bool,
    mode: Mode,
) -> Result<LossReport> {
    let mut w = Work::new(params, rollout)?;
    let Some((win, lose)) = preference_pair(&rollout.rewards) else {
        let diagnostics = Diagnostics {
            skipped_pairs: 1,
            ..Diagnostics::default()
        };
        return w.finish(0.0, diagnostics, mode);
    };
    let rhos = if online {
        w.rhos_vs_old()
    } else {
        w.rhos(|i| rollout.trajectories[i].reference.total)
    };
    let margin = hp.dpo_beta * (rhos[win] - rhos[lose]);
    let loss = softplus(-margin);
    let d = -hp.dpo_beta * sigmoid(-margin);
    let mut coefs = vec![0.0; rhos.len()];
    coefs[win] += d;
    coefs[lose] -= d;
    w.add_sequence_coefs(&coefs);
    w.finish(loss, Diagnostics::default(), mode)
}

pub fn dpo_loss_grad(params: &PolicyParams, rollout: &GroupRollout, hp: &Hyperparams, online: bool) -> Result<LossReport> {
    dpo_loss(params, rollout, hp, online, Mode::WithGrad)
}

/// Dispatch on `alg`, computing group advantages where the algorithm needs
/// them.
pub fn compute_loss(
    alg: Algorithm,
    params: &PolicyParams,
    rollout: &GroupRollout,
    hp: &Hyperparams,
    ctx: LossContext<'_>,
    mode: Mode,
) -> Result<LossReport> {
    match alg {
        Algorithm::Ppo => {
            let zero;
            let value = match ctx.value {
                Some(v) => v,
                None => {
                    zero = ValueParams::zeros(rollout.sample.observation.len());
                    &zero
                }
            };
            ppo_loss(params, rollout, value, hp, mode)
        }
        Algorithm::Grpo => grpo_loss(params, rollout, &normalize_group(&rollout.rewards)?, hp, mode),
        Algorithm::RegGrpo => reg_grpo_loss(
            params,
            rollout,
            &normalize_group(&rollout.rewards)?,
            ctx.frozen_stats,
            hp,
            mode,
        ),
        Algorithm::Reinforce => reinforce_loss(params, rollout, mode),
        Algorithm::Rloo => rloo_loss(params, rollout, mode),
        Algorithm::Rebel => rebel_loss(params, rollout, hp, mode),
        Algorithm::RewardRegression => reward_regression_loss(params, rollout, hp, mode),
        Algorithm::Dpo => dpo_loss(params, rollout, hp, false, mode),
        Algorithm::OnlineDpo => dpo_loss(params, rollout, hp, true, mode),
    }
}

/// Rescale `grad` in place so its L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}
