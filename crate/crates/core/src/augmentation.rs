//! Difficulty estimation against a replay window and the two augmentation
//! operators: prompt-side hints for hard samples, observation noise for easy
//! ones. Both are scaled by how far the sample is from the recent average.

use std::collections::VecDeque;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{score_response, TaskInstance};
use crate::policy::{sample_group, PolicyTriple, TokenId, Vocab};
use crate::rewards::{extract_think, RewardSpec};
use crate::{seed, Error, Result};

/// The last `capacity` group-mean rewards, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub step: usize,
    pub mean_reward: f64,
}

impl ReplayWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay window capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Rebuild from stored entries, checking ordering and capacity.
    pub fn from_entries(capacity: usize, entries: Vec<WindowEntry>) -> Result<Self> {
        let mut w = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::InvalidInput(format!(
                "{} window entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        for e in entries {
            w.update(e.mean_reward, e.step)?;
        }
        Ok(w)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.entries.is_empty())
            .then(|| self.entries.iter().map(|e| e.mean_reward).sum::<f64>() / self.entries.len() as f64)
    }

    /// Push a group mean for `step`, evicting the oldest entry when full.
    pub fn update(&mut self, group_mean_reward: f64, step: usize) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if step <= last.step {
                return Err(Error::InvalidInput(format!(
                    "window step {step} does not follow {}",
                    last.step
                )));
            }
        }
        if !group_mean_reward.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite window value {group_mean_reward}")));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(WindowEntry {
            step,
            mean_reward: group_mean_reward,
        });
        Ok(())
    }
}

pub fn update_window(window: &mut ReplayWindow, group_mean_reward: f64, step: usize) -> Result<()> {
    window.update(group_mean_reward, step)
}

/// Δ_R(x) = buffer mean − group mean; positive means harder than usual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEstimate {
    pub delta: f64,
    pub group_mean: f64,
    pub buffer_mean: f64,
}

/// An empty window reports the group's own mean as the buffer mean (Δ = 0).
pub fn estimate_difficulty(window: &ReplayWindow, group_rewards: &[f64]) -> Result<DifficultyEstimate> {
    if group_rewards.is_empty() {
        return Err(Error::InvalidInput("difficulty of an empty group".into()));
    }
    let group_mean = group_rewards.iter().sum::<f64>() / group_rewards.len() as f64;
    let buffer_mean = window.mean().unwrap_or(group_mean);
    Ok(DifficultyEstimate {
        delta: buffer_mean - group_mean,
        group_mean,
        buffer_mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    None,
    DecreaseDifficulty,
    IncreaseDifficulty,
}

impl AugmentationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentationKind::None => "none",
            AugmentationKind::DecreaseDifficulty => "decrease_difficulty",
            AugmentationKind::IncreaseDifficulty => "increase_difficulty",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationDecision {
    pub kind: AugmentationKind,
    pub delta: f64,
    /// min(|Δ|/Δ_max, 1).
    pub scale: f64,
    /// The highest-reward gt-conditioned response the hint was cut from.
    pub hint_source: Option<Vec<TokenId>>,
}

pub fn decide_augmentation(est: &DifficultyEstimate, delta_max: f64) -> Result<AugmentationDecision> {
    if !(delta_max > 0.0 && delta_max.is_finite()) {
        return Err(Error::Config(format!("delta_max must be > 0 (got {delta_max})")));
    }
    let kind = if est.delta > 0.0 {
        AugmentationKind::DecreaseDifficulty
    } else if est.delta < 0.0 {
        AugmentationKind::IncreaseDifficulty
    } else {
        AugmentationKind::None
    };
    Ok(AugmentationDecision {
        kind,
        delta: est.delta,
        scale: (est.delta.abs() / delta_max).min(1.0),
        hint_source: None,
    })
}

/// A sample with at most one of its input channels replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub base: TaskInstance,
    pub prompt_override: Option<Vec<TokenId>>,
    pub observation_override: Option<Vec<f64>>,
    pub provenance: AugmentationDecision,
}

impl AugmentedSample {
    pub fn unchanged(base: TaskInstance, provenance: AugmentationDecision) -> Self {
        Self {
            base,
            prompt_override: None,
            observation_override: None,
            provenance,
        }
    }

    /// The instance the policy actually sees; ground truth is the base's.
    pub fn effective(&self) -> TaskInstance {
        let mut x = self.base.clone();
        if let Some(q) = &self.prompt_override {
            x.prompt.clone_from(q);
        }
        if let Some(v) = &self.observation_override {
            x.observation.clone_from(v);
        }
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub delta_max: f64,
    /// Hint length at full scale, in tokens.
    pub h_max: usize,
    pub sigma_max: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            delta_max: 0.5,
            h_max: 4,
            sigma_max: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return Err(Error::Config("augmentation.delta_max must be > 0".into()));
        }
        if !(self.sigma_max > 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config("augmentation.sigma_max must be > 0".into()));
        }
        Ok(())
    }
}

fn check_kind(decision: &AugmentationDecision, want: AugmentationKind) -> Result<()> {
    if decision.kind != want {
        return Err(Error::InvalidInput(format!(
            "expected a {} decision, got {}",
            want.as_str(),
            decision.kind.as_str()
        )));
    }
    Ok(())
}

/// Everything hint injection needs to score its gt-conditioned rollouts.
#[derive(Clone, Copy, Debug)]
pub struct HintContext<'a> {
    pub triple: &'a PolicyTriple,
    pub vocab: &'a Vocab,
    pub reward: &'a RewardSpec,
    pub group_size: usize,
    pub h_max: usize,
}

/// Prompt-side guidance: roll out on `q + gt`, keep the best response, and
/// append `HINT` plus the first `ceil(scale·h_max)` tokens of its think
/// segment to `q`. When no response earns positive reward the first
/// `ceil(scale·|gt|)` answer tokens serve as the trace instead.
pub fn inject_hint(
    sample: &TaskInstance,
    decision: &AugmentationDecision,
    ctx: &HintContext<'_>,
    seed: u64,
) -> Result<AugmentedSample> {
    check_kind(decision, AugmentationKind::DecreaseDifficulty)?;
    let gt = sample.gt_answer.clone().unwrap_or_default();
    let mut conditioned = sample.clone();
    conditioned.prompt.extend(&gt);
    let group = sample_group(ctx.triple, &conditioned, ctx.group_size, seed)?;
    let scores: Vec<f64> = group
        .trajectories
        .iter()
        .map(|t| score_response(sample, &t.tokens, ctx.vocab, ctx.reward).total)
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let mut provenance = decision.clone();
    let trace: Vec<TokenId> = if scores[best] > 0.0 {
        let y = &group.trajectories[best].tokens;
        provenance.hint_source = Some(y.clone());
        let n = (decision.scale * ctx.h_max as f64).ceil() as usize;
        extract_think(y, ctx.vocab).into_iter().take(n).collect()
    } else {
        let n = (decision.scale * gt.len() as f64).ceil() as usize;
        gt.iter().copied().take(n).collect()
    };
    let mut prompt = sample.prompt.clone();
    prompt.push(Vocab::HINT);
    prompt.extend(trace);
    Ok(AugmentedSample {
        base: sample.clone(),
        prompt_override: Some(prompt),
        observation_override: None,
        provenance,
    })
}

/// Observation-side perturbation `ṽ = v + η`, `η ~ N(0, (scale·σ_max)² I)`.
pub fn inject_noise(
    sample: &TaskInstance,
    decision: &AugmentationDecision,
    sigma_max: f64,
    seed: u64,
) -> Result<AugmentedSample> {
    check_kind(decision, AugmentationKind::IncreaseDifficulty)?;
    if !(sigma_max > 0.0 && sigma_max.is_finite()) {
        return Err(Error::Config(format!("sigma_max must be > 0 (got {sigma_max})")));
    }
    let std = decision.scale * sigma_max;
    let observation = if std == 0.0 {
        sample.observation.clone()
    } else {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = seed::rng(seed, &[0x0e]);
        sample.observation.iter().map(|v| v + normal.sample(&mut rng)).collect()
    };
    Ok(AugmentedSample {
        base: sample.clone(),
        prompt_override: None,
        observation_override: Some(observation),
        provenance: decision.clone(),
    })
}

/// Apply whichever operator `decision` calls for.
pub fn augment(
    sample: &TaskInstance,
    decision: &AugmentationDecision,
    cfg: &AugmentationConfig,
    hint: &HintContext<'_>,
    seed: u64,
) -> Result<AugmentedSample> {
    match decision.kind {
        AugmentationKind::None => Ok(AugmentedSample::unchanged(sample.clone(), decision.clone())),
        AugmentationKind::DecreaseDifficulty => inject_hint(sample, decision, hint, seed),
        AugmentationKind::IncreaseDifficulty => inject_noise(sample, decision, cfg.sigma_max, seed),
    }
}

/// One line of `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationEvent {
    pub step: usize,
    pub sample_id: u64,
    pub delta: f64,
    pub kind: AugmentationKind,
    pub scale: f64,
}
