//! The optimization loop.
//!
//! One step: pick a batch, roll out `G` responses per sample from π_old,
//! optionally assess difficulty and re-roll augmented samples, compute the
//! algorithm's loss and gradient per group, average them in index order,
//! clip the global norm, take a gradient-descent step, push the batch's
//! pre-augmentation mean reward into the replay window and sync π_old on
//! schedule. Every random draw derives from `(seed, step, slot)`, so a run is
//! a pure function of its configuration.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantages::GroupRollout;
use crate::algorithms::{clip_grad_norm, compute_loss, Algorithm, Hyperparams, LossContext, LossReport, Mode, ValueGrad, ValueParams};
use crate::augmentation::{
    augment, decide_augmentation, estimate_difficulty, AugmentationConfig, AugmentationEvent, AugmentationKind,
    HintContext, ReplayWindow,
};
use crate::checkpoint::Checkpoint;
use crate::envs::{initial_policy, score_response, PolicyPrior, TaskGenSpec, TaskInstance, TimeBins};
use crate::policy::{greedy_decode, sample_group, sample_group_from, PolicyParams, PolicyTriple, Vocab};
use crate::rewards::{
    accuracy_metric, extract_answer, iou_reward, miou_metric, recall_at_m, vanishing_advantage_ratio, MetricsRow,
    RewardSpec,
};
use crate::{par, seed, Error, Result};

// Stream tags for seed derivation.
const BATCH: u64 = 0xba7c;
const ROLLOUT: u64 = 0x5011;
const AUGMENT: u64 = 0xa06;
const REROLL: u64 = 0x2e20;
const EVAL_SET: u64 = 0xe7a1;

/// Parameters beyond this magnitude push logit gaps far past the range of
/// `exp` in f64; the policy is saturated and training has diverged.
pub const PARAM_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub max_len: usize,
    pub format_strength: f64,
    pub copy_strength: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let prior = PolicyPrior::default();
        Self {
            max_len: crate::envs::DEFAULT_MAX_LEN,
            format_strength: prior.format_strength,
            copy_strength: prior.copy_strength,
        }
    }
}

impl PolicyConfig {
    pub fn prior(&self) -> PolicyPrior {
        PolicyPrior {
            format_strength: self.format_strength,
            copy_strength: self.copy_strength,
        }
    }
}

/// Resolved run configuration; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub augmentation_enabled: bool,
    pub old_sync_interval: usize,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_interval: usize,
    /// Checkpoint every this many steps (0: only after the last step).
    pub checkpoint_interval: usize,
    pub eval_count: usize,
    pub hyperparams: Hyperparams,
    pub task: TaskGenSpec,
    pub augmentation: AugmentationConfig,
    pub policy: PolicyConfig,
    /// Overrides the task family's default reward weights.
    pub reward: Option<RewardSpec>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::RegGrpo,
            seed: 0,
            steps: 100,
            batch_size: 8,
            augmentation_enabled: false,
            old_sync_interval: 1,
            eval_interval: 50,
            checkpoint_interval: 0,
            eval_count: 256,
            hyperparams: Hyperparams::default(),
            task: TaskGenSpec::default(),
            augmentation: AugmentationConfig::default(),
            policy: PolicyConfig::default(),
            reward: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.old_sync_interval == 0 {
            return Err(Error::Config("old_sync_interval must be >= 1".into()));
        }
        if self.eval_count == 0 {
            return Err(Error::Config("eval_count must be >= 1".into()));
        }
        self.hyperparams.validate()?;
        self.task.validate()?;
        self.augmentation.validate()?;
        if let Some(r) = &self.reward {
            r.validate()?;
        }
        if !(self.policy.format_strength.is_finite() && self.policy.copy_strength.is_finite()) {
            return Err(Error::Config("policy prior strengths must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn reward_spec(&self) -> RewardSpec {
        self.reward.unwrap_or_else(|| self.task.family.default_reward())
    }
}

/// The data and initial policy a run starts from.
#[derive(Clone, Debug)]
pub struct TrainingSetup {
    pub vocab: Vocab,
    pub train: Vec<TaskInstance>,
    pub eval: Vec<TaskInstance>,
    pub initial: PolicyParams,
    pub reward: RewardSpec,
}

impl TrainingSetup {
    /// Train and evaluation sets share one hidden world and differ by seed.
    pub fn from_config(cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.task.validate()?;
        let train = cfg.task.generate()?;
        let eval = TaskGenSpec {
            count: cfg.eval_count,
            seed: seed::derive(cfg.task.seed, &[EVAL_SET]),
            ..cfg.task.clone()
        }
        .generate()?;
        let initial = initial_policy(
            &vocab,
            cfg.task.feature_dim,
            cfg.policy.max_len,
            cfg.task.family,
            &cfg.policy.prior(),
        )?;
        Ok(Self {
            vocab,
            train,
            eval,
            initial,
            reward: cfg.reward_spec(),
        })
    }
}

/// One row of `steps.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub kl_value: f64,
    pub vanishing_ratio: f64,
    pub clip_active_fraction: f64,
    pub aug_none: usize,
    pub aug_decrease: usize,
    pub aug_increase: usize,
    pub skipped_pairs: usize,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,mean_reward,loss,grad_norm,kl_value,vanishing_ratio,\
clip_active_fraction,aug_none,aug_decrease,aug_increase,skipped_pairs";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.loss,
            self.grad_norm,
            self.kl_value,
            self.vanishing_ratio,
            self.clip_active_fraction,
            self.aug_none,
            self.aug_decrease,
            self.aug_increase,
            self.skipped_pairs
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::Parse(format!("steps.csv row has {} fields: `{line}`", f.len())));
        }
        let r = |i: usize| f[i].parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{}`", f[i])));
        let n = |i: usize| f[i].parse::<usize>().map_err(|_| Error::Parse(format!("bad count `{}`", f[i])));
        Ok(Self {
            step: n(0)?,
            mean_reward: r(1)?,
            loss: r(2)?,
            grad_norm: r(3)?,
            kl_value: r(4)?,
            vanishing_ratio: r(5)?,
            clip_active_fraction: r(6)?,
            aug_none: n(7)?,
            aug_decrease: n(8)?,
            aug_increase: n(9)?,
            skipped_pairs: n(10)?,
        })
    }
}

/// Greedy-decoding metrics on an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_reward: f64,
    pub acc: Option<f64>,
    pub miou: Option<f64>,
    pub r_at_03: Option<f64>,
    pub r_at_05: Option<f64>,
}

/// Metrics of `policy`'s argmax responses.
pub fn evaluate_policy(
    policy: &PolicyParams,
    eval_set: &[TaskInstance],
    vocab: &Vocab,
    spec: &RewardSpec,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let outputs = par::map_slice(eval_set, |x| greedy_decode(policy, x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = eval_set.len() as f64;
    let mean_reward = eval_set
        .iter()
        .zip(&outputs)
        .map(|(x, y)| score_response(x, y, vocab, spec).total)
        .sum::<f64>()
        / n;

    let with_answer: Vec<(usize, &Vec<u32>)> = eval_set
        .iter()
        .enumerate()
        .filter_map(|(i, x)| x.gt_answer.as_ref().map(|a| (i, a)))
        .collect();
    let acc = if with_answer.is_empty() {
        None
    } else {
        let preds: Vec<Option<Vec<u32>>> = with_answer
            .iter()
            .map(|(i, _)| extract_answer(&outputs[*i]).map(<[u32]>::to_vec))
            .collect();
        let gts: Vec<Vec<u32>> = with_answer.iter().map(|(_, a)| (*a).clone()).collect();
        Some(accuracy_metric(&preds, &gts)?)
    };

    let bins = TimeBins::for_vocab(vocab);
    let ious: Vec<f64> = eval_set
        .iter()
        .zip(&outputs)
        .filter_map(|(x, y)| {
            let gt = x.gt_interval.as_ref()?;
            Some(extract_answer(y).and_then(|a| bins.decode(a)).map_or(0.0, |p| iou_reward(&p, gt)))
        })
        .collect();
    let (miou, r3, r5) = if ious.is_empty() {
        (None, None, None)
    } else {
        (
            Some(miou_metric(&ious)?),
            Some(recall_at_m(&ious, 0.3)?),
            Some(recall_at_m(&ious, 0.5)?),
        )
    };
    Ok(EvalReport {
        count: eval_set.len(),
        mean_reward,
        acc,
        miou,
        r_at_03: r3,
        r_at_05: r5,
    })
}

/// Evaluate the current member of the triple.
pub fn evaluate(triple: &PolicyTriple, eval_set: &[TaskInstance], vocab: &Vocab, spec: &RewardSpec) -> Result<EvalReport> {
    evaluate_policy(&triple.current, eval_set, vocab, spec)
}

/// `π_old ← π_θ`.
pub fn sync_old_policy(triple: &mut PolicyTriple) {
    triple.sync_old();
}

/// Mutable training state; exactly what a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub triple: PolicyTriple,
    pub value: ValueParams,
    pub window: ReplayWindow,
    pub next_step: usize,
    pub pending_vanishing: Vec<f64>,
}

/// Everything produced by one step, for logging and tests.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub log: StepLog,
    pub events: Vec<AugmentationEvent>,
    /// The groups the update was computed from (after augmentation).
    pub groups: Vec<GroupRollout>,
    /// The averaged, clipped gradient that was applied.
    pub applied_grad: Vec<f64>,
}

pub struct Trainer<'a> {
    cfg: &'a TrainerConfig,
    setup: &'a TrainingSetup,
    state: TrainerState,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len().max(1) as f64;
    xs.sum::<f64>() / n
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainerConfig, setup: &'a TrainingSetup) -> Result<Self> {
        cfg.validate()?;
        if setup.train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let state = TrainerState {
            triple: PolicyTriple::new(setup.initial.clone()),
            value: ValueParams::zeros(setup.initial.shape().feature_dim),
            window: ReplayWindow::new(cfg.hyperparams.window)?,
            next_step: 0,
            pending_vanishing: Vec::new(),
        };
        Ok(Self { cfg, setup, state })
    }

    pub fn from_checkpoint(cfg: &'a TrainerConfig, setup: &'a TrainingSetup, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, setup)?;
        if ckpt.algorithm != cfg.algorithm || ckpt.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was written by {} seed {}, config asks for {} seed {}",
                ckpt.algorithm, ckpt.seed, cfg.algorithm, cfg.seed
            )));
        }
        if ckpt.triple.shape() != setup.initial.shape() {
            return Err(Error::Descriptor("checkpoint policy shape differs from the configured one".into()));
        }
        if ckpt.triple.reference() != &setup.initial {
            return Err(Error::Config("checkpoint reference policy does not match this configuration".into()));
        }
        t.state = TrainerState {
            triple: ckpt.triple,
            value: ckpt.value,
            window: ckpt.window,
            next_step: ckpt.next_step,
            pending_vanishing: ckpt.pending_vanishing,
        };
        Ok(t)
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            algorithm: self.cfg.algorithm,
            seed: self.cfg.seed,
            next_step: self.state.next_step,
            triple: self.state.triple.clone(),
            value: self.state.value.clone(),
            window: self.state.window.clone(),
            pending_vanishing: self.state.pending_vanishing.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.next_step >= self.cfg.steps
    }

    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.setup.train.len();
        let b = self.cfg.batch_size;
        if b >= n {
            return (0..b).map(|i| i % n).collect();
        }
        let mut rng = seed::rng(self.cfg.seed, &[BATCH, step as u64]);
        rand::seq::index::sample(&mut rng, n, b).into_vec()
    }

    fn score(&self, rollout: &mut GroupRollout) {
        let sample = rollout.sample.clone();
        let (vocab, reward) = (&self.setup.vocab, &self.setup.reward);
        rollout.assign_rewards(|y| score_response(&sample, y, vocab, reward).total);
    }

    fn rollout(&self, sample: &TaskInstance, stream: u64) -> Result<GroupRollout> {
        let mut r = sample_group_from(
            &self.state.triple,
            sample,
            self.cfg.hyperparams.group_size,
            stream,
            self.cfg.algorithm.sampler(),
        )?;
        self.score(&mut r);
        Ok(r)
    }

    fn abort(&self, step: usize, reason: String, groups: &[GroupRollout]) -> Error {
        let dump = serde_json::json!({
            "step": step,
            "algorithm": self.cfg.algorithm.id(),
            "reason": reason,
            "rollouts": groups,
        });
        Error::NumericAbort {
            step,
            reason,
            dump: serde_json::to_string_pretty(&dump).unwrap_or_default(),
        }
    }

    /// Run one optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.state.next_step;
        let cfg = self.cfg;
        let seed = cfg.seed;
        let hp = &cfg.hyperparams;
        let batch = self.batch_indices(s);

        let base = par::map_indexed(batch.len(), |b| {
            self.rollout(&self.setup.train[batch[b]], seed::derive(seed, &[ROLLOUT, s as u64, b as u64]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let pre_means: Vec<f64> = base.iter().map(GroupRollout::mean_reward).collect();

        let mut events = Vec::new();
        let (mut n_none, mut n_dec, mut n_inc) = (0, 0, 0);
        let groups = if cfg.augmentation_enabled {
            let hint = HintContext {
                triple: &self.state.triple,
                vocab: &self.setup.vocab,
                reward: &self.setup.reward,
                group_size: hp.group_size,
                h_max: cfg.augmentation.h_max,
            };
            let out = par::map_indexed(base.len(), |b| -> Result<(GroupRollout, AugmentationEvent)> {
                let est = estimate_difficulty(&self.state.window, &base[b].rewards)?;
                let decision = decide_augmentation(&est, cfg.augmentation.delta_max)?;
                let sample = &base[b].sample;
                let event = AugmentationEvent {
                    step: s,
                    sample_id: sample.id,
                    delta: est.delta,
                    kind: decision.kind,
                    scale: decision.scale,
                };
                if decision.kind == AugmentationKind::None {
                    return Ok((base[b].clone(), event));
                }
                let aug = augment(
                    sample,
                    &decision,
                    &cfg.augmentation,
                    &hint,
                    seed::derive(seed, &[AUGMENT, s as u64, b as u64]),
                )?;
                let rerolled = self.rollout(&aug.effective(), seed::derive(seed, &[REROLL, s as u64, b as u64]))?;
                Ok((rerolled, event))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut groups = Vec::with_capacity(out.len());
            for (g, e) in out {
                match e.kind {
                    AugmentationKind::None => n_none += 1,
                    AugmentationKind::DecreaseDifficulty => n_dec += 1,
                    AugmentationKind::IncreaseDifficulty => n_inc += 1,
                }
                groups.push(g);
                events.push(e);
            }
            groups
        } else {
            n_none = base.len();
            base
        };

        let ctx = LossContext {
            value: Some(&self.state.value),
            frozen_stats: None,
        };
        let current = &self.state.triple.current;
        let reports: Vec<LossReport> = par::map_slice(&groups, |g| compute_loss(cfg.algorithm, current, g, hp, ctx, Mode::WithGrad))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        if let Some(i) = reports.iter().position(|r| !r.is_finite()) {
            return Err(self.abort(s, format!("non-finite loss or gradient in group {i}"), &groups[i..=i]));
        }

        let b = reports.len() as f64;
        let mut grad = vec![0.0; current.num_params()];
        for r in &reports {
            for (g, x) in grad.iter_mut().zip(&r.grad) {
                *g += x;
            }
        }
        for g in &mut grad {
            *g /= b;
        }
        let grad_norm = clip_grad_norm(&mut grad, hp.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(self.abort(s, "gradient norm overflowed".into(), &groups));
        }

        let value_grad = cfg.algorithm.uses_value_model().then(|| {
            let vs: Vec<&ValueGrad> = reports.iter().filter_map(|r| r.value.as_ref()).collect();
            let d = self.state.value.weights.len();
            let n = vs.len().max(1) as f64;
            ValueGrad {
                loss: vs.iter().map(|v| v.loss).sum::<f64>() / n,
                weights: (0..d).map(|j| vs.iter().map(|v| v.weights[j]).sum::<f64>() / n).collect(),
                bias: vs.iter().map(|v| v.bias).sum::<f64>() / n,
            }
        });

        let lr = hp.learning_rate;
        for (t, g) in self.state.triple.current.theta_mut().iter_mut().zip(&grad) {
            *t -= lr * g;
        }
        if let Some(vg) = &value_grad {
            self.state.value.apply(vg, lr);
        }
        if self.state.triple.current.theta().iter().any(|x| !x.is_finite()) || !self.state.value.is_finite() {
            return Err(self.abort(s, "parameters became non-finite".into(), &groups));
        }
        let peak = self.state.triple.current.theta().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if peak > PARAM_LIMIT {
            return Err(self.abort(s, format!("parameters diverged (max |θ| = {peak:e} > {PARAM_LIMIT:e})"), &groups));
        }

        let batch_mean = mean(pre_means.iter().copied());
        self.state.window.update(batch_mean, s)?;
        if (s + 1).is_multiple_of(cfg.old_sync_interval) {
            self.state.triple.sync_old();
        }
        self.state.next_step = s + 1;

        let rewards: Vec<&[f64]> = groups.iter().map(|g| g.rewards.as_slice()).collect();
        let log = StepLog {
            step: s,
            mean_reward: batch_mean,
            loss: mean(reports.iter().map(|r| r.loss)),
            grad_norm,
            kl_value: mean(reports.iter().map(|r| r.diagnostics.kl_value)),
            vanishing_ratio: vanishing_advantage_ratio(&rewards),
            clip_active_fraction: mean(reports.iter().map(|r| r.diagnostics.clip_active_fraction)),
            aug_none: n_none,
            aug_decrease: n_dec,
            aug_increase: n_inc,
            skipped_pairs: reports.iter().map(|r| r.diagnostics.skipped_pairs).sum(),
        };
        Ok(StepRecord {
            log,
            events,
            groups,
            applied_grad: grad,
        })
    }
}

/// Final state plus the step logs produced in this invocation.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub triple: PolicyTriple,
    pub value: ValueParams,
    pub logs: Vec<StepLog>,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: usize,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub first_step_mean_reward: Option<f64>,
    pub last_step_mean_reward: Option<f64>,
    pub reference_unchanged: bool,
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const STEPS: &'static str = "steps.csv";
    pub const METRICS: &'static str = "metrics.csv";
    pub const EVENTS: &'static str = "events.jsonl";
    pub const SUMMARY: &'static str = "summary.json";
    pub const ABORT_DUMP: &'static str = "abort_dump.json";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step}.ckpt"))
    }

    /// Keep the header and the lines `keep` accepts; create with `header`
    /// if missing.
    fn prepare(&self, name: &str, header: Option<&str>, keep: impl Fn(&str) -> bool) -> Result<File> {
        let path = self.path(name);
        let mut kept = Vec::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if (i == 0 && header.is_some()) || keep(&line) {
                    kept.push(line);
                }
            }
        }
        if kept.is_empty() {
            if let Some(h) = header {
                kept.push(h.to_string());
            }
        }
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for l in kept {
            writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
        }
        drop(f);
        OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
    }
}

fn on_interval(step: usize, interval: usize) -> bool {
    interval > 0 && step.is_multiple_of(interval)
}

fn leading_step(line: &str) -> Option<usize> {
    line.split(',').next()?.parse().ok()
}

fn event_step(line: &str) -> Option<usize> {
    serde_json::from_str::<AugmentationEvent>(line).ok().map(|e| e.step)
}

fn metrics_row(step: usize, eval: &EvalReport, pending: &[f64]) -> MetricsRow {
    MetricsRow {
        step,
        mean_reward: eval.mean_reward,
        acc: eval.acc,
        miou: eval.miou,
        r_at_03: eval.r_at_03,
        r_at_05: eval.r_at_05,
        vanishing_ratio: mean(pending.iter().copied()),
    }
}

/// Drive `trainer` to the configured step count, optionally mirroring
/// everything into a run directory.
pub fn run_trainer(mut trainer: Trainer<'_>, dir: Option<&RunDir>) -> Result<RunOutput> {
    let cfg = trainer.cfg;
    let setup = trainer.setup;
    let start = trainer.state.next_step;
    let mut files = None;
    if let Some(d) = dir {
        fs::create_dir_all(&d.root).map_err(|e| Error::io(&d.root, e))?;
        let cfg_path = d.path(RunDir::CONFIG);
        fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        let steps = d.prepare(RunDir::STEPS, Some(StepLog::CSV_HEADER), |l| leading_step(l).is_some_and(|s| s < start))?;
        // A final-step row from a shorter run is dropped unless a full run
        // would also have written it.
        let metrics = d.prepare(RunDir::METRICS, Some(MetricsRow::CSV_HEADER), |l| {
            leading_step(l).is_some_and(|s| s < start || (s == start && on_interval(s, cfg.eval_interval)))
        })?;
        let events = d.prepare(RunDir::EVENTS, None, |l| event_step(l).is_some_and(|s| s < start))?;
        files = Some((steps, metrics, events));
    }
    let io = |d: &RunDir, name: &str, e| Error::io(d.path(name), e);

    let initial_eval = evaluate_policy(trainer.state.triple.reference(), &setup.eval, &setup.vocab, &setup.reward)?;
    let mut logs = Vec::new();
    while !trainer.is_done() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(err @ Error::NumericAbort { .. }) => {
                if let (Some(d), Error::NumericAbort { dump, .. }) = (dir, &err) {
                    let p = d.path(RunDir::ABORT_DUMP);
                    fs::write(&p, dump).map_err(|e| Error::io(&p, e))?;
                }
                return Err(err);
            }
            Err(e) => return Err(e),
        };
        let done = trainer.state.next_step;
        trainer.state.pending_vanishing.push(rec.log.vanishing_ratio);
        if let (Some(d), Some((steps, _, events))) = (dir, files.as_mut()) {
            writeln!(steps, "{}", rec.log.to_csv()).map_err(|e| io(d, RunDir::STEPS, e))?;
            for e in &rec.events {
                writeln!(events, "{}", serde_json::to_string(e)?).map_err(|e| io(d, RunDir::EVENTS, e))?;
            }
        }
        let last = done == cfg.steps;
        let scheduled = on_interval(done, cfg.eval_interval);
        if last || scheduled {
            let eval = evaluate(&trainer.state.triple, &setup.eval, &setup.vocab, &setup.reward)?;
            let row = metrics_row(done, &eval, &trainer.state.pending_vanishing);
            // Keep the buffer after an unscheduled final eval so the saved
            // state matches a longer run at the same step.
            if scheduled {
                trainer.state.pending_vanishing.clear();
            }
            if let (Some(d), Some((_, metrics, _))) = (dir, files.as_mut()) {
                writeln!(metrics, "{}", row.to_csv()).map_err(|e| io(d, RunDir::METRICS, e))?;
            }
        }
        if let Some(d) = dir {
            if last || on_interval(done, cfg.checkpoint_interval) {
                trainer.checkpoint().save(&d.checkpoint_path(done))?;
            }
        }
        logs.push(rec.log);
    }

    let final_eval = evaluate(&trainer.state.triple, &setup.eval, &setup.vocab, &setup.reward)?;
    if let Some(d) = dir {
        let all: Vec<StepLog> = read_steps_csv(&d.path(RunDir::STEPS))?;
        let summary = Summary {
            algorithm: cfg.algorithm,
            seed: cfg.seed,
            steps: cfg.steps,
            initial_eval: initial_eval.clone(),
            final_eval: final_eval.clone(),
            first_step_mean_reward: all.first().map(|l| l.mean_reward),
            last_step_mean_reward: all.last().map(|l| l.mean_reward),
            reference_unchanged: trainer.state.triple.reference() == &setup.initial,
        };
        let p = d.path(RunDir::SUMMARY);
        fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(RunOutput {
        triple: trainer.state.triple,
        value: trainer.state.value,
        logs,
        initial_eval,
        final_eval,
    })
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(StepLog::from_csv).collect()
}

/// Train in memory from a configuration.
pub fn train_run(config: &TrainerConfig) -> Result<RunOutput> {
    let setup = TrainingSetup::from_config(config)?;
    run_trainer(Trainer::new(config, &setup)?, None)
}

/// Train into `dir`, resuming from `resume` when given.
pub fn train_in_dir(config: &TrainerConfig, dir: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    let setup = TrainingSetup::from_config(config)?;
    let trainer = match resume {
        Some(p) => Trainer::from_checkpoint(config, &setup, Checkpoint::load(p, Some(setup.initial.shape()))?)?,
        None => Trainer::new(config, &setup)?,
    };
    run_trainer(trainer, Some(&RunDir::new(dir)))
}

/// A single rollout group for `sample` under the current old policy, scored
/// with `spec`. Convenience for diagnostics and tests.
pub fn scored_group(
    triple: &PolicyTriple,
    sample: &TaskInstance,
    vocab: &Vocab,
    spec: &RewardSpec,
    group_size: usize,
    stream: u64,
) -> Result<GroupRollout> {
    let mut r = sample_group(triple, sample, group_size, stream)?;
    r.assign_rewards(|y| score_response(sample, y, vocab, spec).total);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{reference_answer, TaskFamily};

    fn small() -> TrainerConfig {
        TrainerConfig {
            steps: 3,
            batch_size: 4,
            eval_count: 32,
            eval_interval: 2,
            task: TaskGenSpec {
                count: 16,
                ..TaskGenSpec::default()
            },
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let cfg = TrainerConfig::from_json(r#"{"algorithm": "grpo", "steps": 5}"#).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Grpo);
        assert_eq!(cfg.hyperparams.group_size, 8);
        assert_eq!(cfg.hyperparams.window, 100);
        assert_eq!(cfg.hyperparams.kl_beta, 0.1);
        assert!(TrainerConfig::from_json(r#"{"stepz": 5}"#).is_err());
        assert!(TrainerConfig::from_json(r#"{"hyperparams": {"klbeta": 1}}"#).is_err());
        let err = TrainerConfig::from_json(r#"{"algorithm": "sgd"}"#).unwrap_err().to_string();
        assert!(err.contains("ppo") || err.contains("unknown variant"), "{err}");
        let round = TrainerConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = small();
        let a = train_run(&cfg).unwrap();
        let b = train_run(&cfg).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.triple, b.triple);
        assert_eq!(a.logs.len(), 3);
        assert_eq!(a.triple.reference(), b.triple.reference());
    }

    #[test]
    fn every_algorithm_runs() {
        for alg in Algorithm::ALL {
            let cfg = TrainerConfig {
                algorithm: alg,
                augmentation_enabled: true,
                ..small()
            };
            let out = train_run(&cfg).unwrap();
            assert!(out.logs.iter().all(|l| l.loss.is_finite() && (0.0..=1.0).contains(&l.vanishing_ratio)));
        }
    }

    #[test]
    fn sync_semantics() {
        let setup = TrainingSetup::from_config(&small()).unwrap();
        let mut triple = PolicyTriple::new(setup.initial.clone());
        triple.current.theta_mut()[0] += 1.0;
        let reference = triple.reference().clone();
        sync_old_policy(&mut triple);
        assert_eq!(triple.old, triple.current);
        let once = triple.clone();
        sync_old_policy(&mut triple);
        assert_eq!(triple, once);
        assert_eq!(triple.reference(), &reference);
        let g = scored_group(&triple, &setup.train[0], &setup.vocab, &setup.reward, 4, 1).unwrap();
        assert!(g.trajectories.iter().all(|t| t.current.total == t.old.total));
    }

    #[test]
    fn reference_policy_scores_perfectly() {
        // A policy that always emits the reference answer: build it by
        // evaluating the answers directly through the scoring path.
        let setup = TrainingSetup::from_config(&small()).unwrap();
        let outs: Vec<f64> = setup
            .eval
            .iter()
            .map(|x| {
                let y = reference_answer(x, 8).unwrap();
                score_response(x, &y, &setup.vocab, &setup.reward).total
            })
            .collect();
        assert!(outs.iter().all(|&r| r == setup.reward.max_total()));
        assert_eq!(setup.eval[0].family, TaskFamily::GroupedQa);
    }

    #[test]
    fn huge_learning_rate_aborts_with_dump() {
        let mut cfg = small();
        cfg.hyperparams.learning_rate = 1e9;
        match train_run(&cfg) {
            Err(Error::NumericAbort { step, dump, .. }) => {
                assert_eq!(step, 0);
                let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
                assert!(v["rollouts"].as_array().is_some_and(|r| !r.is_empty()));
            }
            other => panic!("expected abort, got {:?}", other.map(|o| o.logs)),
        }
    }

    #[test]
    fn step_log_csv_round_trip() {
        let out = train_run(&small()).unwrap();
        for l in &out.logs {
            assert_eq!(&StepLog::from_csv(&l.to_csv()).unwrap(), l);
        }
        assert_eq!(StepLog::CSV_HEADER.split(',').count(), 11);
    }
}
