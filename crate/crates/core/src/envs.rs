//! Synthetic tasks standing in for video-question samples.
//!
//! An instance carries an observation vector (the "video"), a prompt and a
//! ground truth. Intrinsic difficulty is realized only by corrupting the
//! observation, so prompt-side hints and observation-side noise act on
//! separate channels.
//!
//! The hidden maps that tie observations to answers ("worlds") depend only on
//! `(feature_dim, vocab_size)`, never on the instance seed, so train and
//! evaluation sets drawn with different seeds share one world.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyParams, PolicyShape, TokenId, Vocab};
use crate::rewards::{
    accuracy_reward, composite_reward, extract_answer, format_reward, iou_reward, Interval,
    RewardBreakdown, RewardComponents, RewardSpec,
};
use crate::{par, seed, Error, Result};

/// Length of the temporal-grounding time axis, in task time units.
pub const TIME_HORIZON: f64 = 16.0;
pub const DEFAULT_FEATURE_DIM: usize = 8;
pub const DEFAULT_VOCAB_SIZE: usize = 16;
pub const DEFAULT_MAX_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    GroupedQa,
    TemporalGrounding,
    FormatOnly,
}

impl TaskFamily {
    /// Number of answer tokens in a well-formed response.
    pub fn answer_len(&self) -> usize {
        match self {
            TaskFamily::TemporalGrounding => 2,
            _ => 1,
        }
    }

    /// Enabled reward components for the family, all weights 1.
    pub fn default_reward(&self) -> RewardSpec {
        match self {
            TaskFamily::GroupedQa => RewardSpec {
                format: 1.0,
                accuracy: 1.0,
                iou: 0.0,
            },
            TaskFamily::TemporalGrounding => RewardSpec {
                format: 1.0,
                accuracy: 0.0,
                iou: 1.0,
            },
            TaskFamily::FormatOnly => RewardSpec {
                format: 1.0,
                accuracy: 0.0,
                iou: 0.0,
            },
        }
    }

    fn prompt(&self) -> Vec<TokenId> {
        match self {
            TaskFamily::GroupedQa => vec![Vocab::ANS_OPEN],
            TaskFamily::TemporalGrounding => vec![Vocab::THINK_CLOSE, Vocab::ANS_OPEN],
            TaskFamily::FormatOnly => vec![Vocab::THINK_OPEN],
        }
    }
}

/// x = (v, q) plus ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub family: TaskFamily,
    pub observation: Vec<f64>,
    pub prompt: Vec<TokenId>,
    pub gt_answer: Option<Vec<TokenId>>,
    pub gt_interval: Option<Interval>,
    pub intrinsic_difficulty: f64,
}

impl TaskInstance {
    /// A ground-truth-free instance; used where only the policy input matters.
    pub fn bare(observation: Vec<f64>, prompt: Vec<TokenId>) -> Self {
        Self {
            id: 0,
            family: TaskFamily::FormatOnly,
            observation,
            prompt,
            gt_answer: None,
            gt_interval: None,
            intrinsic_difficulty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidInput(format!("instance {} has an empty prompt", self.id)));
        }
        if self.observation.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("instance {} has non-finite features", self.id)));
        }
        match self.family {
            TaskFamily::GroupedQa if self.gt_answer.is_none() => Err(Error::InvalidInput(
                "grouped_qa instance without an answer".into(),
            )),
            TaskFamily::TemporalGrounding if self.gt_interval.is_none() => Err(
                Error::InvalidInput("temporal_grounding instance without an interval".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenSpec {
    pub family: TaskFamily,
    pub count: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub distractor_strength: f64,
    pub seed: u64,
}

impl Default for TaskGenSpec {
    fn default() -> Self {
        Self {
            family: TaskFamily::GroupedQa,
            count: 256,
            feature_dim: DEFAULT_FEATURE_DIM,
            vocab_size: DEFAULT_VOCAB_SIZE,
            distractor_strength: 0.3,
            seed: 0,
        }
    }
}

impl TaskGenSpec {
    pub fn validate(&self) -> Result<Vocab> {
        if self.count == 0 {
            return Err(Error::Config("task count must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_strength) {
            return Err(Error::Config("distractor_strength must lie in [0, 1]".into()));
        }
        let vocab = Vocab::new(self.vocab_size)?;
        if self.family == TaskFamily::TemporalGrounding && self.feature_dim < 2 {
            return Err(Error::Config("temporal grounding needs feature_dim >= 2".into()));
        }
        Ok(vocab)
    }

    pub fn generate(&self) -> Result<Vec<TaskInstance>> {
        match self.family {
            TaskFamily::GroupedQa => gen_grouped_qa(self),
            TaskFamily::TemporalGrounding => gen_temporal_grounding(self),
            TaskFamily::FormatOnly => gen_format_only(self),
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn mix(clean: &[f64], noise: &[f64], strength: f64) -> Vec<f64> {
    clean
        .iter()
        .zip(noise)
        .map(|(c, n)| (1.0 - strength) * c + strength * n)
        .collect()
}

/// Hidden linear map from observations to answer classes (unit-norm rows).
#[derive(Clone, Debug)]
pub struct QaWorld {
    pub rows: Vec<Vec<f64>>,
    first_content: TokenId,
}

impl QaWorld {
    pub fn new(feature_dim: usize, vocab: &Vocab) -> Self {
        let mut rng = seed::rng(0x51a0_u64, &[feature_dim as u64, vocab.size() as u64]);
        let rows = (0..vocab.num_content())
            .map(|_| {
                let r = gaussian_vec(&mut rng, feature_dim);
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                r.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Self {
            rows,
            first_content: vocab.first_content(),
        }
    }

    /// The linear probe: argmax of the hidden map, as an answer token.
    pub fn probe(&self, features: &[f64]) -> TokenId {
        let score = |r: &Vec<f64>| r.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
        let mut best = 0;
        for (k, r) in self.rows.iter().enumerate() {
            if score(r) > score(&self.rows[best]) {
                best = k;
            }
        }
        self.first_content + best as TokenId
    }
}

pub fn gen_grouped_qa(spec: &TaskGenSpec) -> Result<Vec<TaskInstance>> {
    let vocab = spec.validate()?;
    let world = QaWorld::new(spec.feature_dim, &vocab);
    Ok(par::map_indexed(spec.count, |i| {
        let mut rng = seed::rng(spec.seed, &[0x9a, i as u64]);
        let latent = gaussian_vec(&mut rng, spec.feature_dim);
        let distractor = gaussian_vec(&mut rng, spec.feature_dim);
        TaskInstance {
            id: i as u64,
            family: TaskFamily::GroupedQa,
            observation: mix(&latent, &distractor, spec.distractor_strength),
            prompt: TaskFamily::GroupedQa.prompt(),
            gt_answer: Some(vec![world.probe(&latent)]),
            gt_interval: None,
            intrinsic_difficulty: spec.distractor_strength,
        }
    }))
}

/// Discretization of `[0, TIME_HORIZON]` into one bin per content token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeBins {
    pub count: usize,
    first_content: TokenId,
}

impl TimeBins {
    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self {
            count: vocab.num_content(),
            first_content: vocab.first_content(),
        }
    }

    pub fn width(&self) -> f64 {
        TIME_HORIZON / self.count as f64
    }

    pub fn token(&self, bin: usize) -> TokenId {
        self.first_content + bin as TokenId
    }

    pub fn bin(&self, token: TokenId) -> Option<usize> {
        let b = token.checked_sub(self.first_content)? as usize;
        (b < self.count).then_some(b)
    }

    /// `[start_bin·w, (end_bin+1)·w]`.
    pub fn interval(&self, start_bin: usize, end_bin: usize) -> Result<Interval> {
        Interval::new(start_bin as f64 * self.width(), (end_bin + 1) as f64 * self.width())
    }

    /// Interval named by a two-token answer, if well-formed.
    pub fn decode(&self, answer: &[TokenId]) -> Option<Interval> {
        let [s, e] = answer else { return None };
        let (s, e) = (self.bin(*s)?, self.bin(*e)?);
        (s <= e).then(|| self.interval(s, e).ok()).flatten()
    }
}

/// Hidden `d × 2` encoder of normalized (start, end) centers.
#[derive(Clone, Debug)]
pub struct TemporalWorld {
    pub encoder: Vec<[f64; 2]>,
    pub bins: TimeBins,
}

impl TemporalWorld {
    pub fn new(feature_dim: usize, vocab: &Vocab) -> Self {
        let mut rng = seed::rng(0x7e_3b_u64, &[feature_dim as u64, vocab.size() as u64]);
        let encoder = (0..feature_dim)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        Self {
            encoder,
            bins: TimeBins::for_vocab(vocab),
        }
    }

    fn latent(&self, bin: usize) -> f64 {
        2.0 * ((bin as f64 + 0.5) / self.bins.count as f64) - 1.0
    }

    pub fn encode(&self, start_bin: usize, end_bin: usize) -> Vec<f64> {
        let u = [self.latent(start_bin), self.latent(end_bin)];
        self.encoder.iter().map(|a| a[0] * u[0] + a[1] * u[1]).collect()
    }

    /// Least-squares inversion of the encoder, rounded to bins.
    pub fn probe(&self, features: &[f64]) -> (usize, usize) {
        let (mut g00, mut g01, mut g11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (a, f) in self.encoder.iter().zip(features) {
            g00 += a[0] * a[0];
            g01 += a[0] * a[1];
            g11 += a[1] * a[1];
            b0 += a[0] * f;
            b1 += a[1] * f;
        }
        let det = g00 * g11 - g01 * g01;
        let u0 = (g11 * b0 - g01 * b1) / det;
        let u1 = (g00 * b1 - g01 * b0) / det;
        let to_bin = |u: f64| {
            let b = ((u + 1.0) / 2.0 * self.bins.count as f64 - 0.5).round();
            b.clamp(0.0, (self.bins.count - 1) as f64) as usize
        };
        let (s, e) = (to_bin(u0), to_bin(u1));
        (s.min(e), s.max(e))
    }
}

pub fn gen_temporal_grounding(spec: &TaskGenSpec) -> Result<Vec<TaskInstance>> {
    let vocab = spec.validate()?;
    let world = TemporalWorld::new(spec.feature_dim, &vocab);
    let bins = world.bins;
    par::map_indexed(spec.count, |i| {
        let mut rng = seed::rng(spec.seed, &[0x7e, i as u64]);
        let a = rng.random_range(0..bins.count);
        let b = rng.random_range(0..bins.count);
        let (s, e) = (a.min(b), a.max(b));
        let distractor = gaussian_vec(&mut rng, spec.feature_dim);
        Ok(TaskInstance {
            id: i as u64,
            family: TaskFamily::TemporalGrounding,
            observation: mix(&world.encode(s, e), &distractor, spec.distractor_strength),
            prompt: TaskFamily::TemporalGrounding.prompt(),
            gt_answer: Some(vec![bins.token(s), bins.token(e)]),
            gt_interval: Some(bins.interval(s, e)?),
            intrinsic_difficulty: spec.distractor_strength,
        })
    })
    .into_iter()
    .collect()
}

pub fn gen_format_only(spec: &TaskGenSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    Ok(par::map_indexed(spec.count, |i| {
        let mut rng = seed::rng(spec.seed, &[0xf0, i as u64]);
        TaskInstance {
            id: i as u64,
            family: TaskFamily::FormatOnly,
            observation: gaussian_vec(&mut rng, spec.feature_dim),
            prompt: TaskFamily::FormatOnly.prompt(),
            gt_answer: None,
            gt_interval: None,
            intrinsic_difficulty: spec.distractor_strength,
        }
    }))
}

/// Content-token budget of the think segment in the canonical layout.
pub fn think_budget(family: TaskFamily, max_len: usize) -> usize {
    // TO think TC AO answer AC END: five markers in all.
    max_len.saturating_sub(Vocab::NUM_MARKERS + family.answer_len())
}

/// `TO trace TC AO gt AC [END]`, with the trace cycling through the answer
/// tokens to fill the think budget.
pub fn reference_answer(sample: &TaskInstance, max_len: usize) -> Result<Vec<TokenId>> {
    let gt = match (&sample.family, &sample.gt_answer) {
        (TaskFamily::FormatOnly, _) | (_, None) => {
            return Err(Error::Unavailable(format!(
                "instance {} has no reference answer",
                sample.id
            )))
        }
        (_, Some(gt)) => gt,
    };
    let budget = max_len.saturating_sub(Vocab::NUM_MARKERS + gt.len());
    let mut y = vec![Vocab::THINK_OPEN];
    y.extend(gt.iter().cycle().take(budget));
    y.extend([Vocab::THINK_CLOSE, Vocab::ANS_OPEN]);
    y.extend(gt);
    y.push(Vocab::ANS_CLOSE);
    if y.len() < max_len {
        y.push(Vocab::END);
    }
    Ok(y)
}

/// Reward components of response `y` on `sample`, weighted by `spec`.
pub fn score_response(
    sample: &TaskInstance,
    y: &[TokenId],
    vocab: &Vocab,
    spec: &RewardSpec,
) -> RewardBreakdown {
    let mut c = RewardComponents {
        format: format_reward(y, vocab),
        ..RewardComponents::default()
    };
    if spec.accuracy > 0.0 {
        if let Some(gt) = &sample.gt_answer {
            c.accuracy = accuracy_reward(y, gt, vocab);
        }
    }
    if spec.iou > 0.0 {
        if let Some(gt) = &sample.gt_interval {
            let bins = TimeBins::for_vocab(vocab);
            c.iou = extract_answer(y)
                .and_then(|a| bins.decode(a))
                .map_or(0.0, |p| iou_reward(&p, gt));
        }
    }
    composite_reward(c, spec)
}

/// Position-wise slot of the canonical response layout: a fixed marker or
/// any content token.
pub fn canonical_layout(family: TaskFamily, max_len: usize) -> Vec<Option<TokenId>> {
    let mut slots = vec![Some(Vocab::THINK_OPEN)];
    slots.extend(std::iter::repeat_n(None, think_budget(family, max_len)));
    slots.extend([Some(Vocab::THINK_CLOSE), Some(Vocab::ANS_OPEN)]);
    slots.extend(std::iter::repeat_n(None, family.answer_len()));
    slots.push(Some(Vocab::ANS_CLOSE));
    if slots.len() < max_len {
        slots.push(Some(Vocab::END));
    }
    slots.truncate(max_len);
    slots
}

/// Warm-start knobs: how strongly the initial policy follows the response
/// format, and how much each context occurrence of a content token boosts it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyPrior {
    pub format_strength: f64,
    pub copy_strength: f64,
}

impl Default for PolicyPrior {
    fn default() -> Self {
        Self {
            format_strength: 6.0,
            copy_strength: 2.0,
        }
    }
}

/// Linear policy biased toward the canonical layout, with a copy prior on
/// the context bag and zero feature weights.
pub fn initial_policy(
    vocab: &Vocab,
    feature_dim: usize,
    max_len: usize,
    family: TaskFamily,
    prior: &PolicyPrior,
) -> Result<PolicyParams> {
    let mut p = PolicyParams::zeros(PolicyShape::linear(vocab.size(), feature_dim, max_len))?;
    for (pos, slot) in canonical_layout(family, max_len).into_iter().enumerate() {
        match slot {
            Some(marker) => {
                let i = p.pos_index(pos, marker);
                p.theta_mut()[i] += prior.format_strength;
            }
            None => {
                for t in vocab.content_tokens() {
                    let i = p.pos_index(pos, t);
                    p.theta_mut()[i] += prior.format_strength;
                }
            }
        }
    }
    for t in vocab.content_tokens() {
        if let Some(i) = p.ctx_index(t, t) {
            p.theta_mut()[i] += prior.copy_strength;
        }
    }
    Ok(p)
}

/// A hand-built batch on which an initial policy is either almost surely
/// right (easy half) or almost surely wrong (hard half).
#[derive(Clone, Debug)]
pub struct MixedDifficultyScenario {
    pub vocab: Vocab,
    pub instances: Vec<TaskInstance>,
    pub policy: PolicyParams,
    pub reward: RewardSpec,
}

/// Parameters of [`mixed_difficulty_scenario`].
#[derive(Clone, Copy, Debug)]
pub struct MixedDifficultyConfig {
    pub easy: usize,
    pub hard: usize,
    /// Gain of the feature → answer-logit map.
    pub feature_gain: f64,
    /// Norm of the (one-hot) observation.
    pub signal: f64,
    pub format_strength: f64,
    pub copy_strength: f64,
}

impl Default for MixedDifficultyConfig {
    fn default() -> Self {
        Self {
            easy: 4,
            hard: 4,
            feature_gain: 5.0,
            signal: 1.5,
            format_strength: 20.0,
            copy_strength: 4.0,
        }
    }
}

/// Vocab 16, d = 8, accuracy-only reward. Answer class `c` (content token
/// `5 + c`, `c < 8`) is read from feature `c`. Easy instances show their own
/// class; hard instances show a different class, which the policy follows
/// confidently, so they are unsolvable without prompt-side help.
pub fn mixed_difficulty_scenario(cfg: &MixedDifficultyConfig, seed: u64) -> Result<MixedDifficultyScenario> {
    let vocab = Vocab::new(DEFAULT_VOCAB_SIZE)?;
    let d = DEFAULT_FEATURE_DIM;
    let mut policy = initial_policy(
        &vocab,
        d,
        DEFAULT_MAX_LEN,
        TaskFamily::GroupedQa,
        &PolicyPrior {
            format_strength: cfg.format_strength,
            copy_strength: cfg.copy_strength,
        },
    )?;
    for c in 0..d {
        let t = vocab.first_content() + c as TokenId;
        let i = policy.feat_index(t, c).expect("linear policy");
        policy.theta_mut()[i] = cfg.feature_gain;
    }
    let mut rng = seed::rng(seed, &[0x3d]);
    let mut instances = Vec::with_capacity(cfg.easy + cfg.hard);
    for i in 0..cfg.easy + cfg.hard {
        let answer = rng.random_range(0..d);
        let shown = if i < cfg.easy {
            answer
        } else {
            (answer + rng.random_range(1..d)) % d
        };
        let mut observation = vec![0.0; d];
        observation[shown] = cfg.signal;
        instances.push(TaskInstance {
            id: i as u64,
            family: TaskFamily::GroupedQa,
            observation,
            prompt: TaskFamily::GroupedQa.prompt(),
            gt_answer: Some(vec![vocab.first_content() + answer as TokenId]),
            gt_interval: None,
            intrinsic_difficulty: if i < cfg.easy { 0.0 } else { 1.0 },
        });
    }
    Ok(MixedDifficultyScenario {
        vocab,
        instances,
        policy,
        reward: RewardSpec::new(0.0, 1.0, 0.0)?,
    })
}

/// One instance per line.
pub fn write_jsonl(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let inst: TaskInstance = serde_json::from_str(&line)?;
            inst.validate()?;
            out.push(inst);
        }
    }
    Ok(out)
}
