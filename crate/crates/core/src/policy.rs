//! Autoregressive categorical sequence policy.
//!
//! Logits at step `t` are linear in the parameter vector:
//!
//! ```text
//! logit[k] = pos[t][k] + trans[prev][k]                       (tabular)
//!          + Σ_j feat[k][j]·v_j + Σ_p count(p)·ctx[p][k]      (linear)
//! ```
//!
//! where `prev` is the previous token (or a BOS slot), `v` the observation
//! features and `count(p)` the number of occurrences of token `p` in the
//! prompt plus the generated prefix. Because logits are linear in θ, the
//! score function of every token is a sparse scatter of `onehot(y) − softmax`
//! and all losses compose it with per-token weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantages::{GroupRollout, Trajectory};
use crate::envs::TaskInstance;
use crate::{par, seed, Error, Result};

pub type TokenId = u32;

/// Enumeration refuses supports larger than this.
pub const ENUMERATION_CAP: u128 = 65_536;

/// Token alphabet with the distinguished response-format markers.
///
/// Ids `0..5` are reserved for END, THINK_OPEN, THINK_CLOSE, ANS_OPEN and
/// ANS_CLOSE; everything from 5 up is a content token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub const END: TokenId = 0;
    pub const THINK_OPEN: TokenId = 1;
    pub const THINK_CLOSE: TokenId = 2;
    pub const ANS_OPEN: TokenId = 3;
    pub const ANS_CLOSE: TokenId = 4;
    /// Prompt-side marker introducing an injected reasoning trace. Shares the
    /// THINK_OPEN id: prompts and responses are separate channels.
    pub const HINT: TokenId = Self::THINK_OPEN;
    pub const NUM_MARKERS: usize = 5;

    pub fn new(size: usize) -> Result<Self> {
        if size < Self::NUM_MARKERS + 1 {
            return Err(Error::Config(format!(
                "vocab size must be at least {} (got {size})",
                Self::NUM_MARKERS + 1
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_marker(&self, t: TokenId) -> bool {
        (t as usize) < Self::NUM_MARKERS
    }

    pub fn contains(&self, t: TokenId) -> bool {
        (t as usize) < self.size
    }

    /// First content token id.
    pub fn first_content(&self) -> TokenId {
        Self::NUM_MARKERS as TokenId
    }

    pub fn num_content(&self) -> usize {
        self.size - Self::NUM_MARKERS
    }

    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> {
        (Self::NUM_MARKERS as TokenId)..(self.size as TokenId)
    }

    pub fn markers(&self) -> [TokenId; 5] {
        [
            Self::END,
            Self::THINK_OPEN,
            Self::THINK_CLOSE,
            Self::ANS_OPEN,
            Self::ANS_CLOSE,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Position bias + previous-token transition table. Ignores the sample.
    Tabular,
    /// Tabular blocks plus observation features and a prompt/prefix bag.
    Linear,
}

impl Parameterization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Parameterization::Tabular => "tabular",
            Parameterization::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(Parameterization::Tabular),
            "linear" => Ok(Parameterization::Linear),
            other => Err(Error::Parse(format!("unknown parameterization `{other}`"))),
        }
    }
}

/// Parameterization descriptor shared by every member of a [`PolicyTriple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub parameterization: Parameterization,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub max_len: usize,
    /// Generation halts after emitting this token. `None` gives fixed-length
    /// sequences of exactly `max_len` tokens.
    pub stop_token: Option<TokenId>,
}

impl PolicyShape {
    pub fn linear(vocab_size: usize, feature_dim: usize, max_len: usize) -> Self {
        Self {
            parameterization: Parameterization::Linear,
            vocab_size,
            feature_dim,
            max_len,
            stop_token: Some(Vocab::END),
        }
    }

    pub fn tabular(vocab_size: usize, max_len: usize, stop_token: Option<TokenId>) -> Self {
        Self {
            parameterization: Parameterization::Tabular,
            vocab_size,
            feature_dim: 0,
            max_len,
            stop_token,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("policy vocab must have at least 2 tokens".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if let Some(stop) = self.stop_token {
            if stop as usize >= self.vocab_size {
                return Err(Error::Config(format!("stop token {stop} outside vocab")));
            }
        }
        if self.parameterization == Parameterization::Linear && self.feature_dim == 0 {
            return Err(Error::Config("linear policies need feature_dim >= 1".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let v = self.vocab_size;
        let pos = 0;
        let trans = pos + self.max_len * v;
        let feat = trans + (v + 1) * v;
        let (ctx, end) = match self.parameterization {
            Parameterization::Tabular => (feat, feat),
            Parameterization::Linear => {
                let ctx = feat + v * self.feature_dim;
                (ctx, ctx + v * v)
            }
        };
        Layout {
            v,
            d: self.feature_dim,
            trans,
            feat,
            ctx,
            len: end,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    v: usize,
    d: usize,
    trans: usize,
    feat: usize,
    ctx: usize,
    len: usize,
}

/// The parameter vector θ together with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            theta: vec![0.0; shape.num_params()],
            shape,
        })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random(shape: PolicyShape, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = seed::rng(seed, &[0x7061_7261]);
        for x in &mut p.theta {
            *x = rng.random_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn from_vec(shape: PolicyShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.num_params() {
            return Err(Error::Descriptor(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                theta.len()
            )));
        }
        Ok(Self { shape, theta })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn pos_index(&self, position: usize, token: TokenId) -> usize {
        assert!(position < self.shape.max_len && (token as usize) < self.shape.vocab_size);
        position * self.shape.vocab_size + token as usize
    }

    /// `prev = None` addresses the beginning-of-sequence row.
    pub fn trans_index(&self, prev: Option<TokenId>, token: TokenId) -> usize {
        let l = self.shape.layout();
        let row = prev.map_or(l.v, |p| p as usize);
        l.trans + row * l.v + token as usize
    }

    pub fn feat_index(&self, token: TokenId, dim: usize) -> Option<usize> {
        let l = self.shape.layout();
        (self.shape.parameterization == Parameterization::Linear && dim < l.d)
            .then(|| l.feat + token as usize * l.d + dim)
    }

    pub fn ctx_index(&self, context_token: TokenId, token: TokenId) -> Option<usize> {
        let l = self.shape.layout();
        (self.shape.parameterization == Parameterization::Linear)
            .then(|| l.ctx + context_token as usize * l.v + token as usize)
    }

    /// Checkpoint text: one header line, then one parameter per line with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let s = &self.shape;
        let mut out = format!(
            "policy {} vocab={} dim={} max_len={} stop={} params={}\n",
            s.parameterization.as_str(),
            s.vocab_size,
            s.feature_dim,
            s.max_len,
            s.stop_token.map_or_else(|| "none".to_string(), |t| t.to_string()),
            self.theta.len()
        );
        for x in &self.theta {
            out.push_str(&format!("{x:.16e}\n"));
        }
        out
    }

    /// Parse the header line produced by [`PolicyParams::to_text`].
    pub fn parse_header(line: &str) -> Result<(PolicyShape, usize)> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("policy") {
            return Err(Error::Parse(format!("not a policy header: `{line}`")));
        }
        let parameterization: Parameterization = parts
            .next()
            .ok_or_else(|| Error::Parse("missing parameterization".into()))?
            .parse()?;
        let mut field = |name: &str| -> Result<String> {
            let tok = parts
                .next()
                .ok_or_else(|| Error::Parse(format!("missing `{name}`")))?;
            tok.strip_prefix(&format!("{name}="))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("expected `{name}=`, got `{tok}`")))
        };
        let num = |s: String| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse(format!("bad integer `{s}`")))
        };
        let vocab_size = num(field("vocab")?)?;
        let feature_dim = num(field("dim")?)?;
        let max_len = num(field("max_len")?)?;
        let stop = field("stop")?;
        let stop_token = if stop == "none" {
            None
        } else {
            Some(num(stop)? as TokenId)
        };
        let count = num(field("params")?)?;
        let shape = PolicyShape {
            parameterization,
            vocab_size,
            feature_dim,
            max_len,
            stop_token,
        };
        shape.validate()?;
        Ok((shape, count))
    }

    /// Inverse of [`PolicyParams::to_text`]. Consumes lines from `lines`.
    pub fn from_lines<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Self> {
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing policy header".into()))?;
        let (shape, count) = Self::parse_header(header)?;
        if count != shape.num_params() {
            return Err(Error::Descriptor(format!(
                "header declares {count} params but shape needs {}",
                shape.num_params()
            )));
        }
        let theta = (0..count)
            .map(|_| {
                let l = lines
                    .next()
                    .ok_or_else(|| Error::Parse("truncated parameter list".into()))?;
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vec(shape, theta)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_lines(&mut text.lines())
    }

    fn check_sample(&self, sample: &TaskInstance) -> Result<()> {
        if self.shape.parameterization == Parameterization::Linear {
            if sample.observation.len() != self.shape.feature_dim {
                return Err(Error::InvalidInput(format!(
                    "observation has {} features, policy expects {}",
                    sample.observation.len(),
                    self.shape.feature_dim
                )));
            }
            if let Some(bad) = sample
                .prompt
                .iter()
                .find(|&&t| t as usize >= self.shape.vocab_size)
            {
                return Err(Error::InvalidInput(format!("prompt token {bad} out of range")));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, y: &[TokenId]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if y.len() > self.shape.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds max_len {}",
                y.len(),
                self.shape.max_len
            )));
        }
        if let Some(bad) = y.iter().find(|&&t| t as usize >= self.shape.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    fn cursor<'a>(&'a self, sample: &'a TaskInstance) -> Cursor<'a> {
        let mut bag = vec![0u32; self.shape.vocab_size];
        if self.shape.parameterization == Parameterization::Linear {
            for &p in &sample.prompt {
                bag[p as usize] += 1;
            }
        }
        Cursor {
            params: self,
            features: &sample.observation,
            bag,
            prev: None,
            position: 0,
        }
    }
}

/// Incremental decoding state: position, previous token and context bag.
#[derive(Clone)]
struct Cursor<'a> {
    params: &'a PolicyParams,
    features: &'a [f64],
    bag: Vec<u32>,
    prev: Option<TokenId>,
    position: usize,
}

impl Cursor<'_> {
    fn logits(&self) -> Vec<f64> {
        let p = self.params;
        let l = p.shape.layout();
        let th = &p.theta;
        let mut out = th[self.position * l.v..(self.position + 1) * l.v].to_vec();
        let row = l.trans + self.prev.map_or(l.v, |t| t as usize) * l.v;
        for (o, w) in out.iter_mut().zip(&th[row..row + l.v]) {
            *o += w;
        }
        if p.shape.parameterization == Parameterization::Linear {
            for (k, o) in out.iter_mut().enumerate() {
                let w = &th[l.feat + k * l.d..l.feat + (k + 1) * l.d];
                *o += w.iter().zip(self.features).map(|(a, b)| a * b).sum::<f64>();
            }
            for (c, &n) in self.bag.iter().enumerate() {
                if n > 0 {
                    let w = &th[l.ctx + c * l.v..l.ctx + (c + 1) * l.v];
                    for (o, x) in out.iter_mut().zip(w) {
                        *o += n as f64 * x;
                    }
                }
            }
        }
        out
    }

    /// Scatter per-token logit coefficients `coef[k]` into a θ-gradient.
    fn scatter(&self, coef: &[f64], out: &mut [f64]) {
        let p = self.params;
        let l = p.shape.layout();
        let pos = self.position * l.v;
        let row = l.trans + self.prev.map_or(l.v, |t| t as usize) * l.v;
        for (k, &c) in coef.iter().enumerate() {
            out[pos + k] += c;
            out[row + k] += c;
        }
        if p.shape.parameterization == Parameterization::Linear {
            for (k, &c) in coef.iter().enumerate() {
                let base = l.feat + k * l.d;
                for (j, f) in self.features.iter().enumerate() {
                    out[base + j] += c * f;
                }
            }
            for (ctx, &n) in self.bag.iter().enumerate() {
                if n > 0 {
                    let base = l.ctx + ctx * l.v;
                    for (k, &c) in coef.iter().enumerate() {
                        out[base + k] += n as f64 * c;
                    }
                }
            }
        }
    }

    fn advance(&mut self, token: TokenId) {
        if self.params.shape.parameterization == Parameterization::Linear {
            self.bag[token as usize] += 1;
        }
        self.prev = Some(token);
        self.position += 1;
    }

    fn stops_after(&self, token: TokenId) -> bool {
        self.params.shape.stop_token == Some(token) || self.position >= self.params.shape.max_len
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Total and per-token log-probabilities of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqLogprob {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// `log π(y | x)` with its autoregressive factorization.
pub fn logprob_sequence(
    params: &PolicyParams,
    sample: &TaskInstance,
    y: &[TokenId],
) -> Result<SeqLogprob> {
    params.check_sample(sample)?;
    params.check_tokens(y)?;
    let mut cur = params.cursor(sample);
    let mut per_token = Vec::with_capacity(y.len());
    for &t in y {
        per_token.push(log_softmax(&cur.logits())[t as usize]);
        cur.advance(t);
    }
    Ok(SeqLogprob {
        total: per_token.iter().sum(),
        per_token,
    })
}

/// Accumulate `Σ_t w_t ∇_θ log π(y_t | x, y_<t)` into `out`.
pub fn accumulate_weighted_grad(
    params: &PolicyParams,
    sample: &TaskInstance,
    y: &[TokenId],
    weights: &[f64],
    out: &mut [f64],
) -> Result<()> {
    params.check_sample(sample)?;
    params.check_tokens(y)?;
    if weights.len() != y.len() || out.len() != params.num_params() {
        return Err(Error::InvalidInput("gradient buffer size mismatch".into()));
    }
    let mut cur = params.cursor(sample);
    let mut coef = vec![0.0; params.shape.vocab_size];
    for (&t, &w) in y.iter().zip(weights) {
        if w != 0.0 {
            let probs = softmax(&cur.logits());
            for (c, p) in coef.iter_mut().zip(&probs) {
                *c = -w * p;
            }
            coef[t as usize] += w;
            cur.scatter(&coef, out);
        }
        cur.advance(t);
    }
    Ok(())
}

/// `∇_θ log π(y | x)`.
pub fn grad_logprob(params: &PolicyParams, sample: &TaskInstance, y: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; params.num_params()];
    accumulate_weighted_grad(params, sample, y, &vec![1.0; y.len()], &mut g)?;
    Ok(g)
}

/// Draw one sequence by ancestral sampling.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    sample: &TaskInstance,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    params.check_sample(sample)?;
    let mut cur = params.cursor(sample);
    let mut y = Vec::with_capacity(params.shape.max_len);
    loop {
        let probs = softmax(&cur.logits());
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = k;
                break;
            }
        }
        let t = pick as TokenId;
        y.push(t);
        cur.advance(t);
        if cur.stops_after(t) {
            return Ok(y);
        }
    }
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(params: &PolicyParams, sample: &TaskInstance) -> Result<Vec<TokenId>> {
    params.check_sample(sample)?;
    let mut cur = params.cursor(sample);
    let mut y = Vec::with_capacity(params.shape.max_len);
    loop {
        let logits = cur.logits();
        let mut best = 0;
        for (k, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = k;
            }
        }
        let t = best as TokenId;
        y.push(t);
        cur.advance(t);
        if cur.stops_after(t) {
            return Ok(y);
        }
    }
}

/// Every sequence of length ≤ `len` reachable under the stop rule, with its
/// probability. Refuses when `vocab^len` exceeds [`ENUMERATION_CAP`].
pub fn enumerate_support(
    params: &PolicyParams,
    sample: &TaskInstance,
    len: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    params.check_sample(sample)?;
    let v = params.shape.vocab_size as u128;
    let requested = v.checked_pow(len as u32).unwrap_or(u128::MAX);
    if requested > ENUMERATION_CAP {
        return Err(Error::NotEnumerable {
            requested,
            cap: ENUMERATION_CAP,
        });
    }
    if len == 0 || len > params.shape.max_len {
        return Err(Error::InvalidInput(format!(
            "enumeration length {len} must be in 1..={}",
            params.shape.max_len
        )));
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(len);
    expand(params.cursor(sample), 0.0, len, &mut prefix, &mut out);
    Ok(out)
}

fn expand(
    cur: Cursor<'_>,
    logp: f64,
    len: usize,
    prefix: &mut Vec<TokenId>,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) {
    let lp = log_softmax(&cur.logits());
    for (k, &l) in lp.iter().enumerate() {
        let t = k as TokenId;
        prefix.push(t);
        let total = logp + l;
        if cur.params.shape.stop_token == Some(t) || prefix.len() == len {
            out.push((prefix.clone(), total.exp()));
        } else {
            let mut next = cur.clone();
            next.advance(t);
            expand(next, total, len, prefix, out);
        }
        prefix.pop();
    }
}

/// `k3 = r − log r − 1` with `log r = logp_ref − logp_cur`.
#[inline]
pub fn k3(logp_cur: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_cur;
    x.exp_m1() - x
}

/// Token-averaged k3 estimate of `KL(π_θ ‖ π_ref)` over a rollout, averaged
/// over trajectories (the same weighting the GRPO loss uses).
pub fn kl_estimate(
    current: &PolicyParams,
    reference: &PolicyParams,
    rollout: &GroupRollout,
) -> Result<f64> {
    let g = rollout.trajectories.len();
    if g == 0 {
        return Err(Error::InvalidInput("empty rollout".into()));
    }
    let mut acc = 0.0;
    for tr in &rollout.trajectories {
        let cur = logprob_sequence(current, &rollout.sample, &tr.tokens)?;
        let refl = logprob_sequence(reference, &rollout.sample, &tr.tokens)?;
        let s: f64 = cur
            .per_token
            .iter()
            .zip(&refl.per_token)
            .map(|(&c, &r)| k3(c, r))
            .sum();
        acc += s / tr.tokens.len() as f64;
    }
    Ok(acc / g as f64)
}

/// π_θ, π_θ_old and the frozen π_ref.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTriple {
    pub current: PolicyParams,
    pub old: PolicyParams,
    reference: PolicyParams,
}

impl PolicyTriple {
    /// All three start at `initial`.
    pub fn new(initial: PolicyParams) -> Self {
        Self {
            current: initial.clone(),
            old: initial.clone(),
            reference: initial,
        }
    }

    pub fn from_parts(current: PolicyParams, old: PolicyParams, reference: PolicyParams) -> Result<Self> {
        if current.shape != old.shape || current.shape != reference.shape {
            return Err(Error::Descriptor(
                "current, old and reference policies must share one shape".into(),
            ));
        }
        Ok(Self {
            current,
            old,
            reference,
        })
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.current.shape
    }

    /// `π_old ← π_θ`; the reference is untouched.
    pub fn sync_old(&mut self) {
        self.old.theta.clone_from(&self.current.theta);
    }
}

/// Which member of the triple generates rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Old,
    Reference,
}

/// `G` rollouts from π_old; rollout `i` draws from the stream `(seed, i)`.
pub fn sample_group(
    triple: &PolicyTriple,
    sample: &TaskInstance,
    group_size: usize,
    seed: u64,
) -> Result<GroupRollout> {
    sample_group_from(triple, sample, group_size, seed, Sampler::Old)
}

pub fn sample_group_from(
    triple: &PolicyTriple,
    sample: &TaskInstance,
    group_size: usize,
    seed: u64,
    sampler: Sampler,
) -> Result<GroupRollout> {
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group size must be at least 2 (got {group_size})"
        )));
    }
    let source = match sampler {
        Sampler::Old => &triple.old,
        Sampler::Reference => &triple.reference,
    };
    let trajectories = par::map_indexed(group_size, |i| -> Result<Trajectory> {
        let mut rng = seed::rng(seed, &[i as u64]);
        let tokens = sample_sequence(source, sample, &mut rng)?;
        Ok(Trajectory {
            current: logprob_sequence(&triple.current, sample, &tokens)?,
            old: logprob_sequence(&triple.old, sample, &tokens)?,
            reference: logprob_sequence(&triple.reference, sample, &tokens)?,
            tokens,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(GroupRollout {
        sample: sample.clone(),
        rewards: vec![0.0; group_size],
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TaskInstance;

    fn bare() -> TaskInstance {
        TaskInstance::bare(vec![], vec![])
    }

    #[test]
    fn uniform_logits_give_uniform_logprob() {
        let p = PolicyParams::zeros(PolicyShape::tabular(4, 2, None)).unwrap();
        let lp = logprob_sequence(&p, &bare(), &[1, 3]).unwrap();
        assert!((lp.total + 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((lp.total - lp.per_token.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn first_token_ignores_later_tokens() {
        let shape = PolicyShape::linear(7, 3, 4);
        let p = PolicyParams::random(shape, 5, 1.0).unwrap();
        let s = TaskInstance::bare(vec![0.3, -1.0, 0.5], vec![5, 6]);
        let a = logprob_sequence(&p, &s, &[5, 6, 1]).unwrap();
        let b = logprob_sequence(&p, &s, &[5, 2, 2, 3]).unwrap();
        assert_eq!(a.per_token[0], b.per_token[0]);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let p = PolicyParams::zeros(PolicyShape::tabular(3, 2, None)).unwrap();
        assert!(matches!(
            logprob_sequence(&p, &bare(), &[0, 3]),
            Err(Error::InvalidInput(_))
        ));
        assert!(logprob_sequence(&p, &bare(), &[]).is_err());
    }

    #[test]
    fn tabular_score_function() {
        // Single position, vocab 4: ∂/∂logit_k log softmax(t) = 1[k=t] − p_k.
        let mut p = PolicyParams::zeros(PolicyShape::tabular(4, 1, None)).unwrap();
        let logits = [0.5, -1.0, 2.0, 0.0];
        for (k, &x) in logits.iter().enumerate() {
            let i = p.pos_index(0, k as TokenId);
            p.theta_mut()[i] = x;
        }
        let g = grad_logprob(&p, &bare(), &[2]).unwrap();
        let probs = softmax(&logits);
        for k in 0..4 {
            let want = f64::from(u8::from(k == 2)) - probs[k];
            assert!((g[p.pos_index(0, k as TokenId)] - want).abs() < 1e-15);
            assert!((g[p.trans_index(None, k as TokenId)] - want).abs() < 1e-15);
        }
        let s: f64 = (0..4).map(|k| g[p.pos_index(0, k)]).sum();
        assert!(s.abs() < 1e-15);
    }

    #[test]
    fn enumeration_examples() {
        let p = PolicyParams::zeros(PolicyShape::tabular(2, 1, None)).unwrap();
        let s = enumerate_support(&p, &bare(), 1).unwrap();
        assert_eq!(s, vec![(vec![0], 0.5), (vec![1], 0.5)]);
        let p2 = PolicyParams::zeros(PolicyShape::tabular(2, 2, None)).unwrap();
        let s2 = enumerate_support(&p2, &bare(), 2).unwrap();
        assert_eq!(s2.len(), 4);
        assert!((s2.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn enumeration_cap() {
        let p = PolicyParams::zeros(PolicyShape::tabular(17, 4, None)).unwrap();
        assert!(matches!(
            enumerate_support(&p, &bare(), 4),
            Err(Error::NotEnumerable { .. })
        ));
        let p = PolicyParams::zeros(PolicyShape::tabular(16, 4, None)).unwrap();
        assert!(enumerate_support(&p, &bare(), 4).is_ok());
    }

    #[test]
    fn stop_token_truncates_support() {
        let p = PolicyParams::random(PolicyShape::tabular(3, 3, Some(0)), 1, 1.0).unwrap();
        let s = enumerate_support(&p, &bare(), 3).unwrap();
        // 1 (stop) + 2·(1 + 2·3) = 15 sequences.
        assert_eq!(s.len(), 15);
        assert!((s.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
        for (y, _) in &s {
            assert!(y[..y.len() - 1].iter().all(|&t| t != 0));
        }
    }

    #[test]
    fn k3_formula() {
        // r = 2 → 2 − ln 2 − 1.
        assert!((k3(0.0, 2f64.ln()) - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert_eq!(k3(-0.7, -0.7), 0.0);
    }

    #[test]
    fn group_size_one_is_rejected() {
        let p = PolicyParams::zeros(PolicyShape::tabular(3, 2, None)).unwrap();
        let t = PolicyTriple::new(p);
        assert!(matches!(sample_group(&t, &bare(), 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_policy_gives_identical_rollouts() {
        let mut p = PolicyParams::zeros(PolicyShape::tabular(4, 3, None)).unwrap();
        for pos in 0..3 {
            let i = p.pos_index(pos, 2);
            p.theta_mut()[i] = 40.0;
        }
        let t = PolicyTriple::new(p);
        let r = sample_group(&t, &bare(), 8, 3).unwrap();
        assert!(r.trajectories.iter().all(|tr| tr.tokens == vec![2, 2, 2]));
    }

    #[test]
    fn rollouts_are_reproducible() {
        let p = PolicyParams::random(PolicyShape::linear(8, 2, 5), 9, 1.0).unwrap();
        let t = PolicyTriple::new(p);
        let s = TaskInstance::bare(vec![0.2, -0.4], vec![5]);
        let a = sample_group(&t, &s, 8, 42).unwrap();
        let b = sample_group(&t, &s, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_group(&t, &s, 8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = PolicyParams::random(PolicyShape::linear(6, 2, 3), 4, 3.0).unwrap();
        let q = PolicyParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
        let t = PolicyParams::random(PolicyShape::tabular(3, 2, None), 4, 3.0).unwrap();
        assert_eq!(t, PolicyParams::from_text(&t.to_text()).unwrap());
    }

    #[test]
    fn sync_keeps_reference() {
        let p = PolicyParams::random(PolicyShape::tabular(3, 2, None), 2, 1.0).unwrap();
        let mut t = PolicyTriple::new(p);
        t.current.theta_mut()[0] += 1.0;
        let before = t.reference().clone();
        t.sync_old();
        t.sync_old();
        assert_eq!(t.old, t.current);
        assert_eq!(t.reference(), &before);
    }

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(5).is_err());
        let v = Vocab::new(6).unwrap();
        assert_eq!(v.num_content(), 1);
        let m = v.markers();
        for (i, a) in m.iter().enumerate() {
            assert!(v.contains(*a));
            for b in &m[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
