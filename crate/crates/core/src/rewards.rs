//! Verifiable rewards and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::policy::{TokenId, Vocab};
use crate::{Error, Result};

/// Groups whose reward standard deviation falls below this are "vanished".
pub const VANISHING_TOL: f64 = 1e-12;

/// Closed time interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start > end {
            return Err(Error::InvalidInput(format!(
                "invalid interval ({start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_point(&self) -> bool {
        self.start == self.end
    }
}

/// Temporal IoU. A zero-length union scores 1 for identical points, else 0.
pub fn iou_reward(pred: &Interval, gt: &Interval) -> f64 {
    let inter = (pred.end.min(gt.end) - pred.start.max(gt.start)).max(0.0);
    let union = pred.len() + gt.len() - inter;
    if union <= 0.0 {
        return if pred == gt { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 1 iff `y` is `TO (content)* TC AO (content)+ AC [END]`.
pub fn format_reward(y: &[TokenId], vocab: &Vocab) -> f64 {
    let content = |t: &TokenId| vocab.contains(*t) && !vocab.is_marker(*t);
    let body = match y.last() {
        Some(&Vocab::END) => &y[..y.len() - 1],
        _ => y,
    };
    let ok = (|| {
        let rest = body.strip_prefix(&[Vocab::THINK_OPEN])?;
        let think_len = rest.iter().take_while(|t| content(t)).count();
        let rest = rest[think_len..].strip_prefix(&[Vocab::THINK_CLOSE, Vocab::ANS_OPEN])?;
        let ans_len = rest.iter().take_while(|t| content(t)).count();
        (ans_len >= 1 && rest[ans_len..] == [Vocab::ANS_CLOSE]).then_some(())
    })();
    if ok.is_some() {
        1.0
    } else {
        0.0
    }
}

/// Tokens between the first ANS_OPEN and the next ANS_CLOSE.
pub fn extract_answer(y: &[TokenId]) -> Option<&[TokenId]> {
    let open = y.iter().position(|&t| t == Vocab::ANS_OPEN)?;
    let rest = &y[open + 1..];
    let close = rest.iter().position(|&t| t == Vocab::ANS_CLOSE)?;
    Some(&rest[..close])
}

/// Tokens between the first THINK_OPEN and the next THINK_CLOSE (or the end
/// of the sequence when unclosed), keeping only content tokens.
pub fn extract_think(y: &[TokenId], vocab: &Vocab) -> Vec<TokenId> {
    let Some(open) = y.iter().position(|&t| t == Vocab::THINK_OPEN) else {
        return Vec::new();
    };
    y[open + 1..]
        .iter()
        .take_while(|&&t| t != Vocab::THINK_CLOSE)
        .copied()
        .filter(|&t| vocab.contains(t) && !vocab.is_marker(t))
        .collect()
}

/// 1 iff the extracted answer equals `gt_answer` exactly.
pub fn accuracy_reward(y: &[TokenId], gt_answer: &[TokenId], _vocab: &Vocab) -> f64 {
    match extract_answer(y) {
        Some(a) if !gt_answer.is_empty() && a == gt_answer => 1.0,
        _ => 0.0,
    }
}

/// Non-negative component weights; a zero weight disables a component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub format: f64,
    pub accuracy: f64,
    pub iou: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            format: 1.0,
            accuracy: 1.0,
            iou: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn new(format: f64, accuracy: f64, iou: f64) -> Result<Self> {
        let s = Self {
            format,
            accuracy,
            iou,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.format, self.accuracy, self.iou];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("reward weights must be finite and >= 0".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("at least one reward weight must be > 0".into()));
        }
        Ok(())
    }

    /// Largest achievable composite reward.
    pub fn max_total(&self) -> f64 {
        self.format + self.accuracy + self.iou
    }
}

/// Raw reward components before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub format: f64,
    pub accuracy: f64,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub iou: f64,
    pub total: f64,
}

/// Weighted sum of components; disabled components contribute nothing.
pub fn composite_reward(c: RewardComponents, spec: &RewardSpec) -> RewardBreakdown {
    RewardBreakdown {
        format: c.format,
        accuracy: c.accuracy,
        iou: c.iou,
        total: spec.format * c.format + spec.accuracy * c.accuracy + spec.iou * c.iou,
    }
}

/// Fraction of exact matches. Failed extractions are represented by `None`
/// on the prediction side and count as wrong.
pub fn accuracy_metric<T: PartialEq>(preds: &[Option<T>], gts: &[T]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::InvalidInput("accuracy over zero samples".into()));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.as_ref() == Some(g))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

pub fn miou_metric(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::InvalidInput("mIoU over zero samples".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Top-1 recall at IoU threshold `m`: fraction of IoUs ≥ m.
pub fn recall_at_m(ious: &[f64], m: f64) -> Result<f64> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::InvalidInput(format!("threshold {m} outside (0, 1]")));
    }
    if ious.is_empty() {
        return Err(Error::InvalidInput("recall over zero samples".into()));
    }
    Ok(ious.iter().filter(|&&x| x >= m).count() as f64 / ious.len() as f64)
}

/// Population standard deviation.
pub(crate) fn population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn is_constant_group(rewards: &[f64]) -> bool {
    population_std(rewards).1 < VANISHING_TOL
}

/// Fraction of groups whose rewards are all equal.
pub fn vanishing_advantage_ratio<G: AsRef<[f64]>>(groups: &[G]) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let n = groups.iter().filter(|g| is_constant_group(g.as_ref())).count();
    n as f64 / groups.len() as f64
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub acc: Option<f64>,
    pub miou: Option<f64>,
    pub r_at_03: Option<f64>,
    pub r_at_05: Option<f64>,
    pub vanishing_ratio: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,mean_reward,acc,miou,r_at_03,r_at_05,vanishing_ratio";

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            opt(self.acc),
            opt(self.miou),
            opt(self.r_at_03),
            opt(self.r_at_05),
            self.vanishing_ratio
        )
    }
}
