//! Exact-match rewards, group-relative advantages, the clipped surrogate
//! objective, and action-frequency statistics.
//!
//! Nothing here touches model weights: every function is a pure computation
//! over rewards, ratios, and recorded trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::protocol::{ActionKind, ActionSequence};

pub const DEFAULT_CLIP_LOW: f64 = 0.2;
pub const DEFAULT_CLIP_HIGH: f64 = 0.28;
pub const DEFAULT_GROUP_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("length mismatch: {what} has {got} items, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("clip bounds must be positive (low = {low}, high = {high})")]
    NonPositiveClip { low: f64, high: f64 },
    #[error("empty reward group")]
    EmptyGroup,
    #[error("{count} rewards cannot be split into groups of {group_size}")]
    BadGroupSize { count: usize, group_size: usize },
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205e}' | '\u{00a1}' | '\u{00bf}' | '\u{00ab}' | '\u{00bb}'
    )
}

/// 1.0 iff the normalized prediction equals some normalized gold answer.
pub fn em_reward(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

/// Mean per-question exact match.
pub fn task_reward(preds: &[String], golds: &[Vec<String>]) -> Result<f64, RewardError> {
    Ok(mean(&per_question_em(preds, golds)?))
}

pub fn per_question_em(preds: &[String], golds: &[Vec<String>]) -> Result<Vec<f64>, RewardError> {
    if preds.len() != golds.len() {
        return Err(RewardError::LengthMismatch {
            what: "predictions",
            expected: golds.len(),
            got: preds.len(),
        });
    }
    Ok(preds
        .iter()
        .zip(golds)
        .map(|(p, g)| em_reward(p, g))
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `A_i = r_i - mean(r)`, with no standard-deviation scaling.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let baseline = mean(rewards);
    Ok(rewards.iter().map(|r| r - baseline).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub group_id: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupAdvantage {
    pub fn sum(&self) -> f64 {
        self.advantages.iter().sum()
    }
}

/// Splits a flat reward list into consecutive groups and computes each
/// group's advantages.
pub fn batch_advantages(
    rewards: &[f64],
    group_size: usize,
    exec: Exec,
) -> Result<Vec<GroupAdvantage>, RewardError> {
    if group_size == 0 || rewards.is_empty() || !rewards.len().is_multiple_of(group_size) {
        return Err(RewardError::BadGroupSize {
            count: rewards.len(),
            group_size,
        });
    }
    let groups: Vec<&[f64]> = rewards.chunks(group_size).collect();
    let advantages = par::try_map(exec, &groups, |g| group_advantage(g))?;
    Ok(groups
        .into_iter()
        .zip(advantages)
        .enumerate()
        .map(|(group_id, (r, a))| GroupAdvantage {
            group_id,
            rewards: r.to_vec(),
            advantages: a,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl Default for ClipRange {
    fn default() -> Self {
        Self {
            low: DEFAULT_CLIP_LOW,
            high: DEFAULT_CLIP_HIGH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    /// `None` gives the plain `rho * A` objective.
    pub clip: Option<ClipRange>,
    pub beta: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            clip: Some(ClipRange::default()),
            beta: 0.0,
        }
    }
}

/// Per-sample clipped surrogate term.
pub fn surrogate_term(ratio: f64, advantage: f64, clip: Option<ClipRange>) -> f64 {
    let unclipped = ratio * advantage;
    match clip {
        None => unclipped,
        Some(c) => unclipped.min(ratio.clamp(1.0 - c.low, 1.0 + c.high) * advantage),
    }
}

/// `mean_i min(rho_i A_i, clip(rho_i, 1-low, 1+high) A_i) - beta * mean(kl)`.
///
/// `kl_terms` may be empty, in which case the penalty is zero.
pub fn grpo_surrogate(
    ratios: &[f64],
    advantages: &[f64],
    kl_terms: &[f64],
    config: &SurrogateConfig,
) -> Result<f64, RewardError> {
    if ratios.len() != advantages.len() {
        return Err(RewardError::LengthMismatch {
            what: "ratios",
            expected: advantages.len(),
            got: ratios.len(),
        });
    }
    if !kl_terms.is_empty() && kl_terms.len() != advantages.len() {
        return Err(RewardError::LengthMismatch {
            what: "kl_terms",
            expected: advantages.len(),
            got: kl_terms.len(),
        });
    }
    if let Some(c) = config.clip {
        if !(c.low > 0.0 && c.high > 0.0) {
            return Err(RewardError::NonPositiveClip {
                low: c.low,
                high: c.high,
            });
        }
    }
    if ratios.is_empty() {
        return Ok(0.0);
    }
    let terms: Vec<f64> = ratios
        .iter()
        .zip(advantages)
        .map(|(r, a)| surrogate_term(*r, *a, config.clip))
        .collect();
    let objective = mean(&terms);
    if config.beta == 0.0 {
        Ok(objective)
    } else {
        Ok(objective - config.beta * mean(kl_terms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub step: u64,
    pub len: usize,
}

/// One completed rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold: Vec<Vec<String>>,
    pub per_step_actions: Vec<ActionSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_spans: Option<Vec<TokenSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    /// Training step the rollout was collected at, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_step: Option<u64>,
}

impl TrajectoryRecord {
    /// Scores the answers against `gold` and stores the reward.
    pub fn score(&mut self) -> Result<f64, RewardError> {
        let r = task_reward(&self.answers, &self.gold)?;
        self.reward = Some(r);
        Ok(r)
    }

    pub fn action_counts(&self) -> ActionCounts {
        ActionCounts::from_sequences(&self.per_step_actions)
    }

    /// Attaches one scalar advantage to every output-token span.
    pub fn spread_advantage(&self, advantage: f64) -> Vec<(TokenSpan, f64)> {
        self.token_spans
            .iter()
            .flatten()
            .map(|s| (*s, advantage))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCounts(pub BTreeMap<ActionKind, usize>);

impl ActionCounts {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a ActionSequence>) -> Self {
        let mut counts = Self::zero();
        for seq in seqs {
            for a in &seq.actions {
                *counts.0.entry(a.kind()).or_default() += 1;
            }
        }
        counts
    }

    pub fn zero() -> Self {
        Self(ActionKind::ALL.into_iter().map(|k| (k, 0)).collect())
    }

    pub fn get(&self, kind: ActionKind) -> usize {
        self.0.get(&kind).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub episodes: usize,
    /// Mean count per episode for each action kind.
    pub mean: BTreeMap<ActionKind, f64>,
    /// Per training step means; untagged episodes are grouped under step 0.
    pub series: BTreeMap<u64, BTreeMap<ActionKind, f64>>,
}

pub fn action_stats(trajectories: &[TrajectoryRecord]) -> ActionStats {
    let tagged: Vec<(Option<u64>, ActionCounts)> = trajectories
        .iter()
        .map(|t| (t.training_step, t.action_counts()))
        .collect();
    action_stats_from_counts(&tagged)
}

pub fn action_stats_from_counts(episodes: &[(Option<u64>, ActionCounts)]) -> ActionStats {
    let means = |items: &[&ActionCounts]| -> BTreeMap<ActionKind, f64> {
        ActionKind::ALL
            .into_iter()
            .map(|k| {
                let total: usize = items.iter().map(|c| c.get(k)).sum();
                let m = if items.is_empty() {
                    0.0
                } else {
                    total as f64 / items.len() as f64
                };
                (k, m)
            })
            .collect()
    };
    let all: Vec<&ActionCounts> = episodes.iter().map(|(_, c)| c).collect();
    let mut by_step: BTreeMap<u64, Vec<&ActionCounts>> = BTreeMap::new();
    for (step, counts) in episodes {
        by_step.entry(step.unwrap_or(0)).or_default().push(counts);
    }
    ActionStats {
        episodes: episodes.len(),
        mean: means(&all),
        series: by_step.iter().map(|(s, c)| (*s, means(c))).collect(),
    }
}

impl ActionStats {
    /// CSV with one row per training step: `training_step,create,read,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("training_step");
        for k in ActionKind::ALL {
            out.push(',');
            out.push_str(k.name());
        }
        out.push('\n');
        for (step, means) in &self.series {
            out.push_str(&step.to_string());
            for k in ActionKind::ALL {
                out.push_str(&format!(",{}", means.get(&k).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out
    }
}
