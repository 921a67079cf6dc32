//! Reference-conditioned prompts, trajectory filtering and SFT record
//! emission.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::render_prompt;
use crate::reward::{total_reward, GoldAnswers, RewardBreakdown, RewardWeights};
use crate::transcript::{parse_transcript, validate_format, Action, ActionKind, SegmentKind, Transcript};

pub const REFERENCE_OPEN: &str = "<reference>";
pub const REFERENCE_CLOSE: &str = "</reference>";

const REFERENCE_INSTRUCTION: &str =
    "Reference actions, in order. Explain in your reasoning why each one moves toward the answer:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RrsError {
    #[error("reference action list is empty")]
    EmptyReference,
    #[error("reference block opened at offset {offset} is not closed")]
    UnclosedReferenceBlock { offset: usize },
    #[error("unmatched {REFERENCE_CLOSE} at offset {offset}")]
    UnmatchedReferenceClose { offset: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrsConfig {
    /// Trajectories need F1 strictly above this.
    pub accept_f1: f64,
    pub require_format_bonus: bool,
}

impl Default for RrsConfig {
    fn default() -> Self {
        RrsConfig {
            accept_f1: 0.9,
            require_format_bonus: true,
        }
    }
}

/// Plain prompt followed by a `<reference>` block listing `ref_actions`.
pub fn build_reference_prompt(
    question: &str,
    topic_entities: &[String],
    available: &[ActionKind],
    ref_actions: &[Action],
) -> Result<String, RrsError> {
    if ref_actions.is_empty() {
        return Err(RrsError::EmptyReference);
    }
    let mut out = render_prompt(question, topic_entities, available);
    out.push_str(REFERENCE_OPEN);
    out.push('\n');
    out.push_str(REFERENCE_INSTRUCTION);
    out.push('\n');
    for a in ref_actions {
        out.push_str(&a.to_string());
        out.push('\n');
    }
    out.push_str(REFERENCE_CLOSE);
    Ok(out)
}

/// Single-action hint placed before a turn during a referenced rollout.
pub fn reference_hint(next: &Action) -> String {
    format!("{REFERENCE_OPEN}Next action: {next}{REFERENCE_CLOSE}")
}

/// Removes every reference block, delimiters included. Nested or unclosed
/// blocks are errors; everything else is copied through unchanged.
pub fn strip_references(text: &str) -> Result<String, RrsError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut base = 0;
    loop {
        let open = rest.find(REFERENCE_OPEN);
        let close = rest.find(REFERENCE_CLOSE);
        match (open, close) {
            (None, None) => {
                out.push_str(rest);
                return Ok(out);
            }
            (o, Some(c)) if o.is_none_or(|o| c < o) => {
                return Err(RrsError::UnmatchedReferenceClose { offset: base + c })
            }
            (Some(o), c) => {
                let body_start = o + REFERENCE_OPEN.len();
                let Some(c) = c else {
                    return Err(RrsError::UnclosedReferenceBlock { offset: base + o });
                };
                if rest[body_start..c].contains(REFERENCE_OPEN) {
                    return Err(RrsError::UnclosedReferenceBlock { offset: base + o });
                }
                out.push_str(&rest[..o]);
                let next = c + REFERENCE_CLOSE.len();
                base += next;
                rest = &rest[next..];
            }
            (None, Some(_)) => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    F1,
    Format,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::F1 => "f1",
            RejectReason::Format => "format",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterOutcome {
    Accept(RewardBreakdown),
    Reject(RejectReason, RewardBreakdown),
}

impl FilterOutcome {
    pub fn is_accept(&self) -> bool {
        matches!(self, FilterOutcome::Accept(_))
    }
}

/// Accepts when F1 exceeds the threshold and, if required, the format is
/// valid. Reports the first failing check.
pub fn filter_trajectory(
    t: &Transcript,
    gold: &GoldAnswers,
    cfg: &RrsConfig,
    w: &RewardWeights,
) -> FilterOutcome {
    let reward = total_reward(t, gold, w);
    if reward.f1 <= cfg.accept_f1 {
        FilterOutcome::Reject(RejectReason::F1, reward)
    } else if cfg.require_format_bonus && !validate_format(t).format_ok() {
        FilterOutcome::Reject(RejectReason::Format, reward)
    } else {
        FilterOutcome::Accept(reward)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSegment {
    pub kind: SegmentKind,
    /// The tagged element as it appears in the transcript.
    pub text: String,
    pub loss_masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub qid: String,
    pub f1: f64,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion_segments: Vec<SftSegment>,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedTrajectory {
    pub qid: String,
    pub prompt: String,
    pub transcript: String,
    pub reward: RewardBreakdown,
}

/// Builds SFT records with reference hints removed. Tool observations are
/// loss-masked, everything the assistant wrote is not.
pub fn emit_sft_records(accepted: &[AcceptedTrajectory]) -> Result<Vec<SftRecord>, RrsError> {
    accepted
        .iter()
        .map(|a| {
            let prompt = strip_references(&a.prompt)?;
            let t = parse_transcript(&strip_references(&a.transcript)?);
            let completion_segments = t
                .segments
                .iter()
                .map(|s| SftSegment {
                    kind: s.kind,
                    text: t.source[s.span.start..s.span.end].to_string(),
                    loss_masked: s.kind == SegmentKind::Information,
                })
                .collect();
            Ok(SftRecord {
                prompt,
                completion_segments,
                meta: SftMeta {
                    qid: a.qid.clone(),
                    f1: a.reward.f1,
                    reward: a.reward.clone(),
                },
            })
        })
        .collect()
}
