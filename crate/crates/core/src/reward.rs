//! Outcome and format rewards for a finished transcript.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::transcript::{parse_answer_payload, validate_format, Transcript};

/// Accepted gold answer sets for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswers {
    pub variants: Vec<BTreeSet<String>>,
}

/// Trims whitespace and one pair of surrounding double quotes.
pub fn normalize_answer(token: &str) -> String {
    let t = token.trim();
    t.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t)
        .trim()
        .to_string()
}

impl GoldAnswers {
    pub fn new<I, V, S>(variants: I) -> Self
    where
        I: IntoIterator<Item = V>,
        V: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        GoldAnswers {
            variants: variants
                .into_iter()
                .map(|v| {
                    v.into_iter()
                        .map(|s| normalize_answer(s.as_ref()))
                        .filter(|s| !s.is_empty())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn single<S: AsRef<str>>(answers: impl IntoIterator<Item = S>) -> Self {
        Self::new([answers])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_outcome: f64,
    pub lambda_format: f64,
    pub format_bonus: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            lambda_outcome: 1.0,
            lambda_format: 0.1,
            format_bonus: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn max_total(&self) -> f64 {
        self.lambda_outcome + self.lambda_format * self.format_bonus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_variant_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_variant_index: usize,
    pub format_ok: bool,
    pub total: f64,
}

/// Normalized tokens of the last answer segment; empty without one.
pub fn extract_answers(t: &Transcript) -> BTreeSet<String> {
    t.final_answer()
        .map(|seg| {
            parse_answer_payload(&seg.text)
                .iter()
                .map(|s| normalize_answer(s))
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

fn set_f1(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> (f64, f64, f64) {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return (1.0, 1.0, 1.0),
        (true, false) | (false, true) => return (0.0, 0.0, 0.0),
        _ => {}
    }
    let hit = pred.intersection(gold).count() as f64;
    if hit == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let p = hit / pred.len() as f64;
    let r = hit / gold.len() as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// Best F1 over gold variants; the lowest index wins ties. No variants
/// scores as an empty gold set.
pub fn answer_f1(pred: &BTreeSet<String>, gold: &GoldAnswers) -> F1Score {
    let empty = BTreeSet::new();
    let variants: Vec<&BTreeSet<String>> = if gold.variants.is_empty() {
        vec![&empty]
    } else {
        gold.variants.iter().collect()
    };
    let mut best = F1Score {
        precision: 0.0,
        recall: 0.0,
        f1: f64::NEG_INFINITY,
        best_variant_index: 0,
    };
    for (i, v) in variants.into_iter().enumerate() {
        let (precision, recall, f1) = set_f1(pred, v);
        if f1 > best.f1 {
            best = F1Score {
                precision,
                recall,
                f1,
                best_variant_index: i,
            };
        }
    }
    best
}

/// Outcome F1 plus the format bonus, which only counts when F1 is positive.
pub fn total_reward(t: &Transcript, gold: &GoldAnswers, w: &RewardWeights) -> RewardBreakdown {
    let score = answer_f1(&extract_answers(t), gold);
    let format_ok = validate_format(t).format_ok();
    let gated = if score.f1 > 0.0 && format_ok {
        w.lambda_format * w.format_bonus
    } else {
        0.0
    };
    RewardBreakdown {
        precision: score.precision,
        recall: score.recall,
        f1: score.f1,
        best_variant_index: score.best_variant_index,
        format_ok,
        total: w.lambda_outcome * score.f1 + gated,
    }
}
