//! Relation retrieval and confidence gating.
//!
//! A relation proposed by the agent is scored against the schema relations
//! adjacent to the action's source entities, and the best score decides
//! whether the action runs as-is with the best match, runs tentatively with
//! alternative cues, or is rejected with the full neighborhood listed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::Direction;

/// Pluggable relation similarity. Implementations must return values in
/// `[0, 1]`.
pub trait Similarity: Send + Sync {
    fn score(&self, proposed: &str, relation: &str) -> f64;
}

impl<F> Similarity for F
where
    F: Fn(&str, &str) -> f64 + Send + Sync,
{
    fn score(&self, proposed: &str, relation: &str) -> f64 {
        self(proposed, relation)
    }
}

/// Multiset Dice similarity over word tokens, character trigrams and the
/// whole lowercased string.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalDice;

impl Similarity for LexicalDice {
    fn score(&self, proposed: &str, relation: &str) -> f64 {
        default_similarity(proposed, relation)
    }
}

fn features(s: &str) -> BTreeMap<String, usize> {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| c == '.' || c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .collect();
    let mut f = BTreeMap::new();
    let mut add = |k: String| *f.entry(k).or_insert(0) += 1;
    for w in &words {
        add(format!("w:{w}"));
    }
    let norm: Vec<char> = words.join(" ").chars().collect();
    if norm.len() < 3 {
        add(format!("c:{}", norm.iter().collect::<String>()));
    } else {
        for tri in norm.windows(3) {
            add(format!("c:{}", tri.iter().collect::<String>()));
        }
    }
    add(format!("s:{lower}"));
    f
}

/// Dice coefficient `2|A ∩ B| / (|A| + |B|)` over feature multisets.
/// Symmetric, in `[0, 1]`, and 1.0 exactly when the lowercased inputs match.
pub fn default_similarity(a: &str, b: &str) -> f64 {
    let fa = features(a);
    let fb = features(b);
    let total: usize = fa.values().sum::<usize>() + fb.values().sum::<usize>();
    let shared: usize = fa
        .iter()
        .filter_map(|(k, n)| fb.get(k).map(|m| (*n).min(*m)))
        .sum();
    (2 * shared) as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrcgConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    pub top_k: usize,
}

impl Default for RrcgConfig {
    fn default() -> Self {
        RrcgConfig {
            tau_high: 0.95,
            tau_low: 0.3,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("thresholds must satisfy 0 <= tau_low < tau_high <= 1 (got {tau_low}, {tau_high})")]
    Thresholds { tau_low: f64, tau_high: f64 },
    #[error("top_k must be positive")]
    ZeroTopK,
}

impl RrcgConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0 <= self.tau_low && self.tau_low < self.tau_high && self.tau_high <= 1.0) {
            return Err(ConfigError::Thresholds {
                tau_low: self.tau_low,
                tau_high: self.tau_high,
            });
        }
        if self.top_k == 0 {
            return Err(ConfigError::ZeroTopK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRelation {
    pub relation: String,
    pub direction: Direction,
    pub score: f64,
}

impl ScoredRelation {
    /// Relation token to execute: entities on the head side are walked
    /// forwards with `^`, entities on the tail side with the plain id.
    pub fn executable(&self) -> String {
        match self.direction {
            Direction::Out => format!("^{}", self.relation),
            Direction::In => self.relation.clone(),
        }
    }
}

fn rank(a: &ScoredRelation, b: &ScoredRelation) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.relation.cmp(&b.relation))
        .then_with(|| a.direction.cmp(&b.direction))
}

/// Scores `proposed` (with any `^` marker removed) against each candidate.
/// Sorted by score descending, then relation id, then `out` before `in`.
pub fn score_candidates(
    sim: &dyn Similarity,
    proposed: &str,
    candidates: &BTreeSet<(String, Direction)>,
) -> Vec<ScoredRelation> {
    let bare = proposed.trim().trim_start_matches('^');
    let mut scored: Vec<ScoredRelation> = candidates
        .iter()
        .map(|(r, d)| ScoredRelation {
            relation: r.clone(),
            direction: *d,
            score: sim.score(bare, r),
        })
        .collect();
    scored.sort_by(rank);
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    AutoValidated,
    Tentative,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub tier: Tier,
    pub best: Option<ScoredRelation>,
    /// Top-k for tentative matches, every candidate for rejections.
    pub cues: Vec<ScoredRelation>,
    /// Relation token actually executed.
    pub replacement: Option<String>,
}

pub fn tier_for(score: f64, cfg: &RrcgConfig) -> Tier {
    if score >= cfg.tau_high {
        Tier::AutoValidated
    } else if score >= cfg.tau_low {
        Tier::Tentative
    } else {
        Tier::Rejected
    }
}

/// Routes a sorted candidate list into one of the three tiers.
pub fn gate(scored: &[ScoredRelation], cfg: &RrcgConfig) -> GateDecision {
    let tier = scored
        .first()
        .map_or(Tier::Rejected, |b| tier_for(b.score, cfg));
    match tier {
        Tier::Rejected => GateDecision {
            tier,
            best: None,
            cues: scored.to_vec(),
            replacement: None,
        },
        Tier::AutoValidated => GateDecision {
            tier,
            best: scored.first().cloned(),
            cues: Vec::new(),
            replacement: scored.first().map(ScoredRelation::executable),
        },
        Tier::Tentative => GateDecision {
            tier,
            best: scored.first().cloned(),
            cues: scored.iter().take(cfg.top_k).cloned().collect(),
            replacement: scored.first().map(ScoredRelation::executable),
        },
    }
}

/// Scores, orients and gates a proposal. Among equal-score entries for the
/// same relation, a `^`-prefixed proposal prefers the `out` side and a plain
/// one the `in` side, so an exact proposal keeps its own direction.
pub fn ground_relation(
    sim: &dyn Similarity,
    proposed: &str,
    candidates: &BTreeSet<(String, Direction)>,
    cfg: &RrcgConfig,
) -> GateDecision {
    let mut scored = score_candidates(sim, proposed, candidates);
    let preferred = if proposed.trim().starts_with('^') {
        Direction::Out
    } else {
        Direction::In
    };
    if scored.len() >= 2 {
        let (a, b) = (&scored[0], &scored[1]);
        if a.score == b.score && a.relation == b.relation && a.direction != preferred {
            scored.swap(0, 1);
        }
    }
    gate(&scored, cfg)
}
