//! Tagged agent transcripts and the bracketed action-line syntax.
//!
//! A transcript is free text containing `<think>`, `<action>`, `<information>`
//! and `<answer>` elements. Parsing is total: malformed regions are recorded as
//! [`ParseDefect`]s and surface through [`validate_format`], never as errors.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    #[serde(rename = "action")]
    ActionBlock,
    Information,
    Answer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::Think,
        SegmentKind::ActionBlock,
        SegmentKind::Information,
        SegmentKind::Answer,
    ];

    /// Lowercase tag name as it appears between angle brackets.
    pub fn tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "think",
            SegmentKind::ActionBlock => "action",
            SegmentKind::Information => "information",
            SegmentKind::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "<think>",
            SegmentKind::ActionBlock => "<action>",
            SegmentKind::Information => "<information>",
            SegmentKind::Answer => "<answer>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "</think>",
            SegmentKind::ActionBlock => "</action>",
            SegmentKind::Information => "</information>",
            SegmentKind::Answer => "</answer>",
        }
    }
}

/// Byte offsets into the transcript source, covering the whole element
/// including its open and close tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Interior text with delimiter escapes undone.
    pub text: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseDefect {
    Unclosed { kind: SegmentKind, offset: usize },
    UnmatchedClose { kind: SegmentKind, offset: usize },
}

impl fmt::Display for ParseDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseDefect::Unclosed { kind, offset } => {
                write!(f, "unclosed {} tag at offset {offset}", kind.tag())
            }
            ParseDefect::UnmatchedClose { kind, offset } => {
                write!(f, "unmatched </{}> tag at offset {offset}", kind.tag())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub segments: Vec<Segment>,
    pub source: String,
    pub defects: Vec<ParseDefect>,
}

impl Transcript {
    pub fn segments_of(&self, kind: SegmentKind) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.kind == kind)
    }

    pub fn final_answer(&self) -> Option<&Segment> {
        self.segments
            .iter()
            .rev()
            .find(|s| s.kind == SegmentKind::Answer)
    }
}

const ESCAPED_LT: &str = "&lt;";

pub fn escape_body(body: &str) -> String {
    body.replace('<', ESCAPED_LT)
}

pub fn unescape_body(body: &str) -> String {
    body.replace(ESCAPED_LT, "<")
}

fn next_tag(source: &str, from: usize) -> Option<(usize, SegmentKind, bool)> {
    let rest = &source[from..];
    let mut best: Option<(usize, SegmentKind, bool)> = None;
    for kind in SegmentKind::ALL {
        for (tag, closing) in [(kind.open_tag(), false), (kind.close_tag(), true)] {
            if let Some(i) = rest.find(tag) {
                if best.is_none_or(|(b, _, _)| i < b) {
                    best = Some((i, kind, closing));
                }
            }
        }
    }
    best.map(|(i, k, c)| (from + i, k, c))
}

fn next_open_tag(source: &str, from: usize) -> Option<usize> {
    SegmentKind::ALL
        .iter()
        .filter_map(|k| source[from..].find(k.open_tag()))
        .min()
        .map(|i| from + i)
}

pub fn parse_transcript(source: &str) -> Transcript {
    let mut segments = Vec::new();
    let mut defects = Vec::new();
    let mut pos = 0;
    while let Some((at, kind, closing)) = next_tag(source, pos) {
        if closing {
            defects.push(ParseDefect::UnmatchedClose { kind, offset: at });
            pos = at + kind.close_tag().len();
            continue;
        }
        let interior = at + kind.open_tag().len();
        let close = source[interior..]
            .find(kind.close_tag())
            .map(|i| interior + i);
        let reopened = next_open_tag(source, interior);
        match close {
            Some(c) if reopened.is_none_or(|o| c < o) => {
                let end = c + kind.close_tag().len();
                segments.push(Segment {
                    kind,
                    text: unescape_body(&source[interior..c]),
                    span: Span { start: at, end },
                });
                pos = end;
            }
            _ => {
                defects.push(ParseDefect::Unclosed { kind, offset: at });
                pos = interior;
            }
        }
    }
    Transcript {
        segments,
        source: source.to_string(),
        defects,
    }
}

/// Wraps an observation body in `<information>` delimiters, escaping `<`.
pub fn render_information(body: &str) -> String {
    render_segment(SegmentKind::Information, body)
}

pub fn render_segment(kind: SegmentKind, body: &str) -> String {
    format!("{}{}{}", kind.open_tag(), escape_body(body), kind.close_tag())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub tags_complete: bool,
    pub order_valid: bool,
    pub answer_present: bool,
    pub defects: Vec<String>,
}

impl FormatReport {
    pub fn format_ok(&self) -> bool {
        self.tags_complete && self.order_valid
    }
}

/// Checks tag completeness and the per-turn ordering
/// `think, action*, answer?`, with information segments separating turns.
pub fn validate_format(t: &Transcript) -> FormatReport {
    let mut defects: Vec<String> = t.defects.iter().map(ToString::to_string).collect();
    let tags_complete = t.defects.is_empty();

    let mut order_defects = Vec::new();
    if t.segments.is_empty() {
        order_defects.push("no tagged segments".to_string());
    }

    let mut turn_open = false;
    let mut turn_has_think = false;
    let mut answered = false;
    for seg in &t.segments {
        if answered {
            order_defects.push(format!("{} after answer", seg.kind.tag()));
            continue;
        }
        match seg.kind {
            SegmentKind::Information => {
                if !turn_open {
                    order_defects.push("information without a preceding assistant turn".into());
                }
                turn_open = false;
                turn_has_think = false;
            }
            SegmentKind::Think => {
                if turn_has_think {
                    order_defects.push("repeated think within a turn".into());
                }
                turn_open = true;
                turn_has_think = true;
            }
            SegmentKind::ActionBlock => {
                if !turn_has_think {
                    order_defects.push("action before think".into());
                }
                turn_open = true;
            }
            SegmentKind::Answer => {
                if !turn_has_think {
                    order_defects.push("answer before think".into());
                }
                turn_open = true;
                answered = true;
            }
        }
    }

    let order_valid = order_defects.is_empty();
    defects.extend(order_defects);
    FormatReport {
        tags_complete,
        order_valid,
        answer_present: t.final_answer().is_some(),
        defects,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    FindRelation,
    Merge,
    Order,
    Compare,
    TimeConstraint,
    Count,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::FindRelation,
        ActionKind::Merge,
        ActionKind::Order,
        ActionKind::Compare,
        ActionKind::TimeConstraint,
        ActionKind::Count,
    ];

    /// Canonical verb spelling used in action lines.
    pub fn verb(self) -> &'static str {
        match self {
            ActionKind::FindRelation => "Find_relation",
            ActionKind::Merge => "Merge",
            ActionKind::Order => "Order",
            ActionKind::Compare => "Compare",
            ActionKind::TimeConstraint => "Time_constraint",
            ActionKind::Count => "Count",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            ActionKind::FindRelation | ActionKind::Merge | ActionKind::TimeConstraint => 2,
            ActionKind::Order | ActionKind::Compare => 3,
            ActionKind::Count => 1,
        }
    }

    /// Argument template shown in prompts.
    pub fn signature(self) -> &'static str {
        match self {
            ActionKind::FindRelation => "Find_relation [ entity | relation ]",
            ActionKind::Merge => "Merge [ expression1 | expression ]",
            ActionKind::Order => "Order [ MAX/MIN | expression | relation ]",
            ActionKind::Compare => "Compare [ le/lt/ge/gt | relation | number ]",
            ActionKind::TimeConstraint => "Time_constraint [ relation | time ]",
            ActionKind::Count => "Count [ expression ]",
        }
    }

    pub fn from_verb(verb: &str) -> Option<Self> {
        let verb = verb.trim();
        Self::ALL
            .into_iter()
            .find(|k| k.verb().eq_ignore_ascii_case(verb))
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.verb())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub args: Vec<String>,
}

impl Action {
    pub fn new<S: Into<String>>(kind: ActionKind, args: impl IntoIterator<Item = S>) -> Self {
        Action {
            kind,
            args: args.into_iter().map(Into::into).collect(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [ {} ]", self.kind.verb(), self.args.join(" | "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("unknown action verb `{0}`")]
    UnknownVerb(String),
    #[error("{kind} expects {expected} argument(s), got {found}")]
    ArityMismatch {
        kind: ActionKind,
        expected: usize,
        found: usize,
    },
    #[error("action line is missing its `[ ... ]` argument envelope")]
    MalformedBrackets,
}

/// Parses one line such as `Find_relation [ m.02mjmr | people.person.place_of_birth ]`.
///
/// Verbs match case-insensitively; empty arguments between delimiters are
/// dropped before the arity check.
pub fn parse_action_line(line: &str) -> Result<Action, ActionParseError> {
    let line = line.trim();
    let (open, close) = match (line.find('['), line.rfind(']')) {
        (Some(o), Some(c)) if o < c && line[c + 1..].trim().is_empty() => (o, c),
        _ => return Err(ActionParseError::MalformedBrackets),
    };
    let verb = line[..open].trim();
    let kind =
        ActionKind::from_verb(verb).ok_or_else(|| ActionParseError::UnknownVerb(verb.into()))?;
    let args: Vec<String> = line[open + 1..close]
        .split('|')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(String::from)
        .collect();
    if args.len() != kind.arity() {
        return Err(ActionParseError::ArityMismatch {
            kind,
            expected: kind.arity(),
            found: args.len(),
        });
    }
    Ok(Action { kind, args })
}

/// Non-blank lines of an action block, in order.
pub fn action_lines(block: &str) -> impl Iterator<Item = &str> {
    block.lines().map(str::trim).filter(|l| !l.is_empty())
}

fn trim_quotes(token: &str) -> &str {
    let t = token.trim();
    for q in ['"', '\''] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            return &t[1..t.len() - 1];
        }
    }
    t
}

/// Splits an answer payload into normalized tokens.
///
/// A bracketed `[a, b]` list is split on commas; anything else on whitespace.
/// Surrounding quotes are trimmed and duplicates removed.
pub fn parse_answer_payload(payload: &str) -> BTreeSet<String> {
    let p = payload.trim();
    let raw: Vec<&str> = if p.len() >= 2 && p.starts_with('[') && p.ends_with(']') {
        p[1..p.len() - 1].split(',').collect()
    } else {
        p.split_whitespace().collect()
    };
    raw.into_iter()
        .map(trim_quotes)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Renders answers in the payload form [`parse_answer_payload`] reads back.
/// Falls back to the bracketed list form when any answer contains whitespace
/// or a comma-free split would be ambiguous.
pub fn render_answer_payload<'a>(answers: impl IntoIterator<Item = &'a str>) -> String {
    let answers: Vec<&str> = answers.into_iter().collect();
    let needs_list = answers
        .iter()
        .any(|a| a.chars().any(char::is_whitespace) || a.starts_with('['));
    if needs_list {
        let quoted: Vec<String> = answers.iter().map(|a| format!("\"{a}\"")).collect();
        format!("[{}]", quoted.join(", "))
    } else {
        answers.join(" ")
    }
}
