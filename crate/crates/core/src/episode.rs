//! The multi-turn agent loop: prompt assembly, policy calls, action
//! grounding and execution, observation rendering and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QuestionRecord;
use crate::expression::{extract_actions, slot_name, slot_token, ExpressionState, SlotId};
use crate::grpo::GrpoConfig;
use crate::kb::{KnowledgeBase, ResultSet, Term};
use crate::prompt::{available_actions, render_prompt};
use crate::reward::{extract_answers, total_reward, RewardBreakdown, RewardWeights};
use crate::rrcg::{ground_relation, GateDecision, LexicalDice, RrcgConfig, Similarity, Tier};
use crate::rrs::{build_reference_prompt, reference_hint};
use crate::transcript::{
    action_lines, parse_action_line, parse_transcript, render_answer_payload, render_information,
    render_segment, Action, ActionKind, ActionParseError, SegmentKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub max_turns: usize,
    pub obs_top_k: usize,
    /// Actions offered and accepted; `None` allows all six.
    pub action_mask: Option<BTreeSet<ActionKind>>,
    pub rrcg: RrcgConfig,
    pub weights: RewardWeights,
    /// Referenced rollout: the prompt lists the gold actions and each turn
    /// is preceded by a hint naming the next one.
    pub reference_hints: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_turns: 10,
            obs_top_k: 10,
            action_mask: None,
            rrcg: RrcgConfig::default(),
            weights: RewardWeights::default(),
            reference_hints: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalReason {
    Answered,
    MaxTurns,
    PolicyFailure,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("gold expression does not parse: {0}")]
    GoldParse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("policy timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// Everything a policy may look at before producing its next turn.
pub struct PolicyContext<'a> {
    pub record: &'a QuestionRecord,
    pub kb: &'a KnowledgeBase,
    pub prompt: &'a str,
    /// Prior turns as (assistant text, observation) pairs.
    pub history: Vec<(&'a str, Option<&'a str>)>,
    /// Reference hint shown before this turn, if any.
    pub hint: Option<&'a str>,
    pub turn: usize,
}

pub trait Policy {
    fn respond(&mut self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError>;
}

/// Outcome of one action line within a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub line: String,
    pub action: Option<Action>,
    pub gate: Option<GateDecision>,
    /// The action as applied, after relation grounding.
    pub executed: Option<Action>,
    pub slot: Option<SlotId>,
    pub result: Option<ResultSet>,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub assistant: String,
    pub actions: Vec<ActionOutcome>,
    pub observation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub qid: String,
    pub question: String,
    pub topic_entities: Vec<String>,
    pub prompt: String,
    /// Assistant turns and `<information>` blocks, without the prompt.
    pub transcript: String,
    pub turns: Vec<Turn>,
    pub final_answers: BTreeSet<String>,
    /// Slot name to canonical S-expression.
    pub expression_state: BTreeMap<String, String>,
    pub current_expression: Option<String>,
    pub reward: RewardBreakdown,
    pub terminal_reason: TerminalReason,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Observation(String),
    Terminal(TerminalReason),
}

fn render_item(id: &str, label: Option<&str>) -> String {
    match label {
        Some(l) => format!("{id} ({l})"),
        None => id.to_string(),
    }
}

/// `Results (N total): id1 (label1), id2, ...`, truncated to `k` items.
pub fn render_results(kb: &KnowledgeBase, result: &ResultSet, k: usize) -> String {
    let view = result.truncated_view(kb, k);
    if view.is_empty() {
        return "Results (0 total)".to_string();
    }
    let items: Vec<String> = view
        .iter()
        .map(|(id, label)| render_item(id, label.as_deref()))
        .collect();
    format!("Results ({} total): {}", result.len(), items.join(", "))
}

fn render_scores(cues: &[crate::rrcg::ScoredRelation], with_direction: bool) -> String {
    cues.iter()
        .map(|c| {
            if with_direction {
                format!("{} ({}, {:.3})", c.relation, c.direction, c.score)
            } else {
                format!("{} ({:.3})", c.executable(), c.score)
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Diagnostic preceding the results of a grounded relation, or the whole
/// observation when the relation was rejected.
pub fn render_gate(proposed: &str, source: &str, d: &GateDecision) -> Option<String> {
    match d.tier {
        Tier::AutoValidated => {
            let best = d.best.as_ref()?;
            let replacement = d.replacement.as_deref()?;
            (replacement != proposed).then(|| {
                format!(
                    "Relation \"{proposed}\" resolved to {replacement} (score {:.3}).",
                    best.score
                )
            })
        }
        Tier::Tentative => {
            let best = d.best.as_ref()?;
            Some(format!(
                "Relation \"{proposed}\" tentatively matched to {} (score {:.3}). Candidates: {}.",
                d.replacement.as_deref()?,
                best.score,
                render_scores(&d.cues, false)
            ))
        }
        Tier::Rejected if d.cues.is_empty() => Some(format!(
            "Relation \"{proposed}\" rejected: {source} has no neighboring relations."
        )),
        Tier::Rejected => Some(format!(
            "Relation \"{proposed}\" rejected: no relation around {source} is similar enough. Neighboring relations: {}.",
            render_scores(&d.cues, true)
        )),
    }
}

fn parse_error_message(line: &str, e: &ActionParseError, allowed: &[ActionKind]) -> String {
    let usage = match e {
        ActionParseError::ArityMismatch { kind, .. } => format!(" Usage: {}", kind.signature()),
        _ => format!(
            " Available actions: {}",
            allowed.iter().map(|k| k.signature()).collect::<Vec<_>>().join("; ")
        ),
    };
    format!("Invalid action \"{line}\": {e}.{usage}")
}

/// One episode's mutable state. Owned by a single worker.
pub struct Episode<'a> {
    kb: &'a KnowledgeBase,
    record: &'a QuestionRecord,
    cfg: &'a EnvConfig,
    sim: &'a dyn Similarity,
    allowed: Vec<ActionKind>,
    prompt: String,
    reference: Vec<Action>,
    hints: Vec<Option<String>>,
    state: ExpressionState,
    transcript: String,
    turns: Vec<Turn>,
    terminal: Option<TerminalReason>,
    failure: Option<String>,
}

impl<'a> Episode<'a> {
    pub fn new(kb: &'a KnowledgeBase, record: &'a QuestionRecord, cfg: &'a EnvConfig) -> Self {
        Self::with_similarity(kb, record, cfg, &LexicalDice)
    }

    pub fn with_similarity(
        kb: &'a KnowledgeBase,
        record: &'a QuestionRecord,
        cfg: &'a EnvConfig,
        sim: &'a dyn Similarity,
    ) -> Self {
        let allowed = available_actions(cfg.action_mask.as_ref());
        let reference = if cfg.reference_hints {
            record
                .gold_tree()
                .ok()
                .and_then(|t| extract_actions(&t).ok())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        let prompt = build_reference_prompt(&record.question, &record.topic_entities, &allowed, &reference)
            .unwrap_or_else(|_| render_prompt(&record.question, &record.topic_entities, &allowed));
        Episode {
            kb,
            record,
            cfg,
            sim,
            allowed,
            prompt,
            reference,
            hints: Vec::new(),
            state: ExpressionState::new(),
            transcript: String::new(),
            turns: Vec::new(),
            terminal: None,
            failure: None,
        }
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn transcript(&self) -> &str {
        &self.transcript
    }

    pub fn state(&self) -> &ExpressionState {
        &self.state
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn terminal(&self) -> Option<TerminalReason> {
        self.terminal
    }

    /// Emits the reference hint for the upcoming turn into the transcript.
    fn begin_turn(&mut self) {
        let idx = self.turns.len();
        let hint = self.reference.get(idx).map(reference_hint);
        if let Some(h) = &hint {
            self.transcript.push_str(h);
        }
        self.hints.push(hint);
    }

    pub fn context(&self) -> PolicyContext<'_> {
        PolicyContext {
            record: self.record,
            kb: self.kb,
            prompt: &self.prompt,
            history: self
                .turns
                .iter()
                .map(|t| (t.assistant.as_str(), t.observation.as_deref()))
                .collect(),
            hint: self.hints.get(self.turns.len()).and_then(|h| h.as_deref()),
            turn: self.turns.len(),
        }
    }

    fn sources(&self, arg: &str) -> Option<BTreeSet<Term>> {
        match slot_token(arg) {
            Some(Ok(id)) => {
                let tree = self.state.get(id).filter(|t| !t.is_count())?;
                match self.kb.evaluate(tree) {
                    ResultSet::Entities { items } => Some(items),
                    ResultSet::Number { value } => Some(BTreeSet::from([Term::Literal(value.to_string())])),
                }
            }
            Some(Err(_)) => None,
            None => Some(BTreeSet::from([Term::from_token(arg)])),
        }
    }

    fn run_action(&mut self, line: &str) -> ActionOutcome {
        let mut out = ActionOutcome {
            line: line.to_string(),
            action: None,
            gate: None,
            executed: None,
            slot: None,
            result: None,
            observation: String::new(),
        };
        let action = match parse_action_line(line) {
            Ok(a) => a,
            Err(e) => {
                out.observation = parse_error_message(line, &e, &self.allowed);
                return out;
            }
        };
        out.action = Some(action.clone());
        if !self.allowed.contains(&action.kind) {
            out.observation = format!("Action {} is not available for this question.", action.kind.verb());
            return out;
        }
        let mut executed = action.clone();
        let mut notes = Vec::new();
        if action.kind == ActionKind::FindRelation {
            let (source, proposed) = (action.args[0].trim(), action.args[1].trim());
            if let Some(entities) = self.sources(source) {
                let candidates = self.kb.neighbor_relations(&entities).unwrap_or_default();
                let decision = ground_relation(self.sim, proposed, &candidates, &self.cfg.rrcg);
                let note = render_gate(proposed, source, &decision);
                let replacement = decision.replacement.clone();
                out.gate = Some(decision);
                match replacement {
                    None => {
                        out.observation = note.unwrap_or_default();
                        return out;
                    }
                    Some(r) => {
                        executed.args[1] = r;
                        notes.extend(note);
                    }
                }
            }
        }
        match self.state.apply(&executed) {
            Err(e) => {
                notes.push(format!("Action \"{line}\" failed: {e}."));
            }
            Ok(id) => {
                let tree = self.state.get(id).expect("applied slot exists");
                let result = self.kb.evaluate(tree);
                notes.push(format!(
                    "{}: {}",
                    slot_name(id),
                    render_results(self.kb, &result, self.cfg.obs_top_k)
                ));
                out.executed = Some(executed);
                out.slot = Some(id);
                out.result = Some(result);
            }
        }
        out.observation = notes.join(" ");
        out
    }

    /// Processes one assistant turn. Deterministic given the episode state
    /// and `assistant_text`.
    pub fn step(&mut self, assistant_text: &str) -> StepOutcome {
        if let Some(reason) = self.terminal {
            return StepOutcome::Terminal(reason);
        }
        if self.hints.len() == self.turns.len() {
            self.begin_turn();
        }
        self.transcript.push_str(assistant_text);
        let parsed = parse_transcript(assistant_text);
        if parsed.segments_of(SegmentKind::Answer).next().is_some() {
            self.turns.push(Turn {
                assistant: assistant_text.to_string(),
                actions: Vec::new(),
                observation: None,
            });
            self.terminal = Some(TerminalReason::Answered);
            return StepOutcome::Terminal(TerminalReason::Answered);
        }
        let lines: Vec<String> = parsed
            .segments_of(SegmentKind::ActionBlock)
            .flat_map(|s| action_lines(&s.text).map(String::from).collect::<Vec<_>>())
            .collect();
        let actions: Vec<ActionOutcome> = lines.iter().map(|l| self.run_action(l)).collect();
        let observation = if actions.is_empty() {
            "No action found. Emit actions inside <action>...</action> or the final answer inside <answer>...</answer>.".to_string()
        } else {
            actions
                .iter()
                .map(|a| a.observation.as_str())
                .collect::<Vec<_>>()
                .join("\n")
        };
        self.transcript.push_str(&render_information(&observation));
        self.turns.push(Turn {
            assistant: assistant_text.to_string(),
            actions,
            observation: Some(observation.clone()),
        });
        if self.turns.len() >= self.cfg.max_turns {
            self.terminal = Some(TerminalReason::MaxTurns);
            return StepOutcome::Terminal(TerminalReason::MaxTurns);
        }
        StepOutcome::Observation(observation)
    }

    fn fail(&mut self, e: &PolicyError) {
        self.terminal = Some(TerminalReason::PolicyFailure);
        self.failure = Some(e.to_string());
    }

    pub fn finish(self) -> Trajectory {
        let t = parse_transcript(&self.transcript);
        let reward = total_reward(&t, &self.record.gold(), &self.cfg.weights);
        Trajectory {
            qid: self.record.qid.clone(),
            question: self.record.question.clone(),
            topic_entities: self.record.topic_entities.clone(),
            prompt: self.prompt,
            final_answers: extract_answers(&t),
            expression_state: self
                .state
                .slots()
                .iter()
                .map(|(id, tree)| (slot_name(*id), tree.to_string()))
                .collect(),
            current_expression: self.state.current().map(slot_name),
            transcript: self.transcript,
            turns: self.turns,
            reward,
            terminal_reason: self.terminal.unwrap_or(TerminalReason::MaxTurns),
            failure: self.failure,
        }
    }
}

pub fn run_episode(
    policy: &mut dyn Policy,
    kb: &KnowledgeBase,
    record: &QuestionRecord,
    cfg: &EnvConfig,
) -> Trajectory {
    run_episode_with(policy, kb, record, cfg, &LexicalDice)
}

pub fn run_episode_with(
    policy: &mut dyn Policy,
    kb: &KnowledgeBase,
    record: &QuestionRecord,
    cfg: &EnvConfig,
    sim: &dyn Similarity,
) -> Trajectory {
    let mut ep = Episode::with_similarity(kb, record, cfg, sim);
    while ep.terminal.is_none() {
        ep.begin_turn();
        let reply = policy.respond(&ep.context());
        match reply {
            Ok(text) => {
                ep.step(&text);
            }
            Err(e) => ep.fail(&e),
        }
    }
    ep.finish()
}

/// Replays the gold expression one action per turn, then answers with its
/// denotation.
pub struct GoldReplayPolicy {
    actions: Vec<Action>,
    answer: String,
    next: usize,
}

impl GoldReplayPolicy {
    pub fn new(kb: &KnowledgeBase, record: &QuestionRecord) -> Result<Self, PolicyError> {
        let tree = record
            .gold_tree()
            .map_err(|e| PolicyError::GoldParse(e.to_string()))?;
        let actions = extract_actions(&tree).map_err(|e| PolicyError::GoldParse(e.to_string()))?;
        let answers = kb.evaluate(&tree).answers();
        Ok(GoldReplayPolicy {
            actions,
            answer: render_answer_payload(answers.iter().map(String::as_str)),
            next: 0,
        })
    }
}

impl Policy for GoldReplayPolicy {
    fn respond(&mut self, _ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let i = self.next;
        self.next += 1;
        Ok(match self.actions.get(i) {
            Some(a) => format!(
                "{}\n{}\n",
                render_segment(
                    SegmentKind::Think,
                    &format!("Step {} of {}: {}.", i + 1, self.actions.len(), a.kind.verb())
                ),
                render_segment(SegmentKind::ActionBlock, &a.to_string())
            ),
            None => format!(
                "{}\n{}\n",
                render_segment(SegmentKind::Think, "The expression is complete."),
                render_segment(SegmentKind::Answer, &self.answer)
            ),
        })
    }
}

/// Uniformly random exploration over topic entities, open slots and KB
/// relations; answers a random entity with probability 1/3 per turn.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    relations: Vec<String>,
    entities: Vec<String>,
}

impl RandomPolicy {
    pub fn new(kb: &KnowledgeBase, seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            relations: kb.relations().into_iter().map(String::from).collect(),
            entities: kb.entities().into_iter().map(String::from).collect(),
        }
    }
}

impl Policy for RandomPolicy {
    fn respond(&mut self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let think = render_segment(SegmentKind::Think, "Exploring.");
        if self.relations.is_empty() || self.rng.gen_ratio(1, 3) {
            let pick = self.entities.choose(&mut self.rng).cloned().unwrap_or_default();
            return Ok(format!("{think}\n{}\n", render_segment(SegmentKind::Answer, &pick)));
        }
        let mut sources = ctx.record.topic_entities.clone();
        sources.extend((1..=ctx.turn as SlotId).map(slot_name));
        let source = sources.choose(&mut self.rng).cloned().unwrap_or_default();
        let relation = self.relations.choose(&mut self.rng).cloned().unwrap_or_default();
        let action = Action::new(ActionKind::FindRelation, [source, relation]);
        Ok(format!(
            "{think}\n{}\n",
            render_segment(SegmentKind::ActionBlock, &action.to_string())
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The prompt as the first user message, then alternating assistant turns
/// and `<information>` observations. Reference hints ride on the following
/// user message.
pub fn chat_messages(ctx: &PolicyContext<'_>) -> Vec<ChatMessage> {
    let msg = |role: &str, content: String| ChatMessage {
        role: role.into(),
        content,
    };
    let mut out = Vec::new();
    let mut pending = ctx.prompt.to_string();
    for (assistant, observation) in &ctx.history {
        out.push(msg("user", std::mem::take(&mut pending)));
        out.push(msg("assistant", assistant.to_string()));
        if let Some(o) = observation {
            pending = render_information(o);
        }
    }
    if let Some(h) = ctx.hint {
        pending.push_str(h);
    }
    out.push(msg("user", pending));
    out
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// Client for an HTTP chat-completion endpoint.
pub struct RemoteChatPolicy {
    endpoint: String,
    model: String,
    sampling: GrpoConfig,
    max_tokens: u32,
    timeout: Duration,
    retries: u32,
    client: reqwest::blocking::Client,
}

impl RemoteChatPolicy {
    pub fn new(endpoint: impl Into<String>, sampling: GrpoConfig, timeout: Duration) -> Result<Self, PolicyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(RemoteChatPolicy {
            endpoint: endpoint.into(),
            model: "default".into(),
            sampling,
            max_tokens: 1024,
            timeout,
            retries: 1,
            client,
        })
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Extra attempts after a connection failure or a 5xx status. Timeouts
    /// and malformed bodies are never retried.
    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn map_err(&self, e: reqwest::Error) -> PolicyError {
        if e.is_timeout() {
            PolicyError::Timeout(self.timeout)
        } else {
            PolicyError::Transport(e.to_string())
        }
    }
}

impl RemoteChatPolicy {
    fn attempt(&self, body: &ChatRequest<'_>) -> Result<String, (PolicyError, bool)> {
        let resp = self.client.post(&self.endpoint).json(body).send().map_err(|e| {
            let retry = !e.is_timeout();
            (self.map_err(e), retry)
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err((
                PolicyError::Transport(format!("endpoint returned HTTP {status}")),
                status.is_server_error(),
            ));
        }
        resp.text().map_err(|e| (self.map_err(e), false))
    }
}

impl Policy for RemoteChatPolicy {
    fn respond(&mut self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let body = ChatRequest {
            model: &self.model,
            messages: chat_messages(ctx),
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
            max_tokens: self.max_tokens,
        };
        let mut tries = 0;
        let text = loop {
            match self.attempt(&body) {
                Ok(text) => break text,
                Err((e, retry)) if !retry || tries >= self.retries => return Err(e),
                Err(_) => tries += 1,
            }
        };
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| PolicyError::MalformedResponse(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| PolicyError::MalformedResponse("no choices".into()))?;
        if content.trim().is_empty() {
            return Err(PolicyError::MalformedResponse("empty message content".into()));
        }
        Ok(content)
    }
}
