//! Command implementations behind the `kbqa` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use kbqa_core::dataset::{load_dataset, QuestionRecord};
use kbqa_core::episode::{
    run_episode, EnvConfig, GoldReplayPolicy, Policy, RandomPolicy, RemoteChatPolicy, TerminalReason, Trajectory,
};
use kbqa_core::expression::{extract_actions, parse_sexpr};
use kbqa_core::grpo::{grpo_batch_objective, group_advantages, GrpoConfig, RolloutGroup};
use kbqa_core::kb::{parse_triples, KnowledgeBase, ResultSet};
use kbqa_core::prompt::available_actions;
use kbqa_core::reward::{total_reward, GoldAnswers, RewardWeights};
use kbqa_core::rrcg::RrcgConfig;
use kbqa_core::rrs::{
    build_reference_prompt, emit_sft_records, filter_trajectory, strip_references, AcceptedTrajectory, FilterOutcome,
    RrsConfig,
};
use kbqa_core::sparql::{to_sparql_with, SparqlEndpoint, SparqlOptions};
use kbqa_core::transcript::{parse_transcript, validate_format, ActionKind};

pub const ENDPOINT_ENV: &str = "KBQA_ENDPOINT";

#[derive(Debug, Parser)]
#[command(name = "kbqa", version, about = "Knowledge-base QA environment tooling")]
pub struct Cli {
    /// key=value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile an S-expression to SPARQL or to an action sequence.
    Compile(CompileArgs),
    /// Evaluate an S-expression against local triple files or a SPARQL endpoint.
    Eval(EvalArgs),
    /// Run episodes for every question in a dataset.
    Run(RunArgs),
    /// Score one transcript against gold answers.
    Score(ScoreArgs),
    /// Group-relative advantages, or the full surrogate for a rollout group.
    #[command(alias = "score-advantages")]
    Advantages(AdvantagesArgs),
    /// Write reference-conditioned prompts built from gold expressions.
    RrsBuild(RrsBuildArgs),
    /// Filter trajectories and emit SFT records.
    RrsFilter(RrsFilterArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["sparql", "actions"])))]
pub struct CompileArgs {
    pub sexpr: String,
    #[arg(long)]
    pub sparql: bool,
    #[arg(long)]
    pub actions: bool,
    #[arg(long, value_name = "IRI")]
    pub base_iri: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub sexpr: String,
    /// Triple file; repeat to merge several.
    #[arg(long = "kb", value_name = "PATH")]
    pub kbs: Vec<PathBuf>,
    /// Execute the compiled query remotely instead of locally.
    #[arg(long, value_name = "URL", conflicts_with = "kbs")]
    pub endpoint: Option<String>,
    #[arg(long, value_name = "IRI")]
    pub base_iri: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Gold,
    Random,
    /// `None` falls back to the endpoint environment variable.
    Remote(Option<String>),
}

fn parse_policy(s: &str) -> Result<PolicySpec, String> {
    match s {
        "gold" => Ok(PolicySpec::Gold),
        "random" => Ok(PolicySpec::Random),
        "remote" => Ok(PolicySpec::Remote(None)),
        _ => match s.strip_prefix("remote:") {
            Some(url) if !url.is_empty() => Ok(PolicySpec::Remote(Some(url.to_string()))),
            _ => Err("expected gold, random, remote or remote:URL".into()),
        },
    }
}

fn parse_action_kind(s: &str) -> Result<ActionKind, String> {
    ActionKind::from_verb(s).ok_or_else(|| format!("unknown action `{s}`"))
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long = "kb", value_name = "PATH", required = true)]
    pub kbs: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_policy, default_value = "gold")]
    pub policy: PolicySpec,
    /// Trajectory JSONL output.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_turns: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub obs_top_k: u64,
    /// Restrict the action space, e.g. `Find_relation,Merge,Count`.
    #[arg(long, value_delimiter = ',', value_parser = parse_action_kind)]
    pub allow_actions: Vec<ActionKind>,
    /// List gold actions in the prompt and hint the next one before each turn.
    #[arg(long)]
    pub reference_hints: bool,
    #[arg(long, default_value_t = 0.95)]
    pub tau_high: f64,
    #[arg(long, default_value_t = 0.3)]
    pub tau_low: f64,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Per-request timeout for the remote policy, in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    #[arg(long, default_value = "default")]
    pub model: String,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Transcript text file, or `-` for stdin.
    #[arg(long, value_name = "PATH")]
    pub transcript: PathBuf,
    /// Gold answers as JSON: a list of ids or a list of variant lists.
    #[arg(long, value_name = "JSON")]
    pub gold: String,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["rewards", "group"])))]
pub struct AdvantagesArgs {
    /// Comma-separated rewards of one group.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rewards: Vec<f64>,
    /// JSON rollout group with rewards and per-token log-probabilities.
    #[arg(long, value_name = "PATH")]
    pub group: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub eps_low: f64,
    #[arg(long, default_value_t = 0.28)]
    pub eps_high: f64,
    #[arg(long, default_value_t = 0.001)]
    pub beta: f64,
}

#[derive(Debug, Args)]
pub struct RrsBuildArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_action_kind)]
    pub allow_actions: Vec<ActionKind>,
}

#[derive(Debug, Args)]
pub struct RrsFilterArgs {
    /// Trajectory JSONL written by `run`.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Dataset JSONL holding the gold answers.
    #[arg(long, value_name = "PATH")]
    pub gold: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub accept_f1: f64,
}

/// Exit status for an invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Domain = 1,
    Usage = 2,
}

/// Inserts `--key value` pairs from a key=value config file after the
/// subcommand, skipping keys already given on the command line.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut i = 0;
    while i < args.len() {
        if strs[i] == "--config" && i + 1 < args.len() {
            path = Some(PathBuf::from(&args[i + 1]));
            i += 2;
            continue;
        }
        if let Some(p) = strs[i].strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            i += 1;
            continue;
        }
        rest.push(args[i].clone());
        i += 1;
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let given: BTreeSet<String> = strs
        .iter()
        .filter_map(|s| s.strip_prefix("--"))
        .map(|s| s.split('=').next().unwrap_or(s).to_string())
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), n + 1);
        };
        let key = key.trim().replace('_', "-");
        if given.contains(&key) {
            continue;
        }
        match value.trim() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            v => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(v));
            }
        }
    }
    // Subcommand is the first non-flag argument after the program name.
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    rest.splice(at..at, extra);
    Ok(rest)
}

/// Parses `args` (program name first) and runs the command. Summaries go
/// to `out`, diagnostics to `err`.
pub fn main_with(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            return Status::Usage;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Status::Usage } else { Status::Ok };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match execute(&cli.command, out, err) {
        Ok(()) => Status::Ok,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            Status::Domain
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Compile(a) => compile(a, out),
        Command::Eval(a) => eval(a, out, err),
        Command::Run(a) => run(a, out, err),
        Command::Score(a) => score(a, out),
        Command::Advantages(a) => advantages(a, out),
        Command::RrsBuild(a) => rrs_build(a, out),
        Command::RrsFilter(a) => rrs_filter(a, out, err),
    }
}

fn sparql_options(base_iri: &Option<String>) -> SparqlOptions {
    SparqlOptions {
        base_iri: base_iri.clone(),
        ..SparqlOptions::default()
    }
}

fn compile(a: &CompileArgs, out: &mut dyn Write) -> Result<()> {
    let tree = parse_sexpr(&a.sexpr).context("parsing expression")?;
    if a.sparql {
        writeln!(out, "{}", to_sparql_with(&tree, &sparql_options(&a.base_iri)))?;
    } else {
        for action in extract_actions(&tree)? {
            writeln!(out, "{action}")?;
        }
    }
    Ok(())
}

/// Loads and merges triple files into one KB.
pub fn load_kbs(paths: &[PathBuf], err: &mut dyn Write) -> Result<KnowledgeBase> {
    if paths.is_empty() {
        bail!("at least one --kb is required");
    }
    let mut triples = Vec::new();
    let (mut ingested, mut duplicates) = (0, 0);
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let (mut t, report) = parse_triples(&text);
        for bad in &report.skipped {
            writeln!(err, "warning: {}:{}: skipped: {}", p.display(), bad.line, bad.reason)?;
        }
        ingested += report.ingested;
        duplicates += report.duplicates;
        triples.append(&mut t);
    }
    let kb = KnowledgeBase::from_triples(triples);
    writeln!(
        err,
        "loaded {} triples from {} file(s) ({} duplicates)",
        ingested,
        paths.len(),
        duplicates
    )?;
    Ok(kb)
}

fn result_json(r: &ResultSet) -> serde_json::Value {
    match r {
        ResultSet::Number { value } => json!({"kind": "number", "value": value}),
        ResultSet::Entities { .. } => json!({"kind": "entities", "total": r.len(), "answers": r.answers()}),
    }
}

fn eval(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let tree = parse_sexpr(&a.sexpr).context("parsing expression")?;
    let result = match &a.endpoint {
        Some(url) => {
            let mut ep = SparqlEndpoint::new(url, Duration::from_secs_f64(a.timeout))?;
            if let Some(b) = &a.base_iri {
                ep = ep.with_base_iri(b);
            }
            ep.execute(&to_sparql_with(&tree, &sparql_options(&a.base_iri)))?
        }
        None => load_kbs(&a.kbs, err)?.evaluate(&tree),
    };
    writeln!(out, "{}", result_json(&result))?;
    Ok(())
}

fn action_mask(kinds: &[ActionKind]) -> Option<BTreeSet<ActionKind>> {
    (!kinds.is_empty()).then(|| kinds.iter().copied().collect())
}

#[derive(Debug, Default, Serialize)]
pub struct RunSummary {
    pub total: usize,
    pub mean_f1: f64,
    pub mean_reward: f64,
    /// Trajectories that would pass the rejection-sampling filter.
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub terminal: BTreeMap<&'static str, usize>,
}

/// Mean taken around the first value, so a constant series averages to
/// exactly that constant.
pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.collect();
    let Some(&pivot) = values.first() else { return 0.0 };
    pivot + values.iter().map(|v| v - pivot).sum::<f64>() / values.len() as f64
}

fn terminal_name(t: TerminalReason) -> &'static str {
    match t {
        TerminalReason::Answered => "answered",
        TerminalReason::MaxTurns => "max_turns",
        TerminalReason::PolicyFailure => "policy_failure",
    }
}

fn episode_for(
    a: &RunArgs,
    endpoint: &Option<String>,
    kb: &KnowledgeBase,
    record: &QuestionRecord,
    index: usize,
    cfg: &EnvConfig,
) -> Result<Trajectory> {
    let mut policy: Box<dyn Policy> = match &a.policy {
        PolicySpec::Gold => Box::new(
            GoldReplayPolicy::new(kb, record).with_context(|| format!("question {}", record.qid))?,
        ),
        PolicySpec::Random => Box::new(RandomPolicy::new(kb, a.seed.wrapping_add(index as u64))),
        PolicySpec::Remote(_) => {
            let url = endpoint.as_deref().expect("resolved before running");
            Box::new(
                RemoteChatPolicy::new(url, GrpoConfig::default(), Duration::from_secs_f64(a.timeout))?
                    .with_model(&a.model),
            )
        }
    };
    Ok(run_episode(policy.as_mut(), kb, record, cfg))
}

fn accepts(t: &Trajectory, gold: &GoldAnswers, rrs: &RrsConfig, w: &RewardWeights) -> Result<FilterOutcome> {
    let stripped = strip_references(&t.transcript).with_context(|| format!("trajectory {}", t.qid))?;
    Ok(filter_trajectory(&parse_transcript(&stripped), gold, rrs, w))
}

fn run(a: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let kb = load_kbs(&a.kbs, err)?;
    let records = load_dataset(&a.dataset)?;
    let endpoint = match &a.policy {
        PolicySpec::Remote(Some(u)) => Some(u.clone()),
        PolicySpec::Remote(None) => Some(
            std::env::var(ENDPOINT_ENV)
                .with_context(|| format!("--policy remote needs a URL or {ENDPOINT_ENV}"))?,
        ),
        _ => None,
    };
    let rrcg = RrcgConfig {
        tau_high: a.tau_high,
        tau_low: a.tau_low,
        top_k: a.top_k,
    };
    rrcg.validate()?;
    let cfg = EnvConfig {
        max_turns: a.max_turns as usize,
        obs_top_k: a.obs_top_k as usize,
        action_mask: action_mask(&a.allow_actions),
        rrcg,
        weights: RewardWeights::default(),
        reference_hints: a.reference_hints,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers as usize)
        .build()?;
    let trajectories: Vec<Trajectory> = pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, r)| episode_for(a, &endpoint, &kb, r, i, &cfg))
            .collect::<Result<_>>()
    })?;

    let mut file = std::io::BufWriter::new(
        fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    let rrs = RrsConfig::default();
    let mut summary = RunSummary {
        total: trajectories.len(),
        ..RunSummary::default()
    };
    for (t, r) in trajectories.iter().zip(&records) {
        serde_json::to_writer(&mut file, t)?;
        file.write_all(b"\n")?;
        *summary.terminal.entry(terminal_name(t.terminal_reason)).or_default() += 1;
        if accepts(t, &r.gold(), &rrs, &cfg.weights)?.is_accept() {
            summary.accepted += 1;
        }
        if let Some(f) = &t.failure {
            writeln!(err, "{}: policy failure: {f}", t.qid)?;
        }
    }
    file.flush()?;
    if summary.total > 0 {
        summary.mean_f1 = mean(trajectories.iter().map(|t| t.reward.f1));
        summary.mean_reward = mean(trajectories.iter().map(|t| t.reward.total));
        summary.acceptance_rate = summary.accepted as f64 / summary.total as f64;
    }
    writeln!(err, "wrote {} trajectories to {}", summary.total, a.out.display())?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

fn read_input(path: &Path) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::Read::read_to_string(&mut std::io::stdin(), &mut s)?;
        Ok(s)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

/// Accepts `["a","b"]` or `[["a"],["b","c"]]`.
pub fn parse_gold(s: &str) -> Result<GoldAnswers> {
    let v: serde_json::Value = serde_json::from_str(s).context("gold answers must be JSON")?;
    let arr = v.as_array().context("gold answers must be a JSON array")?;
    if arr.iter().all(|x| x.is_array()) && !arr.is_empty() {
        let variants: Vec<Vec<String>> = serde_json::from_value(v)?;
        Ok(GoldAnswers::new(variants))
    } else {
        let single: Vec<String> = serde_json::from_value(v)?;
        Ok(GoldAnswers::single(single))
    }
}

fn score(a: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let text = read_input(&a.transcript)?;
    let t = parse_transcript(&strip_references(&text)?);
    let gold = parse_gold(&a.gold)?;
    let reward = total_reward(&t, &gold, &RewardWeights::default());
    let report = validate_format(&t);
    writeln!(out, "{}", json!({"reward": reward, "format": report}))?;
    Ok(())
}

fn advantages(a: &AdvantagesArgs, out: &mut dyn Write) -> Result<()> {
    match &a.group {
        Some(path) => {
            let group: RolloutGroup = serde_json::from_str(&read_input(path)?).context("parsing rollout group")?;
            let cfg = GrpoConfig {
                eps_low: a.eps_low,
                eps_high: a.eps_high,
                beta: a.beta,
                ..GrpoConfig::default()
            };
            writeln!(out, "{}", serde_json::to_string(&grpo_batch_objective(&group, &cfg)?)?)?;
        }
        None => {
            let adv = group_advantages(&a.rewards)?;
            writeln!(out, "{}", json!({"advantages": adv}))?;
        }
    }
    Ok(())
}

fn rrs_build(a: &RrsBuildArgs, out: &mut dyn Write) -> Result<()> {
    let records = load_dataset(&a.dataset)?;
    let mask = action_mask(&a.allow_actions);
    let available = available_actions(mask.as_ref());
    let mut file = std::io::BufWriter::new(fs::File::create(&a.out)?);
    for r in &records {
        let tree = r.gold_tree().with_context(|| format!("question {}", r.qid))?;
        let actions = extract_actions(&tree)?;
        let prompt = build_reference_prompt(&r.question, &r.topic_entities, &available, &actions)?;
        let lines: Vec<String> = actions.iter().map(ToString::to_string).collect();
        serde_json::to_writer(&mut file, &json!({"qid": r.qid, "prompt": prompt, "reference_actions": lines}))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    writeln!(out, "{}", json!({"written": records.len()}))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RrsReport {
    pub accepted: usize,
    pub total: usize,
    pub acceptance_rate: f64,
    pub rejected: BTreeMap<&'static str, usize>,
}

fn rrs_filter(a: &RrsFilterArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let gold: BTreeMap<String, GoldAnswers> = load_dataset(&a.gold)?
        .into_iter()
        .map(|r| (r.qid.clone(), r.gold()))
        .collect();
    let text = read_input(&a.input)?;
    let cfg = RrsConfig {
        accept_f1: a.accept_f1,
        ..RrsConfig::default()
    };
    let w = RewardWeights::default();
    let mut accepted = Vec::new();
    let mut total = 0;
    let mut rejected = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let t: Trajectory =
            serde_json::from_str(line).with_context(|| format!("line {}: not a trajectory", i + 1))?;
        let g = gold
            .get(&t.qid)
            .with_context(|| format!("line {}: no gold answers for {}", i + 1, t.qid))?;
        match accepts(&t, g, &cfg, &w)? {
            FilterOutcome::Accept(reward) => accepted.push(AcceptedTrajectory {
                qid: t.qid,
                prompt: t.prompt,
                transcript: t.transcript,
                reward,
            }),
            FilterOutcome::Reject(why, _) => {
                writeln!(err, "{}: rejected ({})", t.qid, why.as_str())?;
                *rejected.entry(why.as_str()).or_default() += 1;
            }
        }
    }
    let records = emit_sft_records(&accepted)?;
    let mut file = std::io::BufWriter::new(fs::File::create(&a.out)?);
    for r in &records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    let report = RrsReport {
        accepted: accepted.len(),
        total,
        acceptance_rate: if total == 0 { 0.0 } else { accepted.len() as f64 / total as f64 },
        rejected,
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}
