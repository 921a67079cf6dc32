//! In-memory triple store with the indexes the executor and relation
//! gating need, plus native evaluation of expression trees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expression::{parse_decimal, ArgMode, ExpressionTree, TimeLiteral};

pub const DEFAULT_TYPE_RELATION: &str = "type.object.type";
pub const DEFAULT_LABEL_RELATION: &str = "type.object.name";

/// A node in the graph: an entity id or a plain literal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Term {
    Entity(String),
    Literal(String),
}

impl Term {
    /// Classifies a bare token: quoted text, decimals and time literals are
    /// literals; everything else (including `m.`/`g.` ids) is an entity.
    pub fn from_token(token: &str) -> Term {
        let t = token.trim();
        if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
            return Term::Literal(t[1..t.len() - 1].to_string());
        }
        if t.starts_with("m.") || t.starts_with("g.") {
            return Term::Entity(t.to_string());
        }
        if parse_decimal(t).is_some() || TimeLiteral::parse(t).is_some_and(|l| !l.is_now()) {
            return Term::Literal(t.to_string());
        }
        Term::Entity(t.to_string())
    }

    pub fn as_str(&self) -> &str {
        match self {
            Term::Entity(s) | Term::Literal(s) => s,
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, Term::Literal(_))
    }

    pub fn numeric(&self) -> Option<f64> {
        match self {
            Term::Literal(s) => parse_decimal(s),
            Term::Entity(_) => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: Term,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: Term) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The entity is the head of the triple.
    Out,
    /// The entity is the tail of the triple.
    In,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Out => "out",
            Direction::In => "in",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedTriple {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub lines: usize,
    pub ingested: usize,
    pub duplicates: usize,
    pub skipped: Vec<MalformedTriple>,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read triple source {path}: {source}")]
    UnreadableSource {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("neighbor lookup needs at least one entity")]
    EmptyEntitySet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KbConfig {
    pub type_relation: String,
    pub label_relation: String,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            type_relation: DEFAULT_TYPE_RELATION.into(),
            label_relation: DEFAULT_LABEL_RELATION.into(),
        }
    }
}

type Adjacency = BTreeMap<Term, BTreeMap<String, BTreeSet<Term>>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Indexes {
    /// head -> relation -> tails
    out: Adjacency,
    /// tail -> relation -> heads
    inc: Adjacency,
}

impl Indexes {
    fn build<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut idx = Indexes::default();
        for t in triples {
            let head = Term::Entity(t.head.clone());
            idx.out
                .entry(head.clone())
                .or_default()
                .entry(t.relation.clone())
                .or_default()
                .insert(t.tail.clone());
            idx.inc
                .entry(t.tail.clone())
                .or_default()
                .entry(t.relation.clone())
                .or_default()
                .insert(head);
        }
        idx
    }
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    triples: BTreeSet<Triple>,
    idx: Indexes,
    labels: BTreeMap<String, String>,
    config: KbConfig,
}

fn parse_line(line: &str) -> Result<Triple, String> {
    let mut rest = line.trim();
    let mut field = || -> Option<&str> {
        let r = rest.trim_start();
        let end = r.find(char::is_whitespace).unwrap_or(r.len());
        let (f, tail) = r.split_at(end);
        rest = tail;
        (!f.is_empty()).then_some(f)
    };
    let head = field().ok_or("missing head")?.to_string();
    let relation = field().ok_or("missing relation")?.to_string();
    let tail = rest.trim();
    if tail.is_empty() {
        return Err("expected three fields".into());
    }
    if !relation.trim_start_matches('^').contains('.') || relation.starts_with('^') {
        return Err(format!("relation `{relation}` is not a dotted id"));
    }
    if head.starts_with('"') {
        return Err("head must be an entity id".into());
    }
    let tail = if tail.starts_with('"') {
        if tail.len() < 2 || !tail.ends_with('"') {
            return Err("unterminated literal".into());
        }
        Term::Literal(tail[1..tail.len() - 1].to_string())
    } else if tail.contains(char::is_whitespace) {
        return Err("too many fields".into());
    } else {
        Term::from_token(tail)
    };
    Ok(Triple {
        head,
        relation,
        tail,
    })
}

impl KnowledgeBase {
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        Self::with_config(triples, KbConfig::default())
    }

    pub fn with_config(triples: impl IntoIterator<Item = Triple>, config: KbConfig) -> Self {
        let triples: BTreeSet<Triple> = triples.into_iter().collect();
        let idx = Indexes::build(&triples);
        let labels = triples
            .iter()
            .filter(|t| t.relation == config.label_relation)
            .filter_map(|t| match &t.tail {
                Term::Literal(l) => Some((t.head.clone(), l.clone())),
                Term::Entity(_) => None,
            })
            .collect();
        KnowledgeBase {
            triples,
            idx,
            labels,
            config,
        }
    }

    /// Parses the line-oriented triple format. Bad lines are collected in the
    /// report rather than failing the load.
    pub fn parse(text: &str) -> (Self, LoadReport) {
        let (triples, report) = parse_triples(text);
        (Self::from_triples(triples), report)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, LoadReport), KbError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KbError::UnreadableSource {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn config(&self) -> &KbConfig {
        &self.config
    }

    pub fn label(&self, entity: &str) -> Option<&str> {
        self.labels.get(entity).map(String::as_str)
    }

    /// All relation ids in the graph.
    pub fn relations(&self) -> BTreeSet<&str> {
        self.triples.iter().map(|t| t.relation.as_str()).collect()
    }

    /// All entity ids appearing as head or entity-valued tail.
    pub fn entities(&self) -> BTreeSet<&str> {
        self.triples
            .iter()
            .flat_map(|t| {
                let tail = match &t.tail {
                    Term::Entity(e) => Some(e.as_str()),
                    Term::Literal(_) => None,
                };
                std::iter::once(t.head.as_str()).chain(tail)
            })
            .collect()
    }

    /// Rebuilds the indexes from the triple set and compares.
    pub fn indexes_consistent(&self) -> bool {
        Indexes::build(&self.triples) == self.idx
    }

    /// Values reachable from `node` along `relation`; a leading `^` walks the
    /// relation backwards.
    pub fn objects(&self, node: &Term, relation: &str) -> Option<&BTreeSet<Term>> {
        let (index, rel) = match relation.strip_prefix('^') {
            Some(r) => (&self.idx.inc, r),
            None => (&self.idx.out, relation),
        };
        index.get(node)?.get(rel)
    }

    /// Nodes that reach some member of `targets` along `relation`.
    pub fn subjects<'a>(
        &'a self,
        relation: &str,
        targets: impl IntoIterator<Item = &'a Term>,
    ) -> BTreeSet<Term> {
        let inverse = match relation.strip_prefix('^') {
            Some(r) => r.to_string(),
            None => format!("^{relation}"),
        };
        targets
            .into_iter()
            .filter_map(|t| self.objects(t, &inverse))
            .flatten()
            .cloned()
            .collect()
    }

    pub fn has_triple(&self, head: &Term, relation: &str, tail: &Term) -> bool {
        self.objects(head, relation).is_some_and(|s| s.contains(tail))
    }

    /// Relations adjacent to any of `entities`, tagged with the side the
    /// entity sits on.
    pub fn neighbor_relations<'a>(
        &self,
        entities: impl IntoIterator<Item = &'a Term>,
    ) -> Result<BTreeSet<(String, Direction)>, KbError> {
        let mut any = false;
        let mut out = BTreeSet::new();
        for e in entities {
            any = true;
            if let Some(rels) = self.idx.out.get(e) {
                out.extend(rels.keys().map(|r| (r.clone(), Direction::Out)));
            }
            if let Some(rels) = self.idx.inc.get(e) {
                out.extend(rels.keys().map(|r| (r.clone(), Direction::In)));
            }
        }
        if !any {
            return Err(KbError::EmptyEntitySet);
        }
        Ok(out)
    }

    pub fn evaluate(&self, tree: &ExpressionTree) -> ResultSet {
        evaluate(self, tree)
    }
}

pub fn parse_triples(text: &str) -> (Vec<Triple>, LoadReport) {
    let mut report = LoadReport::default();
    let mut seen = BTreeSet::new();
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        report.lines += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_line(trimmed) {
            Ok(t) => {
                if seen.insert(t.clone()) {
                    report.ingested += 1;
                    triples.push(t);
                } else {
                    report.duplicates += 1;
                }
            }
            Err(reason) => report.skipped.push(MalformedTriple { line: i + 1, reason }),
        }
    }
    (triples, report)
}

/// Executor output: an answer set, or a cardinality for `COUNT` roots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultSet {
    Entities { items: BTreeSet<Term> },
    Number { value: u64 },
}

impl ResultSet {
    pub fn entities(items: impl IntoIterator<Item = Term>) -> Self {
        ResultSet::Entities {
            items: items.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ResultSet::Entities { items } => items.len(),
            ResultSet::Number { .. } => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ResultSet::Entities { items } if items.is_empty())
    }

    /// Answer strings as they would appear in an `<answer>` payload.
    pub fn answers(&self) -> Vec<String> {
        match self {
            ResultSet::Entities { items } => items.iter().map(|t| t.as_str().to_string()).collect(),
            ResultSet::Number { value } => vec![value.to_string()],
        }
    }

    /// First `k` items paired with their display labels.
    pub fn truncated_view(&self, kb: &KnowledgeBase, k: usize) -> Vec<(String, Option<String>)> {
        match self {
            ResultSet::Entities { items } => items
                .iter()
                .take(k)
                .map(|t| {
                    let label = match t {
                        Term::Entity(e) => kb.label(e).map(String::from),
                        Term::Literal(_) => None,
                    };
                    (t.as_str().to_string(), label)
                })
                .collect(),
            ResultSet::Number { value } => vec![(value.to_string(), None)],
        }
    }
}

/// Relation holding the end of an interval whose start is `relation`,
/// following the `from`/`to` and `start`/`end` naming conventions.
pub fn paired_end_relation(relation: &str) -> Option<String> {
    let (prefix, last) = relation.rsplit_once('.')?;
    let end = if let Some(stem) = last.strip_suffix("from") {
        format!("{stem}to")
    } else if let Some(stem) = last.strip_suffix("start") {
        format!("{stem}end")
    } else {
        format!("end{}", last.strip_prefix("start")?)
    };
    Some(format!("{prefix}.{end}"))
}

/// True when `value` equals `time`, or `time` is a bare year matching the
/// year component of `value`.
pub fn time_value_matches(value: &str, time: &TimeLiteral) -> bool {
    value == time.as_str()
        || (time.is_bare_year() && value.split('-').next() == Some(time.as_str()))
}

fn eval_set(kb: &KnowledgeBase, tree: &ExpressionTree) -> BTreeSet<Term> {
    match tree {
        ExpressionTree::Start(e) => BTreeSet::from([Term::from_token(e)]),
        ExpressionTree::Join { relation, child } => {
            let targets = eval_set(kb, child);
            kb.subjects(relation, &targets)
        }
        ExpressionTree::And(a, b) => {
            let left = eval_set(kb, a);
            let right = eval_set(kb, b);
            left.intersection(&right).cloned().collect()
        }
        ExpressionTree::TypeConstraint {
            child,
            ontology_type,
        } => {
            let ty = Term::from_token(ontology_type);
            eval_set(kb, child)
                .into_iter()
                .filter(|x| kb.has_triple(x, &kb.config.type_relation, &ty))
                .collect()
        }
        ExpressionTree::Arg {
            mode,
            child,
            relation,
        } => {
            let scored: Vec<(Term, f64)> = eval_set(kb, child)
                .into_iter()
                .flat_map(|x| {
                    let values: Vec<f64> = kb
                        .objects(&x, relation)
                        .into_iter()
                        .flatten()
                        .filter_map(Term::numeric)
                        .collect();
                    values.into_iter().map(move |v| (x.clone(), v))
                })
                .collect();
            let best = scored.iter().map(|(_, v)| *v).reduce(|a, b| match mode {
                ArgMode::Max => a.max(b),
                ArgMode::Min => a.min(b),
            });
            match best {
                None => BTreeSet::new(),
                Some(best) => scored
                    .into_iter()
                    .filter(|(_, v)| *v == best)
                    .map(|(x, _)| x)
                    .collect(),
            }
        }
        ExpressionTree::Cmp {
            mode,
            relation,
            value,
            child,
        } => eval_set(kb, child)
            .into_iter()
            .filter(|x| {
                kb.objects(x, relation)
                    .into_iter()
                    .flatten()
                    .filter_map(Term::numeric)
                    .any(|u| mode.holds(u, value.value()))
            })
            .collect(),
        ExpressionTree::Tc {
            child,
            relation,
            time,
        } => {
            let end = paired_end_relation(relation);
            eval_set(kb, child)
                .into_iter()
                .filter(|x| {
                    let mut values = kb
                        .objects(x, relation)
                        .into_iter()
                        .flatten()
                        .filter(|u| u.is_literal());
                    if time.is_now() {
                        let open = end
                            .as_deref()
                            .is_none_or(|e| kb.objects(x, e).is_none_or(|s| s.is_empty()));
                        values.next().is_some() && open
                    } else {
                        values.any(|u| time_value_matches(u.as_str(), time))
                    }
                })
                .collect()
        }
        ExpressionTree::Count(child) => {
            BTreeSet::from([Term::Literal(eval_set(kb, child).len().to_string())])
        }
    }
}

/// Set semantics of an expression tree over `kb`. Total: values that do not
/// parse as numbers or times are skipped, never raised.
pub fn evaluate(kb: &KnowledgeBase, tree: &ExpressionTree) -> ResultSet {
    match tree {
        ExpressionTree::Count(child) => ResultSet::Number {
            value: eval_set(kb, child).len() as u64,
        },
        t => ResultSet::Entities {
            items: eval_set(kb, t),
        },
    }
}
