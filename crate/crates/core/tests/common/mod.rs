#![allow(dead_code, clippy::manual_strip)]

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use kbqa_core::expression::{slot_name, ArgMode, CmpMode, ExpressionState, ExpressionTree, Numeric, TimeLiteral};
use kbqa_core::grpo::{grpo_batch_objective, GrpoConfig, RolloutGroup};
use kbqa_core::transcript::{Action, ActionKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURE_KB1: &str = include_str!("../../../../data/fixture_kb1.triples");

/// Seeded random KB text: 50 entities, 8 relations, exactly 300 distinct
/// triples. Mixes entity links, types, numbers (some malformed), interval
/// dates and free-text names.
pub fn random_kb_text(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..50).map(|i| format!("m.e{i:02}")).collect();
    let relations = [
        "rel.link.a",
        "rel.link.b",
        "rel.link.c",
        "type.object.type",
        "num.stats.score",
        "time.span.from",
        "time.span.to",
        "rel.misc.name",
    ];
    let types = ["t.kind.a", "t.kind.b", "t.kind.c"];
    let numbers = ["3", "-1.5", "2.25", "10", "0.5", "abc", "1e5", "7"];
    let dates = ["2001", "2001-05", "2001-05-17", "1999-12-31", "2010-01-01", "2010"];
    let mut seen = BTreeSet::new();
    let mut lines = Vec::new();
    while lines.len() < 300 {
        let h = entities.choose(&mut rng).unwrap();
        let r = *relations.choose(&mut rng).unwrap();
        let t = match r {
            "type.object.type" => types.choose(&mut rng).unwrap().to_string(),
            "num.stats.score" => {
                let n = numbers.choose(&mut rng).unwrap();
                if rng.gen_bool(0.5) || n.contains('e') || n.chars().any(|c| c.is_alphabetic()) {
                    format!("\"{n}\"")
                } else {
                    n.to_string()
                }
            }
            "time.span.from" | "time.span.to" => format!("\"{}\"", dates.choose(&mut rng).unwrap()),
            "rel.misc.name" => format!("\"name {}\"", rng.gen_range(0..20)),
            _ => entities.choose(&mut rng).unwrap().clone(),
        };
        let line = format!("{h} {r} {t}");
        if seen.insert(line.clone()) {
            lines.push(line);
        }
    }
    lines.join("\n") + "\n"
}

/// A node of the oracle: (is_literal, text).
pub type Node = (bool, String);

#[derive(Debug, Clone)]
pub struct OracleTriple {
    pub head: String,
    pub relation: String,
    pub tail: Node,
}

fn is_decimal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let mut parts = body.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

fn is_date(s: &str) -> bool {
    let fields: Vec<&str> = s.split('-').collect();
    let widths = [4usize, 2, 2];
    fields.len() <= 3
        && fields
            .iter()
            .zip(widths.iter())
            .all(|(f, w)| f.len() == *w && f.bytes().all(|b| b.is_ascii_digit()))
}

/// Token classification used by the brute-force oracle.
pub fn classify(token: &str) -> Node {
    let t = token.trim();
    if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
        return (true, t[1..t.len() - 1].to_string());
    }
    if t.starts_with("m.") || t.starts_with("g.") {
        return (false, t.to_string());
    }
    if is_decimal(t) || is_date(t) {
        return (true, t.to_string());
    }
    (false, t.to_string())
}

pub fn oracle_triples(text: &str) -> Vec<OracleTriple> {
    let mut out: Vec<OracleTriple> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.splitn(3, char::is_whitespace);
        let (Some(h), Some(r), Some(t)) = (it.next(), it.next(), it.next()) else {
            continue;
        };
        let tr = OracleTriple {
            head: h.to_string(),
            relation: r.to_string(),
            tail: classify(t),
        };
        if !out
            .iter()
            .any(|o| o.head == tr.head && o.relation == tr.relation && o.tail == tr.tail)
        {
            out.push(tr);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleResult {
    Set(BTreeSet<Node>),
    Number(u64),
}

pub struct Oracle {
    pub triples: Vec<OracleTriple>,
}

fn num(s: &str) -> Option<f64> {
    is_decimal(s).then(|| s.parse().unwrap())
}

impl Oracle {
    pub fn new(text: &str) -> Self {
        Oracle {
            triples: oracle_triples(text),
        }
    }

    /// Every (x, value) pair with x in `xs` and an edge along `rel`.
    fn values(&self, x: &Node, rel: &str) -> Vec<Node> {
        let mut out = Vec::new();
        for t in &self.triples {
            if let Some(r) = rel.strip_prefix('^') {
                if t.relation == r && &t.tail == x {
                    out.push((false, t.head.clone()));
                }
            } else if t.relation == rel && !x.0 && t.head == x.1 {
                out.push(t.tail.clone());
            }
        }
        out
    }

    fn end_relation(rel: &str) -> Option<String> {
        let dot = rel.rfind('.')?;
        let (prefix, last) = (&rel[..dot], &rel[dot + 1..]);
        let replaced = if last.ends_with("from") {
            format!("{}to", &last[..last.len() - 4])
        } else if last.ends_with("start") {
            format!("{}end", &last[..last.len() - 5])
        } else if last.starts_with("start") {
            format!("end{}", &last[5..])
        } else {
            return None;
        };
        Some(format!("{prefix}.{replaced}"))
    }

    fn set(&self, tree: &ExpressionTree) -> BTreeSet<Node> {
        match tree {
            ExpressionTree::Start(e) => [classify(e)].into_iter().collect(),
            ExpressionTree::Join { relation, child } => {
                let s = self.set(child);
                let mut out = BTreeSet::new();
                for t in &self.triples {
                    match relation.strip_prefix('^') {
                        Some(r) => {
                            if t.relation == r && s.contains(&(false, t.head.clone())) {
                                out.insert(t.tail.clone());
                            }
                        }
                        None => {
                            if &t.relation == relation && s.contains(&t.tail) {
                                out.insert((false, t.head.clone()));
                            }
                        }
                    }
                }
                out
            }
            ExpressionTree::And(a, b) => {
                let (a, b) = (self.set(a), self.set(b));
                a.into_iter().filter(|x| b.contains(x)).collect()
            }
            ExpressionTree::TypeConstraint {
                child,
                ontology_type,
            } => {
                let ty = classify(ontology_type);
                self.set(child)
                    .into_iter()
                    .filter(|x| self.values(x, "type.object.type").contains(&ty))
                    .collect()
            }
            ExpressionTree::Arg {
                mode,
                child,
                relation,
            } => {
                let mut pairs = Vec::new();
                for x in self.set(child) {
                    for v in self.values(&x, relation) {
                        if v.0 {
                            if let Some(n) = num(&v.1) {
                                pairs.push((x.clone(), n));
                            }
                        }
                    }
                }
                let mut best: Option<f64> = None;
                for (_, n) in &pairs {
                    best = Some(match (best, mode) {
                        (None, _) => *n,
                        (Some(b), ArgMode::Max) => if *n > b { *n } else { b },
                        (Some(b), ArgMode::Min) => if *n < b { *n } else { b },
                    });
                }
                pairs
                    .into_iter()
                    .filter(|(_, n)| Some(*n) == best)
                    .map(|(x, _)| x)
                    .collect()
            }
            ExpressionTree::Cmp {
                mode,
                relation,
                value,
                child,
            } => {
                let v = value.value();
                self.set(child)
                    .into_iter()
                    .filter(|x| {
                        self.values(x, relation).iter().any(|u| {
                            u.0 && num(&u.1).is_some_and(|n| match mode {
                                CmpMode::Le => n <= v,
                                CmpMode::Lt => n < v,
                                CmpMode::Ge => n >= v,
                                CmpMode::Gt => n > v,
                            })
                        })
                    })
                    .collect()
            }
            ExpressionTree::Tc {
                child,
                relation,
                time,
            } => {
                let t = time.as_str();
                self.set(child)
                    .into_iter()
                    .filter(|x| {
                        let lits: Vec<Node> =
                            self.values(x, relation).into_iter().filter(|u| u.0).collect();
                        if t == "NOW" {
                            let open = match Self::end_relation(relation) {
                                Some(end) => self.values(x, &end).is_empty(),
                                None => true,
                            };
                            !lits.is_empty() && open
                        } else {
                            lits.iter().any(|u| {
                                u.1 == t || (t.len() == 4 && u.1.split('-').next() == Some(t))
                            })
                        }
                    })
                    .collect()
            }
            ExpressionTree::Count(c) => [(true, self.set(c).len().to_string())].into_iter().collect(),
        }
    }

    pub fn eval(&self, tree: &ExpressionTree) -> OracleResult {
        match tree {
            ExpressionTree::Count(c) => OracleResult::Number(self.set(c).len() as u64),
            t => OracleResult::Set(self.set(t)),
        }
    }
}

pub fn from_result(r: &kbqa_core::kb::ResultSet) -> OracleResult {
    use kbqa_core::kb::{ResultSet, Term};
    match r {
        ResultSet::Number { value } => OracleResult::Number(*value),
        ResultSet::Entities { items } => OracleResult::Set(
            items
                .iter()
                .map(|t| match t {
                    Term::Entity(e) => (false, e.clone()),
                    Term::Literal(l) => (true, l.clone()),
                })
                .collect(),
        ),
    }
}

/// Vocabulary for random trees, drawn from the KB text.
pub struct Vocab {
    pub triples: Vec<OracleTriple>,
    pub relations: Vec<String>,
    pub types: Vec<String>,
    pub numbers: Vec<String>,
    pub times: Vec<String>,
}

impl Vocab {
    pub fn new(text: &str) -> Self {
        let triples = oracle_triples(text);
        let relations: BTreeSet<String> = triples.iter().map(|t| t.relation.clone()).collect();
        let types: BTreeSet<String> = triples
            .iter()
            .filter(|t| t.relation == "type.object.type")
            .map(|t| t.tail.1.clone())
            .collect();
        let mut numbers: BTreeSet<String> = triples
            .iter()
            .filter(|t| t.tail.0 && is_decimal(&t.tail.1))
            .map(|t| t.tail.1.clone())
            .collect();
        numbers.extend(["0", "1.7", "-2", "5.5"].map(String::from));
        let mut times: BTreeSet<String> = triples
            .iter()
            .filter(|t| t.tail.0 && is_date(&t.tail.1))
            .map(|t| t.tail.1.clone())
            .collect();
        times.extend(["NOW", "2009", "2001", "2010"].map(String::from));
        Vocab {
            triples,
            relations: relations.into_iter().collect(),
            types: types.into_iter().collect(),
            numbers: numbers.into_iter().collect(),
            times: times.into_iter().collect(),
        }
    }

    fn token(node: &Node) -> String {
        if node.0 && classify(&node.1) != *node {
            format!("\"{}\"", node.1)
        } else {
            node.1.clone()
        }
    }

    fn relation(&self, rng: &mut ChaCha8Rng) -> String {
        let r = self.relations.choose(rng).unwrap().clone();
        match rng.gen_range(0..20) {
            0 => "no.such.rel".into(),
            1..=3 => format!("^{r}"),
            _ => r,
        }
    }

    fn leaf(&self, rng: &mut ChaCha8Rng) -> ExpressionTree {
        let t = self.triples.choose(rng).unwrap();
        match rng.gen_range(0..10) {
            0 => ExpressionTree::join(self.relation(rng), ExpressionTree::start("m.absent")),
            1..=6 => ExpressionTree::join(t.relation.clone(), ExpressionTree::start(Self::token(&t.tail))),
            _ => ExpressionTree::join(format!("^{}", t.relation), ExpressionTree::start(t.head.clone())),
        }
    }

    fn gen(&self, rng: &mut ChaCha8Rng, depth: usize) -> ExpressionTree {
        if depth <= 1 || rng.gen_bool(0.25) {
            return self.leaf(rng);
        }
        let sub = |rng: &mut ChaCha8Rng| self.gen(rng, depth - 1);
        match rng.gen_range(0..6) {
            0 => {
                let c = sub(rng);
                ExpressionTree::join(self.relation(rng), c)
            }
            1 => {
                let a = sub(rng);
                let b = sub(rng);
                ExpressionTree::and(a, b)
            }
            2 => {
                let c = sub(rng);
                let ty = self
                    .types
                    .choose(rng)
                    .cloned()
                    .unwrap_or_else(|| "t.none".into());
                ExpressionTree::type_constraint(c, ty)
            }
            3 => {
                let c = sub(rng);
                let mode = if rng.gen_bool(0.5) { ArgMode::Max } else { ArgMode::Min };
                ExpressionTree::arg(mode, c, self.relation(rng))
            }
            4 => {
                let c = sub(rng);
                let mode = *CmpMode::ALL.choose(rng).unwrap();
                let v = Numeric::parse(self.numbers.choose(rng).unwrap()).unwrap();
                ExpressionTree::Cmp {
                    mode,
                    relation: self.relation(rng),
                    value: v,
                    child: Box::new(c),
                }
            }
            _ => {
                let c = sub(rng);
                let t = TimeLiteral::parse(self.times.choose(rng).unwrap()).unwrap();
                ExpressionTree::tc(c, self.relation(rng), t)
            }
        }
    }

    /// A valid tree of depth at most `depth`, occasionally under a COUNT.
    pub fn tree(&self, rng: &mut ChaCha8Rng, depth: usize) -> ExpressionTree {
        if depth >= 2 && rng.gen_bool(0.15) {
            ExpressionTree::count(self.gen(rng, depth - 1))
        } else {
            self.gen(rng, depth)
        }
    }
}

pub struct HttpRequest {
    pub method: String,
    pub target: String,
    pub body: String,
}

/// Serves HTTP/1.1 requests on a background thread until the process
/// exits. Returns the bound base URL.
pub fn serve<F>(handler: F) -> String
where
    F: Fn(HttpRequest) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handler = std::sync::Arc::new(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let handler = handler.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    return;
                }
                let mut length = 0usize;
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                let _ = reader.read_exact(&mut body);
                let mut parts = request_line.split_whitespace();
                let req = HttpRequest {
                    method: parts.next().unwrap_or("").to_string(),
                    target: parts.next().unwrap_or("").to_string(),
                    body: String::from_utf8_lossy(&body).into_owned(),
                };
                let (status, out) = handler(req);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                    out.len()
                );
            });
        }
    });
    format!("http://{addr}")
}

// Random action sequences.

pub const ENTITIES: &[&str] = &["m.01", "m.02", "m.20", "m.0abc", "\"1.80\"", "\"2001\""];
pub const RELATIONS: &[&str] = &[
    "people.person.place_of_birth",
    "^people.person.parents",
    "film.film.directed_by",
    "^location.location.containedby",
];
pub const TYPES: &[&str] = &["people.person", "film.film", "location.city"];
pub const NUMBERS: &[&str] = &["1.7", "0", "-3.25", "2001", "12"];
pub const TIMES: &[&str] = &["2001", "1999-05", "2010-01-31", "NOW"];

pub fn random_action(rng: &mut ChaCha8Rng, state: &ExpressionState) -> Action {
    let slots: Vec<String> = state.slots().keys().map(|id| slot_name(*id)).collect();
    let slot = |rng: &mut ChaCha8Rng| {
        slots
            .choose(rng)
            .cloned()
            .unwrap_or_else(|| "expression1".to_string())
    };
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs.choose(rng).unwrap().to_string();
    match rng.gen_range(0..10) {
        0..=3 => {
            let head = if slots.is_empty() || rng.gen_bool(0.4) {
                pick(rng, ENTITIES)
            } else {
                slot(rng)
            };
            Action::new(ActionKind::FindRelation, [head, pick(rng, RELATIONS)])
        }
        4 => Action::new(ActionKind::Merge, [slot(rng), slot(rng)]),
        5 => Action::new(ActionKind::Merge, [pick(rng, TYPES), slot(rng)]),
        6 => Action::new(
            ActionKind::Order,
            [pick(rng, &["max", "min"]), slot(rng), pick(rng, RELATIONS)],
        ),
        7 => Action::new(
            ActionKind::Compare,
            [pick(rng, &["lt", "le", "gt", "ge"]), pick(rng, RELATIONS), pick(rng, NUMBERS)],
        ),
        8 => Action::new(ActionKind::TimeConstraint, [pick(rng, RELATIONS), pick(rng, TIMES)]),
        _ => Action::new(ActionKind::Count, [slot(rng)]),
    }
}

/// Builds a state from up to `len` random actions that apply cleanly.
pub fn random_state(rng: &mut ChaCha8Rng, len: usize) -> (ExpressionState, Vec<Action>) {
    let mut state = ExpressionState::new();
    let mut applied = Vec::new();
    let mut attempts = 0;
    while applied.len() < len && attempts < 200 {
        attempts += 1;
        let a = random_action(rng, &state);
        if state.apply(&a).is_ok() {
            applied.push(a);
        }
    }
    (state, applied)
}

// Finite-difference checks of the GRPO gradient.

pub const H: f64 = 1e-6;

/// Log-ratio kept at least `margin` away from both clip edges.
pub fn off_boundary(rng: &mut ChaCha8Rng, old: f64, cfg: &GrpoConfig) -> f64 {
    let edges = [(1.0 - cfg.eps_low).ln(), (1.0 + cfg.eps_high).ln()];
    loop {
        let d: f64 = rng.gen_range(-0.6..0.6);
        if edges.iter().all(|e| (d - e).abs() > 1e-3) {
            return old + d;
        }
    }
}

pub fn random_group(rng: &mut ChaCha8Rng, cfg: &GrpoConfig) -> RolloutGroup {
    let n = rng.gen_range(2..=6);
    let mut g = RolloutGroup {
        rewards: (0..n).map(|_| rng.gen_range(0.0..1.1)).collect(),
        token_logps_new: Vec::new(),
        token_logps_old: Vec::new(),
        token_logps_ref: Vec::new(),
    };
    for _ in 0..n {
        let len = rng.gen_range(1..=8);
        let old: Vec<f64> = (0..len).map(|_| rng.gen_range(-4.0..-0.05)).collect();
        let new = old.iter().map(|o| off_boundary(rng, *o, cfg)).collect();
        let rf = old.iter().map(|o| o + rng.gen_range(-0.5..0.5)).collect();
        g.token_logps_old.push(old);
        g.token_logps_new.push(new);
        g.token_logps_ref.push(rf);
    }
    g
}

pub fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error (vector norm) between the analytic gradient and
/// central differences over 100 random off-boundary groups.
pub fn check_gradients(cfg: &GrpoConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g = random_group(&mut rng, cfg);
        let analytic = grpo_batch_objective(&g, cfg).unwrap().gradient;
        let mut numeric = Vec::new();
        for i in 0..g.token_logps_new.len() {
            let mut row = Vec::new();
            for t in 0..g.token_logps_new[i].len() {
                let mut plus = g.clone();
                plus.token_logps_new[i][t] += H;
                let mut minus = g.clone();
                minus.token_logps_new[i][t] -= H;
                let fp = grpo_batch_objective(&plus, cfg).unwrap().objective;
                let fm = grpo_batch_objective(&minus, cfg).unwrap().objective;
                row.push((fp - fm) / (2.0 * H));
            }
            numeric.push(row);
        }
        let a = analytic.iter().flatten().copied();
        let diff = norm(a.clone().zip(numeric.iter().flatten()).map(|(x, y)| x - y));
        let scale = norm(a).max(norm(numeric.iter().flatten().copied()));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}
