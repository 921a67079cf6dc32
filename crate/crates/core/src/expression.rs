//! Logical-form state, S-Expression serialization and parsing, and the
//! inversion of S-Expressions into action sequences.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{Action, ActionKind};

pub type SlotId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArgMode {
    Max,
    Min,
}

impl ArgMode {
    /// Operator spelling inside S-Expressions.
    pub fn operator(self) -> &'static str {
        match self {
            ArgMode::Max => "ARGMAX",
            ArgMode::Min => "ARGMIN",
        }
    }

    /// Argument spelling inside `Order` actions.
    pub fn token(self) -> &'static str {
        match self {
            ArgMode::Max => "MAX",
            ArgMode::Min => "MIN",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MAX" | "ARGMAX" => Some(ArgMode::Max),
            "MIN" | "ARGMIN" => Some(ArgMode::Min),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmpMode {
    Le,
    Lt,
    Ge,
    Gt,
}

impl CmpMode {
    pub const ALL: [CmpMode; 4] = [CmpMode::Le, CmpMode::Lt, CmpMode::Ge, CmpMode::Gt];

    pub fn token(self) -> &'static str {
        match self {
            CmpMode::Le => "le",
            CmpMode::Lt => "lt",
            CmpMode::Ge => "ge",
            CmpMode::Gt => "gt",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.token().eq_ignore_ascii_case(s.trim()))
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpMode::Le => lhs <= rhs,
            CmpMode::Lt => lhs < rhs,
            CmpMode::Ge => lhs >= rhs,
            CmpMode::Gt => lhs > rhs,
        }
    }

    /// SPARQL comparison operator.
    pub fn symbol(self) -> &'static str {
        match self {
            CmpMode::Le => "<=",
            CmpMode::Lt => "<",
            CmpMode::Ge => ">=",
            CmpMode::Gt => ">",
        }
    }
}

/// Parses the decimal grammar shared by comparison thresholds and KB
/// attribute values: optional sign, digits, optional fraction.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    s.parse().ok().filter(|v: &f64| v.is_finite())
}

/// A finite decimal threshold. Displays in shortest round-trip form.
#[derive(Debug, Clone, Copy)]
pub struct Numeric(f64);

impl Numeric {
    pub fn parse(s: &str) -> Option<Self> {
        parse_decimal(s.trim()).map(Numeric)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl PartialEq for Numeric {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Numeric {}

impl std::hash::Hash for Numeric {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl fmt::Display for Numeric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `YYYY`, `YYYY-MM`, `YYYY-MM-DD` or `NOW`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimeLiteral(String);

impl TimeLiteral {
    pub const NOW: &'static str = "NOW";

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case(Self::NOW) {
            return Some(TimeLiteral(Self::NOW.into()));
        }
        let parts: Vec<&str> = s.split('-').collect();
        let widths = [4, 2, 2];
        let ok = !parts.is_empty()
            && parts.len() <= 3
            && parts
                .iter()
                .zip(widths)
                .all(|(p, w)| p.len() == w && p.bytes().all(|b| b.is_ascii_digit()));
        ok.then(|| TimeLiteral(s.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_now(&self) -> bool {
        self.0 == Self::NOW
    }

    pub fn is_bare_year(&self) -> bool {
        self.0.len() == 4 && !self.is_now()
    }
}

impl fmt::Display for TimeLiteral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExpressionTree {
    /// Entity id or literal token.
    Start(String),
    Join {
        relation: String,
        child: Box<ExpressionTree>,
    },
    And(Box<ExpressionTree>, Box<ExpressionTree>),
    TypeConstraint {
        child: Box<ExpressionTree>,
        ontology_type: String,
    },
    Arg {
        mode: ArgMode,
        child: Box<ExpressionTree>,
        relation: String,
    },
    Cmp {
        mode: CmpMode,
        relation: String,
        value: Numeric,
        child: Box<ExpressionTree>,
    },
    Tc {
        child: Box<ExpressionTree>,
        relation: String,
        time: TimeLiteral,
    },
    Count(Box<ExpressionTree>),
}

impl ExpressionTree {
    pub fn start(token: impl Into<String>) -> Self {
        ExpressionTree::Start(token.into())
    }

    pub fn join(relation: impl Into<String>, child: ExpressionTree) -> Self {
        ExpressionTree::Join {
            relation: relation.into(),
            child: Box::new(child),
        }
    }

    pub fn and(left: ExpressionTree, right: ExpressionTree) -> Self {
        ExpressionTree::And(Box::new(left), Box::new(right))
    }

    pub fn type_constraint(child: ExpressionTree, ontology_type: impl Into<String>) -> Self {
        ExpressionTree::TypeConstraint {
            child: Box::new(child),
            ontology_type: ontology_type.into(),
        }
    }

    pub fn arg(mode: ArgMode, child: ExpressionTree, relation: impl Into<String>) -> Self {
        ExpressionTree::Arg {
            mode,
            child: Box::new(child),
            relation: relation.into(),
        }
    }

    pub fn cmp(mode: CmpMode, relation: impl Into<String>, value: f64, child: ExpressionTree) -> Self {
        ExpressionTree::Cmp {
            mode,
            relation: relation.into(),
            value: Numeric(value),
            child: Box::new(child),
        }
    }

    pub fn tc(child: ExpressionTree, relation: impl Into<String>, time: TimeLiteral) -> Self {
        ExpressionTree::Tc {
            child: Box::new(child),
            relation: relation.into(),
            time,
        }
    }

    pub fn count(child: ExpressionTree) -> Self {
        ExpressionTree::Count(Box::new(child))
    }

    pub fn is_count(&self) -> bool {
        matches!(self, ExpressionTree::Count(_))
    }

    pub fn depth(&self) -> usize {
        match self {
            ExpressionTree::Start(_) => 0,
            ExpressionTree::And(a, b) => 1 + a.depth().max(b.depth()),
            ExpressionTree::Join { child, .. }
            | ExpressionTree::TypeConstraint { child, .. }
            | ExpressionTree::Arg { child, .. }
            | ExpressionTree::Cmp { child, .. }
            | ExpressionTree::Tc { child, .. }
            | ExpressionTree::Count(child) => 1 + child.depth(),
        }
    }

    /// A tree is action-expressible when `Start` leaves only sit directly
    /// under `Join` and `Count` only appears at the root.
    pub fn validate(&self) -> Result<(), InvalidTree> {
        fn walk(t: &ExpressionTree, root: bool) -> Result<(), InvalidTree> {
            match t {
                ExpressionTree::Start(e) => Err(InvalidTree::BareStart(e.clone())),
                ExpressionTree::Join { child, .. } => match child.as_ref() {
                    ExpressionTree::Start(_) => Ok(()),
                    c => walk(c, false),
                },
                ExpressionTree::And(a, b) => {
                    walk(a, false)?;
                    walk(b, false)
                }
                ExpressionTree::Count(c) if root => walk(c, false),
                ExpressionTree::Count(_) => Err(InvalidTree::NestedCount),
                ExpressionTree::TypeConstraint { child, .. }
                | ExpressionTree::Arg { child, .. }
                | ExpressionTree::Cmp { child, .. }
                | ExpressionTree::Tc { child, .. } => walk(child, false),
            }
        }
        walk(self, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidTree {
    #[error("entity `{0}` appears outside a JOIN")]
    BareStart(String),
    #[error("COUNT may only appear at the root")]
    NestedCount,
}

/// Canonical S-Expression rendering.
impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpressionTree::Start(e) => f.write_str(e),
            ExpressionTree::Join { relation, child } => write!(f, "(JOIN {relation} {child})"),
            ExpressionTree::And(a, b) => write!(f, "(AND {a} {b})"),
            ExpressionTree::TypeConstraint {
                child,
                ontology_type,
            } => write!(f, "(AND {ontology_type} {child})"),
            ExpressionTree::Arg {
                mode,
                child,
                relation,
            } => write!(f, "({} {child} {relation})", mode.operator()),
            ExpressionTree::Cmp {
                mode,
                relation,
                value,
                child,
            } => write!(f, "({} {relation} {value} {child})", mode.token()),
            ExpressionTree::Tc {
                child,
                relation,
                time,
            } => write!(f, "(TC {child} {relation} {time})"),
            ExpressionTree::Count(c) => write!(f, "(COUNT {c})"),
        }
    }
}

pub fn serialize(tree: &ExpressionTree) -> String {
    tree.to_string()
}

/// Positions are 1-based character columns; end of input is reported as
/// one past the last character.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SexprError {
    #[error("unbalanced parentheses at position {position}")]
    UnbalancedParens { position: usize },
    #[error("unknown operator `{operator}` at position {position}")]
    UnknownOperator { operator: String, position: usize },
    #[error("{operator} takes {expected} operand(s), found {found} at position {position}")]
    ArityError {
        operator: String,
        expected: usize,
        found: usize,
        position: usize,
    },
    #[error("expected {expected} at position {position}")]
    Expected {
        expected: &'static str,
        position: usize,
    },
    #[error("invalid number `{token}` at position {position}")]
    InvalidNumber { token: String, position: usize },
    #[error("invalid time literal `{token}` at position {position}")]
    InvalidTime { token: String, position: usize },
    #[error("COUNT must be the outermost operator (position {position})")]
    NestedCount { position: usize },
    #[error("unexpected trailing input at position {position}")]
    TrailingInput { position: usize },
}

#[derive(Debug)]
enum Token {
    Open(usize),
    Close(usize),
    Atom(String, usize),
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut atom = String::new();
    let mut atom_start = 0;
    for (i, c) in text.chars().enumerate() {
        let pos = i + 1;
        if c == '(' || c == ')' || c.is_whitespace() {
            if !atom.is_empty() {
                tokens.push(Token::Atom(std::mem::take(&mut atom), atom_start));
            }
            match c {
                '(' => tokens.push(Token::Open(pos)),
                ')' => tokens.push(Token::Close(pos)),
                _ => {}
            }
        } else {
            if atom.is_empty() {
                atom_start = pos;
            }
            atom.push(c);
        }
    }
    if !atom.is_empty() {
        tokens.push(Token::Atom(atom, atom_start));
    }
    tokens
}

enum Sexp {
    Atom(String, usize),
    List(Vec<Sexp>, usize),
}

impl Sexp {
    fn position(&self) -> usize {
        match self {
            Sexp::Atom(_, p) | Sexp::List(_, p) => *p,
        }
    }
}

struct Reader {
    tokens: Vec<Token>,
    pos: usize,
    eof: usize,
}

impl Reader {
    fn next(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn read(&mut self) -> Result<Option<Sexp>, SexprError> {
        let open = match self.next() {
            None => return Ok(None),
            Some(Token::Atom(a, p)) => return Ok(Some(Sexp::Atom(a.clone(), *p))),
            Some(Token::Close(p)) => return Err(SexprError::UnbalancedParens { position: *p }),
            Some(Token::Open(p)) => *p,
        };
        let mut items = Vec::new();
        loop {
            match self.tokens.get(self.pos) {
                None => return Err(SexprError::UnbalancedParens { position: self.eof }),
                Some(Token::Close(_)) => {
                    self.pos += 1;
                    return Ok(Some(Sexp::List(items, open)));
                }
                Some(_) => items.push(self.read()?.expect("token available")),
            }
        }
    }
}

fn atom(s: &Sexp, expected: &'static str) -> Result<String, SexprError> {
    match s {
        Sexp::Atom(a, _) => Ok(a.clone()),
        Sexp::List(_, p) => Err(SexprError::Expected {
            expected,
            position: *p,
        }),
    }
}

fn subexpr(s: &Sexp) -> Result<ExpressionTree, SexprError> {
    match s {
        Sexp::List(..) => build(s, false),
        Sexp::Atom(_, p) => Err(SexprError::Expected {
            expected: "a parenthesized sub-expression",
            position: *p,
        }),
    }
}

fn build(s: &Sexp, root: bool) -> Result<ExpressionTree, SexprError> {
    let (items, position) = match s {
        Sexp::List(items, p) => (items, *p),
        Sexp::Atom(_, p) => {
            return Err(SexprError::Expected {
                expected: "a parenthesized expression",
                position: *p,
            })
        }
    };
    let (op, args) = match items.split_first() {
        Some((Sexp::Atom(op, _), args)) => (op.as_str(), args),
        Some((head, _)) => {
            return Err(SexprError::UnknownOperator {
                operator: "(".into(),
                position: head.position(),
            })
        }
        None => {
            return Err(SexprError::UnknownOperator {
                operator: String::new(),
                position,
            })
        }
    };
    let arity = |expected: usize| {
        if args.len() == expected {
            Ok(())
        } else {
            Err(SexprError::ArityError {
                operator: op.to_string(),
                expected,
                found: args.len(),
                position,
            })
        }
    };
    let upper = op.to_ascii_uppercase();
    match upper.as_str() {
        "JOIN" => {
            arity(2)?;
            let relation = atom(&args[0], "a relation")?;
            let child = match &args[1] {
                Sexp::Atom(e, _) => ExpressionTree::Start(e.clone()),
                list => build(list, false)?,
            };
            Ok(ExpressionTree::join(relation, child))
        }
        "AND" => {
            arity(2)?;
            match (&args[0], &args[1]) {
                (Sexp::Atom(ty, _), rhs) => {
                    Ok(ExpressionTree::type_constraint(subexpr(rhs)?, ty.clone()))
                }
                (lhs, rhs) => Ok(ExpressionTree::and(subexpr(lhs)?, subexpr(rhs)?)),
            }
        }
        "ARGMAX" | "ARGMIN" => {
            arity(2)?;
            let mode = ArgMode::from_token(&upper).expect("matched operator");
            let child = subexpr(&args[0])?;
            Ok(ExpressionTree::arg(mode, child, atom(&args[1], "a relation")?))
        }
        "LE" | "LT" | "GE" | "GT" => {
            arity(3)?;
            let mode = CmpMode::from_token(op).expect("matched operator");
            let relation = atom(&args[0], "a relation")?;
            let token = atom(&args[1], "a number")?;
            let value = Numeric::parse(&token).ok_or(SexprError::InvalidNumber {
                token,
                position: args[1].position(),
            })?;
            let child = subexpr(&args[2])?;
            Ok(ExpressionTree::Cmp {
                mode,
                relation,
                value,
                child: Box::new(child),
            })
        }
        "TC" => {
            arity(3)?;
            let child = subexpr(&args[0])?;
            let relation = atom(&args[1], "a relation")?;
            let token = atom(&args[2], "a time literal")?;
            let time = TimeLiteral::parse(&token).ok_or(SexprError::InvalidTime {
                token,
                position: args[2].position(),
            })?;
            Ok(ExpressionTree::tc(child, relation, time))
        }
        "COUNT" => {
            arity(1)?;
            if !root {
                return Err(SexprError::NestedCount { position });
            }
            Ok(ExpressionTree::count(subexpr(&args[0])?))
        }
        _ => Err(SexprError::UnknownOperator {
            operator: op.to_string(),
            position,
        }),
    }
}

/// Parses an S-Expression over JOIN/AND/ARGMAX/ARGMIN/le/lt/ge/gt/TC/COUNT.
/// Extra whitespace is tolerated; operator names match case-insensitively.
pub fn parse_sexpr(text: &str) -> Result<ExpressionTree, SexprError> {
    let eof = text.chars().count() + 1;
    let mut reader = Reader {
        tokens: tokenize(text),
        pos: 0,
        eof,
    };
    let top = reader.read()?.ok_or(SexprError::Expected {
        expected: "an expression",
        position: eof,
    })?;
    let tree = build(&top, true)?;
    match reader.next() {
        None => Ok(tree),
        Some(Token::Close(p)) => Err(SexprError::UnbalancedParens { position: *p }),
        Some(Token::Open(p)) | Some(Token::Atom(_, p)) => {
            Err(SexprError::TrailingInput { position: *p })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("`{0}` does not name an allocated expression")]
    UnresolvedSlot(String),
    #[error("invalid {kind} mode `{mode}`")]
    InvalidMode { kind: ActionKind, mode: String },
    #[error("expression{0} is already a COUNT; no further actions may build on it")]
    CountNotLast(SlotId),
    #[error("`{0}` is not a decimal number")]
    NumberParse(String),
    #[error("`{0}` is not a time literal (YYYY[-MM[-DD]] or NOW)")]
    TimeParse(String),
    #[error("{0} needs a current expression but none exists yet")]
    NoCurrentExpression(ActionKind),
    #[error("{kind} expects an expression token, got `{arg}`")]
    ExpectedExpression { kind: ActionKind, arg: String },
    #[error("{kind} expects {expected} argument(s), got {found}")]
    ArityMismatch {
        kind: ActionKind,
        expected: usize,
        found: usize,
    },
}

/// Parses `expressionN` (N >= 1 for a valid slot). Returns `None` for tokens
/// that are not slot references at all.
pub fn slot_token(arg: &str) -> Option<Result<SlotId, ActionError>> {
    let arg = arg.trim();
    let prefix = "expression";
    if arg.len() <= prefix.len() || !arg[..prefix.len()].eq_ignore_ascii_case(prefix) {
        return None;
    }
    let digits = &arg[prefix.len()..];
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(match digits.parse::<SlotId>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(ActionError::UnresolvedSlot(arg.to_string())),
    })
}

pub fn slot_name(id: SlotId) -> String {
    format!("expression{id}")
}

/// The evolving set of numbered expressions built up during an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpressionState {
    slots: BTreeMap<SlotId, ExpressionTree>,
    next_id: SlotId,
    current: Option<SlotId>,
}

impl Default for ExpressionState {
    fn default() -> Self {
        Self::new()
    }
}

enum Target {
    Existing(SlotId),
    Fresh,
}

impl ExpressionState {
    pub fn new() -> Self {
        ExpressionState {
            slots: BTreeMap::new(),
            next_id: 1,
            current: None,
        }
    }

    pub fn slots(&self) -> &BTreeMap<SlotId, ExpressionTree> {
        &self.slots
    }

    pub fn get(&self, id: SlotId) -> Option<&ExpressionTree> {
        self.slots.get(&id)
    }

    pub fn next_id(&self) -> SlotId {
        self.next_id
    }

    pub fn current(&self) -> Option<SlotId> {
        self.current
    }

    pub fn current_tree(&self) -> Option<&ExpressionTree> {
        self.current.and_then(|id| self.slots.get(&id))
    }

    fn resolve(&self, arg: &str) -> Result<(SlotId, &ExpressionTree), ActionError> {
        let id = match slot_token(arg) {
            Some(r) => r?,
            None => return Err(ActionError::UnresolvedSlot(arg.trim().to_string())),
        };
        let tree = self
            .slots
            .get(&id)
            .ok_or_else(|| ActionError::UnresolvedSlot(arg.trim().to_string()))?;
        if tree.is_count() {
            return Err(ActionError::CountNotLast(id));
        }
        Ok((id, tree))
    }

    fn resolve_expression(
        &self,
        kind: ActionKind,
        arg: &str,
    ) -> Result<(SlotId, &ExpressionTree), ActionError> {
        if slot_token(arg).is_none() {
            return Err(ActionError::ExpectedExpression {
                kind,
                arg: arg.to_string(),
            });
        }
        self.resolve(arg)
    }

    fn resolve_current(&self, kind: ActionKind) -> Result<(SlotId, &ExpressionTree), ActionError> {
        let id = self.current.ok_or(ActionError::NoCurrentExpression(kind))?;
        self.resolve(&slot_name(id))
    }

    fn plan(&self, a: &Action) -> Result<(Target, ExpressionTree), ActionError> {
        if a.args.len() != a.kind.arity() {
            return Err(ActionError::ArityMismatch {
                kind: a.kind,
                expected: a.kind.arity(),
                found: a.args.len(),
            });
        }
        let arg = |i: usize| a.args[i].trim();
        match a.kind {
            ActionKind::FindRelation => {
                let relation = arg(1).to_string();
                if slot_token(arg(0)).is_some() {
                    let (id, tree) = self.resolve(arg(0))?;
                    Ok((
                        Target::Existing(id),
                        ExpressionTree::join(relation, tree.clone()),
                    ))
                } else {
                    Ok((
                        Target::Fresh,
                        ExpressionTree::join(relation, ExpressionTree::start(arg(0))),
                    ))
                }
            }
            ActionKind::Merge => {
                let (id, right) = self.resolve_expression(a.kind, arg(1))?;
                let merged = if slot_token(arg(0)).is_some() {
                    let (_, left) = self.resolve(arg(0))?;
                    ExpressionTree::and(left.clone(), right.clone())
                } else {
                    ExpressionTree::type_constraint(right.clone(), arg(0))
                };
                Ok((Target::Existing(id), merged))
            }
            ActionKind::Order => {
                let mode = ArgMode::from_token(arg(0)).ok_or_else(|| ActionError::InvalidMode {
                    kind: a.kind,
                    mode: arg(0).to_string(),
                })?;
                let (id, tree) = self.resolve_expression(a.kind, arg(1))?;
                Ok((
                    Target::Existing(id),
                    ExpressionTree::arg(mode, tree.clone(), arg(2)),
                ))
            }
            ActionKind::Compare => {
                let mode = CmpMode::from_token(arg(0)).ok_or_else(|| ActionError::InvalidMode {
                    kind: a.kind,
                    mode: arg(0).to_string(),
                })?;
                let value =
                    Numeric::parse(arg(2)).ok_or_else(|| ActionError::NumberParse(arg(2).into()))?;
                let (id, tree) = self.resolve_current(a.kind)?;
                Ok((
                    Target::Existing(id),
                    ExpressionTree::Cmp {
                        mode,
                        relation: arg(1).to_string(),
                        value,
                        child: Box::new(tree.clone()),
                    },
                ))
            }
            ActionKind::TimeConstraint => {
                let time =
                    TimeLiteral::parse(arg(1)).ok_or_else(|| ActionError::TimeParse(arg(1).into()))?;
                let (id, tree) = self.resolve_current(a.kind)?;
                Ok((
                    Target::Existing(id),
                    ExpressionTree::tc(tree.clone(), arg(0), time),
                ))
            }
            ActionKind::Count => {
                let (id, tree) = self.resolve_expression(a.kind, arg(0))?;
                Ok((Target::Existing(id), ExpressionTree::count(tree.clone())))
            }
        }
    }

    /// Applies `a` in place. On error the state is left untouched.
    pub fn apply(&mut self, a: &Action) -> Result<SlotId, ActionError> {
        let (target, tree) = self.plan(a)?;
        let id = match target {
            Target::Existing(id) => id,
            Target::Fresh => {
                let id = self.next_id;
                self.next_id += 1;
                id
            }
        };
        self.slots.insert(id, tree);
        self.current = Some(id);
        Ok(id)
    }

    /// Value-style variant of [`ExpressionState::apply`].
    pub fn apply_action(&self, a: &Action) -> Result<(ExpressionState, SlotId), ActionError> {
        let mut next = self.clone();
        let id = next.apply(a)?;
        Ok((next, id))
    }
}

/// Linearizes a tree into the actions that rebuild it from an empty state
/// (post-order, left to right).
pub fn extract_actions(tree: &ExpressionTree) -> Result<Vec<Action>, InvalidTree> {
    tree.validate()?;
    let mut out = Vec::new();
    let mut next: SlotId = 1;
    emit(tree, &mut next, &mut out);
    Ok(out)
}

fn emit(tree: &ExpressionTree, next: &mut SlotId, out: &mut Vec<Action>) -> SlotId {
    match tree {
        ExpressionTree::Start(_) => unreachable!("validated trees have no bare Start"),
        ExpressionTree::Join { relation, child } => match child.as_ref() {
            ExpressionTree::Start(e) => {
                out.push(Action::new(
                    ActionKind::FindRelation,
                    [e.as_str(), relation.as_str()],
                ));
                let id = *next;
                *next += 1;
                id
            }
            sub => {
                let id = emit(sub, next, out);
                out.push(Action::new(
                    ActionKind::FindRelation,
                    [slot_name(id), relation.clone()],
                ));
                id
            }
        },
        ExpressionTree::And(a, b) => {
            let left = emit(a, next, out);
            let right = emit(b, next, out);
            out.push(Action::new(
                ActionKind::Merge,
                [slot_name(left), slot_name(right)],
            ));
            right
        }
        ExpressionTree::TypeConstraint {
            child,
            ontology_type,
        } => {
            let id = emit(child, next, out);
            out.push(Action::new(
                ActionKind::Merge,
                [ontology_type.clone(), slot_name(id)],
            ));
            id
        }
        ExpressionTree::Arg {
            mode,
            child,
            relation,
        } => {
            let id = emit(child, next, out);
            out.push(Action::new(
                ActionKind::Order,
                [mode.token().to_string(), slot_name(id), relation.clone()],
            ));
            id
        }
        ExpressionTree::Cmp {
            mode,
            relation,
            value,
            child,
        } => {
            let id = emit(child, next, out);
            out.push(Action::new(
                ActionKind::Compare,
                [mode.token().to_string(), relation.clone(), value.to_string()],
            ));
            id
        }
        ExpressionTree::Tc {
            child,
            relation,
            time,
        } => {
            let id = emit(child, next, out);
            out.push(Action::new(
                ActionKind::TimeConstraint,
                [relation.clone(), time.to_string()],
            ));
            id
        }
        ExpressionTree::Count(child) => {
            let id = emit(child, next, out);
            out.push(Action::new(ActionKind::Count, [slot_name(id)]));
            id
        }
    }
}

/// Replays actions from an empty state, returning the final state and the
/// slot touched by the last action.
pub fn replay(actions: &[Action]) -> Result<(ExpressionState, Option<SlotId>), ActionError> {
    let mut state = ExpressionState::new();
    let mut last = None;
    for a in actions {
        last = Some(state.apply(a)?);
    }
    Ok((state, last))
}
