//! SPARQL compilation of expression trees and a blocking client for
//! SPARQL 1.1 protocol endpoints.
//!
//! Variables are named `?x0`, `?x1`, ... in pre-order; `?x0` is always the
//! projected answer variable. Entity and relation ids are emitted as IRIs
//! relative to the endpoint's base (`<m.01>`), literals as plain strings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::expression::{ArgMode, ExpressionTree};
use crate::kb::{paired_end_relation, ResultSet, Term, DEFAULT_TYPE_RELATION};

const XSD_DOUBLE: &str = "<http://www.w3.org/2001/XMLSchema#double>";
const NUMERIC_PATTERN: &str = r#""^[+-]?[0-9]+(\\.[0-9]+)?$""#;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparqlOptions {
    /// Emitted as a `BASE` declaration when set.
    pub base_iri: Option<String>,
    pub type_relation: String,
}

impl Default for SparqlOptions {
    fn default() -> Self {
        SparqlOptions {
            base_iri: None,
            type_relation: DEFAULT_TYPE_RELATION.into(),
        }
    }
}

pub fn to_sparql(tree: &ExpressionTree) -> String {
    to_sparql_with(tree, &SparqlOptions::default())
}

pub fn to_sparql_with(tree: &ExpressionTree, opts: &SparqlOptions) -> String {
    let mut g = Compiler {
        next: 0,
        opts,
        parts: Vec::new(),
    };
    let root = g.fresh();
    let select = match tree {
        ExpressionTree::Count(child) => {
            g.pattern(child, &root);
            format!("SELECT (COUNT(DISTINCT {root}) AS ?cnt)")
        }
        t => {
            g.pattern(t, &root);
            format!("SELECT DISTINCT {root}")
        }
    };
    let mut q = String::new();
    if let Some(base) = &opts.base_iri {
        let _ = write!(q, "BASE <{base}> ");
    }
    let _ = write!(q, "{select} WHERE {{ {} }}", g.parts.join(" "));
    q
}

fn iri(id: &str) -> String {
    format!("<{id}>")
}

fn literal(text: &str) -> String {
    format!("\"{}\"", text.replace('\\', "\\\\").replace('"', "\\\""))
}

fn term(token: &str) -> String {
    match Term::from_token(token) {
        Term::Entity(e) => iri(&e),
        Term::Literal(l) => literal(&l),
    }
}

/// Triple pattern stating that `to` is reachable from `from` along
/// `relation` (a leading `^` reverses the edge).
fn edge(from: &str, relation: &str, to: &str) -> String {
    match relation.strip_prefix('^') {
        Some(r) => format!("{to} {} {from} .", iri(r)),
        None => format!("{from} {} {to} .", iri(relation)),
    }
}

fn numeric_filter(var: &str) -> String {
    format!("isLiteral({var}) && REGEX(STR({var}), {NUMERIC_PATTERN})")
}

fn as_double(var: &str) -> String {
    format!("{XSD_DOUBLE}(STR({var}))")
}

struct Compiler<'a> {
    next: usize,
    opts: &'a SparqlOptions,
    parts: Vec<String>,
}

impl Compiler<'_> {
    fn fresh(&mut self) -> String {
        let v = format!("?x{}", self.next);
        self.next += 1;
        v
    }

    /// Compiles `tree` into a nested group, sharing the variable counter.
    fn group(&mut self, tree: &ExpressionTree, var: &str) -> String {
        let saved = std::mem::take(&mut self.parts);
        self.pattern(tree, var);
        let inner = std::mem::replace(&mut self.parts, saved);
        inner.join(" ")
    }

    /// Appends patterns that bind `var` to exactly the denotation of `tree`.
    fn pattern(&mut self, tree: &ExpressionTree, var: &str) {
        match tree {
            ExpressionTree::Start(e) => {
                self.parts.push(format!("VALUES {var} {{ {} }}", term(e)));
            }
            ExpressionTree::Join { relation, child } => match child.as_ref() {
                ExpressionTree::Start(e) => self.parts.push(edge(var, relation, &term(e))),
                sub => {
                    let w = self.fresh();
                    self.parts.push(edge(var, relation, &w));
                    self.pattern(sub, &w);
                }
            },
            ExpressionTree::And(a, b) => {
                self.pattern(a, var);
                self.pattern(b, var);
            }
            ExpressionTree::TypeConstraint {
                child,
                ontology_type,
            } => {
                self.pattern(child, var);
                let ty_rel = self.opts.type_relation.clone();
                self.parts.push(edge(var, &ty_rel, &term(ontology_type)));
            }
            ExpressionTree::Arg {
                mode,
                child,
                relation,
            } => {
                self.pattern(child, var);
                let value = self.fresh();
                self.parts.push(edge(var, relation, &value));
                self.parts.push(format!("FILTER({})", numeric_filter(&value)));
                let best = self.fresh();
                let inner_var = self.fresh();
                let inner_value = self.fresh();
                let inner = self.group(child, &inner_var);
                let agg = match mode {
                    ArgMode::Max => "MAX",
                    ArgMode::Min => "MIN",
                };
                self.parts.push(format!(
                    "{{ SELECT ({agg}({}) AS {best}) WHERE {{ {inner} {} FILTER({}) }} }}",
                    as_double(&inner_value),
                    edge(&inner_var, relation, &inner_value),
                    numeric_filter(&inner_value),
                ));
                self.parts
                    .push(format!("FILTER({} = {best})", as_double(&value)));
            }
            ExpressionTree::Cmp {
                mode,
                relation,
                value,
                child,
            } => {
                self.pattern(child, var);
                let u = self.fresh();
                self.parts.push(edge(var, relation, &u));
                self.parts.push(format!(
                    "FILTER({} && {} {} {XSD_DOUBLE}(\"{value}\"))",
                    numeric_filter(&u),
                    as_double(&u),
                    mode.symbol()
                ));
            }
            ExpressionTree::Tc {
                child,
                relation,
                time,
            } => {
                self.pattern(child, var);
                let u = self.fresh();
                self.parts.push(edge(var, relation, &u));
                if time.is_now() {
                    self.parts.push(format!("FILTER(isLiteral({u}))"));
                    if let Some(end) = paired_end_relation(relation) {
                        let e = self.fresh();
                        self.parts
                            .push(format!("FILTER NOT EXISTS {{ {} }}", edge(var, &end, &e)));
                    }
                } else {
                    let t = literal(time.as_str());
                    let mut test = format!("STR({u}) = {t}");
                    if time.is_bare_year() {
                        let _ = write!(test, " || STRBEFORE(CONCAT(STR({u}), \"-\"), \"-\") = {t}");
                    }
                    self.parts
                        .push(format!("FILTER(isLiteral({u}) && ({test}))"));
                }
            }
            ExpressionTree::Count(child) => {
                let w = self.fresh();
                let inner = self.group(child, &w);
                self.parts.push(format!(
                    "{{ SELECT (STR(COUNT(DISTINCT {w})) AS {var}) WHERE {{ {inner} }} }}"
                ));
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("query timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl RemoteError {
    pub(crate) fn from_reqwest(e: reqwest::Error, timeout: Duration) -> Self {
        if e.is_timeout() {
            RemoteError::Timeout(timeout)
        } else {
            RemoteError::Transport(e.to_string())
        }
    }
}

#[derive(Deserialize)]
struct SparqlJson {
    head: SparqlHead,
    results: SparqlResults,
}

#[derive(Deserialize)]
struct SparqlHead {
    vars: Vec<String>,
}

#[derive(Deserialize)]
struct SparqlResults {
    bindings: Vec<std::collections::HashMap<String, SparqlValue>>,
}

#[derive(Deserialize)]
struct SparqlValue {
    #[serde(rename = "type")]
    kind: String,
    value: String,
}

/// Blocking client for a SPARQL endpoint speaking
/// `application/sparql-results+json`.
#[derive(Debug, Clone)]
pub struct SparqlEndpoint {
    url: String,
    base_iri: Option<String>,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl SparqlEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, RemoteError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        Ok(SparqlEndpoint {
            url: url.into(),
            base_iri: None,
            timeout,
            client,
        })
    }

    /// IRI prefix stripped from returned bindings. Without one, everything up
    /// to the last `/` or `#` is dropped.
    pub fn with_base_iri(mut self, base: impl Into<String>) -> Self {
        self.base_iri = Some(base.into());
        self
    }

    pub fn execute(&self, query: &str) -> Result<ResultSet, RemoteError> {
        let resp = self
            .client
            .get(&self.url)
            .query(&[("query", query)])
            .header(reqwest::header::ACCEPT, "application/sparql-results+json")
            .send()
            .map_err(|e| RemoteError::from_reqwest(e, self.timeout))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RemoteError::Transport(format!("endpoint returned HTTP {status}")));
        }
        let body = resp
            .text()
            .map_err(|e| RemoteError::from_reqwest(e, self.timeout))?;
        self.decode(&body)
    }

    fn local_name<'a>(&self, iri: &'a str) -> &'a str {
        if let Some(rest) = self.base_iri.as_deref().and_then(|b| iri.strip_prefix(b)) {
            return rest;
        }
        iri.rfind(['/', '#']).map_or(iri, |i| &iri[i + 1..])
    }

    fn decode(&self, body: &str) -> Result<ResultSet, RemoteError> {
        let parsed: SparqlJson =
            serde_json::from_str(body).map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
        if parsed.head.vars.iter().any(|v| v == "cnt") {
            let value = match parsed.results.bindings.first().and_then(|b| b.get("cnt")) {
                None => 0,
                Some(v) => v.value.parse().map_err(|_| {
                    RemoteError::MalformedResponse(format!("count `{}` is not an integer", v.value))
                })?,
            };
            return Ok(ResultSet::Number { value });
        }
        let var = parsed
            .head
            .vars
            .first()
            .ok_or_else(|| RemoteError::MalformedResponse("no projected variable".into()))?;
        let mut items = BTreeSet::new();
        for binding in &parsed.results.bindings {
            let Some(v) = binding.get(var) else { continue };
            let t = match v.kind.as_str() {
                "uri" => Term::Entity(self.local_name(&v.value).to_string()),
                "literal" | "typed-literal" => Term::Literal(v.value.clone()),
                other => {
                    return Err(RemoteError::MalformedResponse(format!(
                        "unsupported binding type `{other}`"
                    )))
                }
            };
            items.insert(t);
        }
        Ok(ResultSet::Entities { items })
    }
}

/// One-shot convenience over [`SparqlEndpoint`].
pub fn execute_remote(endpoint: &str, query: &str, timeout: Duration) -> Result<ResultSet, RemoteError> {
    SparqlEndpoint::new(endpoint, timeout)?.execute(query)
}
