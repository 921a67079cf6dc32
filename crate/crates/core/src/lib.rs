//! Core library for knowledge-base question answering with structured
//! reasoning actions: transcript grammar, the expression engine and its
//! evaluator, candidate generation, rewards, policy optimisation and the
//! episode loop.

pub mod expression;
pub mod kb;
pub mod sparql;
pub mod transcript;
pub mod grpo;
pub mod reward;
pub mod rrcg;
pub mod dataset;
pub mod prompt;
pub mod rrs;
pub mod episode;
