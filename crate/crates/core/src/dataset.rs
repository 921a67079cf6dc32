//! Question records: one JSON object per line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expression::{parse_sexpr, ExpressionTree, SexprError};
use crate::reward::GoldAnswers;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    pub question: String,
    pub topic_entities: Vec<String>,
    pub gold_sexpr: String,
    /// Accepted answer variants.
    pub answers: Vec<Vec<String>>,
}

impl QuestionRecord {
    pub fn gold(&self) -> GoldAnswers {
        GoldAnswers::new(&self.answers)
    }

    pub fn gold_tree(&self) -> Result<ExpressionTree, SexprError> {
        parse_sexpr(&self.gold_sexpr)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Parses JSONL text; blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<QuestionRecord>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}
