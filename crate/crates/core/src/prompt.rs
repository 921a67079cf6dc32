//! The agent prompt: task instructions, available actions, candidate
//! entities and the question.

use std::collections::BTreeSet;

use crate::transcript::ActionKind;

/// Actions offered to the agent. `None` offers all six.
pub fn available_actions(mask: Option<&BTreeSet<ActionKind>>) -> Vec<ActionKind> {
    ActionKind::ALL
        .into_iter()
        .filter(|k| mask.is_none_or(|m| m.contains(k)))
        .collect()
}

/// Renders the prompt. Every line, including the last, ends with `\n`.
pub fn render_prompt(question: &str, topic_entities: &[String], actions: &[ActionKind]) -> String {
    let list: Vec<&str> = actions.iter().map(|k| k.signature()).collect();
    let mut out = String::new();
    for line in [
        "You are an expert assistant for querying the Freebase knowledge base using structured reasoning actions.",
        "Answer the given question about Freebase knowledge base.",
        "You MUST conduct reasoning inside <think>...</think> before emitting actions.",
        "After reasoning, provide structured actions inside <action>...</action>.",
        "The system will return query results between <information>...</information>.",
        "When ready, return the final answer inside <answer>...</answer> using MIDs or literal values. For multiple answers, separate by spaces.",
    ] {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!("Available Actions : {}\n", list.join("; ")));
    out.push_str("Begin from the candidate entities detected in the question.\n");
    out.push_str(&format!("Candidate Entities: [ {} ]\n", topic_entities.join(", ")));
    out.push_str(&format!("Question: {question}.\n"));
    out
}
