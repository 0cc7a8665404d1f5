//! Versioned prompt templates.

use crate::coord_parser::CoordinateGrammar;

pub const PROMPT_VERSION: &str = "v1";

const GROUNDING: &str = include_str!("../../assets/prompts/grounding_v1.txt");
const VERIFY: &str = include_str!("../../assets/prompts/verify_v1.txt");
const AGGREGATE: &str = include_str!("../../assets/prompts/aggregate_v1.txt");

const INSTRUCTION_PREFIX: &str = "Instruction: ";

/// Which query a prompt belongs to, recovered from its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTask {
    Grounding,
    Verification,
    Aggregation,
}

pub fn grounding(instruction: &str, grammar: &CoordinateGrammar) -> String {
    GROUNDING
        .replace("{format}", &grammar.format_hint())
        .replace("{instruction}", &single_line(instruction))
}

pub fn verification(instruction: &str) -> String {
    VERIFY.replace("{instruction}", &single_line(instruction))
}

pub fn aggregation(instruction: &str, count: usize) -> String {
    AGGREGATE
        .replace("{count}", &count.to_string())
        .replace("{instruction}", &single_line(instruction))
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The instruction embedded by any of the templates above.
pub fn extract_instruction(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(INSTRUCTION_PREFIX))
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

pub fn classify(prompt: &str) -> PromptTask {
    if prompt.contains("Reply with \"Image k\"") {
        PromptTask::Aggregation
    } else if prompt.contains("Does the marked point") {
        PromptTask::Verification
    } else {
        PromptTask::Grounding
    }
}
