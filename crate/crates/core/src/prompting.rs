//! Prompt rendering: an instruction paragraph, few-shot example blocks, and a
//! query block that the language model continues.
//!
//! Layout of one block:
//!
//! ```text
//! Narrations: <caption 1>
//! <caption 2>
//! ...
//! Actions: (verb, noun), (verb, noun), ...
//! ```
//!
//! Blocks are separated by one blank line. The query's `Actions:` line ends
//! with `, ` so the completion starts directly with the next pair.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Query, SliceRef};
use crate::error::{Error, Result};
use crate::taxonomy::{ActionLabel, Vocabulary};

pub const NARRATIONS_HEADER: &str = "Narrations:";
pub const ACTIONS_HEADER: &str = "Actions:";
pub const ACTION_SEPARATOR: &str = ", ";
const BLOCK_SEPARATOR: &str = "\n\n";

/// Placeholder replaced by N + Z in the instruction template.
pub const TOTAL_PLACEHOLDER: &str = "{total}";

pub const DEFAULT_INSTRUCTION: &str = "You are going to complete an action sequence, an action is one (verb, noun) pair. \
A complete sequence consists of {total} actions. You will also be given a text description of the past actions for reference.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Observed actions per example.
    pub n: usize,
    /// Future actions per example and per prediction.
    pub z: usize,
    /// Cap on observed actions in the query.
    pub n_prime_cap: usize,
    pub num_examples: usize,
    pub include_narrations: bool,
    /// When false, observed action lists are dropped; example future actions
    /// are still rendered so the model sees the output format.
    pub include_actions: bool,
    pub instruction_template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n: 8,
            z: 20,
            n_prime_cap: 12,
            num_examples: 8,
            include_narrations: true,
            include_actions: true,
            instruction_template: DEFAULT_INSTRUCTION.to_owned(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.z < 1 || self.n_prime_cap < 1 {
            return Err(Error::Config("n, z and n_prime_cap must be at least 1".into()));
        }
        if !self.include_narrations && !self.include_actions {
            return Err(Error::Config(
                "at least one of narrations/actions must be included".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub text: String,
    pub example_ids: Vec<SliceRef>,
    pub query_ref: SliceRef,
}

#[derive(Serialize)]
struct PromptSidecar<'a> {
    example_ids: &'a [SliceRef],
    query_ref: &'a SliceRef,
    sha256: String,
}

impl PromptDocument {
    pub fn sha256(&self) -> String {
        crate::sha256_hex(self.text.as_bytes())
    }

    /// Writes `<stem>.txt` and a `<stem>.json` sidecar with the example ids.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, &self.text).map_err(|e| Error::io(&txt, e))?;
        let sidecar = PromptSidecar {
            example_ids: &self.example_ids,
            query_ref: &self.query_ref,
            sha256: self.sha256(),
        };
        let json = dir.join(format!("{stem}.json"));
        let mut body = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        body.push('\n');
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

pub fn render_instruction(config: &PromptConfig) -> String {
    config
        .instruction_template
        .replace(TOTAL_PLACEHOLDER, &(config.n + config.z).to_string())
}

pub fn render_action(label: ActionLabel, vocab: &Vocabulary) -> String {
    vocab.display(label).to_string()
}

fn render_actions<'a>(labels: impl IntoIterator<Item = &'a ActionLabel>, vocab: &Vocabulary) -> String {
    labels
        .into_iter()
        .map(|&l| render_action(l, vocab))
        .collect::<Vec<_>>()
        .join(ACTION_SEPARATOR)
}

// Captions are single-line by construction of the layout.
fn render_narrations(narrations: &[String]) -> String {
    let lines: Vec<String> = narrations.iter().map(|n| n.replace(['\r', '\n'], " ")).collect();
    format!("{NARRATIONS_HEADER} {}", lines.join("\n"))
}

pub fn render_example(example: &Example, config: &PromptConfig, vocab: &Vocabulary) -> Result<String> {
    if example.narrations.len() != config.n || example.observed_actions.len() != config.n {
        return Err(Error::ConfigMismatch(format!(
            "example has {} narrations / {} observed actions, expected {}",
            example.narrations.len(),
            example.observed_actions.len(),
            config.n
        )));
    }
    if example.future_actions.len() != config.z {
        return Err(Error::ConfigMismatch(format!(
            "example has {} future actions, expected {}",
            example.future_actions.len(),
            config.z
        )));
    }
    let mut lines = Vec::with_capacity(2);
    if config.include_narrations {
        lines.push(render_narrations(&example.narrations));
    }
    let actions = if config.include_actions {
        render_actions(example.observed_actions.iter().chain(&example.future_actions), vocab)
    } else {
        render_actions(&example.future_actions, vocab)
    };
    lines.push(format!("{ACTIONS_HEADER} {actions}"));
    Ok(lines.join("\n"))
}

pub fn render_query(query: &Query, config: &PromptConfig, vocab: &Vocabulary) -> String {
    let mut lines = Vec::with_capacity(2);
    if config.include_narrations {
        lines.push(render_narrations(&query.narrations));
    }
    if config.include_actions {
        lines.push(format!(
            "{ACTIONS_HEADER} {}{ACTION_SEPARATOR}",
            render_actions(&query.observed_actions, vocab)
        ));
    } else {
        lines.push(ACTIONS_HEADER.to_owned());
    }
    lines.join("\n")
}

/// Joins instruction, example blocks and query with blank lines.
pub fn assemble_prompt(
    instruction: &str,
    examples: &[(SliceRef, String)],
    query: &str,
    query_ref: SliceRef,
) -> PromptDocument {
    let mut blocks: Vec<&str> = Vec::with_capacity(examples.len() + 2);
    blocks.push(instruction);
    blocks.extend(examples.iter().map(|(_, text)| text.as_str()));
    blocks.push(query);
    PromptDocument {
        text: blocks.join(BLOCK_SEPARATOR),
        example_ids: examples.iter().map(|(id, _)| id.clone()).collect(),
        query_ref,
    }
}

/// Renders the full prompt for a query from already-selected examples.
pub fn build_prompt(
    query: &Query,
    examples: &[(SliceRef, &Example)],
    config: &PromptConfig,
    vocab: &Vocabulary,
) -> Result<PromptDocument> {
    config.validate()?;
    let rendered = examples
        .iter()
        .map(|(id, ex)| Ok((id.clone(), render_example(ex, config, vocab)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_prompt(
        &render_instruction(config),
        &rendered,
        &render_query(query, config, vocab),
        query.slice_ref(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["take", "cut", "put", "wash"], ["knife", "onion", "paint_brush", "pan"]).unwrap()
    }

    fn label(v: &Vocabulary, verb: &str, noun: &str) -> ActionLabel {
        v.lookup(verb, noun).unwrap()
    }

    #[test]
    fn instruction_substitutes_total() {
        let config = PromptConfig::default();
        let text = render_instruction(&config);
        assert!(text.contains("consists of 28 actions"));
        assert!(text.starts_with("You are going to complete an action sequence"));
        let short = PromptConfig {
            n: 4,
            ..PromptConfig::default()
        };
        assert!(render_instruction(&short).contains("consists of 24 actions"));
        assert_eq!(render_instruction(&config), render_instruction(&config));
    }

    #[test]
    fn action_rendering() {
        let v = vocab();
        assert_eq!(render_action(label(&v, "take", "knife"), &v), "(take, knife)");
        assert_eq!(render_action(label(&v, "put", "paint_brush"), &v), "(put, paint_brush)");
    }

    fn minimal_example(v: &Vocabulary) -> Example {
        Example {
            narrations: vec!["A person is holding a knife".into()],
            observed_actions: vec![label(v, "take", "knife")],
            future_actions: vec![label(v, "cut", "onion")],
        }
    }

    #[test]
    fn example_block_layout() {
        let v = vocab();
        let config = PromptConfig {
            n: 1,
            z: 1,
            ..PromptConfig::default()
        };
        let ex = minimal_example(&v);
        assert_eq!(
            render_example(&ex, &config, &v).unwrap(),
            "Narrations: A person is holding a knife\nActions: (take, knife), (cut, onion)"
        );
        let no_narr = PromptConfig {
            include_narrations: false,
            ..config.clone()
        };
        assert_eq!(
            render_example(&ex, &no_narr, &v).unwrap(),
            "Actions: (take, knife), (cut, onion)"
        );
        let no_actions = PromptConfig {
            include_actions: false,
            ..config.clone()
        };
        assert_eq!(
            render_example(&ex, &no_actions, &v).unwrap(),
            "Narrations: A person is holding a knife\nActions: (cut, onion)"
        );
        let wrong = PromptConfig { z: 2, ..config };
        assert!(matches!(render_example(&ex, &wrong, &v), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn query_block_layout() {
        let v = vocab();
        let q = Query {
            clip_id: "c".into(),
            anchor_action_idx: 1,
            narrations: vec!["A person is holding a knife".into(), "A person is\ncutting".into()],
            observed_actions: vec![label(&v, "take", "knife"), label(&v, "cut", "onion")],
        };
        let config = PromptConfig::default();
        let text = render_query(&q, &config, &v);
        assert_eq!(
            text,
            "Narrations: A person is holding a knife\nA person is cutting\nActions: (take, knife), (cut, onion), "
        );
        assert_eq!(text, render_query(&q, &config, &v));
        let no_actions = PromptConfig {
            include_actions: false,
            ..config
        };
        assert!(render_query(&q, &no_actions, &v).ends_with("\nActions:"));
    }

    #[test]
    fn assembly() {
        let zero = assemble_prompt("INSTR", &[], "QUERY", SliceRef::new("q", 7));
        assert_eq!(zero.text, "INSTR\n\nQUERY");
        assert!(zero.example_ids.is_empty());
        let examples: Vec<_> = (0..8).map(|i| (SliceRef::new("e", i), format!("EX{i}"))).collect();
        let doc = assemble_prompt("INSTR", &examples, "QUERY", SliceRef::new("q", 7));
        assert_eq!(doc.text.matches("\n\n").count(), 9);
        assert_eq!(
            doc.text.split("\n\n").collect::<Vec<_>>()[1..9],
            ["EX0", "EX1", "EX2", "EX3", "EX4", "EX5", "EX6", "EX7"]
        );
        assert_eq!(doc.example_ids.len(), 8);
    }

    #[test]
    fn invalid_content_flags() {
        let config = PromptConfig {
            include_narrations: false,
            include_actions: false,
            ..PromptConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}
