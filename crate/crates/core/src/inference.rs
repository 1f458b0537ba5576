//! K-sample completion and parsing of completions into fixed-length action
//! sequences.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::backends::{self, Completer, SamplingParams};
use crate::dataset::{Query, SliceRef};
use crate::error::{Error, Result};
use crate::prompting::{PromptDocument, ACTIONS_HEADER, NARRATIONS_HEADER};
use crate::taxonomy::{ActionLabel, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Number of sampled sequences per query.
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Sample `i` is requested with seed `seed + i`.
    pub seed: Option<u64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k: 5,
            temperature: 1.0,
            max_new_tokens: 256,
            seed: Some(0),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn params_for_sample(&self, sample: usize) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed.map(|s| s.wrapping_add(sample as u64)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    /// Non-empty candidate tokens inspected.
    pub pairs_seen: usize,
    pub pairs_in_vocab: usize,
    /// Slots filled by padding.
    pub padded: usize,
    /// No pair survived; every slot holds the fallback label.
    pub fallback: bool,
}

/// Splits a line at commas outside parentheses. Empty pieces are dropped.
pub fn split_action_tokens(line: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in line.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                tokens.push(&line[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    tokens.push(&line[start..]);
    tokens.into_iter().map(str::trim).filter(|t| !t.is_empty()).collect()
}

/// Accepts `(verb, noun)` or `verb noun`.
pub fn parse_action_pair(token: &str, vocab: &Vocabulary) -> Option<ActionLabel> {
    let token = token.trim().trim_end_matches(',').trim();
    if let Some(inner) = token.strip_prefix('(') {
        let inner = inner.strip_suffix(')').unwrap_or(inner);
        let (verb, noun) = inner.split_once(',')?;
        if noun.contains(',') {
            return None;
        }
        vocab.lookup(verb, noun)
    } else {
        let mut words = token.split_whitespace();
        let (verb, noun) = (words.next()?, words.next()?);
        if words.next().is_some() {
            return None;
        }
        vocab.lookup(verb, noun)
    }
}

fn is_block_header(line: &str) -> bool {
    let line = line.trim_start();
    line.starts_with(NARRATIONS_HEADER) || line.starts_with(ACTIONS_HEADER)
}

/// Parses a completion into exactly `z` labels. Total over all inputs.
///
/// Parsing stops at the first line opening a new prompt block. In-vocabulary
/// pairs are kept in order and truncated to `z`; a short result is padded
/// with its last pair, an empty one is filled with `fallback`.
pub fn parse_completion(
    text: &str,
    vocab: &Vocabulary,
    z: usize,
    fallback: ActionLabel,
) -> (Vec<ActionLabel>, ParseStats) {
    let mut stats = ParseStats::default();
    let mut kept = Vec::with_capacity(z);
    for line in text.lines() {
        if is_block_header(line) {
            break;
        }
        for token in split_action_tokens(line) {
            stats.pairs_seen += 1;
            if let Some(label) = parse_action_pair(token, vocab) {
                stats.pairs_in_vocab += 1;
                if kept.len() < z {
                    kept.push(label);
                }
            }
        }
    }
    stats.padded = z - kept.len();
    let pad = match kept.last() {
        Some(&last) => last,
        None => {
            stats.fallback = z > 0;
            fallback
        }
    };
    kept.resize(z, pad);
    (kept, stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub query_ref: SliceRef,
    pub sequences: Vec<Vec<ActionLabel>>,
    pub raw_completions: Vec<String>,
    pub parse_stats: Vec<ParseStats>,
}

impl PredictionSet {
    pub fn fallback_count(&self) -> usize {
        self.parse_stats.iter().filter(|s| s.fallback).count()
    }
}

/// Requests `sampling.k` completions (concurrently) and parses each. Results
/// are in sample order; any failed sample fails the whole set.
pub fn predict(
    prompt: &PromptDocument,
    query: &Query,
    vocab: &Vocabulary,
    sampling: &SamplingConfig,
    z: usize,
    backend: &dyn Completer,
) -> Result<PredictionSet> {
    sampling.validate()?;
    let fallback = query.last_observed();
    let completions: Vec<Result<String>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..sampling.k)
            .map(|i| {
                let params = sampling.params_for_sample(i);
                scope.spawn(move || backends::complete(backend, &prompt.text, &params))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("completion worker panicked"))
            .collect()
    });
    let mut set = PredictionSet {
        query_ref: query.slice_ref(),
        sequences: Vec::with_capacity(sampling.k),
        raw_completions: Vec::with_capacity(sampling.k),
        parse_stats: Vec::with_capacity(sampling.k),
    };
    for (i, completion) in completions.into_iter().enumerate() {
        let text = completion.map_err(|e| match e {
            Error::BackendUnavailable { reason, .. } => Error::BackendUnavailable {
                sample: Some(i),
                reason,
            },
            other => other,
        })?;
        let (sequence, stats) = parse_completion(&text, vocab, z, fallback);
        set.sequences.push(sequence);
        set.parse_stats.push(stats);
        set.raw_completions.push(text);
    }
    Ok(set)
}

/// One query in the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub anchor: usize,
    pub sequences: Vec<Vec<(String, String)>>,
    pub parse_stats: Vec<ParseStats>,
    #[serde(default)]
    pub example_ids: Vec<SliceRef>,
    #[serde(default)]
    pub raw_completions: Vec<String>,
}

impl PredictionRecord {
    pub fn from_set(set: &PredictionSet, example_ids: &[SliceRef], vocab: &Vocabulary) -> Self {
        Self {
            clip_id: set.query_ref.clip_id.clone(),
            anchor: set.query_ref.anchor,
            sequences: set
                .sequences
                .iter()
                .map(|seq| {
                    seq.iter()
                        .map(|&l| {
                            let (v, n) = vocab.tokens(l);
                            (v.to_owned(), n.to_owned())
                        })
                        .collect()
                })
                .collect(),
            parse_stats: set.parse_stats.clone(),
            example_ids: example_ids.to_vec(),
            raw_completions: set.raw_completions.clone(),
        }
    }

    pub fn to_set(&self, vocab: &Vocabulary) -> Result<PredictionSet> {
        let sequences = self
            .sequences
            .iter()
            .map(|seq| {
                seq.iter()
                    .enumerate()
                    .map(|(i, (v, n))| {
                        vocab.lookup(v, n).ok_or_else(|| Error::UnknownLabel {
                            clip_id: self.clip_id.clone(),
                            action_idx: i,
                            token: format!("({v}, {n})"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionSet {
            query_ref: SliceRef::new(self.clip_id.clone(), self.anchor),
            sequences,
            raw_completions: self.raw_completions.clone(),
            parse_stats: self.parse_stats.clone(),
        })
    }
}
