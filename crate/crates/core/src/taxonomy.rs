//! Closed (verb, noun) label space.
//!
//! Tokens are stored in canonical form: lowercase, trimmed, with internal
//! whitespace runs replaced by a single underscore. Ids are dense indices into
//! the verb and noun lists.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerbId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NounId(pub u32);

/// A (verb, noun) pair resolved against a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionLabel {
    pub verb: VerbId,
    pub noun: NounId,
}

impl ActionLabel {
    pub fn new(verb: VerbId, noun: NounId) -> Self {
        Self { verb, noun }
    }
}

/// Canonical token form. Idempotent.
pub fn canonicalize(raw: &str) -> Result<String> {
    let token = raw
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_");
    if token.is_empty() {
        Err(Error::EmptyToken)
    } else {
        Ok(token)
    }
}

#[derive(Debug, Clone, Default)]
struct TokenList {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenList {
    fn build<I, S>(raw: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = TokenList::default();
        for item in raw {
            let token = canonicalize(item.as_ref())?;
            if !list.index.contains_key(&token) {
                list.index.insert(token.clone(), list.tokens.len() as u32);
                list.tokens.push(token);
            }
        }
        Ok(list)
    }

    fn id(&self, raw: &str) -> Option<u32> {
        let token = canonicalize(raw).ok()?;
        self.index.get(&token).copied()
    }
}

/// Immutable closed label space.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    verbs: TokenList,
    nouns: TokenList,
}

impl Vocabulary {
    /// Builds a vocabulary from raw tokens, canonicalizing and deduplicating in
    /// first-occurrence order.
    pub fn new<V, N, S, T>(verbs: V, nouns: N) -> Result<Self>
    where
        V: IntoIterator<Item = S>,
        N: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let verbs = TokenList::build(verbs)?;
        let nouns = TokenList::build(nouns)?;
        if verbs.tokens.is_empty() || nouns.tokens.is_empty() {
            return Err(Error::Config("vocabulary lists must be non-empty".into()));
        }
        Ok(Self { verbs, nouns })
    }

    /// Loads verb and noun files: UTF-8, one token per line, `#` comments and
    /// blank lines ignored.
    pub fn load(verb_path: impl AsRef<Path>, noun_path: impl AsRef<Path>) -> Result<Self> {
        let verbs = TokenList::build(read_token_file(verb_path.as_ref())?)?;
        let nouns = TokenList::build(read_token_file(noun_path.as_ref())?)?;
        Ok(Self { verbs, nouns })
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs.tokens
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns.tokens
    }

    pub fn verb_id(&self, raw: &str) -> Option<VerbId> {
        self.verbs.id(raw).map(VerbId)
    }

    pub fn noun_id(&self, raw: &str) -> Option<NounId> {
        self.nouns.id(raw).map(NounId)
    }

    /// Panics on an id from another vocabulary.
    pub fn verb(&self, id: VerbId) -> &str {
        &self.verbs.tokens[id.0 as usize]
    }

    pub fn noun(&self, id: NounId) -> &str {
        &self.nouns.tokens[id.0 as usize]
    }

    /// Resolves a raw pair. Out-of-vocabulary tokens give `None`.
    pub fn lookup(&self, verb: &str, noun: &str) -> Option<ActionLabel> {
        Some(ActionLabel::new(self.verb_id(verb)?, self.noun_id(noun)?))
    }

    pub fn contains(&self, label: ActionLabel) -> bool {
        (label.verb.0 as usize) < self.verbs.tokens.len() && (label.noun.0 as usize) < self.nouns.tokens.len()
    }

    /// Display adapter printing `(verb, noun)`.
    pub fn display(&self, label: ActionLabel) -> DisplayLabel<'_> {
        DisplayLabel { vocab: self, label }
    }

    pub fn tokens(&self, label: ActionLabel) -> (&str, &str) {
        (self.verb(label.verb), self.noun(label.noun))
    }
}

pub struct DisplayLabel<'a> {
    vocab: &'a Vocabulary,
    label: ActionLabel,
}

impl fmt::Display for DisplayLabel<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (verb, noun) = self.vocab.tokens(self.label);
        write!(f, "({verb}, {noun})")
    }
}

fn read_token_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|line| !line.is_empty() && !line.starts_with('#'))
        .map(str::to_owned)
        .collect();
    if tokens.is_empty() {
        return Err(Error::VocabularyEmpty(path.to_path_buf()));
    }
    Ok(tokens)
}
