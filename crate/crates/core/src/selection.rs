//! Embedding similarity and maximal-marginal-relevance example selection.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Query, SliceRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed-length vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("zero dimensions"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite value"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

pub fn cosine_similarity<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroVector);
    }
    let dot: T = a.values.iter().zip(&b.values).map(|(&x, &y)| x * y).sum();
    // Rounding can push |cos| a hair past 1.
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrConfig<T> {
    /// Weight on query relevance; `1 - lambda` weighs redundancy.
    pub lambda: T,
    /// Number of examples to select.
    pub k: usize,
}

impl<T: Scalar> MmrConfig<T> {
    pub fn new(lambda: T, k: usize) -> Result<Self> {
        let config = Self { lambda, k };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero() && self.lambda <= T::one()) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.k < 1 {
            return Err(Error::Config("mmr k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Greedy MMR selection.
///
/// Each step picks the unselected candidate maximizing
/// `lambda * S(q, p) - (1 - lambda) * max_{t in selected} S(t, p)`, where the
/// redundancy term is 0 while nothing is selected. Ties go to the earliest
/// candidate. Returns ids in selection order.
pub fn mmr_select<T: Scalar, I: Clone>(
    query: &Embedding<T>,
    candidates: &[(I, Embedding<T>)],
    config: &MmrConfig<T>,
) -> Result<Vec<I>> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let relevance = candidates
        .iter()
        .map(|(_, e)| cosine_similarity(query, e))
        .collect::<Result<Vec<T>>>()?;
    let take = config.k.min(candidates.len());
    let mut selected: Vec<usize> = Vec::with_capacity(take);
    // Running max similarity to the selected set, None while the set is empty.
    let mut redundancy: Vec<Option<T>> = vec![None; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    let diversity_weight = T::one() - config.lambda;

    while selected.len() < take {
        let mut best: Option<(usize, T)> = None;
        for (i, rel) in relevance.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score = config.lambda * *rel - diversity_weight * redundancy[i].unwrap_or_else(T::zero);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("an unselected candidate remains");
        taken[pick] = true;
        selected.push(pick);
        for (i, (_, emb)) in candidates.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let sim = cosine_similarity(&candidates[pick].1, emb)?;
            redundancy[i] = Some(redundancy[i].map_or(sim, |r| r.max(sim)));
        }
    }
    Ok(selected.into_iter().map(|i| candidates[i].0.clone()).collect())
}

/// Embedding input for a query: its narrations joined by newlines.
pub fn embed_query_text(query: &Query) -> String {
    query.narrations.join("\n")
}

pub fn embed_example_text(example: &Example) -> String {
    example.narrations.join("\n")
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    clip_id: String,
    anchor: usize,
    dim: usize,
    values: Vec<f64>,
}

/// Pool embeddings keyed by (clip_id, anchor), persisted as JSON lines.
///
/// Reads take a shared lock; population takes the exclusive lock.
#[derive(Debug, Default)]
pub struct EmbeddingCache<T> {
    entries: RwLock<BTreeMap<SliceRef, Embedding<T>>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn new() -> Self {
        Self {
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheLine = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            if record.values.len() != record.dim {
                return Err(Error::DimMismatch {
                    left: record.dim,
                    right: record.values.len(),
                });
            }
            let values = record
                .values
                .into_iter()
                .map(|v| T::from_f64(v).ok_or(Error::InvalidEmbedding("unrepresentable value")))
                .collect::<Result<Vec<T>>>()?;
            entries.insert(SliceRef::new(record.clip_id, record.anchor), Embedding::new(values)?);
        }
        Ok(Self {
            entries: RwLock::new(entries),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let entries = self.entries.read().expect("embedding cache lock poisoned");
        let mut out = Vec::new();
        for (key, emb) in entries.iter() {
            let record = CacheLine {
                clip_id: key.clip_id.clone(),
                anchor: key.anchor,
                dim: emb.dim(),
                values: emb.values().iter().map(|v| v.to_f64_lossy()).collect(),
            };
            serde_json::to_writer(&mut out, &record).expect("cache line serializes");
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, key: &SliceRef) -> Option<Embedding<T>> {
        self.entries
            .read()
            .expect("embedding cache lock poisoned")
            .get(key)
            .cloned()
    }

    pub fn insert(&self, key: SliceRef, embedding: Embedding<T>) {
        self.entries
            .write()
            .expect("embedding cache lock poisoned")
            .insert(key, embedding);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("embedding cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the cached embedding or computes, checks and stores it.
    pub fn get_or_try_insert(
        &self,
        key: &SliceRef,
        expected_dim: Option<usize>,
        compute: impl FnOnce() -> Result<Embedding<T>>,
    ) -> Result<Embedding<T>> {
        let embedding = match self.get(key) {
            Some(e) => e,
            None => {
                let e = compute()?;
                self.insert(key.clone(), e.clone());
                e
            }
        };
        if let Some(dim) = expected_dim {
            if dim != embedding.dim() {
                return Err(Error::DimMismatch {
                    left: dim,
                    right: embedding.dim(),
                });
            }
        }
        Ok(embedding)
    }
}
