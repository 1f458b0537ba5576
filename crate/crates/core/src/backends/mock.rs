//! Deterministic in-process backends.
//!
//! Every mock is a pure function of its inputs and seed, so pipeline runs over
//! mocks are reproducible byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use serde_json::Value;

use super::{
    CaptionRequest, CaptionResponse, Captioner, Completer, Embedder, SamplingParams, Transport, TransportError,
};
use crate::dataset::ClipAnnotation;
use crate::error::{Error, Result};
use crate::inference::split_action_tokens;
use crate::prompting::{ACTIONS_HEADER, ACTION_SEPARATOR};
use crate::taxonomy::Vocabulary;

#[derive(Debug, Default)]
struct CallCount(AtomicUsize);

impl CallCount {
    fn bump(&self) -> usize {
        self.0.fetch_add(1, Ordering::SeqCst)
    }

    fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

type Handler = dyn Fn(&Value) -> std::result::Result<Value, TransportError> + Send + Sync;

/// Transport that answers envelope requests with a closure, optionally
/// failing the first few calls transiently.
pub struct InProcessTransport {
    handler: Box<Handler>,
    fail_first: usize,
    calls: CallCount,
}

impl InProcessTransport {
    pub fn new(handler: impl Fn(&Value) -> std::result::Result<Value, TransportError> + Send + Sync + 'static) -> Self {
        Self {
            handler: Box::new(handler),
            fail_first: 0,
            calls: CallCount::default(),
        }
    }

    pub fn failing_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Transport for InProcessTransport {
    fn send(&self, request: &Value) -> std::result::Result<Value, TransportError> {
        let n = self.calls.bump();
        if n < self.fail_first {
            return Err(TransportError::Transient(format!("scripted failure {}", n + 1)));
        }
        (self.handler)(request)
    }
}

/// Captions a frame from the annotation of the segment containing it.
///
/// Scripted entries take precedence; frames outside every segment get a
/// generic caption.
#[derive(Debug, Default)]
pub struct MockCaptioner {
    scripted: HashMap<(String, u64), String>,
    segments: HashMap<String, Vec<(u64, u64, String)>>,
    calls: CallCount,
}

impl MockCaptioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_annotations(clips: &[ClipAnnotation], vocab: &Vocabulary) -> Self {
        let segments = clips
            .iter()
            .map(|clip| {
                let spans = clip
                    .segments
                    .iter()
                    .map(|s| {
                        let (verb, noun) = vocab.tokens(s.label);
                        let scene = format!("doing {} with the {}", verb.replace('_', " "), noun.replace('_', " "));
                        (s.start_frame, s.end_frame, scene)
                    })
                    .collect();
                (clip.clip_id.clone(), spans)
            })
            .collect();
        Self {
            segments,
            ..Self::default()
        }
    }

    /// Scripted caption returned verbatim, prefix included.
    pub fn script(mut self, clip_id: &str, frame_index: u64, caption: &str) -> Self {
        self.scripted
            .insert((clip_id.to_owned(), frame_index), caption.to_owned());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Captioner for MockCaptioner {
    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse> {
        self.calls.bump();
        if let Some(caption) = self.scripted.get(&(request.clip_id.clone(), request.frame_index)) {
            return Ok(CaptionResponse {
                caption: caption.clone(),
            });
        }
        let scene = self
            .segments
            .get(&request.clip_id)
            .and_then(|spans| {
                spans
                    .iter()
                    .find(|(start, end, _)| (*start..*end).contains(&request.frame_index))
            })
            .map(|(_, _, scene)| scene.clone())
            .unwrap_or_else(|| format!("in frame {} of {}", request.frame_index, request.clip_id));
        Ok(CaptionResponse {
            caption: format!("{} {scene}", request.prefix),
        })
    }
}

/// Feature-hashing embedder: each word seeds a Gaussian direction from its
/// SHA-256 digest; the text embedding is the normalized sum.
#[derive(Debug)]
pub struct HashEmbedder {
    dim: usize,
    calls: CallCount,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            calls: CallCount::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    fn direction(&self, token: &str, out: &mut [f64]) {
        let digest = crate::sha256_bytes(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest);
        for slot in out.iter_mut() {
            let v: f64 = StandardNormal.sample(&mut rng);
            *slot += v;
        }
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.calls.bump();
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut values = vec![0.0; self.dim];
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            self.direction(text, &mut values);
        }
        for word in &words {
            self.direction(word, &mut values);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(values.into_iter().map(|v| v / norm).collect())
    }
}

/// Completer that replays the query's observed actions.
///
/// Reads the last `Actions:` line of the prompt and emits `length` of its pairs,
/// cycling and starting at offset `seed` (0 when unseeded).
#[derive(Debug)]
pub struct EchoCompleter {
    length: usize,
    calls: CallCount,
}

impl EchoCompleter {
    pub fn new(length: usize) -> Self {
        Self {
            length,
            calls: CallCount::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Completer for EchoCompleter {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        self.calls.bump();
        let observed: Vec<&str> = prompt
            .lines()
            .rev()
            .find_map(|line| line.strip_prefix(ACTIONS_HEADER))
            .map(split_action_tokens)
            .unwrap_or_default();
        if observed.is_empty() {
            return Ok(String::new());
        }
        let offset = params.seed.unwrap_or(0) as usize;
        let picks: Vec<&str> = (0..self.length)
            .map(|j| observed[(j + offset) % observed.len()])
            .collect();
        Ok(picks.join(ACTION_SEPARATOR))
    }
}

#[derive(Debug, Deserialize)]
struct ScriptEntry {
    prompt_sha256: String,
    #[serde(default)]
    seed: Option<u64>,
    text: String,
}

/// Completer replaying scripted texts keyed by (prompt SHA-256, seed).
#[derive(Default)]
pub struct ScriptedCompleter {
    script: BTreeMap<(String, Option<u64>), String>,
    fallback: Option<Box<dyn Completer>>,
    calls: CallCount,
}

impl ScriptedCompleter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `[{"prompt_sha256": .., "seed": .., "text": ..}]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(entries
            .into_iter()
            .fold(Self::new(), |s, e| s.script(&e.prompt_sha256, e.seed, &e.text)))
    }

    pub fn script(mut self, prompt_sha256: &str, seed: Option<u64>, text: &str) -> Self {
        self.script.insert((prompt_sha256.to_owned(), seed), text.to_owned());
        self
    }

    pub fn with_fallback(mut self, fallback: impl Completer + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Completer for ScriptedCompleter {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        self.calls.bump();
        let key = (crate::sha256_hex(prompt.as_bytes()), params.seed);
        match (self.script.get(&key), &self.fallback) {
            (Some(text), _) => Ok(text.clone()),
            (None, Some(fallback)) => fallback.complete(prompt, params),
            (None, None) => Err(Error::Protocol(format!("no scripted completion for prompt {}", key.0))),
        }
    }
}

/// Completer that always fails as an unreachable service would.
#[derive(Debug, Default)]
pub struct UnavailableCompleter;

impl Completer for UnavailableCompleter {
    fn complete(&self, _prompt: &str, _params: &SamplingParams) -> Result<String> {
        Err(Error::BackendUnavailable {
            sample: None,
            reason: "service unreachable".into(),
        })
    }
}
