//! End-to-end runs: captioning, prediction, evaluation, ablation sweeps and
//! the accuracy regression. Every JSON output embeds the resolved
//! [`RunConfig`], its hash and the seed; runs over mock backends are
//! byte-reproducible.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::backends::mock::{EchoCompleter, HashEmbedder, MockCaptioner};
use crate::backends::{
    self, write_json, BackendConfig, CachedCaptioner, CachedEmbedder, Captioner, Completer, Embedder, ServiceClient,
    CAPTION_PREFIX,
};
use crate::dataset::{self, build_query, enumerate_training_examples, ClipAnnotation, PooledExample, Query, SliceRef};
use crate::error::{Error, Result};
use crate::evaluation::{self, EditMetric, EvalReport, QueryTruth, RegressionCell};
use crate::inference::{self, PredictionRecord, SamplingConfig};
use crate::prompting::{self, PromptConfig, PromptDocument};
use crate::selection::{self, Embedding, EmbeddingCache, MmrConfig};
use crate::taxonomy::{ActionLabel, Vocabulary};

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const PARTIAL_PREDICTIONS_FILE: &str = "predictions.partial.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REGRESSION_FILE: &str = "regression.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const PROMPTS_DIR: &str = "prompts";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    #[default]
    Mmr,
    Random,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmr" => Ok(Self::Mmr),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown selection strategy {other:?}"))),
        }
    }
}

/// Which anchors of each evaluation clip become queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorPolicy {
    /// 0-based index of the last observed action of the first query.
    pub first: usize,
    /// Also query every later anchor that still has a full future window.
    pub sweep: bool,
}

impl Default for AnchorPolicy {
    fn default() -> Self {
        Self { first: 7, sweep: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    /// Use the deterministic in-process mocks instead of HTTP services.
    pub mock: bool,
    pub mock_embedding_dim: usize,
    pub caption: Option<BackendConfig>,
    pub embed: Option<BackendConfig>,
    pub llm: Option<BackendConfig>,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            mock: false,
            mock_embedding_dim: 64,
            caption: None,
            embed: None,
            llm: None,
        }
    }
}

impl BackendSettings {
    /// Fills endpoints missing from the config file from `PALM_*_URL`, and the
    /// token from `PALM_API_TOKEN`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        let token = env(backends::ENV_API_TOKEN);
        for (slot, var) in [
            (&mut self.caption, backends::ENV_CAPTION_URL),
            (&mut self.embed, backends::ENV_EMBED_URL),
            (&mut self.llm, backends::ENV_LLM_URL),
        ] {
            if slot.is_none() {
                if let Some(url) = env(var) {
                    let url = Url::parse(&url).map_err(|e| Error::Config(format!("{var}: {e}")))?;
                    *slot = Some(BackendConfig::new(url));
                }
            }
            if let (Some(config), Some(token)) = (slot.as_mut(), token.as_ref()) {
                config.auth_token.get_or_insert_with(|| token.clone());
            }
        }
        Ok(())
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub annotations: PathBuf,
    /// Clips forming the few-shot pool; defaults to `annotations`.
    pub pool_annotations: Option<PathBuf>,
    pub verbs: PathBuf,
    pub nouns: PathBuf,
    /// Recognized past actions fed to the model instead of annotated ones.
    pub recognized: Option<PathBuf>,
    /// JSON-lines cache of pool embeddings.
    pub embedding_cache: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Caption cache location; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub prompt: PromptConfig,
    pub lambda: f64,
    pub sampling: SamplingConfig,
    pub backends: BackendSettings,
    pub selection: SelectionStrategy,
    pub seed: u64,
    pub anchors: AnchorPolicy,
    pub metric: EditMetric,
    pub caption_prefix: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            annotations: PathBuf::from("annotations.json"),
            pool_annotations: None,
            verbs: PathBuf::from("verbs.txt"),
            nouns: PathBuf::from("nouns.txt"),
            recognized: None,
            embedding_cache: None,
            output_dir: PathBuf::from("out"),
            cache_dir: None,
            prompt: PromptConfig::default(),
            lambda: 0.5,
            sampling: SamplingConfig::default(),
            backends: BackendSettings::default(),
            selection: SelectionStrategy::Mmr,
            seed: 0,
            anchors: AnchorPolicy::default(),
            metric: EditMetric::Levenshtein,
            caption_prefix: CAPTION_PREFIX.to_owned(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        self.sampling.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.caption_prefix.trim().is_empty() {
            return Err(Error::Config("caption prefix is empty".into()));
        }
        for path in [&self.annotations, &self.verbs, &self.nouns]
            .into_iter()
            .chain(self.pool_annotations.as_ref())
            .chain(self.recognized.as_ref())
        {
            if !path.exists() {
                return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        if !self.backends.mock {
            for (name, slot) in [
                ("caption", &self.backends.caption),
                ("embed", &self.backends.embed),
                ("llm", &self.backends.llm),
            ] {
                match slot {
                    Some(config) => config.validate()?,
                    None => {
                        return Err(Error::Config(format!(
                            "no {name} backend configured; set it in the config, via environment, or use mock backends"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// Header embedded in every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl RunStamp {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

/// Model services used by a run, with caption and embedding caches in front.
pub struct Services {
    captioner: CachedCaptioner<Box<dyn Captioner>>,
    embedder: CachedEmbedder<Box<dyn Embedder>>,
    completer: Box<dyn Completer>,
}

impl Services {
    /// `caption_cache` persists captions when given.
    pub fn new(
        captioner: Box<dyn Captioner>,
        embedder: Box<dyn Embedder>,
        completer: Box<dyn Completer>,
        caption_cache: Option<&Path>,
    ) -> Result<Self> {
        let captioner = match caption_cache {
            Some(path) => CachedCaptioner::open(captioner, path)?,
            None => CachedCaptioner::in_memory(captioner),
        };
        Ok(Self {
            captioner,
            embedder: CachedEmbedder::new(embedder),
            completer,
        })
    }

    /// Mocks when `config.backends.mock`, HTTP clients otherwise.
    pub fn from_config(config: &RunConfig, clips: &[ClipAnnotation], vocab: &Vocabulary) -> Result<Self> {
        let cache = config.cache_dir().join(CAPTIONS_FILE);
        if config.backends.mock {
            return Self::new(
                Box::new(MockCaptioner::from_annotations(clips, vocab)),
                Box::new(HashEmbedder::new(config.backends.mock_embedding_dim)),
                Box::new(EchoCompleter::new(config.prompt.z)),
                Some(&cache),
            );
        }
        let missing = |name: &str| Error::Config(format!("no {name} backend configured"));
        let caption = config.backends.caption.as_ref().ok_or_else(|| missing("caption"))?;
        let embed = config.backends.embed.as_ref().ok_or_else(|| missing("embed"))?;
        let llm = config.backends.llm.as_ref().ok_or_else(|| missing("llm"))?;
        Self::new(
            Box::new(ServiceClient::http(caption)?),
            Box::new(ServiceClient::http(embed)?),
            Box::new(ServiceClient::http(llm)?),
            Some(&cache),
        )
    }

    /// Captions requested from the wrapped backend (cache misses).
    pub fn caption_backend_calls(&self) -> usize {
        self.captioner.misses()
    }

    /// Embeddings requested from the wrapped backend (cache misses).
    pub fn embed_backend_calls(&self) -> usize {
        self.embedder.misses()
    }

    pub fn flush(&self) -> Result<()> {
        self.captioner.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionsFile {
    #[serde(flatten)]
    pub stamp: RunStamp,
    pub prefix: String,
    pub clips: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    #[serde(flatten)]
    pub stamp: RunStamp,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub metric: EditMetric,
    pub aggregation: String,
    pub predictions_config_hash: String,
    pub example_ids: BTreeMap<String, Vec<SliceRef>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub stamp: RunStamp,
    pub metadata: ReportMetadata,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFile {
    pub source_config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub cells: Vec<RegressionCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutcome {
    pub path: PathBuf,
    pub n_queries: usize,
    pub fallback_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutcome {
    pub path: PathBuf,
    pub captions: usize,
    pub backend_calls: usize,
}

#[derive(Debug, Deserialize)]
struct RecognizedClip {
    clip_id: String,
    actions: Vec<(String, String)>,
}

/// Loads recognized past actions: `[{"clip_id": .., "actions": [["verb", "noun"], ..]}]`,
/// aligned with segment positions.
pub fn load_recognized(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<HashMap<String, Vec<ActionLabel>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let clips: Vec<RecognizedClip> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    clips
        .into_iter()
        .map(|clip| {
            let labels = clip
                .actions
                .iter()
                .enumerate()
                .map(|(i, (verb, noun))| {
                    vocab.lookup(verb, noun).ok_or_else(|| Error::UnknownLabel {
                        clip_id: clip.clip_id.clone(),
                        action_idx: i,
                        token: format!("({verb}, {noun})"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((clip.clip_id, labels))
        })
        .collect()
}

fn file_stem(slice: &SliceRef) -> String {
    let clean: String = slice
        .clip_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{clean}__{:04}", slice.anchor)
}

fn seeded_rng(seed: u64, slice: &SliceRef) -> ChaCha8Rng {
    let material = format!("{seed}\u{0}{}\u{0}{}", slice.clip_id, slice.anchor);
    ChaCha8Rng::from_seed(crate::sha256_bytes(material.as_bytes()))
}

struct PlannedQuery {
    clip: usize,
    query: Query,
    truth: QueryTruth,
}

/// A loaded run: vocabulary, clips and services.
pub struct Pipeline {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    clips: Vec<ClipAnnotation>,
    pool_clips: Option<Vec<ClipAnnotation>>,
    recognized: Option<HashMap<String, Vec<ActionLabel>>>,
    services: Arc<Services>,
}

impl Pipeline {
    /// Loads inputs and builds services from the config.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::load(&config.verbs, &config.nouns)?;
        let clips = dataset::load_annotations(&config.annotations, &vocab)?;
        let pool_clips = match &config.pool_annotations {
            Some(path) => Some(dataset::load_annotations(path, &vocab)?),
            None => None,
        };
        let all: Vec<ClipAnnotation> = clips.iter().chain(pool_clips.iter().flatten()).cloned().collect();
        let services = Arc::new(Services::from_config(&config, &all, &vocab)?);
        Self::assemble(config, vocab, clips, pool_clips, services)
    }

    /// Loads inputs and uses the given services.
    pub fn with_services(config: RunConfig, services: Arc<Services>) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::load(&config.verbs, &config.nouns)?;
        let clips = dataset::load_annotations(&config.annotations, &vocab)?;
        let pool_clips = match &config.pool_annotations {
            Some(path) => Some(dataset::load_annotations(path, &vocab)?),
            None => None,
        };
        Self::assemble(config, vocab, clips, pool_clips, services)
    }

    fn assemble(
        config: RunConfig,
        vocab: Vocabulary,
        clips: Vec<ClipAnnotation>,
        pool_clips: Option<Vec<ClipAnnotation>>,
        services: Arc<Services>,
    ) -> Result<Self> {
        let recognized = match &config.recognized {
            Some(path) => Some(load_recognized(path, &vocab)?),
            None => None,
        };
        Ok(Self {
            config,
            vocab,
            clips,
            pool_clips,
            recognized,
            services,
        })
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    fn output(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    /// Captions the middle frame of every segment lacking a narration.
    fn fill_narrations(&self, clips: &mut [ClipAnnotation]) -> Result<()> {
        let prefix = &self.config.caption_prefix;
        let captioner: &dyn Captioner = &self.services.captioner;
        clips.par_iter_mut().try_for_each(|clip| {
            let missing: Vec<(usize, u64)> = clip
                .segments
                .iter()
                .filter(|s| !clip.narrations.contains_key(&s.action_idx))
                .map(|s| (s.action_idx, s.middle_frame()))
                .collect();
            for (idx, frame) in missing {
                let text = backends::caption(captioner, &clip.clip_id, frame, prefix).map_err(|e| match e {
                    Error::BackendUnavailable { sample, reason } => Error::BackendUnavailable {
                        sample,
                        reason: format!("clip {} action {idx}: {reason}", clip.clip_id),
                    },
                    other => other,
                })?;
                clip.narrations.insert(idx, text);
            }
            Ok(())
        })?;
        self.services.flush()
    }

    fn narrated_clips(&self) -> Result<(Vec<ClipAnnotation>, Vec<ClipAnnotation>)> {
        let mut clips = self.clips.clone();
        self.fill_narrations(&mut clips)?;
        let pool = match &self.pool_clips {
            Some(pool) => {
                let mut pool = pool.clone();
                self.fill_narrations(&mut pool)?;
                pool
            }
            None => clips.clone(),
        };
        Ok((clips, pool))
    }

    /// Captions every segment and writes the narration sidecar.
    pub fn caption(&self) -> Result<CaptionOutcome> {
        let before = self.services.caption_backend_calls();
        let (clips, pool) = self.narrated_clips()?;
        let mut map = BTreeMap::new();
        let sources: Vec<&ClipAnnotation> = match &self.pool_clips {
            Some(_) => clips.iter().chain(pool.iter()).collect(),
            None => clips.iter().collect(),
        };
        let mut count = 0;
        for clip in sources {
            let entries: BTreeMap<String, String> = clip
                .narrations
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect();
            count += entries.len();
            map.insert(clip.clip_id.clone(), entries);
        }
        let file = CaptionsFile {
            stamp: RunStamp::new(&self.config),
            prefix: self.config.caption_prefix.clone(),
            clips: map,
        };
        let path = self.output(CAPTIONS_FILE);
        write_json(&path, &file)?;
        Ok(CaptionOutcome {
            path,
            captions: count,
            backend_calls: self.services.caption_backend_calls() - before,
        })
    }

    fn anchors_for(&self, clip: &ClipAnnotation) -> Vec<usize> {
        let z = self.config.prompt.z;
        let first = self.config.anchors.first;
        let last_legal = clip.segments.len().checked_sub(z + 1);
        match last_legal {
            Some(last) if first <= last => {
                if self.config.anchors.sweep {
                    (first..=last).collect()
                } else {
                    vec![first]
                }
            }
            _ => {
                tracing::warn!(clip = %clip.clip_id, "clip too short for a query at anchor {first}; skipped");
                Vec::new()
            }
        }
    }

    fn plan(&self, clips: &[ClipAnnotation]) -> Result<Vec<PlannedQuery>> {
        let mut plan = Vec::new();
        for (ci, clip) in clips.iter().enumerate() {
            for anchor in self.anchors_for(clip) {
                let mut query = build_query(clip, anchor, self.config.prompt.n_prime_cap)?;
                let observed = query.observed_actions.clone();
                let start = anchor + 1 - observed.len();
                let recognized = match &self.recognized {
                    Some(map) => {
                        let labels = map.get(&clip.clip_id).ok_or_else(|| Error::IncompleteRun {
                            clip_id: clip.clip_id.clone(),
                            anchor,
                        })?;
                        if labels.len() <= anchor {
                            return Err(Error::schema(
                                &clip.clip_id,
                                "recognized actions shorter than observed window",
                            ));
                        }
                        labels[start..=anchor].to_vec()
                    }
                    None => observed.clone(),
                };
                query.observed_actions = recognized.clone();
                plan.push(PlannedQuery {
                    clip: ci,
                    truth: QueryTruth {
                        query: query.slice_ref(),
                        future: clip.future_labels(anchor, self.config.prompt.z)?,
                        observed,
                        recognized,
                    },
                    query,
                });
            }
        }
        Ok(plan)
    }

    fn pool_embeddings(&self, pool: &[PooledExample], dim: usize) -> Result<Vec<Embedding<f64>>> {
        let cache = match &self.config.embedding_cache {
            Some(path) if path.exists() => EmbeddingCache::load(path)?,
            _ => EmbeddingCache::new(),
        };
        let embedder: &dyn Embedder = &self.services.embedder;
        let embeddings = pool
            .par_iter()
            .map(|p| {
                cache.get_or_try_insert(&p.source, Some(dim), || {
                    backends::embed(embedder, &selection::embed_example_text(&p.example))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(path) = &self.config.embedding_cache {
            cache.save(path)?;
        }
        Ok(embeddings)
    }

    fn select_examples(
        &self,
        query: &Query,
        pool: &[PooledExample],
        embeddings: Option<&[Embedding<f64>]>,
        query_embedding: Option<&Embedding<f64>>,
    ) -> Result<Vec<usize>> {
        let wanted = self.config.prompt.num_examples;
        let eligible: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].source.clip_id != query.clip_id)
            .collect();
        if wanted == 0 {
            return Ok(Vec::new());
        }
        if eligible.is_empty() {
            return Err(Error::NoCandidates);
        }
        match self.config.selection {
            SelectionStrategy::Random => {
                let mut rng = seeded_rng(self.config.seed, &query.slice_ref());
                let picks = rand::seq::index::sample(&mut rng, eligible.len(), wanted.min(eligible.len()));
                Ok(picks.into_iter().map(|i| eligible[i]).collect())
            }
            SelectionStrategy::Mmr => {
                let (embeddings, q) = embeddings.zip(query_embedding).expect("mmr selection has embeddings");
                let candidates: Vec<(usize, Embedding<f64>)> =
                    eligible.iter().map(|&i| (i, embeddings[i].clone())).collect();
                selection::mmr_select(q, &candidates, &MmrConfig::new(self.config.lambda, wanted)?)
            }
        }
    }

    fn predict_one(
        &self,
        planned: &PlannedQuery,
        pool: &[PooledExample],
        embeddings: Option<&[Embedding<f64>]>,
    ) -> Result<(PromptDocument, PredictionRecord)> {
        let query = &planned.query;
        let query_embedding = match embeddings {
            Some(e) => {
                let q: Embedding<f64> = backends::embed(&self.services.embedder, &selection::embed_query_text(query))?;
                if let Some(first) = e.first() {
                    if first.dim() != q.dim() {
                        return Err(Error::DimMismatch {
                            left: q.dim(),
                            right: first.dim(),
                        });
                    }
                }
                Some(q)
            }
            None => None,
        };
        let picks = self.select_examples(query, pool, embeddings, query_embedding.as_ref())?;
        let examples: Vec<(SliceRef, &dataset::Example)> = picks
            .iter()
            .map(|&i| (pool[i].source.clone(), &pool[i].example))
            .collect();
        let prompt = prompting::build_prompt(query, &examples, &self.config.prompt, &self.vocab)?;
        let set = inference::predict(
            &prompt,
            query,
            &self.vocab,
            &self.config.sampling,
            self.config.prompt.z,
            self.services.completer.as_ref(),
        )?;
        let record = PredictionRecord::from_set(&set, &prompt.example_ids, &self.vocab);
        Ok((prompt, record))
    }

    fn load_partial(&self, hash: &str) -> HashMap<SliceRef, PredictionRecord> {
        let path = self.output(PARTIAL_PREDICTIONS_FILE);
        let Ok(text) = std::fs::read_to_string(&path) else {
            return HashMap::new();
        };
        match serde_json::from_str::<PredictionsFile>(&text) {
            Ok(file) if file.stamp.config_hash == hash => file
                .predictions
                .into_iter()
                .map(|r| (SliceRef::new(r.clip_id.clone(), r.anchor), r))
                .collect(),
            _ => HashMap::new(),
        }
    }

    /// Selects examples, renders prompts, samples and parses completions for
    /// every planned query, then writes the prediction dump and the prompts.
    ///
    /// On failure, finished queries go to a partial manifest that a rerun with
    /// the same config resumes from.
    pub fn predict(&self) -> Result<PredictOutcome> {
        let stamp = RunStamp::new(&self.config);
        let (clips, pool_clips) = self.narrated_clips()?;
        let plan = self.plan(&clips)?;
        let pool = enumerate_training_examples(&pool_clips, self.config.prompt.n, self.config.prompt.z);
        let embeddings = if self.config.selection == SelectionStrategy::Mmr
            && self.config.prompt.num_examples > 0
            && !pool.is_empty()
        {
            let probe: Embedding<f64> = backends::embed(
                &self.services.embedder,
                &selection::embed_example_text(&pool[0].example),
            )?;
            Some(self.pool_embeddings(&pool, probe.dim())?)
        } else {
            None
        };
        let resumed = self.load_partial(&stamp.config_hash);

        let results: Vec<Result<(Option<PromptDocument>, PredictionRecord)>> = plan
            .par_iter()
            .map(|planned| {
                if let Some(record) = resumed.get(&planned.truth.query) {
                    return Ok((None, record.clone()));
                }
                let (prompt, record) = self.predict_one(planned, &pool, embeddings.as_deref())?;
                Ok((Some(prompt), record))
            })
            .collect();

        let mut records = Vec::with_capacity(results.len());
        let mut prompts = Vec::new();
        let mut first_error = None;
        for (planned, result) in plan.iter().zip(results) {
            match result {
                Ok((prompt, record)) => {
                    prompts.extend(prompt);
                    records.push(record);
                }
                Err(e) => {
                    tracing::error!(clip = %self.clips[planned.clip].clip_id, anchor = planned.query.anchor_action_idx, "{e}");
                    first_error.get_or_insert(e);
                }
            }
        }
        let prompt_dir = self.output(PROMPTS_DIR);
        for prompt in &prompts {
            prompt.export(&prompt_dir, &file_stem(&prompt.query_ref))?;
        }
        let file = PredictionsFile {
            stamp,
            predictions: records,
        };
        if let Some(e) = first_error {
            write_json(&self.output(PARTIAL_PREDICTIONS_FILE), &file)?;
            return Err(e);
        }
        let partial = self.output(PARTIAL_PREDICTIONS_FILE);
        if partial.exists() {
            std::fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        let path = self.output(PREDICTIONS_FILE);
        write_json(&path, &file)?;
        Ok(PredictOutcome {
            path,
            n_queries: file.predictions.len(),
            fallback_samples: file
                .predictions
                .iter()
                .flat_map(|r| &r.parse_stats)
                .filter(|s| s.fallback)
                .count(),
        })
    }

    /// Scores a prediction dump against this run's annotations and writes
    /// `report.json` and `report.csv`.
    pub fn evaluate(&self, predictions: impl AsRef<Path>) -> Result<ReportFile> {
        let path = predictions.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dump: PredictionsFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let sets = dump
            .predictions
            .iter()
            .map(|r| r.to_set(&self.vocab))
            .collect::<Result<Vec<_>>>()?;
        // Narrations are irrelevant for scoring.
        let mut clips = self.clips.clone();
        for clip in &mut clips {
            for s in &clip.segments {
                clip.narrations.entry(s.action_idx).or_default();
            }
        }
        let truths: Vec<QueryTruth> = self.plan(&clips)?.into_iter().map(|p| p.truth).collect();
        let report = evaluation::evaluate_dataset(&sets, &truths, self.config.metric)?;
        let file = ReportFile {
            stamp: RunStamp::new(&self.config),
            metadata: ReportMetadata {
                metric: self.config.metric,
                aggregation: "unweighted mean over queries".into(),
                predictions_config_hash: dump.stamp.config_hash.clone(),
                example_ids: dump
                    .predictions
                    .iter()
                    .map(|r| {
                        (
                            file_stem(&SliceRef::new(r.clip_id.clone(), r.anchor)),
                            r.example_ids.clone(),
                        )
                    })
                    .collect(),
            },
            report,
        };
        write_json(&self.output(REPORT_FILE), &file)?;
        file.report.write_csv(self.output(REPORT_CSV_FILE))?;
        Ok(file)
    }
}

/// Fits every (edit distance, accuracy) pair of a report file and writes
/// `regression.json` into `output_dir`.
pub fn regress(report_path: impl AsRef<Path>, output_dir: impl AsRef<Path>) -> Result<RegressionFile> {
    let path = report_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: ReportFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let file = RegressionFile {
        source_config_hash: report.stamp.config_hash.clone(),
        seed: report.stamp.seed,
        config: report.stamp.config.clone(),
        cells: evaluation::regress_report(&report.report)?,
    };
    write_json(&output_dir.as_ref().join(REGRESSION_FILE), &file)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Narrations,
    Actions,
    Selection,
    NumExamples(Vec<usize>),
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    /// `narrations`, `actions`, `selection` or `num-examples=0,4,8`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            None if s == "narrations" => Ok(Self::Narrations),
            None if s == "actions" => Ok(Self::Actions),
            None if s == "selection" => Ok(Self::Selection),
            Some(("num-examples", list)) => list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Config(format!("num-examples value {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Self::NumExamples),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub include_narrations: bool,
    pub include_actions: bool,
    pub selection: SelectionStrategy,
    pub num_examples: usize,
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub n_queries: usize,
    pub caption_backend_calls: usize,
    pub embed_backend_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFile {
    #[serde(flatten)]
    pub stamp: RunStamp,
    pub axes: Vec<AblationAxis>,
    pub rows: Vec<AblationRow>,
}

fn ablation_cells(base: &RunConfig, axes: &[AblationAxis]) -> Result<Vec<RunConfig>> {
    let mut cells = vec![base.clone()];
    for axis in axes {
        let mut next = Vec::new();
        for cell in &cells {
            match axis {
                AblationAxis::Narrations => {
                    for on in [true, false] {
                        let mut c = cell.clone();
                        c.prompt.include_narrations = on;
                        next.push(c);
                    }
                }
                AblationAxis::Actions => {
                    for on in [true, false] {
                        let mut c = cell.clone();
                        c.prompt.include_actions = on;
                        next.push(c);
                    }
                }
                AblationAxis::Selection => {
                    for s in [SelectionStrategy::Mmr, SelectionStrategy::Random] {
                        let mut c = cell.clone();
                        c.selection = s;
                        next.push(c);
                    }
                }
                AblationAxis::NumExamples(values) => {
                    for &v in values {
                        let mut c = cell.clone();
                        c.prompt.num_examples = v;
                        next.push(c);
                    }
                }
            }
        }
        cells = next;
    }
    let both_content_axes = axes.contains(&AblationAxis::Narrations) && axes.contains(&AblationAxis::Actions);
    let mut valid = Vec::with_capacity(cells.len());
    for cell in cells {
        let empty = !cell.prompt.include_narrations && !cell.prompt.include_actions;
        if empty && both_content_axes {
            continue;
        }
        cell.validate()?;
        valid.push(cell);
    }
    if valid.is_empty() {
        return Err(Error::Config("ablation has no valid cells".into()));
    }
    Ok(valid)
}

/// Runs predict + evaluate for every cell of the cross-product of `axes`,
/// sharing the caption and embedding caches. When both content axes are
/// swept, the cell with neither narrations nor actions is dropped; any other
/// content-free cell is a configuration error.
pub fn ablate(pipeline: &Pipeline, axes: &[AblationAxis]) -> Result<AblationFile> {
    let base = &pipeline.config;
    let cells = ablation_cells(base, axes)?;
    let services = Arc::clone(pipeline.services());
    let mut rows = Vec::with_capacity(cells.len());
    for (i, mut cell) in cells.into_iter().enumerate() {
        cell.output_dir = base.output_dir.join("ablate").join(format!("cell_{i:02}"));
        cell.cache_dir = Some(base.cache_dir());
        let (captions_before, embeds_before) = (services.caption_backend_calls(), services.embed_backend_calls());
        let run = Pipeline::with_services(cell.clone(), Arc::clone(&services))?;
        let outcome = run.predict()?;
        let report = run.evaluate(&outcome.path)?.report;
        rows.push(AblationRow {
            include_narrations: cell.prompt.include_narrations,
            include_actions: cell.prompt.include_actions,
            selection: cell.selection,
            num_examples: cell.prompt.num_examples,
            verb_ed: report.verb_ed,
            noun_ed: report.noun_ed,
            action_ed: report.action_ed,
            n_queries: report.n_queries,
            caption_backend_calls: services.caption_backend_calls() - captions_before,
            embed_backend_calls: services.embed_backend_calls() - embeds_before,
        });
    }
    let file = AblationFile {
        stamp: RunStamp::new(base),
        axes: axes.to_vec(),
        rows,
    };
    write_json(&base.output_dir.join(ABLATION_FILE), &file)?;
    let csv_path = base.output_dir.join(ABLATION_CSV_FILE);
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    for row in &file.rows {
        writer
            .serialize(row)
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(file)
}
