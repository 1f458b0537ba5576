//! Clip annotations and the slicing of clips into few-shot examples and queries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ActionLabel, Vocabulary};

/// Default cap on the number of observed actions rendered in a query.
pub const DEFAULT_QUERY_CAP: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSegment {
    pub start_frame: u64,
    pub end_frame: u64,
    pub label: ActionLabel,
    pub action_idx: usize,
}

impl ActionSegment {
    /// Frame sent to the captioner: the floor midpoint, always inside
    /// `[start_frame, end_frame)`.
    pub fn middle_frame(&self) -> u64 {
        middle_frame(self.start_frame, self.end_frame)
    }
}

pub fn middle_frame(start_frame: u64, end_frame: u64) -> u64 {
    start_frame + (end_frame - start_frame) / 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub segments: Vec<ActionSegment>,
    pub narrations: BTreeMap<usize, String>,
}

impl ClipAnnotation {
    pub fn labels(&self) -> impl Iterator<Item = ActionLabel> + '_ {
        self.segments.iter().map(|s| s.label)
    }

    fn narration(&self, idx: usize) -> Result<&str> {
        self.narrations
            .get(&idx)
            .map(String::as_str)
            .ok_or(Error::MissingNarration(idx))
    }

    fn insufficient(&self, anchor: usize) -> Error {
        Error::InsufficientContext {
            clip_id: self.clip_id.clone(),
            anchor,
        }
    }

    /// Ground-truth future window `anchor+1..=anchor+z`.
    pub fn future_labels(&self, anchor: usize, z: usize) -> Result<Vec<ActionLabel>> {
        let end = anchor + 1 + z;
        if end > self.segments.len() {
            return Err(self.insufficient(anchor));
        }
        Ok(self.segments[anchor + 1..end].iter().map(|s| s.label).collect())
    }
}

/// Identifies an example or query by its clip and anchor (0-based index of the
/// last observed action).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceRef {
    pub clip_id: String,
    pub anchor: usize,
}

impl SliceRef {
    pub fn new(clip_id: impl Into<String>, anchor: usize) -> Self {
        Self {
            clip_id: clip_id.into(),
            anchor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub narrations: Vec<String>,
    pub observed_actions: Vec<ActionLabel>,
    pub future_actions: Vec<ActionLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub clip_id: String,
    pub anchor_action_idx: usize,
    pub narrations: Vec<String>,
    pub observed_actions: Vec<ActionLabel>,
}

impl Query {
    pub fn slice_ref(&self) -> SliceRef {
        SliceRef::new(self.clip_id.clone(), self.anchor_action_idx)
    }

    pub fn last_observed(&self) -> ActionLabel {
        *self
            .observed_actions
            .last()
            .expect("query has at least one observed action")
    }
}

/// N′ = min(cap, count), where `count` is the number of observed actions.
pub fn query_horizon(observed_count: usize, cap: usize) -> Result<usize> {
    if observed_count < 1 {
        return Err(Error::NoObservedActions);
    }
    Ok(observed_count.min(cap))
}

/// Example ending its observed window at `anchor`: `n` observed actions then
/// `z` future actions.
pub fn build_example(clip: &ClipAnnotation, anchor: usize, n: usize, z: usize) -> Result<Example> {
    if n == 0 || anchor + 1 < n || anchor + 1 + z > clip.segments.len() {
        return Err(clip.insufficient(anchor));
    }
    let first = anchor + 1 - n;
    let narrations = (first..=anchor)
        .map(|idx| clip.narration(idx).map(str::to_owned))
        .collect::<Result<Vec<_>>>()?;
    Ok(Example {
        narrations,
        observed_actions: clip.segments[first..=anchor].iter().map(|s| s.label).collect(),
        future_actions: clip.future_labels(anchor, z)?,
    })
}

/// Query over the N′ most recent observed actions ending at `anchor`.
pub fn build_query(clip: &ClipAnnotation, anchor: usize, cap: usize) -> Result<Query> {
    if anchor >= clip.segments.len() {
        return Err(clip.insufficient(anchor));
    }
    let horizon = query_horizon(anchor + 1, cap)?;
    let first = anchor + 1 - horizon;
    let narrations = (first..=anchor)
        .map(|idx| clip.narration(idx).map(str::to_owned))
        .collect::<Result<Vec<_>>>()?;
    Ok(Query {
        clip_id: clip.clip_id.clone(),
        anchor_action_idx: anchor,
        narrations,
        observed_actions: clip.segments[first..=anchor].iter().map(|s| s.label).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PooledExample {
    pub source: SliceRef,
    pub example: Example,
}

/// Every legal (clip, anchor) example, in clip order then ascending anchor.
/// Anchors whose window lacks a narration are skipped.
pub fn enumerate_training_examples(clips: &[ClipAnnotation], n: usize, z: usize) -> Vec<PooledExample> {
    let mut pool = Vec::new();
    if n == 0 {
        return pool;
    }
    for clip in clips {
        let len = clip.segments.len();
        if len < n + z {
            continue;
        }
        for anchor in n - 1..=len - z - 1 {
            if let Ok(example) = build_example(clip, anchor, n, z) {
                pool.push(PooledExample {
                    source: SliceRef::new(clip.clip_id.clone(), anchor),
                    example,
                });
            }
        }
    }
    pool
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawSegment {
    pub start_frame: i64,
    pub end_frame: i64,
    pub verb: String,
    pub noun: String,
}

/// On-disk clip record.
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawClip {
    pub clip_id: String,
    pub segments: Vec<RawSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrations: Option<BTreeMap<String, String>>,
}

pub fn load_annotations(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<ClipAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, vocab)
}

pub fn parse_annotations(text: &str, vocab: &Vocabulary) -> Result<Vec<ClipAnnotation>> {
    let document: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::schema("<document>", format!("top-level list of clips: {e}")))?;
    document
        .into_iter()
        .enumerate()
        .map(|(i, value)| {
            let clip_id = value
                .get("clip_id")
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .unwrap_or_else(|| format!("<clip #{i}>"));
            let raw: RawClip = serde_json::from_value(value).map_err(|e| Error::schema(&clip_id, e.to_string()))?;
            resolve_clip(raw, vocab)
        })
        .collect()
}

pub fn resolve_clip(raw: RawClip, vocab: &Vocabulary) -> Result<ClipAnnotation> {
    let clip_id = raw.clip_id;
    if clip_id.is_empty() {
        return Err(Error::schema("<empty>", "clip_id"));
    }
    let mut segments = Vec::with_capacity(raw.segments.len());
    for (action_idx, seg) in raw.segments.into_iter().enumerate() {
        if seg.start_frame < 0 {
            return Err(Error::schema(&clip_id, format!("segments[{action_idx}].start_frame")));
        }
        if seg.end_frame <= seg.start_frame {
            return Err(Error::schema(&clip_id, format!("segments[{action_idx}].end_frame")));
        }
        let verb = vocab.verb_id(&seg.verb).ok_or_else(|| Error::UnknownLabel {
            clip_id: clip_id.clone(),
            action_idx,
            token: seg.verb.clone(),
        })?;
        let noun = vocab.noun_id(&seg.noun).ok_or_else(|| Error::UnknownLabel {
            clip_id: clip_id.clone(),
            action_idx,
            token: seg.noun.clone(),
        })?;
        segments.push(ActionSegment {
            start_frame: seg.start_frame as u64,
            end_frame: seg.end_frame as u64,
            label: ActionLabel::new(verb, noun),
            action_idx,
        });
    }
    if segments.windows(2).any(|w| w[1].start_frame < w[0].start_frame) {
        return Err(Error::schema(&clip_id, "segments not sorted by start_frame"));
    }
    let mut narrations = BTreeMap::new();
    for (key, text) in raw.narrations.unwrap_or_default() {
        let idx: usize = key
            .parse()
            .map_err(|_| Error::schema(&clip_id, format!("narrations key {key:?}")))?;
        if idx >= segments.len() {
            return Err(Error::schema(&clip_id, format!("narrations key {idx} out of range")));
        }
        narrations.insert(idx, text);
    }
    Ok(ClipAnnotation {
        clip_id,
        segments,
        narrations,
    })
}

/// Serializes clips back into the annotation schema.
pub fn to_raw_clip(clip: &ClipAnnotation, vocab: &Vocabulary) -> RawClip {
    RawClip {
        clip_id: clip.clip_id.clone(),
        segments: clip
            .segments
            .iter()
            .map(|s| RawSegment {
                start_frame: s.start_frame as i64,
                end_frame: s.end_frame as i64,
                verb: vocab.verb(s.label.verb).to_owned(),
                noun: vocab.noun(s.label.noun).to_owned(),
            })
            .collect(),
        narrations: (!clip.narrations.is_empty()).then(|| {
            clip.narrations
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect()
        }),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::taxonomy::{NounId, VerbId};
    use proptest::prelude::*;

    pub(crate) fn synthetic_clip(id: &str, len: usize) -> ClipAnnotation {
        ClipAnnotation {
            clip_id: id.into(),
            segments: (0..len)
                .map(|i| ActionSegment {
                    start_frame: 30 * i as u64,
                    end_frame: 30 * i as u64 + 20,
                    label: ActionLabel::new(VerbId(i as u32 % 3), NounId(i as u32)),
                    action_idx: i,
                })
                .collect(),
            narrations: (0..len).map(|i| (i, format!("A person is doing step {i}"))).collect(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(["take", "put", "cut"], ["knife", "onion", "board"]).unwrap()
    }

    #[test]
    fn middle_frame_examples() {
        assert_eq!(middle_frame(10, 20), 15);
        assert_eq!(middle_frame(10, 21), 15);
        assert_eq!(middle_frame(0, 1), 0);
    }

    #[test]
    fn horizon_examples() {
        assert_eq!(query_horizon(7, 12).unwrap(), 7);
        assert_eq!(query_horizon(30, 12).unwrap(), 12);
        assert_eq!(query_horizon(12, 12).unwrap(), 12);
        assert!(matches!(query_horizon(0, 12), Err(Error::NoObservedActions)));
    }

    #[test]
    fn example_windows() {
        let clip = synthetic_clip("c", 28);
        let ex = build_example(&clip, 7, 8, 20).unwrap();
        let labels: Vec<_> = clip.labels().collect();
        assert_eq!(ex.observed_actions, labels[0..8]);
        assert_eq!(ex.future_actions, labels[8..28]);
        assert_eq!(ex.narrations[0], "A person is doing step 0");
        assert_eq!(ex.narrations.len(), 8);

        let short = synthetic_clip("c", 27);
        assert!(matches!(
            build_example(&short, 7, 8, 20),
            Err(Error::InsufficientContext { anchor: 7, .. })
        ));
        assert!(matches!(
            build_example(&clip, 6, 8, 20),
            Err(Error::InsufficientContext { anchor: 6, .. })
        ));

        let mut gap = synthetic_clip("c", 28);
        gap.narrations.remove(&3);
        assert!(matches!(build_example(&gap, 7, 8, 20), Err(Error::MissingNarration(3))));
    }

    #[test]
    fn query_windows() {
        let clip = synthetic_clip("c", 30);
        let labels: Vec<_> = clip.labels().collect();
        let q = build_query(&clip, 7, 12).unwrap();
        assert_eq!(q.observed_actions, labels[0..8]);
        let q = build_query(&clip, 19, 12).unwrap();
        assert_eq!(q.observed_actions, labels[8..20]);
        assert_eq!(q.narrations[0], "A person is doing step 8");
        let q = build_query(&clip, 0, 12).unwrap();
        assert_eq!(q.observed_actions, labels[0..1]);
        assert_eq!(q.last_observed(), labels[0]);
        assert!(build_query(&clip, 30, 12).is_err());
    }

    #[test]
    fn pool_enumeration() {
        let anchors = |len| {
            enumerate_training_examples(&[synthetic_clip("c", len)], 8, 20)
                .into_iter()
                .map(|p| p.source.anchor)
                .collect::<Vec<_>>()
        };
        assert_eq!(anchors(28), vec![7]);
        assert_eq!(anchors(29), vec![7, 8]);
        assert!(anchors(27).is_empty());
    }

    proptest! {
        #[test]
        fn middle_frame_inside(start in 0u64..1_000_000, len in 1u64..100_000) {
            let m = middle_frame(start, start + len);
            prop_assert!(m >= start && m < start + len);
        }

        #[test]
        fn horizon_monotone(count in 1usize..100, cap in 1usize..30) {
            let a = query_horizon(count, cap).unwrap();
            let b = query_horizon(count + 1, cap).unwrap();
            prop_assert!(a <= b && b <= cap);
        }

        #[test]
        fn pool_size_and_contiguity(lens in proptest::collection::vec(0usize..40, 1..4), n in 1usize..10, z in 1usize..25) {
            let clips: Vec<_> = lens.iter().enumerate().map(|(i, &l)| synthetic_clip(&format!("c{i}"), l)).collect();
            let pool = enumerate_training_examples(&clips, n, z);
            let expected: usize = lens.iter().map(|&l| (l + 1).saturating_sub(n + z)).sum();
            prop_assert_eq!(pool.len(), expected);
            for p in &pool {
                let clip = clips.iter().find(|c| c.clip_id == p.source.clip_id).unwrap();
                let labels: Vec<_> = clip.labels().collect();
                let joined: Vec<_> = p.example.observed_actions.iter().chain(&p.example.future_actions).copied().collect();
                let start = p.source.anchor + 1 - n;
                prop_assert_eq!(&joined[..], &labels[start..start + n + z]);
            }
        }
    }

    #[test]
    fn parse_valid_and_invalid() {
        let v = vocab();
        let doc = r#"[
          {"clip_id": "a", "segments": [
             {"start_frame": 0, "end_frame": 10, "verb": "take", "noun": "knife"},
             {"start_frame": 10, "end_frame": 25, "verb": "Cut", "noun": "onion"}],
           "narrations": {"0": "A person is holding a knife"}},
          {"clip_id": "b", "segments": []}
        ]"#;
        let clips = parse_annotations(doc, &v).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].segments[1].action_idx, 1);
        assert_eq!(clips[0].segments[1].middle_frame(), 17);
        assert_eq!(clips[0].narrations[&0], "A person is holding a knife");

        let bad_frames = r#"[{"clip_id": "x", "segments": [
             {"start_frame": 5, "end_frame": 5, "verb": "take", "noun": "knife"}]}]"#;
        match parse_annotations(bad_frames, &v) {
            Err(Error::Schema { clip_id, field }) => {
                assert_eq!(clip_id, "x");
                assert!(field.contains("end_frame"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let unknown = r#"[{"clip_id": "y", "segments": [
             {"start_frame": 0, "end_frame": 5, "verb": "take", "noun": "knife"},
             {"start_frame": 5, "end_frame": 9, "verb": "take", "noun": "levitation_device"}]}]"#;
        match parse_annotations(unknown, &v) {
            Err(Error::UnknownLabel {
                clip_id,
                action_idx,
                token,
            }) => {
                assert_eq!(
                    (clip_id.as_str(), action_idx, token.as_str()),
                    ("y", 1, "levitation_device")
                );
            }
            other => panic!("unexpected {other:?}"),
        }

        let missing_field = r#"[{"clip_id": "z", "segments": [{"start_frame": 0, "verb": "take", "noun": "knife"}]}]"#;
        assert!(matches!(
            parse_annotations(missing_field, &v),
            Err(Error::Schema { .. })
        ));
        let bad_narr = r#"[{"clip_id": "w", "segments": [], "narrations": {"3": "A person is"}}]"#;
        assert!(matches!(parse_annotations(bad_narr, &v), Err(Error::Schema { .. })));
    }
}
