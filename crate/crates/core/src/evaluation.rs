//! Edit-distance metrics, best-of-K aggregation, recognition accuracy and the
//! accuracy-vs-error regression.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SliceRef;
use crate::error::{Error, Result};
use crate::inference::PredictionSet;
use crate::scalar::Scalar;
use crate::taxonomy::ActionLabel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMetric {
    /// Unit-cost insert/delete/substitute.
    #[default]
    Levenshtein,
    /// Levenshtein plus adjacent transposition (optimal string alignment).
    Osa,
}

/// Which part of an action two labels are compared on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Action,
    Verb,
    Noun,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Verb, Projection::Noun, Projection::Action];

    pub fn key(self, label: ActionLabel) -> u64 {
        match self {
            Projection::Action => (u64::from(label.verb.0) << 32) | u64::from(label.noun.0),
            Projection::Verb => u64::from(label.verb.0),
            Projection::Noun => u64::from(label.noun.0),
        }
    }

    pub fn apply(self, labels: &[ActionLabel]) -> Vec<u64> {
        labels.iter().map(|&l| self.key(l)).collect()
    }
}

pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(x != y);
            curr[j + 1] = substitute.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

pub fn osa_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut best = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                best = best.min(d[i - 2][j - 2] + 1);
            }
            d[i][j] = best;
        }
    }
    d[n][m]
}

/// Levenshtein distance normalized by the longer length.
pub fn edit_distance<T: Scalar, S: PartialEq>(a: &[S], b: &[S]) -> Result<T> {
    edit_distance_with(EditMetric::Levenshtein, a, b)
}

pub fn edit_distance_with<T: Scalar, S: PartialEq>(metric: EditMetric, a: &[S], b: &[S]) -> Result<T> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(Error::EmptySequences);
    }
    let raw = match metric {
        EditMetric::Levenshtein => levenshtein(a, b),
        EditMetric::Osa => osa_distance(a, b),
    };
    Ok(T::from_usize_exact(raw) / T::from_usize_exact(longest))
}

/// Minimum projected edit distance over the candidate sequences.
pub fn best_of_k<T: Scalar>(
    candidates: &[Vec<ActionLabel>],
    ground_truth: &[ActionLabel],
    projection: Projection,
    metric: EditMetric,
) -> Result<T> {
    let truth = projection.apply(ground_truth);
    let mut best: Option<T> = None;
    for candidate in candidates {
        let d: T = edit_distance_with(metric, &projection.apply(candidate), &truth)?;
        best = Some(best.map_or(d, |b| b.min(d)));
    }
    best.ok_or(Error::NoCandidates)
}

impl PredictionSet {
    pub fn best_of_k<T: Scalar>(
        &self,
        ground_truth: &[ActionLabel],
        projection: Projection,
        metric: EditMetric,
    ) -> Result<T> {
        best_of_k(&self.sequences, ground_truth, projection, metric)
    }
}

/// Positionwise exact-match fraction on the projected field.
pub fn recognition_accuracy<T: Scalar>(
    recognized: &[ActionLabel],
    truth: &[ActionLabel],
    projection: Projection,
) -> Result<T> {
    if recognized.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: recognized.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptySequences);
    }
    let hits = recognized
        .iter()
        .zip(truth)
        .filter(|(&r, &t)| projection.key(r) == projection.key(t))
        .count();
    Ok(T::from_usize_exact(hits) / T::from_usize_exact(truth.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult<T> {
    pub coefficient: T,
    /// Standard error of the coefficient.
    pub stderr: T,
    pub intercept: T,
    pub n: usize,
}

/// Simple least-squares fit of `y = intercept + coefficient * x`.
pub fn ols_regression<T: Scalar>(x: &[T], y: &[T]) -> Result<RegressionResult<T>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    let count = T::from_usize_exact(n);
    let mean_x = x.iter().copied().sum::<T>() / count;
    let mean_y = y.iter().copied().sum::<T>() / count;
    let sxx: T = x.iter().map(|&xi| (xi - mean_x) * (xi - mean_x)).sum();
    if sxx == T::zero() {
        return Err(Error::DegenerateRegressor);
    }
    let sxy: T = x.iter().zip(y).map(|(&xi, &yi)| (xi - mean_x) * (yi - mean_y)).sum();
    let coefficient = sxy / sxx;
    let intercept = mean_y - coefficient * mean_x;
    let rss: T = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (intercept + coefficient * xi);
            r * r
        })
        .sum();
    let stderr = (rss / T::from_usize_exact(n - 2) / sxx).sqrt();
    Ok(RegressionResult {
        coefficient,
        stderr,
        intercept,
        n,
    })
}

/// Ground truth for one evaluated query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTruth {
    pub query: SliceRef,
    pub future: Vec<ActionLabel>,
    /// Ground-truth labels of the observed window.
    pub observed: Vec<ActionLabel>,
    /// Labels fed to the model for the same window.
    pub recognized: Vec<ActionLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub clip_id: String,
    pub anchor: usize,
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub verb_acc: f64,
    pub noun_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub n_queries: usize,
    /// Samples whose completion held no in-vocabulary pair.
    pub fallback_samples: usize,
    pub per_clip: Vec<QueryScore>,
}

impl EvalReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        for row in &self.per_clip {
            writer
                .serialize(row)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn score_query(set: &PredictionSet, truth: &QueryTruth, metric: EditMetric) -> Result<QueryScore> {
    Ok(QueryScore {
        clip_id: truth.query.clip_id.clone(),
        anchor: truth.query.anchor,
        verb_ed: set.best_of_k(&truth.future, Projection::Verb, metric)?,
        noun_ed: set.best_of_k(&truth.future, Projection::Noun, metric)?,
        action_ed: set.best_of_k(&truth.future, Projection::Action, metric)?,
        verb_acc: recognition_accuracy(&truth.recognized, &truth.observed, Projection::Verb)?,
        noun_acc: recognition_accuracy(&truth.recognized, &truth.observed, Projection::Noun)?,
    })
}

/// Scores every query and averages per-query values without weighting.
///
/// Every truth needs exactly one prediction set and vice versa.
pub fn evaluate_dataset(
    predictions: &[PredictionSet],
    truths: &[QueryTruth],
    metric: EditMetric,
) -> Result<EvalReport> {
    let incomplete = |r: &SliceRef| Error::IncompleteRun {
        clip_id: r.clip_id.clone(),
        anchor: r.anchor,
    };
    if truths.is_empty() {
        return Err(Error::Config("no queries to evaluate".into()));
    }
    let by_ref: std::collections::HashMap<&SliceRef, &PredictionSet> =
        predictions.iter().map(|p| (&p.query_ref, p)).collect();
    if let Some(extra) = predictions
        .iter()
        .find(|p| !truths.iter().any(|t| t.query == p.query_ref))
    {
        return Err(incomplete(&extra.query_ref));
    }
    let pairs = truths
        .iter()
        .map(|t| {
            by_ref
                .get(&t.query)
                .map(|&p| (p, t))
                .ok_or_else(|| incomplete(&t.query))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_clip = pairs
        .par_iter()
        .map(|(set, truth)| score_query(set, truth, metric))
        .collect::<Result<Vec<_>>>()?;
    let n = per_clip.len() as f64;
    let mean = |f: fn(&QueryScore) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        verb_ed: mean(|s| s.verb_ed),
        noun_ed: mean(|s| s.noun_ed),
        action_ed: mean(|s| s.action_ed),
        n_queries: per_clip.len(),
        fallback_samples: pairs.iter().map(|(p, _)| p.fallback_count()).sum(),
        per_clip,
    })
}

/// Accuracy regressor for the error regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyField {
    Verb,
    Noun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCell {
    pub edit_distance: Projection,
    pub accuracy: AccuracyField,
    pub result: RegressionResult<f64>,
}

/// Univariate fit of each edit distance (verb, noun, action) on each
/// recognition accuracy (verb, noun) across queries.
pub fn regress_report(report: &EvalReport) -> Result<Vec<RegressionCell>> {
    let mut cells = Vec::with_capacity(6);
    for ed in Projection::ALL {
        let y: Vec<f64> = report
            .per_clip
            .iter()
            .map(|s| match ed {
                Projection::Verb => s.verb_ed,
                Projection::Noun => s.noun_ed,
                Projection::Action => s.action_ed,
            })
            .collect();
        for accuracy in [AccuracyField::Verb, AccuracyField::Noun] {
            let x: Vec<f64> = report
                .per_clip
                .iter()
                .map(|s| match accuracy {
                    AccuracyField::Verb => s.verb_acc,
                    AccuracyField::Noun => s.noun_acc,
                })
                .collect();
            cells.push(RegressionCell {
                edit_distance: ed,
                accuracy,
                result: ols_regression(&x, &y)?,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{NounId, VerbId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn a(v: u32, n: u32) -> ActionLabel {
        ActionLabel::new(VerbId(v), NounId(n))
    }

    #[test]
    fn edit_distance_examples() {
        let s: Vec<u32> = (0..20).collect();
        let t: Vec<u32> = (100..120).collect();
        assert_eq!(edit_distance::<f64, _>(&s, &s).unwrap(), 0.0);
        assert_eq!(edit_distance::<f64, _>(&s, &t).unwrap(), 1.0);
        assert_eq!(
            edit_distance::<f64, _>(&['x', 'y', 'z'], &['x', 'z']).unwrap(),
            1.0 / 3.0
        );
        assert_eq!(
            edit_distance::<f32, _>(&['x', 'y', 'z'], &['x', 'z']).unwrap(),
            1.0f32 / 3.0
        );
        assert!(matches!(edit_distance::<f64, u8>(&[], &[]), Err(Error::EmptySequences)));
        assert_eq!(edit_distance::<f64, u8>(&[], &[1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn osa_counts_transposition_once() {
        assert_eq!(levenshtein(b"ab", b"ba"), 2);
        assert_eq!(osa_distance(b"ab", b"ba"), 1);
        assert_eq!(osa_distance(b"ca", b"abc"), 3);
        assert_eq!(osa_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn best_of_k_examples() {
        let gt: Vec<_> = (0..20).map(|i| a(i % 4, i)).collect();
        let wrong: Vec<_> = (0..20).map(|i| a(9, 100 + i)).collect();
        let mut cands = vec![wrong.clone(); 4];
        cands.push(gt.clone());
        assert_eq!(
            best_of_k::<f64>(&cands, &gt, Projection::Action, EditMetric::Levenshtein).unwrap(),
            0.0
        );
        let single = vec![wrong.clone()];
        assert_eq!(
            best_of_k::<f64>(&single, &gt, Projection::Verb, EditMetric::Levenshtein).unwrap(),
            edit_distance::<f64, _>(&Projection::Verb.apply(&wrong), &Projection::Verb.apply(&gt)).unwrap()
        );
        assert!(matches!(
            best_of_k::<f64>(&[], &gt, Projection::Action, EditMetric::Levenshtein),
            Err(Error::NoCandidates)
        ));
    }

    #[test]
    fn accuracy_examples() {
        let gt = vec![a(1, 1); 8];
        assert_eq!(recognition_accuracy::<f64>(&gt, &gt, Projection::Action).unwrap(), 1.0);
        let nouns_off = vec![a(1, 2); 8];
        assert_eq!(
            recognition_accuracy::<f64>(&nouns_off, &gt, Projection::Verb).unwrap(),
            1.0
        );
        assert_eq!(
            recognition_accuracy::<f64>(&nouns_off, &gt, Projection::Noun).unwrap(),
            0.0
        );
        assert_eq!(
            recognition_accuracy::<f64>(&nouns_off, &gt, Projection::Action).unwrap(),
            0.0
        );
        let mut three = vec![a(0, 0); 8];
        three[..3].copy_from_slice(&[a(1, 1); 3]);
        assert_eq!(
            recognition_accuracy::<f64>(&three, &gt, Projection::Action).unwrap(),
            0.375
        );
        assert!(matches!(
            recognition_accuracy::<f64>(&three[..2], &gt, Projection::Action),
            Err(Error::LengthMismatch { left: 2, right: 8 })
        ));
    }

    #[test]
    fn ols_examples() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let fit = ols_regression(&x, &y).unwrap();
        assert_eq!((fit.coefficient, fit.stderr, fit.intercept, fit.n), (2.0, 0.0, 1.0, 5));
        let fit = ols_regression(&[0.0, 1.0, 2.0], &[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(fit.coefficient, 1.5);
        assert!(matches!(
            ols_regression(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]),
            Err(Error::DegenerateRegressor)
        ));
        assert!(matches!(
            ols_regression(&[1.0, 2.0], &[0.0, 1.0]),
            Err(Error::TooFewPoints(2))
        ));
        let fit32 = ols_regression(&[0.0f32, 1.0, 2.0], &[0.0f32, 1.0, 3.0]).unwrap();
        assert_eq!(fit32.coefficient, 1.5f32);
    }

    #[test]
    fn ols_recovers_slope_within_three_stderr() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let trials = 1000;
        let mut inside = 0;
        for _ in 0..trials {
            let beta: f64 = rng.random_range(-3.0..3.0);
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|&xi| beta * xi + noise.sample(&mut rng)).collect();
            let fit = ols_regression(&x, &y).unwrap();
            if (fit.coefficient - beta).abs() <= 3.0 * fit.stderr {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * trials as f64, "{inside}/{trials}");
    }

    fn set(clip: &str, anchor: usize, seqs: Vec<Vec<ActionLabel>>) -> PredictionSet {
        PredictionSet {
            query_ref: SliceRef::new(clip, anchor),
            raw_completions: vec![String::new(); seqs.len()],
            parse_stats: vec![Default::default(); seqs.len()],
            sequences: seqs,
        }
    }

    #[test]
    fn dataset_aggregation() {
        let gt = vec![a(0, 0), a(1, 1), a(2, 2)];
        let truth = |clip: &str| QueryTruth {
            query: SliceRef::new(clip, 7),
            future: gt.clone(),
            observed: vec![a(5, 5), a(6, 6)],
            recognized: vec![a(5, 5), a(6, 0)],
        };
        let perfect =
            evaluate_dataset(&[set("a", 7, vec![gt.clone()])], &[truth("a")], EditMetric::Levenshtein).unwrap();
        assert_eq!((perfect.verb_ed, perfect.noun_ed, perfect.action_ed), (0.0, 0.0, 0.0));
        assert_eq!(perfect.per_clip[0].verb_acc, 1.0);
        assert_eq!(perfect.per_clip[0].noun_acc, 0.5);

        let off = vec![a(0, 9), a(1, 1), a(9, 9)];
        let report = evaluate_dataset(
            &[set("b", 7, vec![off]), set("a", 7, vec![gt.clone()])],
            &[truth("a"), truth("b")],
            EditMetric::Levenshtein,
        )
        .unwrap();
        assert_eq!(report.n_queries, 2);
        assert_eq!(report.per_clip[1].clip_id, "b");
        assert_eq!(report.per_clip[1].action_ed, 2.0 / 3.0);
        assert_eq!(report.action_ed, (0.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(report.verb_ed, (0.0 + 1.0 / 3.0) / 2.0);

        let missing = evaluate_dataset(
            &[set("a", 7, vec![gt.clone()])],
            &[truth("a"), truth("b")],
            EditMetric::Levenshtein,
        );
        assert!(matches!(missing, Err(Error::IncompleteRun { ref clip_id, anchor: 7 }) if clip_id == "b"));
        let extra = evaluate_dataset(
            &[set("a", 7, vec![gt.clone()]), set("c", 7, vec![gt.clone()])],
            &[truth("a")],
            EditMetric::Levenshtein,
        );
        assert!(matches!(extra, Err(Error::IncompleteRun { .. })));
    }

    #[test]
    fn regression_table_shape() {
        let score = |acc: f64, ed: f64| QueryScore {
            clip_id: "c".into(),
            anchor: 7,
            verb_ed: ed,
            noun_ed: ed,
            action_ed: ed,
            verb_acc: acc,
            noun_acc: 1.0 - acc,
        };
        let report = EvalReport {
            verb_ed: 0.0,
            noun_ed: 0.0,
            action_ed: 0.0,
            n_queries: 4,
            fallback_samples: 0,
            per_clip: vec![score(0.0, 1.0), score(0.25, 0.75), score(0.5, 0.75), score(1.0, 0.5)],
        };
        let cells = regress_report(&report).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells
            .iter()
            .filter(|c| c.accuracy == AccuracyField::Verb)
            .all(|c| c.result.coefficient < 0.0));
        assert!(cells
            .iter()
            .filter(|c| c.accuracy == AccuracyField::Noun)
            .all(|c| c.result.coefficient > 0.0));
        let mut flat = report.clone();
        flat.per_clip.iter_mut().for_each(|s| s.verb_acc = 0.5);
        assert!(matches!(regress_report(&flat), Err(Error::DegenerateRegressor)));
    }
}
