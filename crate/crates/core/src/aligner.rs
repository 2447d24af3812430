//! Per-token durations by optimal monotonic segmentation of feature frames.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{invalid, Error, Result};
use crate::features::FeatureSequence;
use crate::text::TokenSequence;

/// Positive frame counts, one per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct DurationSequence(Vec<u32>);

impl DurationSequence {
    pub fn new(durations: Vec<u32>) -> Result<Self> {
        if durations.is_empty() {
            return Err(invalid!("duration sequence is empty"));
        }
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(invalid!("duration {i} is zero"));
        }
        Ok(Self(durations))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Σ durations, i.e. the frame count.
    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }
}

impl TryFrom<Vec<u32>> for DurationSequence {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DurationSequence> for Vec<u32> {
    fn from(d: DurationSequence) -> Self {
        d.0
    }
}

/// Prefix sums of centred frames and their squares, for O(d) span costs.
struct SpanCosts {
    s1: Array2<f64>,
    s2: Array2<f64>,
}

impl SpanCosts {
    fn new(frames: ArrayView2<f64>) -> Self {
        let (t, d) = frames.dim();
        let mean = frames.mean_axis(Axis(0)).expect("non-empty");
        let mut s1 = Array2::zeros((t + 1, d));
        let mut s2 = Array2::zeros((t + 1, d));
        for i in 0..t {
            for j in 0..d {
                let v = frames[[i, j]] - mean[j];
                s1[[i + 1, j]] = s1[[i, j]] + v;
                s2[[i + 1, j]] = s2[[i, j]] + v * v;
            }
        }
        Self { s1, s2 }
    }

    /// Within-span SSE of frames `[a, b)` around their mean.
    fn cost(&self, a: usize, b: usize) -> f64 {
        let n = (b - a) as f64;
        let mut c = 0.0;
        for j in 0..self.s1.ncols() {
            let s = self.s1[[b, j]] - self.s1[[a, j]];
            c += self.s2[[b, j]] - self.s2[[a, j]] - s * s / n;
        }
        c.max(0.0)
    }
}

/// Optimal segmentation of `frames` into `n` contiguous spans and its total cost.
///
/// Candidates for each boundary are scanned in increasing order and a later
/// one replaces the incumbent only when it is cheaper by more than a tolerance
/// of `1e-9` times the whole-utterance SSE, so ties go to the earliest boundary.
pub fn align_frames(frames: ArrayView2<f64>, n: usize) -> Result<(DurationSequence, f64)> {
    let t = frames.nrows();
    if n == 0 {
        return Err(invalid!("cannot align to zero tokens"));
    }
    if n > t {
        return Err(invalid!("{n} tokens cannot share {t} frames"));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let spans = SpanCosts::new(frames);
    let tie = 1e-9 * spans.cost(0, t);

    // best[k][j]: cheapest split of frames [0, j) into k spans; from[k][j]: start of the last span.
    let mut best = vec![vec![f64::INFINITY; t + 1]; n + 1];
    let mut from = vec![vec![0usize; t + 1]; n + 1];
    best[0][0] = 0.0;
    for k in 1..=n {
        // Leave at least one frame for each of the remaining n - k spans.
        for j in k..=t - (n - k) {
            let mut incumbent = f64::INFINITY;
            let mut arg = k - 1;
            for i in (k - 1)..j {
                if best[k - 1][i].is_infinite() {
                    continue;
                }
                let c = best[k - 1][i] + spans.cost(i, j);
                if c < incumbent - tie || incumbent.is_infinite() {
                    incumbent = c;
                    arg = i;
                }
            }
            best[k][j] = incumbent;
            from[k][j] = arg;
        }
    }
    let mut durations = vec![0u32; n];
    let mut end = t;
    for k in (1..=n).rev() {
        let start = from[k][end];
        durations[k - 1] = (end - start) as u32;
        end = start;
    }
    Ok((DurationSequence::new(durations)?, best[n][t]))
}

pub fn align(f: &FeatureSequence, n_tokens: usize) -> Result<DurationSequence> {
    Ok(align_frames(f.frames.mapv(f64::from).view(), n_tokens)?.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedAlignment {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentReport {
    pub durations: BTreeMap<String, DurationSequence>,
    pub skipped: Vec<SkippedAlignment>,
}

/// [`align`] every utterance that has features and tokens; failures are
/// collected in `skipped` rather than aborting the batch.
pub fn align_corpus(
    utterances: &[Utterance],
    features: &HashMap<String, FeatureSequence>,
    tokens: &HashMap<String, TokenSequence>,
) -> AlignmentReport {
    let mut report = AlignmentReport::default();
    for u in utterances {
        let skip = |reason: String| SkippedAlignment {
            id: u.id.clone(),
            reason,
        };
        let (Some(f), Some(tok)) = (features.get(&u.id), tokens.get(&u.id)) else {
            report.skipped.push(skip("missing features or tokens".into()));
            continue;
        };
        match align(f, tok.len()) {
            Ok(d) => {
                report.durations.insert(u.id.clone(), d);
            }
            Err(e) => report.skipped.push(skip(e.to_string())),
        }
    }
    report
}

/// One line of a duration dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationRecord {
    pub id: String,
    pub durations: DurationSequence,
}
