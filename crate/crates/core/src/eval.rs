//! Objective metrics: unit accuracy, label-free codebook agreement, duration
//! error, a nearest-centroid speaker probe and the cross-lingual report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::aligner::DurationSequence;
use crate::corpus::Waveform;
use crate::error::{invalid, Result};
use crate::error::Error;
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::t2u::T2UModel;
use crate::text::TokenSequence;
use crate::units::{quantize, Codebook, UnitSequence};
use crate::vocoder::VocoderModel;

/// Fraction of positions with equal ids. Lengths must match; see
/// [`truncated_unit_accuracy`] for sequences that may differ in length.
pub fn unit_accuracy(pred: &UnitSequence, reference: &UnitSequence) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(invalid!(
            "unit sequences differ in length ({} vs {})",
            pred.len(),
            reference.len()
        ));
    }
    let same = pred
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / pred.len() as f64)
}

/// Accuracy over the common prefix, plus the absolute length difference.
pub fn truncated_unit_accuracy(pred: &UnitSequence, reference: &UnitSequence) -> (f64, usize) {
    let n = pred.len().min(reference.len());
    let same = pred.as_slice()[..n]
        .iter()
        .zip(&reference.as_slice()[..n])
        .filter(|(a, b)| a == b)
        .count();
    (same as f64 / n as f64, pred.len().abs_diff(reference.len()))
}

/// Mean absolute per-token difference.
pub fn duration_mae(pred: &DurationSequence, reference: &DurationSequence) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(invalid!(
            "duration sequences differ in length ({} vs {})",
            pred.len(),
            reference.len()
        ));
    }
    let total: u64 = pred
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(&a, &b)| a.abs_diff(b) as u64)
        .sum();
    Ok(total as f64 / pred.len() as f64)
}

/// Minimum-cost perfect matching on a square cost matrix, returning
/// `assignment[row] = column`. Shortest augmenting paths with potentials, O(n³).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based internals; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutedAgreement {
    pub rate: f64,
    /// `permutation[pred_id] = ref_id`.
    pub permutation: Vec<usize>,
}

/// Frame agreement after the relabelling of predicted ids that maximizes it.
pub fn permuted_agreement(pred: &[UnitSequence], reference: &[UnitSequence], k: usize) -> Result<PermutedAgreement> {
    if pred.len() != reference.len() {
        return Err(invalid!("{} predicted sequences vs {} references", pred.len(), reference.len()));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    let mut total = 0u64;
    for (i, (p, r)) in pred.iter().zip(reference).enumerate() {
        if p.len() != r.len() {
            return Err(invalid!("pair {i} differs in length ({} vs {})", p.len(), r.len()));
        }
        p.check_range(k)?;
        r.check_range(k)?;
        for (&a, &b) in p.as_slice().iter().zip(r.as_slice()) {
            confusion[a as usize][b as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid!("no frames to compare"));
    }
    let cost: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let permutation = hungarian(&cost);
    let matched: u64 = permutation.iter().enumerate().map(|(a, &b)| confusion[a][b]).sum();
    Ok(PermutedAgreement {
        rate: matched as f64 / total as f64,
        permutation,
    })
}

/// Nearest-centroid speaker classifier on utterance means of raw (not
/// normalized) log band energies.
#[derive(Debug, Clone)]
pub struct SpeakerProbe {
    speakers: Vec<String>,
    centroids: Vec<Array1<f64>>,
    config: FeatureConfig,
}

fn utterance_mean(extractor: &FeatureExtractor, w: &Waveform) -> Result<Array1<f64>> {
    let f = extractor.extract(w)?;
    Ok(f.frames.mapv(f64::from).mean_axis(ndarray::Axis(0)).expect("at least one frame"))
}

impl SpeakerProbe {
    pub fn fit(train: &[(Waveform, String)], config: &FeatureConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(invalid!("speaker probe needs training utterances"));
        }
        let extractor = FeatureExtractor::new(FeatureConfig {
            normalize: false,
            ..*config
        })?;
        let mut sums: BTreeMap<&str, (Array1<f64>, usize)> = BTreeMap::new();
        for (w, spk) in train {
            let m = utterance_mean(&extractor, w)?;
            let e = sums.entry(spk).or_insert_with(|| (Array1::zeros(m.len()), 0));
            e.0 += &m;
            e.1 += 1;
        }
        let (speakers, centroids) = sums
            .into_iter()
            .map(|(s, (sum, n))| (s.to_string(), sum / n as f64))
            .unzip();
        Ok(Self {
            speakers,
            centroids,
            config: *extractor.config(),
        })
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    /// Closest speaker centroid; the lexicographically first on ties.
    pub fn predict(&self, w: &Waveform) -> Result<&str> {
        let m = utterance_mean(&FeatureExtractor::new(self.config)?, w)?;
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = (&m - c).mapv(|v| v * v).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(&self.speakers[best.0])
    }

    pub fn accuracy(&self, test: &[(Waveform, String)]) -> Result<f64> {
        if test.is_empty() {
            return Err(invalid!("speaker probe needs test utterances"));
        }
        let mut correct = 0;
        for (w, spk) in test {
            if !self.speakers.contains(spk) {
                return Err(invalid!("test speaker `{spk}` never appears in the probe's training data"));
            }
            if self.predict(w)? == spk {
                correct += 1;
            }
        }
        Ok(correct as f64 / test.len() as f64)
    }
}

pub fn speaker_probe(train: &[(Waveform, String)], test: &[(Waveform, String)], config: &FeatureConfig) -> Result<f64> {
    SpeakerProbe::fit(train, config)?.accuracy(test)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub unit_accuracy: Option<f64>,
    /// Predicted durations against the aligner's targets.
    pub duration_mae: Option<f64>,
    /// Aligner durations against known ground truth.
    #[serde(default)]
    pub alignment_mae: Option<f64>,
    pub codebook_agreement: Option<f64>,
    pub speaker_probe_accuracy: Option<f64>,
    pub round_trip_recovery: Option<f64>,
}

impl EvalMetrics {
    fn cells(&self) -> [Option<f64>; 6] {
        [
            self.unit_accuracy,
            self.duration_mae,
            self.alignment_mae,
            self.codebook_agreement,
            self.speaker_probe_accuracy,
            self.round_trip_recovery,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.unit_accuracy,
            self.codebook_agreement,
            self.speaker_probe_accuracy,
            self.round_trip_recovery,
        ];
        if rates.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(invalid!("rates must lie in [0, 1]"));
        }
        if [self.duration_mae, self.alignment_mae].iter().flatten().any(|m| !(*m >= 0.0)) {
            return Err(invalid!("duration MAE must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalMetrics,
    pub per_language: BTreeMap<String, EvalMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one row per language then `overall`.
    pub fn to_table(&self) -> String {
        let header = ["scope", "unit_acc", "dur_mae", "align_mae", "codebook", "spk_probe", "round_trip"];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        let fmt = |m: &EvalMetrics, name: &str| {
            let mut row = vec![name.to_string()];
            row.extend(m.cells().iter().map(|c| c.map_or("-".into(), |v| format!("{v:.4}"))));
            row
        };
        for (lang, m) in &self.per_language {
            rows.push(fmt(m, lang));
        }
        rows.push(fmt(&self.overall, "overall"));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Per-speaker outcome of [`cross_lingual_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTransfer {
    pub speaker: String,
    /// Fraction of utterances the probe attributes to this speaker.
    pub probe_accuracy: f64,
    /// Mean fraction of units recovered by re-quantizing the synthesized audio.
    pub recovery: f64,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualReport {
    pub language: String,
    /// The unit sequence of each input text, shared by every speaker.
    pub units: Vec<UnitSequence>,
    pub speakers: Vec<SpeakerTransfer>,
}

impl CrossLingualReport {
    pub fn speaker(&self, name: &str) -> Option<&SpeakerTransfer> {
        self.speakers.iter().find(|s| s.speaker == name)
    }
}

/// Models and quantizer used to score synthesized audio.
pub struct TransferModels<'a> {
    pub t2u: &'a T2UModel,
    pub vocoder: &'a VocoderModel,
    pub codebook: &'a Codebook,
    /// Normalized extractor matching the codebook.
    pub extractor: &'a FeatureExtractor,
    pub probe: &'a SpeakerProbe,
}

/// Synthesize every text with every speaker, checking that the unit sequence
/// fed to the vocoder does not depend on the speaker.
pub fn cross_lingual_report(models: &TransferModels, texts: &[TokenSequence], speakers: &[String]) -> Result<CrossLingualReport> {
    let language = match texts.first() {
        Some(t) => t.language.clone(),
        None => return Err(invalid!("cross-lingual report needs at least one text")),
    };
    if speakers.is_empty() {
        return Err(invalid!("cross-lingual report needs at least one speaker"));
    }
    if let Some(t) = texts.iter().find(|t| t.language != language) {
        return Err(invalid!("texts mix languages `{language}` and `{}`", t.language));
    }
    let mut units = Vec::with_capacity(texts.len());
    let mut rows = Vec::with_capacity(speakers.len());
    for (s, speaker) in speakers.iter().enumerate() {
        let onehot = models.vocoder.config.speaker(speaker)?;
        let (mut correct, mut recovered) = (0usize, 0.0);
        for (i, tokens) in texts.iter().enumerate() {
            let (u, _) = models.t2u.predict_units(tokens)?;
            if s == 0 {
                units.push(u.clone());
            } else if units[i] != u {
                return Err(Error::Numerical(format!(
                    "unit sequence of text {i} changed between speakers `{}` and `{speaker}`",
                    speakers[0]
                )));
            }
            let w = models.vocoder.synthesize(&u, onehot)?;
            let back = quantize(&models.extractor.featurize(&w)?, models.codebook)?;
            recovered += unit_accuracy(&back, &u)?;
            if models.probe.predict(&w)? == speaker {
                correct += 1;
            }
        }
        rows.push(SpeakerTransfer {
            speaker: speaker.clone(),
            probe_accuracy: correct as f64 / texts.len() as f64,
            recovery: recovered / texts.len() as f64,
            utterances: texts.len(),
        });
    }
    Ok(CrossLingualReport {
        language,
        units,
        speakers: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn us(v: &[u32]) -> UnitSequence {
        UnitSequence::new(v.to_vec()).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn unit_accuracy_examples() {
        assert!((unit_accuracy(&us(&[1, 2, 3]), &us(&[1, 2, 4])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(unit_accuracy(&us(&[1, 2]), &us(&[1, 2])).unwrap(), 1.0);
        assert_eq!(unit_accuracy(&us(&[1, 2]), &us(&[3, 4])).unwrap(), 0.0);
        assert!(unit_accuracy(&us(&[1]), &us(&[1, 2])).is_err());
        assert_eq!(truncated_unit_accuracy(&us(&[1, 2, 3]), &us(&[1, 5])), (0.5, 1));
    }

    #[test]
    fn agreement_examples() {
        // Both 2-permutations: identity scores 0/3, swap scores 3/3.
        let a = permuted_agreement(&[us(&[0, 0, 1])], &[us(&[1, 1, 0])], 2).unwrap();
        assert_eq!(a.rate, 1.0);
        assert_eq!(a.permutation, [1, 0]);
        let b = permuted_agreement(&[us(&[2, 0, 1])], &[us(&[2, 0, 1])], 3).unwrap();
        assert_eq!(b.permutation, [0, 1, 2]);
        // Identity scores 1/2, swap scores 1/2.
        let c = permuted_agreement(&[us(&[0, 1])], &[us(&[0, 0])], 2).unwrap();
        assert_eq!(c.rate, 0.5);
        assert!(permuted_agreement(&[us(&[0, 3])], &[us(&[0, 0])], 2).is_err());
    }

    #[test]
    fn duration_mae_counts_frames() {
        let a = DurationSequence::new(vec![2, 3, 1]).unwrap();
        let b = DurationSequence::new(vec![3, 3, 3]).unwrap();
        assert_eq!(duration_mae(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn table_has_one_row_per_language() {
        let mut r = EvalReport::default();
        r.per_language.insert(
            "L1".into(),
            EvalMetrics {
                unit_accuracy: Some(0.5),
                ..Default::default()
            },
        );
        r.overall.unit_accuracy = Some(0.5);
        let t = r.to_table();
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("L1 "));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(EvalMetrics {
            round_trip_recovery: Some(1.5),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cross_lingual_report_shares_units_across_speakers() {
        use crate::t2u::T2UConfig;
        use crate::vocoder::VocoderConfig;
        let speakers: Vec<String> = vec!["a".into(), "b".into()];
        let t2u = T2UModel::new(T2UConfig::micro(6, 4), 1).unwrap();
        let vcfg = VocoderConfig {
            channels: 16,
            ..VocoderConfig::new(4, speakers.clone())
        };
        let vocoder = VocoderModel::new(vcfg, 1).unwrap();
        let fcfg = FeatureConfig {
            hop: 64,
            window: 64,
            n_bands: 8,
            ..Default::default()
        };
        let extractor = FeatureExtractor::new(fcfg).unwrap();
        let codebook = Codebook {
            centroids: ndarray::Array2::from_shape_fn((4, 8), |(k, b)| (k * b) as f32 * 0.1),
            fingerprint: fcfg.fingerprint(),
        };
        let noise = |seed: u32| {
            let samples = (0..640u32).map(|i| ((i * 7919 + seed) % 200) as f32 / 400.0 - 0.25).collect();
            Waveform::new(samples, 16000).unwrap()
        };
        let probe = SpeakerProbe::fit(&[(noise(1), "a".into()), (noise(2), "b".into())], &fcfg).unwrap();
        let models = TransferModels {
            t2u: &t2u,
            vocoder: &vocoder,
            codebook: &codebook,
            extractor: &extractor,
            probe: &probe,
        };
        let texts = [2u32, 3, 4].map(|n| TokenSequence {
            ids: (0..n).map(|i| 2 + i % 4).collect(),
            language: "L1".into(),
        });
        let r = cross_lingual_report(&models, &texts, &speakers).unwrap();
        assert_eq!(r.language, "L1");
        assert_eq!(r.units.len(), 3);
        assert_eq!(r.speakers.len(), 2);
        for row in &r.speakers {
            assert!((0.0..=1.0).contains(&row.probe_accuracy) && (0.0..=1.0).contains(&row.recovery));
            assert_eq!(row.utterances, 3);
        }
        assert!(cross_lingual_report(&models, &texts, &["zz".into()]).is_err());
        let mut mixed = texts.to_vec();
        mixed[1].language = "L2".into();
        assert!(cross_lingual_report(&models, &mixed, &speakers).is_err());
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(n in 1usize..6, vals in proptest::collection::vec(-20i32..20, 25)) {
            let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| vals[i * 5 + j] as f64).collect()).collect();
            let best = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let a = hungarian(&cost);
            let mut seen = a.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>(), best);
        }

        #[test]
        fn accuracy_symmetric_and_bounded_by_agreement(pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..30)) {
            let a = us(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = us(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let acc = unit_accuracy(&a, &b).unwrap();
            prop_assert_eq!(acc, unit_accuracy(&b, &a).unwrap());
            prop_assert_eq!(unit_accuracy(&a, &a).unwrap(), 1.0);
            let agree = permuted_agreement(&[a], &[b], 4).unwrap();
            prop_assert!(agree.rate >= acc - 1e-12);
        }
    }
}
