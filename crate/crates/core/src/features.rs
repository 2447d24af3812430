//! Framing and log mel-band energies, with optional per-utterance normalization.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Waveform;
use crate::error::{invalid, Error, Result};

pub const LOG_EPSILON: f64 = 1e-8;
pub const VARIANCE_FLOOR: f64 = 1e-6;
const MIN_FFT: usize = 512;

pub const FEATURE_DUMP_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_DUMP_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
    pub n_bands: usize,
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::corpus::DEFAULT_SAMPLE_RATE,
            hop: 320,
            window: 640,
            n_bands: 40,
            normalize: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(invalid!("feature sample rate must be positive"));
        }
        if self.hop == 0 || self.hop > self.window {
            return Err(invalid!("need 0 < hop ≤ window (hop {}, window {})", self.hop, self.window));
        }
        if self.n_bands < 2 {
            return Err(invalid!("need at least 2 bands, got {}", self.n_bands));
        }
        Ok(())
    }

    /// `floor((len − window)/hop) + 1`, or `None` when the signal is shorter than one window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }

    /// sha256 of the canonical JSON form. Codebooks carry it so mismatched
    /// features are refused at quantization time.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("feature config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T̂ × n_bands`.
    pub frames: Array2<f32>,
    pub config: FeatureConfig,
    pub normalized: bool,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn n_bands(&self) -> usize {
        self.frames.ncols()
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft/2 + 1` bins, `n_bands × bins`. A filter too
/// narrow to touch any bin falls back to the bin nearest its centre.
fn mel_filterbank(n_bands: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let sr = sample_rate as f64;
    let top = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_bands, bins));
    for b in 0..n_bands {
        let (lo, centre, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sr / n_fft as f64;
            let w = if f > lo && f <= centre {
                (f - lo) / (centre - lo)
            } else if f > centre && f < hi {
                (hi - f) / (hi - centre)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
        if fb.row(b).sum() == 0.0 {
            let k = ((centre * n_fft as f64 / sr).round() as usize).min(bins - 1);
            fb[[b, k]] = 1.0;
        }
    }
    fb
}

/// Reusable extractor: FFT plan, Hann window and filterbank for one config.
pub struct FeatureExtractor {
    config: FeatureConfig,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Array2<f64>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.window.next_power_of_two().max(MIN_FFT);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let n = config.window as f64;
        let window = (0..config.window)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect();
        let filters = mel_filterbank(config.n_bands, n_fft, config.sample_rate);
        Ok(Self {
            config,
            n_fft,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Raw log band energies; frame `t` covers samples `[t·hop, t·hop + window)`.
    pub fn extract(&self, w: &Waveform) -> Result<FeatureSequence> {
        let cfg = &self.config;
        if w.sample_rate != cfg.sample_rate {
            return Err(invalid!(
                "waveform is {} Hz but features expect {} Hz",
                w.sample_rate,
                cfg.sample_rate
            ));
        }
        let frames = cfg.frame_count(w.len()).ok_or_else(|| {
            invalid!("waveform has {} samples, fewer than one window ({})", w.len(), cfg.window)
        })?;
        let bins = self.n_fft / 2 + 1;
        let mut out = Array2::<f32>::zeros((frames, cfg.n_bands));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < cfg.window {
                    w.samples[start + i] as f64 * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for b in 0..cfg.n_bands {
                let e: f64 = self.filters.row(b).iter().zip(&power).map(|(f, p)| f * p).sum();
                out[[t, b]] = (e + LOG_EPSILON).ln() as f32;
            }
        }
        Ok(FeatureSequence {
            frames: out,
            config: *cfg,
            normalized: false,
        })
    }

    /// Extraction followed by normalization when the config asks for it.
    pub fn featurize(&self, w: &Waveform) -> Result<FeatureSequence> {
        let f = self.extract(w)?;
        if self.config.normalize {
            normalize_features(&f)
        } else {
            Ok(f)
        }
    }
}

pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    FeatureExtractor::new(*cfg)?.extract(w)
}

/// Per-dimension zero mean, unit variance over the utterance.
pub fn normalize_features(f: &FeatureSequence) -> Result<FeatureSequence> {
    let t = f.len();
    if t < 2 {
        return Err(invalid!("normalization needs at least 2 frames, got {t}"));
    }
    let x = f.frames.mapv(f64::from);
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = &x - &mean;
    let var = centred.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
    let std = var.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
    let frames = (centred / &std).mapv(|v| v as f32);
    Ok(FeatureSequence {
        frames,
        config: f.config,
        normalized: true,
    })
}

/// FEAT dump: magic, version, T̂ u32, n_bands u32, row-major f32 LE.
pub fn feature_dump_bytes(frames: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + frames.len() * 4);
    out.extend_from_slice(FEATURE_DUMP_MAGIC);
    out.push(FEATURE_DUMP_VERSION);
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_feature_dump(buf: &[u8]) -> Result<Array2<f32>> {
    if buf.len() < 13 || &buf[..4] != FEATURE_DUMP_MAGIC {
        return Err(invalid!("not a feature dump"));
    }
    if buf[4] != FEATURE_DUMP_VERSION {
        return Err(invalid!("unsupported feature dump version {}", buf[4]));
    }
    let t = u32::from_le_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(buf[9..13].try_into().expect("4 bytes")) as usize;
    let body = &buf[13..];
    if body.len() != t * d * 4 {
        return Err(invalid!("feature dump body is {} bytes, expected {}", body.len(), t * d * 4));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((t, d), data).map_err(|e| invalid!("{e}"))
}

pub fn write_feature_dump(frames: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, feature_dump_bytes(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    parse_feature_dump(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn noise(len: usize, seed: u64) -> Waveform {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect(), 16000).unwrap()
    }

    fn small() -> FeatureConfig {
        FeatureConfig {
            hop: 32,
            window: 64,
            n_bands: 12,
            ..Default::default()
        }
    }

    #[test]
    fn default_framing_of_four_seconds() {
        // floor((64000 - 640) / 320) + 1
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.frame_count(64000), Some(199));
        let f = extract_features(&noise(64000, 1), &cfg).unwrap();
        assert_eq!(f.frames.dim(), (199, 40));
        assert!(f.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exactly_one_window_gives_one_frame() {
        let f = extract_features(&noise(640, 2), &FeatureConfig::default()).unwrap();
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn short_or_mismatched_audio_is_rejected() {
        assert!(extract_features(&noise(100, 3), &FeatureConfig::default()).is_err());
        let w = Waveform::new(vec![0.0; 2000], 8000).unwrap();
        assert!(extract_features(&w, &FeatureConfig::default()).is_err());
    }

    #[test]
    fn silence_floors_at_log_epsilon() {
        let w = Waveform::new(vec![0.0; 128], 16000).unwrap();
        let f = extract_features(&w, &small()).unwrap();
        let floor = LOG_EPSILON.ln() as f32;
        assert!(f.frames.iter().all(|&v| (v - floor).abs() < 1e-5));
    }

    #[test]
    fn every_band_sees_energy_from_broadband_input() {
        let f = extract_features(&noise(640, 4), &FeatureConfig::default()).unwrap();
        assert!(f.frames.iter().all(|&v| v > (LOG_EPSILON.ln() as f32) + 1.0));
    }

    #[test]
    fn sinusoid_peaks_in_its_band() {
        let cfg = FeatureConfig {
            n_bands: 20,
            ..small()
        };
        let w = Waveform::new(
            (0..512).map(|n| (0.5 * (2.0 * std::f64::consts::PI * 3000.0 * n as f64 / 16000.0).sin()) as f32).collect(),
            16000,
        )
        .unwrap();
        let f = extract_features(&w, &cfg).unwrap();
        let row = f.frames.row(3);
        let argmax = (0..20).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let fb = mel_filterbank(20, 512, 16000);
        let bin = (3000.0 * 512.0 / 16000.0) as usize;
        let best = (0..20).max_by(|&a, &b| fb[[a, bin]].total_cmp(&fb[[b, bin]])).unwrap();
        assert_eq!(argmax, best);
    }

    #[test]
    fn constant_features_normalize_to_zero() {
        let f = FeatureSequence {
            frames: Array2::from_elem((5, 3), 2.5),
            config: small(),
            normalized: false,
        };
        let n = normalize_features(&f).unwrap();
        assert!(n.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizing_twice_is_stable() {
        let f = extract_features(&noise(2048, 5), &small()).unwrap();
        let once = normalize_features(&f).unwrap();
        let twice = normalize_features(&once).unwrap();
        for (a, b) in once.frames.iter().zip(twice.frames.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn single_frame_cannot_be_normalized() {
        let f = FeatureSequence {
            frames: array![[1.0, 2.0]],
            config: small(),
            normalized: false,
        };
        assert!(normalize_features(&f).is_err());
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = FeatureConfig::default();
        let variants = [
            FeatureConfig { hop: 160, ..base },
            FeatureConfig { window: 400, ..base },
            FeatureConfig { n_bands: 41, ..base },
            FeatureConfig { normalize: false, ..base },
            FeatureConfig { sample_rate: 22050, ..base },
        ];
        for v in variants {
            assert_ne!(v.fingerprint(), base.fingerprint());
        }
        assert_eq!(base.fingerprint(), FeatureConfig::default().fingerprint());
    }

    #[test]
    fn invalid_configs() {
        assert!(FeatureConfig { hop: 0, ..small() }.validate().is_err());
        assert!(FeatureConfig { hop: 65, ..small() }.validate().is_err());
        assert!(FeatureConfig { n_bands: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn dump_round_trips() {
        let f = extract_features(&noise(512, 6), &small()).unwrap();
        let bytes = feature_dump_bytes(&f.frames);
        assert_eq!(&bytes[..4], b"FEAT");
        assert_eq!(parse_feature_dump(&bytes).unwrap(), f.frames);
        assert!(parse_feature_dump(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn frame_count_formula(len in 64usize..3000, seed in 0u64..1000) {
            let cfg = small();
            let f = extract_features(&noise(len, seed), &cfg).unwrap();
            prop_assert_eq!(f.len(), (len - cfg.window) / cfg.hop + 1);
        }

        #[test]
        fn shifting_by_one_hop_shifts_frames(len in 128usize..1200, seed in 0u64..1000) {
            let cfg = small();
            let w = noise(len, seed);
            let mut shifted = vec![0.0; cfg.hop];
            shifted.extend_from_slice(&w.samples);
            let a = extract_features(&w, &cfg).unwrap();
            let b = extract_features(&Waveform::new(shifted, 16000).unwrap(), &cfg).unwrap();
            prop_assert_eq!(b.len(), a.len() + 1);
            for t in 0..a.len() {
                for d in 0..cfg.n_bands {
                    prop_assert!((a.frames[[t, d]] - b.frames[[t + 1, d]]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn normalized_moments(len in 256usize..2000, seed in 0u64..1000) {
            let f = extract_features(&noise(len, seed), &small()).unwrap();
            let n = normalize_features(&f).unwrap();
            let x = n.frames.mapv(f64::from);
            for col in x.columns() {
                let m = col.mean().unwrap();
                let v = col.mapv(|c| (c - m).powi(2)).mean().unwrap();
                prop_assert!(m.abs() < 1e-6);
                prop_assert!((v - 1.0).abs() < 1e-6, "variance {v}");
            }
        }
    }
}
