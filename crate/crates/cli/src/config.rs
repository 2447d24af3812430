//! The single JSON document that governs every pipeline command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unitts::corpus::{
    default_languages, default_speakers, SyntheticCorpusConfig, SyntheticLanguageSpec, SyntheticSpeakerSpec,
};
use unitts::features::FeatureConfig;
use unitts::optim::LrSchedule;
use unitts::t2u::{T2UConfig, TrainOptions};
use unitts::text::{TextMode, UnkPolicy};
use unitts::units::KMeansOptions;
use unitts::vocoder::{VocoderConfig, VocoderTrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Where artifacts are written. Relative paths resolve against the config file.
    pub workdir: PathBuf,
    /// An existing corpus manifest. When absent, `gen-corpus` builds a synthetic one.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    pub text_mode: TextMode,
    #[serde(default)]
    pub unk_policy: UnkPolicy,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    pub features: FeatureConfig,
    /// Analysis used by the speaker probe, always un-normalized.
    pub probe_features: FeatureConfig,
    pub codebook: CodebookSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub t2u: T2USection,
    #[serde(default)]
    pub vocoder: VocoderSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub texts_per_pair: usize,
    #[serde(default)]
    pub corpus: SyntheticCorpusConfig,
    /// JSON file with a list of language specs; the built-in three when absent.
    #[serde(default)]
    pub languages: Option<PathBuf>,
    #[serde(default)]
    pub speakers: Option<Vec<SyntheticSpeakerSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSection {
    pub k: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_max_iters() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-6
}

fn default_restarts() -> usize {
    1
}

/// A speaker recorded in a language.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pairing {
    pub speaker: String,
    pub language: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// The last this-many distinct texts of each language are held out of all training.
    pub held_out_texts_per_language: usize,
    /// Paired data the text-to-unit model may see; everything when empty.
    pub t2u_pairs: Vec<Pairing>,
    /// Speech the vocoder and the speaker probe may see; everything when empty.
    pub vocoder_pairs: Vec<Pairing>,
}

impl SplitSection {
    pub fn allows_t2u(&self, speaker: &str, language: &str) -> bool {
        allows(&self.t2u_pairs, speaker, language)
    }

    pub fn allows_vocoder(&self, speaker: &str, language: &str) -> bool {
        allows(&self.vocoder_pairs, speaker, language)
    }
}

fn allows(pairs: &[Pairing], speaker: &str, language: &str) -> bool {
    pairs.is_empty() || pairs.iter().any(|p| p.speaker == speaker && p.language == language)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T2USection {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub kernel: usize,
    pub duration_kernel: usize,
    pub dropout: f64,
    pub duration_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for T2USection {
    fn default() -> Self {
        let m = T2UConfig::new(1, 1);
        let t = TrainOptions::default();
        Self {
            embed_dim: m.embed_dim,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            kernel: m.kernel,
            duration_kernel: m.duration_kernel,
            dropout: m.dropout,
            duration_weight: m.duration_weight,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            clip_norm: t.clip_norm,
            schedule: t.schedule,
        }
    }
}

impl T2USection {
    pub fn model_config(&self, vocab_size: usize, units: usize) -> T2UConfig {
        T2UConfig {
            vocab_size,
            units,
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            kernel: self.kernel,
            duration_kernel: self.duration_kernel,
            dropout: self.dropout,
            duration_weight: self.duration_weight,
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            clip_norm: self.clip_norm,
            schedule: self.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderSection {
    pub embed_dim: usize,
    pub upsample: Vec<usize>,
    pub channels: usize,
    pub pre_kernel: usize,
    pub post_kernel: usize,
    pub res_kernel: usize,
    pub dilations: Vec<usize>,
    pub stft_windows: Vec<usize>,
    pub l1_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub segment_frames: Option<usize>,
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for VocoderSection {
    fn default() -> Self {
        let m = VocoderConfig::new(1, vec![]);
        let t = VocoderTrainOptions::default();
        Self {
            embed_dim: m.embed_dim,
            upsample: m.upsample,
            channels: m.channels,
            pre_kernel: m.pre_kernel,
            post_kernel: m.post_kernel,
            res_kernel: m.res_kernel,
            dilations: m.dilations,
            stft_windows: m.stft_windows,
            l1_weight: m.l1_weight,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            segment_frames: t.segment_frames,
            clip_norm: t.clip_norm,
            schedule: t.schedule,
        }
    }
}

impl VocoderSection {
    pub fn model_config(&self, units: usize, speakers: Vec<String>, sample_rate: u32) -> VocoderConfig {
        VocoderConfig {
            units,
            speakers,
            sample_rate,
            embed_dim: self.embed_dim,
            upsample: self.upsample.clone(),
            channels: self.channels,
            pre_kernel: self.pre_kernel,
            post_kernel: self.post_kernel,
            res_kernel: self.res_kernel,
            dilations: self.dilations.clone(),
            stft_windows: self.stft_windows.clone(),
            l1_weight: self.l1_weight,
        }
    }

    pub fn train_options(&self, seed: u64) -> VocoderTrainOptions {
        VocoderTrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            segment_frames: self.segment_frames,
            clip_norm: self.clip_norm,
            schedule: self.schedule,
        }
    }
}

impl PipelineConfig {
    /// Read, resolve relative paths against the file's directory and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workdir);
        if let Some(p) = self.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.lexicon.as_mut() {
            fix(p);
        }
        if let Some(p) = self.synthetic.as_mut().and_then(|s| s.languages.as_mut()) {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.probe_features.validate()?;
        if self.features.sample_rate != self.probe_features.sample_rate {
            bail!("features and probe_features disagree on the sample rate");
        }
        if self.codebook.k == 0 || self.codebook.restarts == 0 {
            bail!("codebook k and restarts must be at least 1");
        }
        match (&self.manifest, &self.synthetic) {
            (None, None) => bail!("config needs either `manifest` or a `synthetic` section"),
            (Some(_), Some(_)) => bail!("config gives both `manifest` and `synthetic`; pick one"),
            _ => {}
        }
        if self.text_mode == TextMode::Phoneme && self.lexicon.is_none() && self.synthetic.is_none() {
            bail!("phoneme mode needs a `lexicon`");
        }
        if let Some(s) = &self.synthetic {
            if s.corpus.hop != self.features.hop || s.corpus.sample_rate != self.features.sample_rate {
                bail!("synthetic corpus hop and sample rate must match the feature config");
            }
        }
        let hop: usize = self.vocoder.upsample.iter().product();
        if hop != self.features.hop {
            bail!("vocoder upsampling product {hop} differs from the feature hop {}", self.features.hop);
        }
        Ok(())
    }

    /// Paths named by the config that must exist before any command runs.
    pub fn check_paths(&self) -> Result<()> {
        let named = [
            ("manifest", self.manifest.as_ref()),
            ("lexicon", self.lexicon.as_ref()),
            ("synthetic.languages", self.synthetic.as_ref().and_then(|s| s.languages.as_ref())),
        ];
        for (what, p) in named {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{what} {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }

    /// sha256 of the canonical JSON with the workdir blanked, so the same
    /// settings hash alike wherever the artifacts live.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn kmeans_options(&self) -> KMeansOptions {
        KMeansOptions {
            k: self.codebook.k,
            seed: self.seed,
            max_iters: self.codebook.max_iters,
            tol: self.codebook.tol,
            restarts: self.codebook.restarts,
        }
    }

    pub fn synthetic_languages(&self) -> Result<Vec<SyntheticLanguageSpec>> {
        match self.synthetic.as_ref().and_then(|s| s.languages.as_ref()) {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
            }
            None => Ok(default_languages()),
        }
    }

    pub fn synthetic_speakers(&self) -> Vec<SyntheticSpeakerSpec> {
        self.synthetic
            .as_ref()
            .and_then(|s| s.speakers.clone())
            .unwrap_or_else(default_speakers)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "seed": 3,
            "workdir": "work",
            "text_mode": "character",
            "synthetic": {"texts_per_pair": 2},
            "features": {"sample_rate": 16000, "hop": 64, "window": 64, "n_bands": 40, "normalize": true},
            "probe_features": {"sample_rate": 16000, "hop": 128, "window": 512, "n_bands": 40, "normalize": false},
            "codebook": {"k": 16}
        }"#
    }

    #[test]
    fn sections_fall_back_to_library_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.t2u.model_config(10, 16), T2UConfig::new(10, 16));
        assert_eq!(cfg.t2u.train_options(3), TrainOptions { seed: 3, ..Default::default() });
        assert_eq!(cfg.vocoder.model_config(16, vec!["a".into()], 16000), VocoderConfig::new(16, vec!["a".into()]));
        assert_eq!(cfg.codebook.restarts, 1);
        assert!(cfg.split.allows_t2u("anyone", "L9"));
    }

    #[test]
    fn hash_ignores_workdir_only() {
        let a: PipelineConfig = serde_json::from_str(minimal()).unwrap();
        let mut b = a.clone();
        b.workdir = "/elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.t2u.lr = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_unknown_fields_and_mismatched_hop() {
        let bad = minimal().replace("\"seed\": 3,", "\"seed\": 3, \"sede\": 4,");
        assert!(serde_json::from_str::<PipelineConfig>(&bad).is_err());
        let mut cfg: PipelineConfig = serde_json::from_str(minimal()).unwrap();
        cfg.vocoder.upsample = vec![4, 4];
        assert!(cfg.validate().is_err());
        let no_seed = minimal().replace("\"seed\": 3,", "");
        assert!(serde_json::from_str::<PipelineConfig>(&no_seed).is_err());
    }
}
