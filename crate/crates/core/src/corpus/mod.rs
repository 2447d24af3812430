//! Utterance manifests, audio I/O, the speaker registry and the synthetic
//! oracle corpus.

mod synthetic;
mod wav;

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::records;

pub use synthetic::{
    default_languages, default_speakers, generate_synthetic_corpus, render_utterance, synthetic_lexicon, Prototype,
    SyntheticCorpus, SyntheticCorpusConfig, SyntheticLanguageSpec, SyntheticSpeakerSpec, SyntheticUtterance,
    TILT_REFERENCE_HZ,
};
pub use wav::{read_wav, wav_bytes, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// One paired (or speech-only) recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    #[serde(rename = "audio")]
    pub audio_path: String,
    pub text: String,
    pub language: String,
    pub speaker: String,
}

impl Utterance {
    fn validate(&self) -> std::result::Result<(), String> {
        for (field, value) in [
            ("id", &self.id),
            ("text", &self.text),
            ("language", &self.language),
            ("speaker", &self.speaker),
        ] {
            if value.trim().is_empty() {
                return Err(format!("field `{field}` is empty"));
            }
        }
        Ok(())
    }
}

/// Parse manifest text. `origin` is used in error messages.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<Utterance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let utt: Utterance = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        utt.validate().map_err(err)?;
        if !seen.insert(utt.id.clone()) {
            return Err(err(format!("duplicate id `{}`", utt.id)));
        }
        out.push(utt);
    }
    Ok(out)
}

/// Load a JSON-lines manifest (`id`, `audio`, `text`, `language`, `speaker`).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn save_manifest(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    records::write_jsonl(path, utterances)
}

/// Audio paths in a manifest are relative to the manifest's directory unless absolute.
pub fn resolve_audio(manifest: &Path, utt: &Utterance) -> PathBuf {
    let p = Path::new(&utt.audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid!("sample {i} is not finite"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Speaker ids in lexicographic order; the position is the one-hot index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerTable {
    speakers: Vec<String>,
}

impl SpeakerTable {
    pub fn from_ids<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Result<Self> {
        let set: BTreeSet<String> = ids.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(invalid!("speaker table needs at least one speaker"));
        }
        Ok(Self {
            speakers: set.into_iter().collect(),
        })
    }

    pub fn index(&self, speaker: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker)).ok()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.speakers.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.speakers
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

pub fn build_speaker_table(utterances: &[Utterance]) -> Result<SpeakerTable> {
    SpeakerTable::from_ids(utterances.iter().map(|u| u.speaker.clone()))
}
