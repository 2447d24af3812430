//! The pipeline commands. Each one checks its predecessors' records, skips
//! itself when nothing changed, and records what it wrote.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;
use unitts::aligner::{align_corpus, DurationRecord, DurationSequence};
use unitts::corpus::{
    build_speaker_table, generate_synthetic_corpus, load_manifest, read_wav, resolve_audio, save_manifest,
    synthetic_lexicon, write_wav, Utterance, Waveform,
};
use unitts::eval::{
    cross_lingual_report, duration_mae, permuted_agreement, truncated_unit_accuracy, unit_accuracy, CrossLingualReport,
    EvalMetrics, EvalReport, SpeakerProbe, TransferModels,
};
use unitts::features::{FeatureExtractor, FeatureSequence};
use unitts::records::{read_jsonl, write_jsonl};
use unitts::t2u::{train, LossTerms, T2UExample, T2UModel};
use unitts::text::{build_vocabulary, PhonemeLexicon, TextFrontend, TextMode, TokenSequence, Vocabulary};
use unitts::units::{quantize, train_codebook, Codebook, UnitRecord, UnitSequence};
use unitts::vocoder::{train_vocoder, VocoderExample, VocoderModel};

use crate::artifacts::{sha256_file, Precondition, Usage, Workdir};
use crate::config::{hex, PipelineConfig};

pub const GEN_CORPUS: &str = "gen-corpus";
pub const BUILD_VOCAB: &str = "build-vocab";
pub const TRAIN_CODEBOOK: &str = "train-codebook";
pub const ENCODE_UNITS: &str = "encode-units";
pub const ALIGN: &str = "align";
pub const TRAIN_T2U: &str = "train-t2u";
pub const TRAIN_VOCODER: &str = "train-vocoder";
pub const EVAL: &str = "eval";
pub const CROSS_LINGUAL: &str = "cross-lingual";

pub const MANIFEST: &str = "corpus/manifest.jsonl";
pub const TRUTH_UNITS: &str = "corpus/truth_units.jsonl";
pub const TRUTH_DURATIONS: &str = "corpus/truth_durations.jsonl";
pub const SYNTHETIC_LEXICON: &str = "corpus/lexicon.tsv";
pub const VOCAB: &str = "vocab.json";
pub const CODEBOOK: &str = "codebook.bin";
pub const CODEBOOK_OBJECTIVE: &str = "codebook_objective.json";
pub const UNITS: &str = "units.jsonl";
pub const DURATIONS: &str = "durations.jsonl";
pub const ALIGN_SKIPPED: &str = "alignment_skipped.jsonl";
pub const T2U_CKPT: &str = "t2u.ckpt";
pub const T2U_HISTORY: &str = "t2u_history.json";
pub const T2U_SPLIT: &str = "t2u_split.json";
pub const VOCODER_CKPT: &str = "vocoder.ckpt";
pub const VOCODER_HISTORY: &str = "vocoder_history.json";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_report.txt";

type Options = BTreeMap<String, String>;
type Inputs = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2UHistory {
    pub steps: u64,
    pub epochs: Vec<LossTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2USplit {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookObjective {
    pub k: usize,
    pub training_utterances: usize,
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualOutput {
    pub language: String,
    pub texts: Vec<String>,
    /// Speakers whose own language is `language`; absent when there are none.
    pub same_language: Option<CrossLingualReport>,
    pub cross_lingual: CrossLingualReport,
    pub probe_accuracy: f64,
    pub mean_recovery: f64,
    pub same_language_recovery: Option<f64>,
}

pub fn cross_lingual_path(language: &str) -> String {
    format!("cross_lingual/{language}.json")
}

fn mean_recovery(r: &CrossLingualReport) -> f64 {
    let n: usize = r.speakers.iter().map(|s| s.utterances).sum();
    r.speakers.iter().map(|s| s.recovery * s.utterances as f64).sum::<f64>() / n as f64
}

fn mean_probe(r: &CrossLingualReport) -> f64 {
    let n: usize = r.speakers.iter().map(|s| s.utterances).sum();
    r.speakers.iter().map(|s| s.probe_accuracy * s.utterances as f64).sum::<f64>() / n as f64
}

struct Corpus {
    manifest: PathBuf,
    utterances: Vec<Utterance>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    wd: Workdir,
    force: bool,
}

fn precondition(msg: impl Into<String>) -> anyhow::Error {
    Precondition(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn unit_map(path: &Path) -> Result<HashMap<String, UnitSequence>> {
    Ok(read_jsonl::<UnitRecord>(path)?.into_iter().map(|r| (r.id, r.units)).collect())
}

fn duration_map(path: &Path) -> Result<HashMap<String, DurationSequence>> {
    Ok(read_jsonl::<DurationRecord>(path)?
        .into_iter()
        .map(|r| (r.id, r.durations))
        .collect())
}

/// The last `n` distinct texts of each language, in manifest order.
pub fn held_out_texts(utterances: &[Utterance], n: usize) -> BTreeSet<(String, String)> {
    let mut per_lang: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for u in utterances {
        let texts = per_lang.entry(&u.language).or_default();
        if !texts.contains(&u.text.as_str()) {
            texts.push(&u.text);
        }
    }
    let mut out = BTreeSet::new();
    for (lang, texts) in per_lang {
        for t in &texts[texts.len().saturating_sub(n)..] {
            out.insert((lang.to_string(), t.to_string()));
        }
    }
    out
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        let wd = Workdir::new(cfg.workdir.clone(), cfg.hash(), cfg.seed);
        Self { cfg, wd, force }
    }

    pub fn workdir(&self) -> &Workdir {
        &self.wd
    }

    /// Run `body` unless the recorded run already matches; `body` returns the
    /// workdir-relative files it wrote.
    fn step(
        &self,
        command: &str,
        options: Options,
        inputs: Inputs,
        body: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<()> {
        if !self.force && self.wd.up_to_date(command, &options, &inputs)? {
            info!("{command}: up to date");
            println!("{command}: up to date");
            return Ok(());
        }
        self.wd.invalidate(command)?;
        let t0 = Instant::now();
        let outputs = body()?;
        self.wd.record(command, options, inputs, &outputs)?;
        info!("{command}: done in {:.1}s", t0.elapsed().as_secs_f64());
        Ok(())
    }

    fn corpus(&self, inputs: &mut Inputs) -> Result<Corpus> {
        match &self.cfg.manifest {
            Some(path) => {
                let utterances = load_manifest(path)?;
                let mut h = Sha256::new();
                h.update(sha256_file(path)?.as_bytes());
                for u in &utterances {
                    h.update(sha256_file(&resolve_audio(path, u))?.as_bytes());
                }
                inputs.insert("manifest".into(), hex(&h.finalize()));
                Ok(Corpus {
                    manifest: path.clone(),
                    utterances,
                })
            }
            None => {
                let meta = self.wd.require(GEN_CORPUS)?;
                inputs.insert(GEN_CORPUS.into(), meta.digest());
                let manifest = self.wd.path(MANIFEST);
                Ok(Corpus {
                    utterances: load_manifest(&manifest)?,
                    manifest,
                })
            }
        }
    }

    fn need(&self, command: &str, inputs: &mut Inputs) -> Result<()> {
        let meta = self.wd.require(command)?;
        inputs.insert(command.into(), meta.digest());
        Ok(())
    }

    fn waveform(&self, corpus: &Corpus, u: &Utterance) -> Result<Waveform> {
        let w = read_wav(resolve_audio(&corpus.manifest, u))?;
        if w.sample_rate != self.cfg.features.sample_rate {
            return Err(precondition(format!(
                "{}: sample rate {} differs from the configured {}",
                u.id, w.sample_rate, self.cfg.features.sample_rate
            )));
        }
        Ok(w)
    }

    fn features(&self, corpus: &Corpus, utts: &[&Utterance]) -> Result<Vec<FeatureSequence>> {
        let ex = FeatureExtractor::new(self.cfg.features)?;
        utts.iter()
            .map(|u| Ok(ex.featurize(&self.waveform(corpus, u)?)?))
            .collect()
    }

    fn lexicon(&self) -> Result<Option<PhonemeLexicon>> {
        if self.cfg.text_mode != TextMode::Phoneme {
            return Ok(None);
        }
        let path = match &self.cfg.lexicon {
            Some(p) => p.clone(),
            None => self.wd.path(SYNTHETIC_LEXICON),
        };
        Ok(Some(PhonemeLexicon::load(path)?))
    }

    fn frontend(&self) -> Result<TextFrontend> {
        Ok(TextFrontend {
            vocab: Vocabulary::load(self.wd.path(VOCAB))?,
            lexicon: self.lexicon()?,
            policy: self.cfg.unk_policy,
        })
    }

    fn held_out(&self, corpus: &Corpus) -> BTreeSet<(String, String)> {
        held_out_texts(&corpus.utterances, self.cfg.split.held_out_texts_per_language)
    }

    fn is_held_out(held: &BTreeSet<(String, String)>, u: &Utterance) -> bool {
        held.contains(&(u.language.clone(), u.text.clone()))
    }

    /// Utterances the vocoder, codebook and probe may learn from.
    fn speech_training<'a>(&self, corpus: &'a Corpus) -> Vec<&'a Utterance> {
        let held = self.held_out(corpus);
        corpus
            .utterances
            .iter()
            .filter(|u| self.cfg.split.allows_vocoder(&u.speaker, &u.language) && !Self::is_held_out(&held, u))
            .collect()
    }

    pub fn gen_corpus(&self) -> Result<()> {
        let Some(syn) = &self.cfg.synthetic else {
            return Err(Usage("gen-corpus needs a `synthetic` config section; this config names an existing manifest".into()).into());
        };
        self.step(GEN_CORPUS, Options::new(), Inputs::new(), || {
            let languages = self.cfg.synthetic_languages()?;
            let corpus = generate_synthetic_corpus(
                &languages,
                &self.cfg.synthetic_speakers(),
                syn.texts_per_pair,
                self.cfg.seed,
                &syn.corpus,
            )?;
            let dir = self.wd.path("corpus");
            if dir.exists() {
                fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
            }
            fs::create_dir_all(dir.join("wavs"))?;
            let manifest = corpus.manifest();
            let mut outputs = vec![MANIFEST.to_string(), TRUTH_UNITS.to_string(), TRUTH_DURATIONS.to_string()];
            for u in &corpus.utterances {
                write_wav(&u.waveform, dir.join(&u.utterance.audio_path))?;
                outputs.push(format!("corpus/{}", u.utterance.audio_path));
            }
            save_manifest(self.wd.path(MANIFEST), &manifest)?;
            let units: Vec<_> = corpus
                .utterances
                .iter()
                .map(|u| UnitRecord {
                    id: u.utterance.id.clone(),
                    units: u.units.clone(),
                })
                .collect();
            write_jsonl(self.wd.path(TRUTH_UNITS), &units)?;
            let durations: Vec<_> = corpus
                .utterances
                .iter()
                .map(|u| DurationRecord {
                    id: u.utterance.id.clone(),
                    durations: u.durations.clone(),
                })
                .collect();
            write_jsonl(self.wd.path(TRUTH_DURATIONS), &durations)?;
            if self.cfg.text_mode == TextMode::Phoneme && self.cfg.lexicon.is_none() {
                synthetic_lexicon(&languages, &manifest)?.save(self.wd.path(SYNTHETIC_LEXICON))?;
                outputs.push(SYNTHETIC_LEXICON.to_string());
            }
            println!("gen-corpus: {} utterances", manifest.len());
            Ok(outputs)
        })
    }

    pub fn build_vocab(&self) -> Result<()> {
        let mut inputs = Inputs::new();
        let corpus = self.corpus(&mut inputs)?;
        if let Some(p) = &self.cfg.lexicon {
            inputs.insert("lexicon".into(), sha256_file(p)?);
        }
        self.step(BUILD_VOCAB, Options::new(), inputs, || {
            let vocab = build_vocabulary(
                &corpus.utterances,
                self.cfg.text_mode,
                self.lexicon()?.as_ref(),
                self.cfg.unk_policy,
            )?;
            fs::create_dir_all(self.wd.root())?;
            vocab.save(self.wd.path(VOCAB))?;
            println!("build-vocab: {} symbols", vocab.size());
            Ok(vec![VOCAB.into()])
        })
    }

    pub fn train_codebook(&self) -> Result<()> {
        let mut inputs = Inputs::new();
        let corpus = self.corpus(&mut inputs)?;
        self.step(TRAIN_CODEBOOK, Options::new(), inputs, || {
            let utts = self.speech_training(&corpus);
            if utts.is_empty() {
                return Err(precondition("no utterances left to train the codebook on"));
            }
            let feats = self.features(&corpus, &utts)?;
            let (cb, run) = train_codebook(&feats, &self.cfg.kmeans_options())?;
            cb.save(self.wd.path(CODEBOOK))?;
            write_json(
                &self.wd.path(CODEBOOK_OBJECTIVE),
                &CodebookObjective {
                    k: cb.k(),
                    training_utterances: utts.len(),
                    objective_history: run.objective_history.clone(),
                },
            )?;
            println!(
                "train-codebook: K={} on {} utterances, objective {:.4} after {} steps",
                cb.k(),
                utts.len(),
                run.objective_history.last().copied().unwrap_or(f64::NAN),
                run.objective_history.len()
            );
            Ok(vec![CODEBOOK.into(), CODEBOOK_OBJECTIVE.into()])
        })
    }

    pub fn encode_units(&self) -> Result<()> {
        let mut inputs = Inputs::new();
        let corpus = self.corpus(&mut inputs)?;
        self.need(TRAIN_CODEBOOK, &mut inputs)?;
        self.step(ENCODE_UNITS, Options::new(), inputs, || {
            let cb = Codebook::load(self.wd.path(CODEBOOK))?;
            let all: Vec<&Utterance> = corpus.utterances.iter().collect();
            let feats = self.features(&corpus, &all)?;
            let mut records = Vec::with_capacity(all.len());
            for (u, f) in all.iter().zip(&feats) {
                records.push(UnitRecord {
                    id: u.id.clone(),
                    units: quantize(f, &cb)?,
                });
            }
            write_jsonl(self.wd.path(UNITS), &records)?;
            println!("encode-units: {} utterances", records.len());
            Ok(vec![UNITS.into()])
        })
    }

    pub fn align(&self) -> Result<()> {
        let mut inputs = Inputs::new();
        let corpus = self.corpus(&mut inputs)?;
        self.need(BUILD_VOCAB, &mut inputs)?;
        self.step(ALIGN, Options::new(), inputs, || {
            let frontend = self.frontend()?;
            let all: Vec<&Utterance> = corpus.utterances.iter().collect();
            let feats = self.features(&corpus, &all)?;
            let mut features = HashMap::new();
            let mut tokens = HashMap::new();
            for (u, f) in all.iter().zip(feats) {
                features.insert(u.id.clone(), f);
                if let Ok(t) = frontend.encode(&u.text, &u.language) {
                    tokens.insert(u.id.clone(), t);
                }
            }
            let report = align_corpus(&corpus.utterances, &features, &tokens);
            let records: Vec<_> = corpus
                .utterances
                .iter()
                .filter_map(|u| {
                    report.durations.get(&u.id).map(|d| DurationRecord {
                        id: u.id.clone(),
                        durations: d.clone(),
                    })
                })
                .collect();
            write_jsonl(self.wd.path(DURATIONS), &records)?;
            write_jsonl(self.wd.path(ALIGN_SKIPPED), &report.skipped)?;
            println!("align: {} aligned, {} skipped", records.len(), report.skipped.len());
            Ok(vec![DURATIONS.into(), ALIGN_SKIPPED.into()])
        })
    }

    /// `max_paired_frames` caps the paired frames per language; utterances are
    /// taken in manifest order while they fit.
    pub fn train_t2u(&self, max_paired_frames: Option<usize>) -> Result<()> {
        let mut inputs = Inputs::new();
        self.need(TRAIN_CODEBOOK, &mut inputs)?;
        self.need(ENCODE_UNITS, &mut inputs)?;
        self.need(BUILD_VOCAB, &mut inputs)?;
        self.need(ALIGN, &mut inputs)?;
        let corpus = self.corpus(&mut inputs)?;
        let mut options = Options::new();
        if let Some(f) = max_paired_frames {
            options.insert("max_paired_per_language".into(), f.to_string());
        }
        self.step(TRAIN_T2U, options, inputs, || {
            let frontend = self.frontend()?;
            let units = unit_map(&self.wd.path(UNITS))?;
            let durations = duration_map(&self.wd.path(DURATIONS))?;
            let k = Codebook::load(self.wd.path(CODEBOOK))?.k();
            let held = self.held_out(&corpus);
            let mut budget: BTreeMap<&str, usize> = BTreeMap::new();
            let (mut train_set, mut split) = (
                Vec::new(),
                T2USplit {
                    train: vec![],
                    held_out: vec![],
                },
            );
            for u in &corpus.utterances {
                if !self.cfg.split.allows_t2u(&u.speaker, &u.language) {
                    continue;
                }
                if Self::is_held_out(&held, u) {
                    split.held_out.push(u.id.clone());
                    continue;
                }
                let (Some(us), Some(d)) = (units.get(&u.id), durations.get(&u.id)) else {
                    continue;
                };
                if let Some(cap) = max_paired_frames {
                    let used = budget.entry(&u.language).or_default();
                    if *used + us.len() > cap {
                        continue;
                    }
                    *used += us.len();
                }
                split.train.push(u.id.clone());
                train_set.push(T2UExample {
                    id: u.id.clone(),
                    tokens: frontend.encode(&u.text, &u.language)?,
                    durations: d.clone(),
                    units: us.clone(),
                });
            }
            if train_set.is_empty() {
                return Err(precondition("no paired utterances left to train the text-to-unit model on"));
            }
            let model_cfg = self.cfg.t2u.model_config(frontend.vocab.size(), k);
            let model = T2UModel::new(model_cfg, self.cfg.seed)?;
            info!("train-t2u: {} utterances", train_set.len());
            let (model, state) = train(model, &train_set, &self.cfg.t2u.train_options(self.cfg.seed))?;
            model.save(self.wd.path(T2U_CKPT))?;
            write_json(
                &self.wd.path(T2U_HISTORY),
                &T2UHistory {
                    steps: state.step,
                    epochs: state.history.clone(),
                },
            )?;
            write_json(&self.wd.path(T2U_SPLIT), &split)?;
            if let (Some(a), Some(b)) = (state.history.first(), state.history.last()) {
                println!(
                    "train-t2u: {} utterances, loss {:.4} -> {:.4} over {} epochs",
                    train_set.len(),
                    a.total,
                    b.total,
                    state.history.len()
                );
            }
            Ok(vec![T2U_CKPT.into(), T2U_HISTORY.into(), T2U_SPLIT.into()])
        })
    }

    /// Trains on units quantized from recorded audio, never on model output.
    pub fn train_vocoder(&self) -> Result<()> {
        let mut inputs = Inputs::new();
        self.need(TRAIN_CODEBOOK, &mut inputs)?;
        self.need(ENCODE_UNITS, &mut inputs)?;
        let corpus = self.corpus(&mut inputs)?;
        self.step(TRAIN_VOCODER, Options::new(), inputs, || {
            let units = unit_map(&self.wd.path(UNITS))?;
            let k = Codebook::load(self.wd.path(CODEBOOK))?.k();
            let utts = self.speech_training(&corpus);
            if utts.is_empty() {
                return Err(precondition("no utterances left to train the vocoder on"));
            }
            let owned: Vec<Utterance> = utts.iter().map(|u| (*u).clone()).collect();
            let table = build_speaker_table(&owned)?;
            let vcfg = self
                .cfg
                .vocoder
                .model_config(k, table.ids().to_vec(), self.cfg.features.sample_rate);
            let mut examples = Vec::with_capacity(utts.len());
            for u in &utts {
                let us = units
                    .get(&u.id)
                    .ok_or_else(|| precondition(format!("{} has no units; re-run encode-units", u.id)))?;
                let w = self.waveform(&corpus, u)?;
                examples.push(VocoderExample::new(
                    u.id.clone(),
                    us.clone(),
                    vcfg.speaker(&u.speaker)?,
                    &w,
                    vcfg.hop(),
                )?);
            }
            let model = VocoderModel::new(vcfg, self.cfg.seed)?;
            info!("train-vocoder: {} utterances, {} speakers", examples.len(), table.len());
            let (model, history) = train_vocoder(model, &examples, &self.cfg.vocoder.train_options(self.cfg.seed))?;
            model.save(self.wd.path(VOCODER_CKPT))?;
            write_json(&self.wd.path(VOCODER_HISTORY), &history)?;
            if let (Some(a), Some(b)) = (history.epochs.first(), history.epochs.last()) {
                println!(
                    "train-vocoder: {} utterances, spectral loss {:.4} -> {:.4}",
                    examples.len(),
                    a.spectral,
                    b.spectral
                );
            }
            Ok(vec![VOCODER_CKPT.into(), VOCODER_HISTORY.into()])
        })
    }

    fn models(&self) -> Result<(T2UModel, VocoderModel, TextFrontend)> {
        for c in [BUILD_VOCAB, TRAIN_T2U, TRAIN_VOCODER] {
            self.wd.require(c)?;
        }
        let t2u = T2UModel::load(self.wd.path(T2U_CKPT))?;
        let vocoder = VocoderModel::load(self.wd.path(VOCODER_CKPT))?;
        if t2u.config.units != vocoder.config.units {
            return Err(precondition(format!(
                "text-to-unit model emits {} units but the vocoder expects {}",
                t2u.config.units, vocoder.config.units
            )));
        }
        Ok((t2u, vocoder, self.frontend()?))
    }

    /// Text → units → waveform. Returns the durations and waveform written.
    pub fn synthesize(&self, text: &str, language: &str, speaker: &str, out: &Path) -> Result<(DurationSequence, Waveform)> {
        let (t2u, vocoder, frontend) = self.models()?;
        let onehot = vocoder.config.speaker(speaker).map_err(|_| {
            Usage(format!(
                "unknown speaker `{speaker}`; the vocoder knows {}",
                vocoder.config.speakers.join(", ")
            ))
        })?;
        let tokens = frontend.encode(text, language)?;
        let (units, durations) = t2u.predict_units(&tokens)?;
        let w = vocoder.synthesize(&units, onehot)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_wav(&w, out)?;
        println!(
            "synthesize: {} tokens, {} frames, {} samples -> {}",
            tokens.len(),
            units.len(),
            w.len(),
            out.display()
        );
        Ok((durations, w))
    }

    fn probe(&self, corpus: &Corpus) -> Result<SpeakerProbe> {
        let mut train = Vec::new();
        for u in self.speech_training(corpus) {
            train.push((self.waveform(corpus, u)?, u.speaker.clone()));
        }
        Ok(SpeakerProbe::fit(&train, &self.cfg.probe_features)?)
    }

    /// Speakers the vocoder heard speaking `language`.
    fn natives(&self, corpus: &Corpus, language: &str) -> Vec<String> {
        let set: BTreeSet<String> = self
            .speech_training(corpus)
            .into_iter()
            .filter(|u| u.language == language)
            .map(|u| u.speaker.clone())
            .collect();
        set.into_iter().collect()
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let mut inputs = Inputs::new();
        for c in [TRAIN_CODEBOOK, ENCODE_UNITS, BUILD_VOCAB, ALIGN, TRAIN_T2U, TRAIN_VOCODER] {
            self.need(c, &mut inputs)?;
        }
        let corpus = self.corpus(&mut inputs)?;
        self.step(EVAL, Options::new(), inputs, || {
            let report = self.compute_eval(&corpus)?;
            write_json(&self.wd.path(EVAL_JSON), &report)?;
            fs::write(self.wd.path(EVAL_TABLE), report.to_table())?;
            Ok(vec![EVAL_JSON.into(), EVAL_TABLE.into()])
        })?;
        let report: EvalReport = read_json(&self.wd.path(EVAL_JSON))?;
        print!("{}", report.to_table());
        Ok(report)
    }

    fn compute_eval(&self, corpus: &Corpus) -> Result<EvalReport> {
        let (t2u, vocoder, frontend) = self.models()?;
        let cb = Codebook::load(self.wd.path(CODEBOOK))?;
        let units = unit_map(&self.wd.path(UNITS))?;
        let durations = duration_map(&self.wd.path(DURATIONS))?;
        let split: T2USplit = read_json(&self.wd.path(T2U_SPLIT))?;
        let by_id: HashMap<&str, &Utterance> = corpus.utterances.iter().map(|u| (u.id.as_str(), u)).collect();

        #[derive(Default)]
        struct Acc {
            unit: (f64, usize),
            dur: (f64, usize),
            align: (f64, usize),
            agree: (usize, usize),
            probe: (usize, usize),
            trip: (f64, usize),
        }
        let mut acc: BTreeMap<String, Acc> = BTreeMap::new();

        for id in &split.held_out {
            let u = by_id[id.as_str()];
            let (Some(us), Some(d)) = (units.get(id), durations.get(id)) else {
                continue;
            };
            let (pu, pd) = t2u.predict_units(&frontend.encode(&u.text, &u.language)?)?;
            let a = acc.entry(u.language.clone()).or_default();
            a.unit.0 += truncated_unit_accuracy(&pu, us).0;
            a.unit.1 += 1;
            a.dur.0 += duration_mae(&pd, d)?;
            a.dur.1 += 1;
        }

        let truth_units = self.wd.path(TRUTH_UNITS);
        if self.cfg.manifest.is_none() && truth_units.exists() {
            let truth = unit_map(&truth_units)?;
            let truth_d = duration_map(&self.wd.path(TRUTH_DURATIONS))?;
            let ids: Vec<&Utterance> = corpus.utterances.iter().filter(|u| units.contains_key(&u.id)).collect();
            let pred: Vec<UnitSequence> = ids.iter().map(|u| units[&u.id].clone()).collect();
            let reference: Vec<UnitSequence> = ids.iter().map(|u| truth[&u.id].clone()).collect();
            let k = cb.k().max(reference.iter().flat_map(|r| r.as_slice()).map(|&x| x as usize + 1).max().unwrap_or(0));
            let perm = permuted_agreement(&pred, &reference, k)?.permutation;
            for ((u, p), r) in ids.iter().zip(&pred).zip(&reference) {
                let a = acc.entry(u.language.clone()).or_default();
                a.agree.0 += p
                    .as_slice()
                    .iter()
                    .zip(r.as_slice())
                    .filter(|(x, y)| perm[**x as usize] == **y as usize)
                    .count();
                a.agree.1 += p.len();
                if let (Some(d), Some(t)) = (durations.get(&u.id), truth_d.get(&u.id)) {
                    if d.len() == t.len() {
                        a.align.0 += duration_mae(d, t)?;
                        a.align.1 += 1;
                    }
                }
            }
        }

        let probe = self.probe(corpus)?;
        let ex = FeatureExtractor::new(self.cfg.features)?;
        let held = self.held_out(corpus);
        let mut seen = BTreeSet::new();
        for u in &corpus.utterances {
            if !Self::is_held_out(&held, u) || !seen.insert((u.language.clone(), u.text.clone())) {
                continue;
            }
            let natives = self.natives(corpus, &u.language);
            if natives.is_empty() {
                continue;
            }
            let (pu, _) = t2u.predict_units(&frontend.encode(&u.text, &u.language)?)?;
            for spk in natives {
                let w = vocoder.synthesize(&pu, vocoder.config.speaker(&spk)?)?;
                let back = quantize(&ex.featurize(&w)?, &cb)?;
                let a = acc.entry(u.language.clone()).or_default();
                a.trip.0 += unit_accuracy(&back, &pu)?;
                a.trip.1 += 1;
                a.probe.0 += usize::from(probe.predict(&w)? == spk);
                a.probe.1 += 1;
            }
        }

        let ratio = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let count = |(s, n): (usize, usize)| (n > 0).then(|| s as f64 / n as f64);
        let metrics = |a: &Acc| EvalMetrics {
            unit_accuracy: ratio(a.unit),
            duration_mae: ratio(a.dur),
            alignment_mae: ratio(a.align),
            codebook_agreement: count(a.agree),
            speaker_probe_accuracy: count(a.probe),
            round_trip_recovery: ratio(a.trip),
        };
        let mut total = Acc::default();
        for a in acc.values() {
            total.unit = (total.unit.0 + a.unit.0, total.unit.1 + a.unit.1);
            total.dur = (total.dur.0 + a.dur.0, total.dur.1 + a.dur.1);
            total.align = (total.align.0 + a.align.0, total.align.1 + a.align.1);
            total.agree = (total.agree.0 + a.agree.0, total.agree.1 + a.agree.1);
            total.probe = (total.probe.0 + a.probe.0, total.probe.1 + a.probe.1);
            total.trip = (total.trip.0 + a.trip.0, total.trip.1 + a.trip.1);
        }
        let report = EvalReport {
            overall: metrics(&total),
            per_language: acc.iter().map(|(l, a)| (l.clone(), metrics(a))).collect(),
        };
        validate_report(&report)?;
        Ok(report)
    }

    /// Synthesize `language` text with speakers who never spoke it in training,
    /// next to the speakers who did.
    pub fn cross_lingual(&self, language: &str, speakers: &[String], texts: &[String]) -> Result<CrossLingualOutput> {
        let mut inputs = Inputs::new();
        for c in [TRAIN_CODEBOOK, BUILD_VOCAB, TRAIN_T2U, TRAIN_VOCODER] {
            self.need(c, &mut inputs)?;
        }
        let corpus = self.corpus(&mut inputs)?;
        let trained_in = |spk: &str| {
            corpus.utterances.iter().any(|u| {
                u.speaker == spk
                    && u.language == language
                    && (self.cfg.split.allows_t2u(&u.speaker, &u.language)
                        || self.cfg.split.allows_vocoder(&u.speaker, &u.language))
            })
        };
        let vocoder_speakers = build_speaker_table(&self.speech_training(&corpus).into_iter().cloned().collect::<Vec<_>>())?;
        let speakers: Vec<String> = if speakers.is_empty() {
            vocoder_speakers.ids().iter().filter(|s| !trained_in(s)).cloned().collect()
        } else {
            speakers.to_vec()
        };
        if speakers.is_empty() {
            return Err(Usage(format!("every known speaker has training data in `{language}`")).into());
        }
        for s in &speakers {
            if vocoder_speakers.index(s).is_none() {
                return Err(Usage(format!("unknown speaker `{s}`")).into());
            }
            if trained_in(s) {
                return Err(Usage(format!(
                    "speaker `{s}` has training data in `{language}`; pick a speaker native to another language"
                ))
                .into());
            }
        }
        let texts: Vec<String> = if texts.is_empty() {
            let held = self.held_out(&corpus);
            held.iter().filter(|(l, _)| l == language).map(|(_, t)| t.clone()).collect()
        } else {
            texts.to_vec()
        };
        if texts.is_empty() {
            return Err(Usage(format!("no held-out `{language}` texts; pass --text")).into());
        }
        let mut options = Options::new();
        options.insert("speakers".into(), speakers.join(","));
        options.insert("texts".into(), texts.join("\n"));
        let out_rel = cross_lingual_path(language);
        let command = format!("{CROSS_LINGUAL}.{language}");
        self.step(&command, options, inputs, || {
            let (t2u, vocoder, frontend) = self.models()?;
            let cb = Codebook::load(self.wd.path(CODEBOOK))?;
            let ex = FeatureExtractor::new(self.cfg.features)?;
            let probe = self.probe(&corpus)?;
            let models = TransferModels {
                t2u: &t2u,
                vocoder: &vocoder,
                codebook: &cb,
                extractor: &ex,
                probe: &probe,
            };
            let tokens: Vec<TokenSequence> = texts
                .iter()
                .map(|t| frontend.encode(t, language))
                .collect::<unitts::Result<_>>()?;
            let cross = cross_lingual_report(&models, &tokens, &speakers)?;
            let natives = self.natives(&corpus, language);
            let same = if natives.is_empty() {
                None
            } else {
                let r = cross_lingual_report(&models, &tokens, &natives)?;
                if r.units != cross.units {
                    return Err(unitts::Error::Numerical("unit sequences differ between native and foreign speakers".into()).into());
                }
                Some(r)
            };
            let out = CrossLingualOutput {
                language: language.to_string(),
                texts: texts.clone(),
                probe_accuracy: mean_probe(&cross),
                mean_recovery: mean_recovery(&cross),
                same_language_recovery: same.as_ref().map(mean_recovery),
                same_language: same,
                cross_lingual: cross,
            };
            fs::create_dir_all(self.wd.path("cross_lingual"))?;
            write_json(&self.wd.path(&out_rel), &out)?;
            Ok(vec![out_rel.clone()])
        })?;
        let out: CrossLingualOutput = read_json(&self.wd.path(&out_rel))?;
        println!(
            "cross-lingual {language}: speakers {} probe {:.3} recovery {:.3} (same-language {})",
            speakers.join(","),
            out.probe_accuracy,
            out.mean_recovery,
            out.same_language_recovery.map_or("-".into(), |r| format!("{r:.3}"))
        );
        Ok(out)
    }
}

fn validate_report(r: &EvalReport) -> Result<()> {
    r.overall.validate()?;
    for m in r.per_language.values() {
        m.validate()?;
    }
    Ok(())
}
