//! Deterministic multilingual multi-speaker corpus with known units and durations.
//!
//! Each language maps graphemes to short programs of `(pseudo-phone, frames)`.
//! A frame of pseudo-phone `u` spoken by speaker `s` is a sum of sinusoids at
//! the prototype frequencies of `u` scaled by `s.f0_scale`, with the speaker's
//! gain and spectral tilt applied. Sinusoid phase runs on the global sample
//! clock, so runs of one pseudo-phone are continuous tones.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Utterance, Waveform};
use crate::aligner::DurationSequence;
use crate::error::{invalid, Result};
use crate::text::PhonemeLexicon;
use crate::units::UnitSequence;

/// Tilt is expressed in dB per octave relative to this frequency.
pub const TILT_REFERENCE_HZ: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Starting phase of each partial in radians; all zero when absent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    /// Single-codepoint grapheme → `(pseudo-phone id, frame count)` program.
    pub grapheme_programs: BTreeMap<String, Vec<(u32, u32)>>,
    pub prototypes: BTreeMap<u32, Prototype>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerSpec {
    pub name: String,
    pub f0_scale: f64,
    /// dB per octave around [`TILT_REFERENCE_HZ`].
    pub spectral_tilt: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub sample_rate: u32,
    pub hop: usize,
    /// Inclusive range of words per generated text.
    pub words_per_text: (usize, usize),
    /// Inclusive range of graphemes per word.
    pub graphemes_per_word: (usize, usize),
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            hop: 64,
            words_per_text: (2, 4),
            graphemes_per_word: (2, 5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub utterance: Utterance,
    pub waveform: Waveform,
    /// Ground-truth pseudo-phone per hop-sized frame.
    pub units: UnitSequence,
    /// Ground-truth frame count per character token of the text.
    pub durations: DurationSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub utterances: Vec<SyntheticUtterance>,
}

impl SyntheticCorpus {
    pub fn manifest(&self) -> Vec<Utterance> {
        self.utterances.iter().map(|u| u.utterance.clone()).collect()
    }
}

fn tilt_factor(freq: f64, tilt_db_per_octave: f64) -> f64 {
    10f64.powf(tilt_db_per_octave * (freq / TILT_REFERENCE_HZ).log2() / 20.0)
}

fn grapheme_char(g: &str) -> Result<char> {
    let mut it = g.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(invalid!("grapheme `{g}` must be exactly one codepoint")),
    }
}

impl SyntheticLanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(invalid!("language name is empty"));
        }
        if self.grapheme_programs.is_empty() {
            return Err(invalid!("language `{}` has no graphemes", self.name));
        }
        for (g, program) in &self.grapheme_programs {
            grapheme_char(g)?;
            if program.is_empty() {
                return Err(invalid!("language `{}`: program for `{g}` is empty", self.name));
            }
            for &(phone, frames) in program {
                if frames < 1 {
                    return Err(invalid!("language `{}`: `{g}` has a zero-frame step", self.name));
                }
                if !self.prototypes.contains_key(&phone) {
                    return Err(invalid!("language `{}`: pseudo-phone {phone} has no prototype", self.name));
                }
            }
        }
        for (id, p) in &self.prototypes {
            if p.frequencies.is_empty() || p.frequencies.len() != p.amplitudes.len() {
                return Err(invalid!("prototype {id}: need matching non-empty frequency and amplitude lists"));
            }
            if p.frequencies.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
                return Err(invalid!("prototype {id}: frequencies must be positive"));
            }
            if p.amplitudes.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
                return Err(invalid!("prototype {id}: amplitudes must be non-negative"));
            }
            if !p.phases.is_empty() && p.phases.len() != p.frequencies.len() {
                return Err(invalid!("prototype {id}: need one phase per partial"));
            }
            if p.phases.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("prototype {id}: phases must be finite"));
            }
        }
        Ok(())
    }

    fn program(&self, c: char) -> Option<&Vec<(u32, u32)>> {
        let mut buf = [0u8; 4];
        self.grapheme_programs.get(&*c.encode_utf8(&mut buf))
    }

    /// Graphemes used inside words (everything except whitespace), sorted.
    fn alphabet(&self) -> Vec<char> {
        self.grapheme_programs
            .keys()
            .filter_map(|g| g.chars().next())
            .filter(|c| !c.is_whitespace())
            .collect()
    }
}

impl SyntheticSpeakerSpec {
    /// Every scaled frequency must sit below Nyquist and the worst-case peak
    /// must stay within full scale.
    pub fn validate(&self, prototypes: &BTreeMap<u32, Prototype>, sample_rate: u32) -> Result<()> {
        if !(self.f0_scale > 0.0 && self.gain > 0.0 && self.spectral_tilt.is_finite()) {
            return Err(invalid!("speaker `{}`: f0_scale and gain must be positive", self.name));
        }
        let nyquist = sample_rate as f64 / 2.0;
        for (id, p) in prototypes {
            let mut peak = 0.0;
            for (&f, &a) in p.frequencies.iter().zip(&p.amplitudes) {
                let scaled = f * self.f0_scale;
                if scaled >= nyquist {
                    return Err(invalid!(
                        "speaker `{}`: pseudo-phone {id} frequency {scaled} Hz is at or above Nyquist ({nyquist} Hz)",
                        self.name
                    ));
                }
                peak += a * tilt_factor(scaled, self.spectral_tilt);
            }
            if peak * self.gain > 1.0 {
                return Err(invalid!(
                    "speaker `{}`: pseudo-phone {id} may reach amplitude {:.3} > 1",
                    self.name,
                    peak * self.gain
                ));
            }
        }
        Ok(())
    }
}

fn merged_prototypes(languages: &[SyntheticLanguageSpec]) -> Result<BTreeMap<u32, Prototype>> {
    let mut all: BTreeMap<u32, Prototype> = BTreeMap::new();
    for lang in languages {
        for (id, p) in &lang.prototypes {
            match all.get(id) {
                Some(existing) if existing != p => {
                    return Err(invalid!("pseudo-phone {id} has different prototypes across languages"))
                }
                Some(_) => {}
                None => {
                    all.insert(*id, p.clone());
                }
            }
        }
    }
    Ok(all)
}

/// Synthesize one utterance of `text` (already whitespace-normalised).
pub fn render_utterance(
    language: &SyntheticLanguageSpec,
    speaker: &SyntheticSpeakerSpec,
    text: &str,
    cfg: &SyntheticCorpusConfig,
) -> Result<(Waveform, UnitSequence, DurationSequence)> {
    if cfg.hop == 0 {
        return Err(invalid!("hop must be positive"));
    }
    let mut units = Vec::new();
    let mut durations = Vec::new();
    for c in text.chars() {
        let program = language
            .program(c)
            .ok_or_else(|| invalid!("language `{}` has no program for `{c}`", language.name))?;
        let mut total = 0;
        for &(phone, frames) in program {
            units.extend(std::iter::repeat_n(phone, frames as usize));
            total += frames;
        }
        durations.push(total);
    }
    let sr = cfg.sample_rate as f64;
    // Per pseudo-phone: (angular frequency per sample, amplitude, phase) after speaker shaping.
    let mut partials: BTreeMap<u32, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for &u in &units {
        partials.entry(u).or_insert_with(|| {
            let p = &language.prototypes[&u];
            p.frequencies
                .iter()
                .zip(&p.amplitudes)
                .enumerate()
                .map(|(i, (&f, &a))| {
                    let f = f * speaker.f0_scale;
                    let phase = p.phases.get(i).copied().unwrap_or(0.0);
                    (2.0 * PI * f / sr, speaker.gain * a * tilt_factor(f, speaker.spectral_tilt), phase)
                })
                .collect()
        });
    }
    let mut samples = Vec::with_capacity(units.len() * cfg.hop);
    for (frame, &u) in units.iter().enumerate() {
        let parts = &partials[&u];
        for i in 0..cfg.hop {
            let n = (frame * cfg.hop + i) as f64;
            let v: f64 = parts.iter().map(|&(w, a, phase)| a * (w * n + phase).sin()).sum();
            samples.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    Ok((
        Waveform::new(samples, cfg.sample_rate)?,
        UnitSequence::new(units)?,
        DurationSequence::new(durations)?,
    ))
}

fn random_text(rng: &mut ChaCha8Rng, alphabet: &[char], cfg: &SyntheticCorpusConfig) -> String {
    let words = rng.random_range(cfg.words_per_text.0..=cfg.words_per_text.1);
    let mut out = String::new();
    for w in 0..words {
        if w > 0 {
            out.push(' ');
        }
        let len = rng.random_range(cfg.graphemes_per_word.0..=cfg.graphemes_per_word.1);
        let mut prev: Option<char> = None;
        for _ in 0..len {
            let c = loop {
                let c = alphabet[rng.random_range(0..alphabet.len())];
                if alphabet.len() == 1 || Some(c) != prev {
                    break c;
                }
            };
            out.push(c);
            prev = Some(c);
        }
    }
    out
}

/// Generate `texts_per_pair` distinct texts per language and render each of them
/// with every speaker. Output order: language, text, speaker.
pub fn generate_synthetic_corpus(
    languages: &[SyntheticLanguageSpec],
    speakers: &[SyntheticSpeakerSpec],
    texts_per_pair: usize,
    seed: u64,
    cfg: &SyntheticCorpusConfig,
) -> Result<SyntheticCorpus> {
    if languages.is_empty() || speakers.is_empty() {
        return Err(invalid!("need at least one language and one speaker"));
    }
    let (w, g) = (cfg.words_per_text, cfg.graphemes_per_word);
    if w.0 == 0 || w.0 > w.1 || g.0 == 0 || g.0 > g.1 {
        return Err(invalid!("word and grapheme ranges must be non-empty and start at 1 or more"));
    }
    let mut names = HashSet::new();
    for lang in languages {
        lang.validate()?;
        if !names.insert(&lang.name) {
            return Err(invalid!("duplicate language `{}`", lang.name));
        }
        if w.1 > 1 && lang.program(' ').is_none() {
            return Err(invalid!("language `{}` needs a program for the space grapheme", lang.name));
        }
    }
    let prototypes = merged_prototypes(languages)?;
    let mut speaker_names = HashSet::new();
    for s in speakers {
        s.validate(&prototypes, cfg.sample_rate)?;
        if !speaker_names.insert(&s.name) {
            return Err(invalid!("duplicate speaker `{}`", s.name));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::new();
    for lang in languages {
        let alphabet = lang.alphabet();
        if alphabet.is_empty() {
            return Err(invalid!("language `{}` has no word graphemes", lang.name));
        }
        let mut seen = BTreeSet::new();
        let mut texts = Vec::new();
        let mut attempts = 0;
        while texts.len() < texts_per_pair {
            attempts += 1;
            if attempts > 1000 * texts_per_pair.max(1) {
                return Err(invalid!(
                    "language `{}`: cannot draw {texts_per_pair} distinct texts from its alphabet",
                    lang.name
                ));
            }
            let t = random_text(&mut rng, &alphabet, cfg);
            if seen.insert(t.clone()) {
                texts.push(t);
            }
        }
        for (i, text) in texts.iter().enumerate() {
            for spk in speakers {
                let id = format!("{}_{}_{i:04}", lang.name, spk.name);
                let (waveform, units, durations) = render_utterance(lang, spk, text, cfg)?;
                utterances.push(SyntheticUtterance {
                    utterance: Utterance {
                        audio_path: format!("wavs/{id}.wav"),
                        id,
                        text: text.clone(),
                        language: lang.name.clone(),
                        speaker: spk.name.clone(),
                    },
                    waveform,
                    units,
                    durations,
                });
            }
        }
    }
    Ok(SyntheticCorpus { utterances })
}

/// Lexicon over pseudo-phone symbols (`p<id>`) for every word in `utterances`.
/// Pseudo-phones are shared across languages, so the symbol set is too.
pub fn synthetic_lexicon(languages: &[SyntheticLanguageSpec], utterances: &[Utterance]) -> Result<PhonemeLexicon> {
    let mut lexicon = PhonemeLexicon::default();
    for u in utterances {
        let lang = languages
            .iter()
            .find(|l| l.name == u.language)
            .ok_or_else(|| invalid!("utterance `{}` uses unknown language `{}`", u.id, u.language))?;
        for word in u.text.split_whitespace() {
            let mut symbols = Vec::new();
            for c in word.chars() {
                let program = lang
                    .program(c)
                    .ok_or_else(|| invalid!("language `{}` has no program for `{c}`", lang.name))?;
                symbols.extend(program.iter().map(|(p, _)| format!("p{p}")));
            }
            lexicon.insert(&u.language, word, symbols);
        }
    }
    Ok(lexicon)
}

/// Harmonic groups of 250 Hz partials, roughly even on a mel scale.
const HARMONIC_GROUPS: [(u32, u32); 8] = [(1, 1), (2, 2), (3, 4), (5, 6), (7, 9), (10, 13), (14, 19), (20, 31)];

/// Codeword `p` of the extended [8,4,4] Hamming code: any two differ in at least four groups.
fn hamming_codeword(p: u32) -> [bool; 8] {
    let d = [p & 1 != 0, p & 2 != 0, p & 4 != 0, p & 8 != 0];
    let p1 = d[0] ^ d[1] ^ d[3];
    let p2 = d[0] ^ d[2] ^ d[3];
    let p3 = d[1] ^ d[2] ^ d[3];
    let all = d[0] ^ d[1] ^ d[2] ^ d[3] ^ p1 ^ p2 ^ p3;
    [d[0], d[1], d[2], d[3], p1, p2, p3, all]
}

/// Sixteen prototypes over harmonics of 250 Hz up to 7.75 kHz. Each harmonic
/// group is loud or 20 dB down according to the phone's codeword, so every
/// mel band separates half the phones from the other half.
fn default_prototypes() -> BTreeMap<u32, Prototype> {
    let level = |on: bool| if on { 1.0 } else { 0.1 };
    let raw: Vec<(Vec<f64>, Vec<f64>)> = (0..16u32)
        .map(|p| {
            let code = hamming_codeword(p);
            HARMONIC_GROUPS
                .iter()
                .zip(code)
                .flat_map(|(&(lo, hi), on)| (lo..=hi).map(move |h| (250.0 * h as f64, level(on))))
                .unzip()
        })
        .collect();
    let loudest = raw.iter().map(|(_, a)| a.iter().sum::<f64>()).fold(0.0, f64::max);
    raw.into_iter()
        .enumerate()
        .map(|(p, (frequencies, a))| {
            let amplitudes = a.iter().map(|v| 0.4 * v / loudest).collect();
            // Schroeder phases keep neighbouring harmonics from cancelling
            // inside a window and keep the crest factor low.
            let n = frequencies.len() as f64;
            let phases = (1..=frequencies.len()).map(|h| PI * (h * (h - 1)) as f64 / n).collect();
            (
                p as u32,
                Prototype {
                    frequencies,
                    amplitudes,
                    phases,
                },
            )
        })
        .collect()
}

/// Three languages with disjoint scripts over one shared set of sixteen
/// pseudo-phones; the space grapheme is a short pause-like vowel everywhere.
pub fn default_languages() -> Vec<SyntheticLanguageSpec> {
    let prototypes = default_prototypes();
    let scripts: [(&str, &str, [u32; 8]); 3] = [
        ("L1", "abcdefgh", [0, 1, 2, 3, 4, 5, 6, 7]),
        ("L2", "αβγδεζηθ", [5, 6, 7, 8, 9, 10, 11, 12]),
        ("L3", "бвгджзик", [10, 11, 12, 13, 14, 0, 1, 2]),
    ];
    scripts
        .iter()
        .enumerate()
        .map(|(li, (name, letters, phones))| {
            let mut programs = BTreeMap::new();
            for (j, (c, &phone)) in letters.chars().zip(phones).enumerate() {
                let frames = 2 + ((j + li) % 4) as u32;
                programs.insert(c.to_string(), vec![(phone, frames)]);
            }
            programs.insert(" ".to_string(), vec![(15, 2)]);
            let used: BTreeSet<u32> = programs.values().flatten().map(|(p, _)| *p).collect();
            SyntheticLanguageSpec {
                name: name.to_string(),
                grapheme_programs: programs,
                prototypes: prototypes
                    .iter()
                    .filter(|(id, _)| used.contains(id))
                    .map(|(id, p)| (*id, p.clone()))
                    .collect(),
            }
        })
        .collect()
}

/// Four speakers told apart by gain alone.
pub fn default_speakers() -> Vec<SyntheticSpeakerSpec> {
    [("s1", 0.95, 0.0), ("s2", 0.45, 0.0), ("s3", 0.2, 0.0), ("s4", 0.09, 0.0)]
        .iter()
        .map(|&(name, gain, tilt)| SyntheticSpeakerSpec {
            name: name.to_string(),
            f0_scale: 1.0,
            spectral_tilt: tilt,
            gain,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_language() -> SyntheticLanguageSpec {
        let mut prototypes = BTreeMap::new();
        prototypes.insert(
            1,
            Prototype {
                frequencies: vec![500.0],
                amplitudes: vec![0.5],
                phases: vec![],
            },
        );
        prototypes.insert(
            2,
            Prototype {
                frequencies: vec![1500.0],
                amplitudes: vec![0.5],
                phases: vec![],
            },
        );
        let mut programs = BTreeMap::new();
        programs.insert("a".to_string(), vec![(1, 2), (2, 1)]);
        SyntheticLanguageSpec {
            name: "T".into(),
            grapheme_programs: programs,
            prototypes,
        }
    }

    fn flat_speaker(name: &str) -> SyntheticSpeakerSpec {
        SyntheticSpeakerSpec {
            name: name.into(),
            f0_scale: 1.0,
            spectral_tilt: 0.0,
            gain: 1.0,
        }
    }

    #[test]
    fn single_grapheme_program_expands_to_frames() {
        let cfg = SyntheticCorpusConfig::default();
        let (w, units, durations) = render_utterance(&tiny_language(), &flat_speaker("s"), "a", &cfg).unwrap();
        assert_eq!(units.as_slice(), [1, 1, 2]);
        assert_eq!(durations.as_slice(), [3]);
        assert_eq!(w.len(), 3 * 64);
    }

    #[test]
    fn same_text_has_same_units_for_every_speaker() {
        let cfg = SyntheticCorpusConfig {
            words_per_text: (1, 1),
            graphemes_per_word: (1, 1),
            ..Default::default()
        };
        let mut quiet = flat_speaker("q");
        quiet.gain = 0.3;
        let corpus = generate_synthetic_corpus(&[tiny_language()], &[flat_speaker("p"), quiet], 1, 3, &cfg).unwrap();
        assert_eq!(corpus.utterances.len(), 2);
        assert_eq!(corpus.utterances[0].units, corpus.utterances[1].units);
        assert_ne!(corpus.utterances[0].waveform, corpus.utterances[1].waveform);
    }

    #[test]
    fn same_seed_gives_bit_identical_audio() {
        let cfg = SyntheticCorpusConfig::default();
        let a = generate_synthetic_corpus(&default_languages(), &default_speakers(), 3, 11, &cfg).unwrap();
        let b = generate_synthetic_corpus(&default_languages(), &default_speakers(), 3, 11, &cfg).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert!(x.waveform.samples.iter().zip(&y.waveform.samples).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = generate_synthetic_corpus(&default_languages(), &default_speakers(), 3, 12, &cfg).unwrap();
        assert_ne!(a.manifest(), c.manifest());
    }

    #[test]
    fn durations_units_and_samples_agree() {
        let cfg = SyntheticCorpusConfig::default();
        let corpus = generate_synthetic_corpus(&default_languages(), &default_speakers(), 5, 1, &cfg).unwrap();
        for u in &corpus.utterances {
            assert_eq!(u.durations.total(), u.units.len());
            assert_eq!(u.units.len(), u.waveform.len() / cfg.hop);
            assert_eq!(u.waveform.len() % cfg.hop, 0);
            assert_eq!(u.durations.len(), u.utterance.text.chars().count());
            assert!(u.waveform.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn nyquist_violation_is_rejected() {
        let mut fast = flat_speaker("f");
        fast.f0_scale = 20.0;
        let cfg = SyntheticCorpusConfig {
            words_per_text: (1, 1),
            ..Default::default()
        };
        let err = generate_synthetic_corpus(&[tiny_language()], &[fast], 1, 0, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("Nyquist"), "{err}");
    }

    #[test]
    fn empty_program_is_rejected() {
        let mut lang = tiny_language();
        lang.grapheme_programs.insert("b".into(), vec![]);
        assert!(lang.validate().is_err());
        let mut zero = tiny_language();
        zero.grapheme_programs.insert("b".into(), vec![(1, 0)]);
        assert!(zero.validate().is_err());
    }

    #[test]
    fn specs_round_trip_through_json() {
        for lang in default_languages() {
            let text = serde_json::to_string(&lang).unwrap();
            assert_eq!(serde_json::from_str::<SyntheticLanguageSpec>(&text).unwrap(), lang);
        }
        let spk = default_speakers();
        let text = serde_json::to_string(&spk).unwrap();
        assert_eq!(serde_json::from_str::<Vec<SyntheticSpeakerSpec>>(&text).unwrap(), spk);
    }

    #[test]
    fn lexicon_uses_shared_pseudo_phone_symbols() {
        let cfg = SyntheticCorpusConfig::default();
        let langs = default_languages();
        let corpus = generate_synthetic_corpus(&langs, &default_speakers()[..1], 4, 2, &cfg).unwrap();
        let lex = synthetic_lexicon(&langs, &corpus.manifest()).unwrap();
        let l1 = lex.lookup("L1", "ab").map(|s| s.to_vec());
        if let Some(symbols) = l1 {
            assert_eq!(symbols, ["p0", "p1"]);
        }
        for u in corpus.manifest() {
            for w in u.text.split_whitespace() {
                assert!(lex.lookup(&u.language, w).is_some());
            }
        }
    }
}
