//! Multilingual text front-end: one vocabulary shared by every language, built
//! either from characters or from lexicon phonemes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{invalid, Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const FIRST_SYMBOL_ID: u32 = 2;

/// Emitted between words in phoneme mode.
pub const WORD_BOUNDARY: &str = "|";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Character,
    Phoneme,
}

/// What to do with symbols (or lexicon words) the front-end has never seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnkPolicy {
    #[default]
    Strict,
    Lenient,
}

/// Collapse whitespace runs to single spaces and trim. Case is preserved.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Per-language word → phoneme-symbol entries. All languages draw from one symbol set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PhonemeLexicon {
    entries: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl PhonemeLexicon {
    pub fn insert(&mut self, language: &str, word: &str, symbols: Vec<String>) {
        self.entries
            .entry(language.to_string())
            .or_default()
            .insert(word.to_string(), symbols);
    }

    pub fn lookup(&self, language: &str, word: &str) -> Option<&[String]> {
        self.entries.get(language)?.get(word).map(Vec::as_slice)
    }

    /// The shared symbol set.
    pub fn symbols(&self) -> BTreeSet<&str> {
        self.entries
            .values()
            .flat_map(|m| m.values())
            .flatten()
            .map(String::as_str)
            .collect()
    }

    /// Parse `language<TAB>word<TAB>sym1 sym2 …` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Record {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [language, word, symbols] = fields.as_slice() else {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let symbols: Vec<String> = symbols.split_whitespace().map(str::to_string).collect();
            if language.is_empty() || word.is_empty() || symbols.is_empty() {
                return Err(err("empty language, word or pronunciation".into()));
            }
            if symbols.iter().any(|s| s == WORD_BOUNDARY) {
                return Err(err(format!("`{WORD_BOUNDARY}` is reserved for word boundaries")));
            }
            if let Some(existing) = lex.lookup(language, word) {
                if existing != symbols.as_slice() {
                    return Err(err(format!("conflicting entries for `{word}`")));
                }
            }
            lex.insert(language, word, symbols);
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (lang, words) in &self.entries {
            for (word, symbols) in words {
                out.push_str(&format!("{lang}\t{word}\t{}\n", symbols.join(" ")));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    mode: TextMode,
    symbols: Vec<String>,
}

/// Sorted symbol list. Ids 0 and 1 are PAD and UNK; symbol `i` has id `i + 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    mode: TextMode,
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(mode: TextMode, symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(invalid!("empty vocabulary symbol"));
            }
            if index.insert(s.clone(), i as u32 + FIRST_SYMBOL_ID).is_some() {
                return Err(invalid!("duplicate vocabulary symbol `{s}`"));
            }
        }
        Ok(Self { mode, symbols, index })
    }

    pub fn mode(&self) -> TextMode {
        self.mode
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Number of ids including PAD and UNK.
    pub fn size(&self) -> usize {
        self.symbols.len() + FIRST_SYMBOL_ID as usize
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        id.checked_sub(FIRST_SYMBOL_ID)
            .and_then(|i| self.symbols.get(i as usize))
            .map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabularyFile {
            mode: self.mode,
            symbols: self.symbols.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabularyFile = serde_json::from_str(text)?;
        Self::new(f.mode, f.symbols)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Token ids for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub language: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Symbols of `text` before id lookup. Missing lexicon words yield `None` entries
/// under the lenient policy.
fn symbolize(
    text: &str,
    language: &str,
    mode: TextMode,
    lexicon: Option<&PhonemeLexicon>,
    policy: UnkPolicy,
) -> Result<Vec<Option<String>>> {
    let norm = normalize_text(text);
    if norm.is_empty() {
        return Err(invalid!("text is empty"));
    }
    match mode {
        TextMode::Character => Ok(norm.chars().map(|c| Some(c.to_string())).collect()),
        TextMode::Phoneme => {
            let lexicon = lexicon.ok_or_else(|| invalid!("phoneme mode needs a lexicon"))?;
            let mut out = Vec::new();
            for (i, word) in norm.split(' ').enumerate() {
                if i > 0 {
                    out.push(Some(WORD_BOUNDARY.to_string()));
                }
                match lexicon.lookup(language, word) {
                    Some(symbols) => out.extend(symbols.iter().cloned().map(Some)),
                    None if policy == UnkPolicy::Lenient => out.push(None),
                    None => {
                        return Err(Error::MissingWord {
                            language: language.to_string(),
                            word: word.to_string(),
                        })
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Distinct symbols across the corpus, sorted, shared by all languages.
pub fn build_vocabulary(
    utterances: &[Utterance],
    mode: TextMode,
    lexicon: Option<&PhonemeLexicon>,
    policy: UnkPolicy,
) -> Result<Vocabulary> {
    let mut symbols = BTreeSet::new();
    for u in utterances {
        for s in symbolize(&u.text, &u.language, mode, lexicon, policy)?.into_iter().flatten() {
            symbols.insert(s);
        }
    }
    Vocabulary::new(mode, symbols.into_iter().collect())
}

pub fn encode(
    text: &str,
    language: &str,
    vocab: &Vocabulary,
    lexicon: Option<&PhonemeLexicon>,
    policy: UnkPolicy,
) -> Result<TokenSequence> {
    let symbols = symbolize(text, language, vocab.mode(), lexicon, policy)?;
    let mut ids = Vec::with_capacity(symbols.len());
    for s in symbols {
        let id = match s.as_deref().and_then(|s| vocab.id(s)) {
            Some(id) => id,
            None if policy == UnkPolicy::Lenient => UNK_ID,
            None => return Err(Error::UnknownSymbol(s.unwrap_or_default())),
        };
        ids.push(id);
    }
    Ok(TokenSequence {
        ids,
        language: language.to_string(),
    })
}

/// Inverse of [`encode`] for character vocabularies.
pub fn decode(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    if vocab.mode() == TextMode::Phoneme {
        return Err(invalid!("decoding phoneme tokens is not supported (lossy)"));
    }
    if tokens.is_empty() {
        return Err(invalid!("cannot decode an empty token sequence"));
    }
    let mut out = String::new();
    for &id in &tokens.ids {
        match id {
            PAD_ID => return Err(invalid!("PAD id in token sequence")),
            UNK_ID => out.push(char::REPLACEMENT_CHARACTER),
            _ => out.push_str(
                vocab
                    .symbol(id)
                    .ok_or_else(|| invalid!("token id {id} is outside the vocabulary (size {})", vocab.size()))?,
            ),
        }
    }
    Ok(out)
}

/// Bundles a vocabulary with its lexicon and UNK policy.
#[derive(Debug, Clone)]
pub struct TextFrontend {
    pub vocab: Vocabulary,
    pub lexicon: Option<PhonemeLexicon>,
    pub policy: UnkPolicy,
}

impl TextFrontend {
    pub fn encode(&self, text: &str, language: &str) -> Result<TokenSequence> {
        encode(text, language, &self.vocab, self.lexicon.as_ref(), self.policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(id: &str, text: &str, language: &str) -> Utterance {
        Utterance {
            id: id.into(),
            audio_path: String::new(),
            text: text.into(),
            language: language.into(),
            speaker: "s".into(),
        }
    }

    fn char_vocab(texts: &[&str]) -> Vocabulary {
        let us: Vec<_> = texts.iter().enumerate().map(|(i, t)| utt(&i.to_string(), t, "L1")).collect();
        build_vocabulary(&us, TextMode::Character, None, UnkPolicy::Strict).unwrap()
    }

    #[test]
    fn character_vocabulary_is_sorted_from_two() {
        let v = char_vocab(&["ab", "ba"]);
        assert_eq!(v.symbols(), ["a", "b"]);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn shared_symbols_across_languages_get_one_entry() {
        let us = [utt("1", "ab", "L1"), utt("2", "ac", "L2")];
        let v = build_vocabulary(&us, TextMode::Character, None, UnkPolicy::Strict).unwrap();
        assert_eq!(v.symbols(), ["a", "b", "c"]);

        let mut lex = PhonemeLexicon::default();
        lex.insert("L1", "ab", vec!["a".into(), "b".into()]);
        lex.insert("L2", "ac", vec!["a".into(), "ʃ".into()]);
        let v = build_vocabulary(&us, TextMode::Phoneme, Some(&lex), UnkPolicy::Strict).unwrap();
        assert_eq!(v.symbols(), ["a", "b", "ʃ"]);
    }

    #[test]
    fn strict_phoneme_mode_names_the_missing_word() {
        let lex = PhonemeLexicon::default();
        let err = build_vocabulary(&[utt("1", "hola", "es")], TextMode::Phoneme, Some(&lex), UnkPolicy::Strict)
            .unwrap_err()
            .to_string();
        assert!(err.contains("hola"), "{err}");
        let v = build_vocabulary(&[utt("1", "hola", "es")], TextMode::Phoneme, Some(&lex), UnkPolicy::Lenient).unwrap();
        assert!(v.symbols().is_empty());
    }

    #[test]
    fn encode_and_decode_characters() {
        let v = char_vocab(&["ab"]);
        let t = encode("ab", "L1", &v, None, UnkPolicy::Strict).unwrap();
        assert_eq!(t.ids, [2, 3]);
        let ba = encode("ba", "L1", &v, None, UnkPolicy::Strict).unwrap();
        assert_eq!(decode(&ba, &v).unwrap(), "ba");
        assert_eq!(
            decode(&TokenSequence { ids: vec![2, 3], language: "L1".into() }, &v).unwrap(),
            "ab"
        );
    }

    #[test]
    fn unknown_symbols_follow_the_policy() {
        let v = char_vocab(&["ab"]);
        assert_eq!(encode("z", "L1", &v, None, UnkPolicy::Lenient).unwrap().ids, [UNK_ID]);
        assert!(matches!(
            encode("z", "L1", &v, None, UnkPolicy::Strict),
            Err(Error::UnknownSymbol(_))
        ));
    }

    #[test]
    fn encode_rejects_empty_text() {
        let v = char_vocab(&["ab"]);
        assert!(encode("   ", "L1", &v, None, UnkPolicy::Lenient).is_err());
    }

    #[test]
    fn decode_errors() {
        let v = char_vocab(&["ab"]);
        let empty = TokenSequence { ids: vec![], language: "L1".into() };
        assert!(decode(&empty, &v).is_err());
        let big = TokenSequence { ids: vec![9], language: "L1".into() };
        assert!(decode(&big, &v).is_err());
        let phon = Vocabulary::new(TextMode::Phoneme, vec!["a".into()]).unwrap();
        let t = TokenSequence { ids: vec![2], language: "L1".into() };
        assert!(decode(&t, &phon).is_err());
    }

    #[test]
    fn phoneme_encoding_inserts_word_boundaries() {
        let mut lex = PhonemeLexicon::default();
        lex.insert("de", "ja", vec!["j".into(), "a".into()]);
        lex.insert("de", "nein", vec!["n".into(), "aɪ".into(), "n".into()]);
        let us = [utt("1", "ja  nein", "de")];
        let v = build_vocabulary(&us, TextMode::Phoneme, Some(&lex), UnkPolicy::Strict).unwrap();
        let t = encode("ja nein", "de", &v, Some(&lex), UnkPolicy::Strict).unwrap();
        let syms: Vec<_> = t.ids.iter().map(|&i| v.symbol(i).unwrap()).collect();
        assert_eq!(syms, ["j", "a", "|", "n", "aɪ", "n"]);
    }

    #[test]
    fn whitespace_is_collapsed_not_lowercased() {
        assert_eq!(normalize_text("  Ab \t\n c  "), "Ab c");
    }

    #[test]
    fn lexicon_file_round_trips() {
        let text = "fr\tbonjour\tb ɔ̃ ʒ u ʁ\nhi\tनमस्ते\tn ə m ə s t e\n";
        let lex = PhonemeLexicon::parse(text, "lex.tsv").unwrap();
        assert_eq!(lex.lookup("fr", "bonjour").unwrap().len(), 5);
        assert_eq!(PhonemeLexicon::parse(&lex.to_tsv(), "again").unwrap(), lex);
        let bad = PhonemeLexicon::parse("fr\tbonjour\n", "bad.tsv").unwrap_err().to_string();
        assert!(bad.contains("bad.tsv:1"), "{bad}");
    }

    #[test]
    fn vocabulary_file_round_trips() {
        let v = char_vocab(&["hello world"]);
        assert_eq!(Vocabulary::from_json(&v.to_json().unwrap()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(text in "[abc xyz]{1,30}") {
            let v = char_vocab(&["abc xyz"]);
            let norm = normalize_text(&text);
            prop_assume!(!norm.is_empty());
            let t = encode(&text, "L1", &v, None, UnkPolicy::Strict).unwrap();
            prop_assert_eq!(decode(&t, &v).unwrap(), norm);
        }

        #[test]
        fn vocabulary_ignores_corpus_order(mut texts in proptest::collection::vec("[a-fα-γ ]{1,8}", 1..6), seed in any::<u64>()) {
            texts.retain(|t| !t.trim().is_empty());
            prop_assume!(!texts.is_empty());
            let us: Vec<_> = texts.iter().enumerate().map(|(i, t)| utt(&i.to_string(), t, "L")).collect();
            let mut shuffled = us.clone();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            shuffled.reverse();
            let a = build_vocabulary(&us, TextMode::Character, None, UnkPolicy::Strict).unwrap();
            let b = build_vocabulary(&shuffled, TextMode::Character, None, UnkPolicy::Strict).unwrap();
            prop_assert_eq!(&a, &b);
            let twice: Vec<_> = us.iter().chain(&us).cloned().collect();
            prop_assert_eq!(build_vocabulary(&twice, TextMode::Character, None, UnkPolicy::Strict).unwrap(), a);
        }
    }
}
