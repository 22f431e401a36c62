//! Byte-pair-encoding tokenizer trained on the caption corpus.
//!
//! Words are whitespace-delimited and carry a leading `▁` boundary symbol. Characters that
//! did not make it into the vocabulary fall back to `<0xNN>` byte pieces when the vocabulary
//! is large enough to hold all 256 of them, and to `<unk>` otherwise.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const WORD_START: char = '▁';
/// Room for the byte pieces plus a modest character alphabet.
const BYTE_FALLBACK_MIN_VOCAB: usize = NUM_SPECIALS + 256 + 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Every encoded sequence has exactly this length.
    pub max_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16384,
            max_len: 256,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {NUM_SPECIALS} special tokens"
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(
                "max_len must hold at least BOS and EOS".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-length token ids with a mask that is true exactly on non-PAD positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedCaption {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    specials: Vec<String>,
    max_len: usize,
    byte_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    byte_fallback: bool,
    max_len: usize,
}

fn byte_piece(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_START)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

impl Tokenizer {
    pub fn train<S: AsRef<str>>(captions: &[S], config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        if captions.is_empty() {
            return Err(Error::Empty("tokenizer training corpus".into()));
        }
        let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in captions {
            for w in c.as_ref().split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
            }
        }

        let byte_fallback = config.vocab_size >= BYTE_FALLBACK_MIN_VOCAB;
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        if byte_fallback {
            pieces.extend((0..=255u8).map(byte_piece));
        }

        let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
        for (w, &n) in &word_counts {
            *char_counts.entry(WORD_START).or_default() += n;
            for ch in w.chars() {
                *char_counts.entry(ch).or_default() += n;
            }
        }
        let mut alphabet: Vec<(char, usize)> = char_counts.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let budget = config.vocab_size - pieces.len();
        pieces.extend(
            alphabet
                .into_iter()
                .take(budget)
                .map(|(c, _)| c.to_string()),
        );

        let mut index: HashMap<String, u32> = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();

        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .iter()
            .map(|(w, &n)| (word_symbols(w), n))
            .collect();
        let mut merges = Vec::new();
        while pieces.len() < config.vocab_size {
            let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, n) in &words {
                for pair in syms.windows(2) {
                    if index.contains_key(&pair[0]) && index.contains_key(&pair[1]) {
                        *pair_counts.entry((&pair[0], &pair[1])).or_default() += n;
                    }
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (syms, _) in &mut words {
                merge_pair(syms, &a, &b, &merged);
            }
            if !index.contains_key(&merged) {
                index.insert(merged.clone(), pieces.len() as u32);
                pieces.push(merged);
            }
            merges.push((a, b));
        }
        Ok(Self::assemble(
            pieces,
            merges,
            byte_fallback,
            config.max_len,
        ))
    }

    fn assemble(
        pieces: Vec<String>,
        merges: Vec<(String, String)>,
        byte_fallback: bool,
        max_len: usize,
    ) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self {
            pieces,
            index,
            merges,
            ranks,
            byte_fallback,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    /// Subword ids of `text`, without specials or padding.
    pub fn encode_pieces(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let mut syms = word_symbols(word);
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                    .min();
                let Some(&rank) = best else { break };
                let (a, b) = &self.merges[rank];
                let merged = format!("{a}{b}");
                merge_pair(&mut syms, a, b, &merged);
            }
            for s in syms {
                match self.index.get(&s) {
                    Some(&id) => ids.push(id),
                    None if self.byte_fallback => {
                        ids.extend(s.bytes().map(|b| self.index[&byte_piece(b)]));
                    }
                    None => ids.push(UNK_ID),
                }
            }
        }
        ids
    }

    /// `[BOS] pieces [EOS]`, truncated and PAD-extended to `max_len`.
    pub fn encode(&self, text: &str) -> TokenizedCaption {
        let body = self.encode_pieces(text);
        let keep = body.len().min(self.max_len - 2);
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS_ID);
        ids.extend_from_slice(&body[..keep]);
        ids.push(EOS_ID);
        let used = ids.len();
        ids.resize(self.max_len, PAD_ID);
        let mask = (0..self.max_len).map(|i| i < used).collect();
        TokenizedCaption { ids, mask }
    }

    /// Text of `ids` with specials dropped and whitespace normalized.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            let Some(piece) = self.pieces.get(id as usize) else {
                continue;
            };
            if self.byte_fallback && (NUM_SPECIALS..NUM_SPECIALS + 256).contains(&(id as usize)) {
                bytes.push((id as usize - NUM_SPECIALS) as u8);
            } else {
                bytes.extend_from_slice(piece.as_bytes());
            }
        }
        let text = String::from_utf8_lossy(&bytes).replace(WORD_START, " ");
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            vocab: self.pieces.clone(),
            merges: self.merges.clone(),
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            max_len: self.max_len,
            byte_fallback: self.byte_fallback,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        if file.specials != SPECIALS
            || file.vocab.len() < NUM_SPECIALS
            || file.vocab[..NUM_SPECIALS] != SPECIALS
            || file.max_len < 2
        {
            return Err(Error::Invalid("malformed tokenizer file".into()));
        }
        Ok(Self::assemble(
            file.vocab,
            file.merges,
            file.byte_fallback,
            file.max_len,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn merge_pair(syms: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            syms[i] = merged.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthesize_corpus;
    use proptest::prelude::*;

    fn small(vocab_size: usize) -> TokenizerConfig {
        TokenizerConfig {
            vocab_size,
            max_len: 16,
        }
    }

    #[test]
    fn frequent_character_enters_vocab() {
        let tok = Tokenizer::train(&["a a a"], small(8)).unwrap();
        assert!(tok.contains("a"));
        assert!(tok.vocab_size() <= 8);
    }

    #[test]
    fn empty_string_encodes_to_bos_eos_then_padding() {
        let tok = Tokenizer::train(&["hello world"], small(64)).unwrap();
        let enc = tok.encode("");
        assert_eq!(&enc.ids[..2], &[BOS_ID, EOS_ID]);
        assert!(enc.ids[2..].iter().all(|&i| i == PAD_ID));
        assert_eq!(enc.ids.len(), 16);
        assert_eq!(enc.mask.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let none: [&str; 0] = [];
        assert!(Tokenizer::train(&none, small(64)).is_err());
    }

    #[test]
    fn long_caption_is_truncated_but_keeps_eos() {
        let text = "x ".repeat(100);
        let tok = Tokenizer::train(&[text.as_str()], small(32)).unwrap();
        let enc = tok.encode(&text);
        assert_eq!(enc.ids.len(), 16);
        assert_eq!(*enc.ids.last().unwrap(), EOS_ID);
        assert!(enc.mask.iter().all(|&m| m));
    }

    #[test]
    fn unseen_characters_use_byte_fallback_when_available() {
        let tok = Tokenizer::train(&["plain ascii text"], small(400)).unwrap();
        let ids = tok.encode_pieces("é");
        assert!(!ids.contains(&UNK_ID));
        assert_eq!(tok.decode(&ids), "é");
        let tiny = Tokenizer::train(&["plain ascii text"], small(20)).unwrap();
        assert!(tiny.encode_pieces("é").contains(&UNK_ID));
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let caps = [
            "line plot of loss",
            "bar chart of accuracy",
            "line plot of accuracy",
        ];
        let a = Tokenizer::train(&caps, small(60)).unwrap();
        let b = Tokenizer::train(&caps, small(60)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = Tokenizer::from_json(&a.to_json().unwrap()).unwrap();
        for cap in caps {
            assert_eq!(a.encode(cap), c.encode(cap));
        }
    }

    #[test]
    fn round_trip_over_synthetic_captions() {
        let records = synthesize_corpus(100, 21);
        let caps: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
        let tok = Tokenizer::train(
            &caps,
            TokenizerConfig {
                vocab_size: 500,
                max_len: 64,
            },
        )
        .unwrap();
        for cap in &caps {
            let enc = tok.encode(cap);
            let text = tok.decode(&enc.ids);
            assert_eq!(text, cap.split_whitespace().collect::<Vec<_>>().join(" "));
            assert_eq!(tok.encode(&text), enc);
            assert!(enc.ids.iter().all(|&i| (i as usize) < tok.vocab_size()));
        }
    }

    proptest! {
        #[test]
        fn pad_only_outside_mask(text in "[a-d ]{0,40}") {
            let tok = Tokenizer::train(&["a b c d ab cd abcd"], small(24)).unwrap();
            let enc = tok.encode(&text);
            prop_assert_eq!(enc.ids.len(), 16);
            for (id, m) in enc.ids.iter().zip(&enc.mask) {
                prop_assert_eq!(*id == PAD_ID, !*m);
            }
            prop_assert_eq!(enc.ids[0], BOS_ID);
        }
    }
}
