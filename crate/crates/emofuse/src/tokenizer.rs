//! Trainable WordPiece-style subword tokenizer.
//!
//! The vocabulary is learned from a corpus: special tokens, then single
//! characters, then greedy highest-frequency pair merges emitted as
//! continuation (`##`) pieces. Encoding lowercases, splits on whitespace,
//! and segments each word by greedy longest-match-first; any word that
//! cannot be fully segmented becomes `[UNK]`. Sequences are framed as
//! `[CLS] … [SEP]`, truncated to fit, and padded with an accompanying mask.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Marker prefix for word-internal pieces.
pub const CONTINUATION_PREFIX: &str = "##";

const SPECIALS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

/// Immutable token ↔ id bijection with fixed special-token ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Learns a vocabulary of at most `target_size` entries.
    ///
    /// Specials occupy ids 0..=3; single characters follow, most frequent
    /// first; the remainder is filled by greedy pair merges. Frequency ties
    /// break lexicographically, so the result is deterministic.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        if target_size < 10 {
            return Err(Error::InvalidArgument(format!(
                "target_size must be at least 10, got {target_size}"
            )));
        }

        // Word frequencies over the normalized corpus.
        let mut word_freq: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for word in text.as_ref().to_lowercase().split_whitespace() {
                *word_freq.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::InvalidArgument(
                "corpus contains no tokens".into(),
            ));
        }

        // Each word as a symbol sequence: first char plain, rest ##-prefixed.
        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .iter()
            .map(|(w, &f)| {
                let symbols = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION_PREFIX}{c}")
                        }
                    })
                    .collect();
                (symbols, f)
            })
            .collect();
        // Fixed iteration order for the merge loop.
        words.sort_by(|a, b| a.0.cmp(&b.0));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        // Alphabet, most frequent first, ties lexicographic.
        let mut char_freq: HashMap<String, u64> = HashMap::new();
        for (symbols, f) in &words {
            for s in symbols {
                *char_freq.entry(s.clone()).or_insert(0) += f;
            }
        }
        let mut alphabet: Vec<(String, u64)> = char_freq.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (sym, _) in alphabet {
            if tokens.len() >= target_size {
                break;
            }
            seen.insert(sym.clone(), tokens.len() as u32);
            tokens.push(sym);
        }

        // Greedy merges until the size budget is spent or nothing repeats.
        while tokens.len() < target_size {
            let mut pair_freq: HashMap<(String, String), u64> = HashMap::new();
            for (symbols, f) in &words {
                for pair in symbols.windows(2) {
                    if seen.contains_key(&pair[0]) && seen.contains_key(&pair[1]) {
                        *pair_freq
                            .entry((pair[0].clone(), pair[1].clone()))
                            .or_insert(0) += f;
                    }
                }
            }
            let Some((best, _)) = pair_freq.into_iter().fold(None, |acc, (pair, count)| {
                match &acc {
                    Some((best_pair, best_count)) => {
                        if count > *best_count || (count == *best_count && pair < *best_pair) {
                            Some((pair, count))
                        } else {
                            acc
                        }
                    }
                    None => Some((pair, count)),
                }
            }) else {
                break;
            };

            let merged = format!(
                "{}{}",
                best.0,
                best.1.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&best.1)
            );
            for (symbols, _) in &mut words {
                let mut i = 0;
                while i + 1 < symbols.len() {
                    if symbols[i] == best.0 && symbols[i + 1] == best.1 {
                        symbols[i] = merged.clone();
                        symbols.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            if !seen.contains_key(&merged) {
                seen.insert(merged.clone(), tokens.len() as u32);
                tokens.push(merged);
            }
        }

        Ok(Vocabulary {
            token_to_id: seen,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Writes the vocabulary as one token per line (line number = id).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for token in &self.id_to_token {
            let _ = writeln!(out, "{token}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = content.lines().map(str::to_string).collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Malformed {
                    line: i + 1,
                    msg: format!("expected special token {special}"),
                });
            }
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Malformed {
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Malformed {
                    line: i + 1,
                    msg: format!("duplicate token {t}"),
                });
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }
}

/// A fixed-length, `[CLS] … [SEP]`-framed, padded id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    /// 1 for real positions (including CLS/SEP), 0 for padding.
    pub mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenizedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Key positions a query may attend to.
    pub fn valid_positions(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }
}

/// Encodes one text: lowercase, whitespace split, greedy longest-match
/// subword segmentation, truncation to `max_len − 2` content pieces, then
/// framing and padding.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    let mut content: Vec<u32> = Vec::new();
    'words: for word in text.to_lowercase().split_whitespace() {
        if content.len() >= max_len - 2 {
            break;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces: Vec<u32> = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut matched = None;
            for end in (pos + 1..=chars.len()).rev() {
                let fragment: String = chars[pos..end].iter().collect();
                let candidate = if pos == 0 {
                    fragment
                } else {
                    format!("{CONTINUATION_PREFIX}{fragment}")
                };
                if let Some(id) = vocab.id_of(&candidate) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    pieces.push(id);
                    pos = end;
                }
                None => {
                    content.push(UNK_ID);
                    continue 'words;
                }
            }
        }
        content.extend(pieces);
    }
    content.truncate(max_len - 2);

    let true_length = content.len() + 2;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(content);
    ids.push(SEP_ID);
    ids.resize(max_len, PAD_ID);
    let mask: Vec<u8> = (0..max_len).map(|i| u8::from(i < true_length)).collect();
    Ok(TokenizedSequence {
        ids,
        mask,
        true_length,
    })
}

/// Elementwise [`encode`] with a shared `max_len`.
pub fn batch_encode<S: AsRef<str>>(
    texts: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenizedSequence>> {
    texts
        .iter()
        .map(|t| encode(t.as_ref(), vocab, max_len))
        .collect()
}

/// Inverse of [`encode`] up to normalization: drops specials and padding,
/// joins continuation pieces, separates words with single spaces.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == PAD_ID || id == CLS_ID || id == SEP_ID {
            continue;
        }
        let token = vocab.token(id).unwrap_or(UNK_TOKEN);
        if let Some(rest) = token.strip_prefix(CONTINUATION_PREFIX) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(token);
        }
    }
    out
}
