//! Word-level tokenizer: lower-casing, punctuation stripping, a frequency
//! ordered vocabulary and `[CLS] … [SEP] [PAD]…` framing.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lower-cases `text` and splits it into bare words. Anything that is not
/// alphanumeric separates words, except an apostrophe flanked by
/// alphanumerics on both sides ("don't" stays one word).
pub fn normalize_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut words = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphanumeric()
            || (is_apostrophe(c)
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()));
        if keep {
            current.push(if is_apostrophe(c) { '\'' } else { c });
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        Self { tokens, index }
    }

    fn push(&mut self, token: String) -> Result<()> {
        if self.index.contains_key(&token) {
            return Err(Error::Corpus(format!(
                "duplicate vocabulary entry {token:?}"
            )));
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        Ok(())
    }

    /// Builds a vocabulary from every normalized word occurring at least
    /// `min_count` times. Ids follow descending frequency, ties broken
    /// lexicographically, so the result does not depend on corpus order.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for w in normalize_words(sentence.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Self::with_reserved();
        for (token, _) in entries {
            vocab.push(token)?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// `token<TAB>id` per line, reserved tokens first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{token}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut vocab = Self::with_reserved();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad id {id:?}"),
            })?;
            if id < RESERVED.len() {
                if RESERVED[id] != token {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("reserved id {id} must be {}", RESERVED[id]),
                    });
                }
                continue;
            }
            if id != vocab.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected id {}, found {id}", vocab.len()),
                });
            }
            vocab.push(token.to_string()).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        Ok(vocab)
    }
}

/// One framed, padded sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// 1 for real tokens (including `[CLS]`/`[SEP]`), 0 for padding.
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn keep_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Lower-cases, splits, maps OOV words to `[UNK]`, keeps at most
/// `max_len − 2` content tokens and frames them as `[CLS] … [SEP]` padded to
/// `max_len`. Segment ids are 1 through the first `[SEP]`, 0 afterwards.
pub fn encode(sentence: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max_len must be >= 3, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        normalize_words(sentence)
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w)),
    );
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);

    Ok(TokenSequence {
        token_ids: ids,
        segment_ids: (0..max_len).map(|i| usize::from(i < real)).collect(),
        position_ids: (0..max_len).collect(),
        attention_mask: (0..max_len).map(|i| u8::from(i < real)).collect(),
    })
}

/// Content tokens of a sequence, without framing or padding.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    seq.token_ids
        .iter()
        .skip(1)
        .take_while(|&&id| id != SEP)
        .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect()
}
