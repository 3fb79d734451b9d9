//! Word-level tokenizer and vocabulary with reserved control tokens.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const CLS: &str = "<cls>";
pub const MASK: &str = "<mask>";
pub const UNK: &str = "<unk>";

/// Default number of reserved speaker tokens; covers the largest public
/// multi-party scenes.
pub const DEFAULT_SPEAKER_CAPACITY: usize = 9;

const FIXED_RESERVED: usize = 4; // pad, cls, mask, unk

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercased whitespace-and-punctuation segmentation. A token is either a
/// run of alphanumerics (apostrophes glued when flanked by alphanumerics,
/// so contractions survive) or a single non-whitespace symbol.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if is_word_char(c) {
            let mut word = String::new();
            while i < chars.len() {
                let c = chars[i];
                if is_word_char(c) {
                    word.push(c);
                    i += 1;
                } else if is_apostrophe(c)
                    && i + 1 < chars.len()
                    && is_word_char(chars[i + 1])
                    && !word.is_empty()
                {
                    word.push('\'');
                    i += 1;
                } else {
                    break;
                }
            }
            tokens.push(word);
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

/// Token ↔ id map with stable reserved ids:
/// 0 `<pad>`, 1 `<cls>`, 2 `<mask>`, 3 `<unk>`, then `<s_1>..<s_K>`,
/// then corpus tokens in first-appearance order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    speaker_capacity: usize,
}

impl Vocabulary {
    pub fn with_reserved(speaker_capacity: usize) -> Vocabulary {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            speaker_capacity,
        };
        for t in [PAD, CLS, MASK, UNK] {
            v.push(t.to_string());
        }
        for j in 1..=speaker_capacity {
            v.push(format!("<s_{j}>"));
        }
        v
    }

    /// Build from an iterator of texts, reserving `speaker_capacity` speaker tokens.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, speaker_capacity: usize) -> Vocabulary {
        let mut v = Vocabulary::with_reserved(speaker_capacity);
        for text in texts {
            for token in tokenize(text) {
                v.insert(token);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn cls_id(&self) -> usize {
        1
    }

    pub fn mask_id(&self) -> usize {
        2
    }

    pub fn unk_id(&self) -> usize {
        3
    }

    pub fn speaker_capacity(&self) -> usize {
        self.speaker_capacity
    }

    /// Id of the j-th speaker token, j in 1..=capacity.
    pub fn speaker_id(&self, ordinal: usize) -> Result<usize> {
        if ordinal == 0 || ordinal > self.speaker_capacity {
            return Err(Error::contract(format!(
                "speaker ordinal {ordinal} outside 1..={}",
                self.speaker_capacity
            )));
        }
        Ok(FIXED_RESERVED + ordinal - 1)
    }

    /// First id after the reserved block.
    pub fn first_regular_id(&self) -> usize {
        FIXED_RESERVED + self.speaker_capacity
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Tokenize and map to ids, unknown tokens to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.tokens.get(id).cloned().unwrap_or_else(|| UNK.to_string()))
            .collect()
    }

    /// All tokens in id order (for embedding in checkpoints).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuild from a token list in id order (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>, speaker_capacity: usize) -> Result<Vocabulary> {
        let expected = Vocabulary::with_reserved(speaker_capacity);
        if tokens.len() < expected.len()
            || tokens[..expected.len()] != expected.tokens[..]
        {
            return Err(Error::Checkpoint(
                "vocabulary reserved block does not match the declared speaker capacity".to_string(),
            ));
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            speaker_capacity,
        };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token `{t}`")));
            }
            v.push(t);
        }
        Ok(v)
    }

    /// Write the vocabulary file: a header line declaring the reserved layout,
    /// then one token per line where the i-th token line holds id i.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "#compm-vocab v1 speakers={}", self.speaker_capacity)?;
        for t in &self.tokens {
            writeln!(file, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data {
                path: path.display().to_string(),
                line: 1,
                msg: "empty vocabulary file".to_string(),
            })?
            .map_err(Error::Io)?;
        let capacity = header
            .strip_prefix("#compm-vocab v1 speakers=")
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Data {
                path: path.display().to_string(),
                line: 1,
                msg: format!("bad vocabulary header `{header}`"),
            })?;
        let mut tokens = Vec::new();
        for line in lines {
            tokens.push(line.map_err(Error::Io)?);
        }
        Vocabulary::from_tokens(tokens, capacity)
    }
}
