//! Conversation corpora: JSONL ingestion, taxonomies, vocabulary, speaker
//! tokens, and context assembly.
//!
//! The interchange format is UTF-8 JSONL, one turn per line:
//!
//! ```text
//! {"conv_id": "d42", "turn": 1, "speaker": "chandler", "text": "...", "label": "anger"}
//! ```
//!
//! Turns are grouped by `conv_id` and sorted by `turn`; the `label` field is
//! optional at inference time.

mod context;
mod taxonomy;
mod vocab;

pub use context::{assemble_context, assign_speaker_tokens, SpeakerMap};
pub use taxonomy::{builtin_taxonomy, map_to_sentiment, HeadlineMetric, LabelTaxonomy};
pub use vocab::{tokenize, Vocabulary, DEFAULT_SPEAKER_CAPACITY};

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// One turn of a conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    /// Gold class name; absent at inference time.
    pub label: Option<String>,
}

/// An ordered sequence of turns with a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speakers in first-appearance order.
    pub fn participants(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker.as_str()) {
                seen.push(u.speaker.as_str());
            }
        }
        seen
    }

    /// Turn numbers (1-based) of prior turns by the same speaker as turn `t`.
    pub fn prior_same_speaker_turns(&self, t: usize) -> Vec<usize> {
        let speaker = &self.utterances[t - 1].speaker;
        (1..t).filter(|&i| &self.utterances[i - 1].speaker == speaker).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    conv_id: String,
    turn: i64,
    speaker: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Load a JSONL corpus. When a taxonomy is given, labels are validated and
/// canonicalized (grouping maps applied).
pub fn load_corpus(path: &Path, taxonomy: Option<&LabelTaxonomy>) -> Result<Vec<Conversation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open corpus: {e}"),
    })?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();

    // conv_id → (first-appearance rank, turns)
    let mut order: Vec<String> = Vec::new();
    let mut turns: HashMap<String, Vec<(i64, usize, Utterance)>> = HashMap::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|e| Error::Data {
            path: path_str.clone(),
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TurnRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path_str.clone(),
            line: line_no,
            msg: format!("invalid turn record: {e}"),
        })?;
        let text = record.text.trim().to_string();
        if text.is_empty() {
            return Err(Error::Data {
                path: path_str.clone(),
                line: line_no,
                msg: "utterance text is empty after normalization".to_string(),
            });
        }
        let label = match (&record.label, taxonomy) {
            (Some(raw), Some(tax)) => Some(tax.canonicalize(raw)?),
            (Some(raw), None) => Some(raw.clone()),
            (None, _) => None,
        };
        let entry = turns.entry(record.conv_id.clone()).or_insert_with(|| {
            order.push(record.conv_id.clone());
            Vec::new()
        });
        if entry.iter().any(|(t, _, _)| *t == record.turn) {
            return Err(Error::Data {
                path: path_str.clone(),
                line: line_no,
                msg: format!(
                    "duplicate turn {} in conversation `{}`",
                    record.turn, record.conv_id
                ),
            });
        }
        entry.push((record.turn, line_no, Utterance { speaker: record.speaker, text, label }));
    }

    let mut conversations = Vec::with_capacity(order.len());
    for id in order {
        let mut list = turns.remove(&id).expect("grouped turns");
        list.sort_by_key(|(t, _, _)| *t);
        let utterances: Vec<Utterance> = list.into_iter().map(|(_, _, u)| u).collect();
        let conv = Conversation { id, utterances };
        if conv.len() < 2 {
            log::warn!("conversation `{}` has a single turn; keeping it", conv.id);
        } else if conv.participants().len() < 2 {
            log::warn!("conversation `{}` has a single participant; keeping it", conv.id);
        }
        conversations.push(conv);
    }
    Ok(conversations)
}

/// Serialize conversations back to canonical JSONL (turns renumbered 1..M).
pub fn corpus_to_jsonl(conversations: &[Conversation]) -> Result<String> {
    let mut out = String::new();
    for conv in conversations {
        for (i, u) in conv.utterances.iter().enumerate() {
            let record = TurnRecord {
                conv_id: conv.id.clone(),
                turn: (i + 1) as i64,
                speaker: u.speaker.clone(),
                text: u.text.clone(),
                label: u.label.clone(),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(corpus_to_jsonl(conversations)?.as_bytes())?;
    Ok(())
}

/// Deterministic conversation-level subsample: ⌈fraction·N⌉ conversations,
/// corpus order preserved.
pub fn subsample_training(
    conversations: &[Conversation],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Conversation>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid_argument(format!(
            "train fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(conversations.to_vec());
    }
    let n = conversations.len();
    let take = (fraction * n as f64).ceil() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed);
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(take).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| conversations[i].clone()).collect())
}
