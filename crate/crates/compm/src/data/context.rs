//! Speaker-token assignment and context assembly.

use super::{Conversation, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::AttentionMask;

/// Speaker → reserved-token assignment for one conversation, in
/// first-appearance order (first speaker gets `<s_1>`, and so on).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerMap {
    entries: Vec<(String, usize)>, // (speaker id, 1-based ordinal)
}

impl SpeakerMap {
    /// 1-based ordinal of a speaker.
    pub fn ordinal(&self, speaker: &str) -> Option<usize> {
        self.entries.iter().find(|(s, _)| s == speaker).map(|(_, o)| *o)
    }

    /// Vocabulary id of the speaker's token.
    pub fn token_id(&self, vocab: &Vocabulary, speaker: &str) -> Result<usize> {
        let ordinal = self.ordinal(speaker).ok_or_else(|| {
            Error::contract(format!("speaker `{speaker}` not in this conversation"))
        })?;
        vocab.speaker_id(ordinal)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }
}

/// Assign speaker tokens by first appearance. Fails when the conversation has
/// more participants than the vocabulary reserves tokens for.
pub fn assign_speaker_tokens(vocab: &Vocabulary, conv: &Conversation) -> Result<SpeakerMap> {
    let participants = conv.participants();
    if participants.len() > vocab.speaker_capacity() {
        return Err(Error::SpeakerCapacity {
            conversation: conv.id.clone(),
            participants: participants.len(),
            capacity: vocab.speaker_capacity(),
        });
    }
    Ok(SpeakerMap {
        entries: participants
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i + 1))
            .collect(),
    })
}

/// Assemble the model input for turn `t` (1-based):
///
/// `<cls> ⊕ [<s_σ(p1)> tokens(u1)] ⊕ … ⊕ [<s_σ(pt)> tokens(ut)]`
///
/// When the sequence exceeds `max_len`, whole earliest turns are dropped
/// (never split), always keeping `<cls>` and turn t. If turn t alone is still
/// too long, its tokens are truncated from the front with a warning.
///
/// Speaker tokens always come from the full conversation's first-appearance
/// map, so truncation never re-labels speakers.
pub fn assemble_context(
    vocab: &Vocabulary,
    conv: &Conversation,
    t: usize,
    max_len: usize,
) -> Result<(Vec<usize>, AttentionMask)> {
    if t == 0 || t > conv.len() {
        return Err(Error::contract(format!(
            "turn {t} outside 1..={} for conversation `{}`",
            conv.len(),
            conv.id
        )));
    }
    if max_len < 3 {
        return Err(Error::invalid_argument(format!(
            "max_len {max_len} leaves no room for <cls>, a speaker token and text"
        )));
    }
    let map = assign_speaker_tokens(vocab, conv)?;

    // Per-turn blocks: speaker token followed by utterance tokens.
    let mut blocks: Vec<Vec<usize>> = Vec::with_capacity(t);
    for u in conv.utterances.iter().take(t) {
        let mut block = Vec::new();
        block.push(map.token_id(vocab, &u.speaker)?);
        block.extend(vocab.encode(&u.text));
        blocks.push(block);
    }

    let total: usize = 1 + blocks.iter().map(|b| b.len()).sum::<usize>();
    let mut start = 0;
    if total > max_len {
        // Drop whole earliest turns until the rest fits, but keep turn t.
        let mut len = total;
        while len > max_len && start < t - 1 {
            len -= blocks[start].len();
            start += 1;
        }
        if len > max_len {
            // Turn t alone is too long: keep <cls>, its speaker token, and the
            // tail of its tokens.
            let block = &blocks[t - 1];
            let keep = max_len - 2;
            log::warn!(
                "turn {t} of conversation `{}` exceeds max_len {max_len}; truncating its {} tokens to the last {keep}",
                conv.id,
                block.len() - 1
            );
            let mut ids = Vec::with_capacity(max_len);
            ids.push(vocab.cls_id());
            ids.push(block[0]);
            ids.extend_from_slice(&block[block.len() - keep..]);
            let mask = AttentionMask::all_kept(ids.len());
            return Ok((ids, mask));
        }
    }

    let mut ids = Vec::new();
    ids.push(vocab.cls_id());
    for block in &blocks[start..] {
        ids.extend_from_slice(block);
    }
    let mask = AttentionMask::all_kept(ids.len());
    Ok((ids, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Utterance;

    fn conv(speakers_texts: &[(&str, &str)]) -> Conversation {
        Conversation {
            id: "c".to_string(),
            utterances: speakers_texts
                .iter()
                .map(|(s, t)| Utterance {
                    speaker: s.to_string(),
                    text: t.to_string(),
                    label: None,
                })
                .collect(),
        }
    }

    fn vocab_for(conv: &Conversation) -> Vocabulary {
        Vocabulary::build(conv.utterances.iter().map(|u| u.text.as_str()), 9)
    }

    #[test]
    fn dyadic_conversation_uses_two_tokens() {
        let c = conv(&[("alice", "hi"), ("bob", "hello"), ("alice", "bye")]);
        let v = vocab_for(&c);
        let m = assign_speaker_tokens(&v, &c).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.ordinal("alice"), Some(1));
        assert_eq!(m.ordinal("bob"), Some(2));
        // Re-running is idempotent.
        assert_eq!(assign_speaker_tokens(&v, &c).unwrap(), m);
    }

    #[test]
    fn first_appearance_order_not_lexicographic() {
        let c = conv(&[("zoe", "one"), ("anna", "two"), ("zoe", "three")]);
        let v = vocab_for(&c);
        let m = assign_speaker_tokens(&v, &c).unwrap();
        assert_eq!(m.ordinal("zoe"), Some(1));
        assert_eq!(m.ordinal("anna"), Some(2));
    }

    #[test]
    fn capacity_overflow_is_reported() {
        let c = conv(&[("a", "x"), ("b", "x"), ("c", "x")]);
        let v = Vocabulary::build(["x"].into_iter(), 2);
        let err = assign_speaker_tokens(&v, &c).unwrap_err();
        assert!(matches!(err, Error::SpeakerCapacity { participants: 3, capacity: 2, .. }));
    }

    #[test]
    fn first_turn_layout() {
        let c = conv(&[("a", "three token line"), ("b", "reply")]);
        let v = vocab_for(&c);
        let (ids, mask) = assemble_context(&v, &c, 1, 64).unwrap();
        // <cls> <s_1> three token line
        assert_eq!(ids.len(), 2 + 3);
        assert_eq!(ids[0], v.cls_id());
        assert_eq!(ids[1], v.speaker_id(1).unwrap());
        assert_eq!(mask.len(), ids.len());
    }

    #[test]
    fn six_turn_three_speaker_context_counts_speaker_tokens() {
        // Speakers A, B, C with A owning turns 1, 3, 6.
        let c = conv(&[
            ("A", "one"),
            ("B", "two"),
            ("A", "three"),
            ("C", "four"),
            ("B", "five"),
            ("A", "six"),
        ]);
        let v = vocab_for(&c);
        let (ids, _) = assemble_context(&v, &c, 6, 128).unwrap();
        let speaker_ids: Vec<usize> =
            (1..=3).map(|j| v.speaker_id(j).unwrap()).collect();
        let occurrences = ids.iter().filter(|id| speaker_ids.contains(id)).count();
        assert_eq!(occurrences, 6, "one speaker token per turn");
        let distinct: std::collections::HashSet<usize> =
            ids.iter().filter(|id| speaker_ids.contains(id)).copied().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn prefix_extension_without_truncation() {
        let c = conv(&[("a", "alpha beta"), ("b", "gamma"), ("a", "delta epsilon zeta")]);
        let v = vocab_for(&c);
        let (t2, _) = assemble_context(&v, &c, 2, 128).unwrap();
        let (t3, _) = assemble_context(&v, &c, 3, 128).unwrap();
        assert_eq!(&t3[..t2.len()], &t2[..]);
    }

    #[test]
    fn truncation_drops_whole_turns_from_the_front() {
        // Same speaker opens turns 1 and 2 so the dropped-turn oracle can be
        // phrased as assembling the suffix conversation directly.
        let c = conv(&[("a", "one two three four"), ("a", "small"), ("b", "tail words")]);
        let v = vocab_for(&c);
        let full_len = 1 + (1 + 4) + (1 + 1) + (1 + 2);
        let (full, _) = assemble_context(&v, &c, 3, full_len).unwrap();
        assert_eq!(full.len(), full_len);

        // Force dropping turn 1: suffix conversation assembles identically.
        let (truncated, _) = assemble_context(&v, &c, 3, full_len - 1).unwrap();
        let suffix = Conversation {
            id: "c".to_string(),
            utterances: c.utterances[1..].to_vec(),
        };
        let (direct, _) = assemble_context(&v, &suffix, 2, 128).unwrap();
        assert_eq!(truncated, direct);
    }

    #[test]
    fn overlong_single_turn_keeps_tail() {
        let c = conv(&[("a", "w1 w2 w3 w4 w5 w6 w7 w8")]);
        let v = vocab_for(&c);
        let (ids, _) = assemble_context(&v, &c, 1, 6).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[0], v.cls_id());
        assert_eq!(ids[1], v.speaker_id(1).unwrap());
        // Last 4 tokens survive.
        assert_eq!(ids[2..], v.encode("w5 w6 w7 w8")[..]);
    }

    #[test]
    fn turn_out_of_range_is_a_contract_error() {
        let c = conv(&[("a", "x"), ("b", "y")]);
        let v = vocab_for(&c);
        assert!(assemble_context(&v, &c, 0, 32).is_err());
        assert!(assemble_context(&v, &c, 3, 32).is_err());
    }
}
