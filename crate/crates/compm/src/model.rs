//! The combined classifier: a context encoder over the whole dialogue prefix,
//! fused with a GRU-tracked sequence of per-speaker memory vectors.
//!
//! Per turn t the full path is:
//!
//! ```text
//! c_t  = cls(CoM(<cls> <s_σ(p1)> u_1 … <s_σ(pt)> u_t))          [1×h_c]
//! k_i  = cls(PM(<cls> u_i))   for prior turns i of t's speaker   [1×h_k]
//! kt_t = GRU(k_i1 … k_in)                                        [1×h_c]
//! o_t  = c_t + Wp(kt_t)       (Wp only for mismatched encoders)
//! P(e) = softmax(Wo(o_t))
//! ```
//!
//! A speaker with no history contributes an exact zero memory: the GRU and
//! projection are bypassed entirely, so o_t == c_t bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::{assemble_context, Conversation, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{cls_vector, AttentionMask, EncoderConfig, GruTracker, Linear, TransformerEncoder};
use crate::tensor::{Tape, Tensor};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantMode {
    /// Context encoder only; memories are never extracted.
    #[serde(rename = "com")]
    ComOnly,
    /// Memory encoder applied to the current utterance alone, no context.
    #[serde(rename = "pm")]
    PmOnly,
    /// Full model, both encoders fine-tuned.
    #[serde(rename = "compm")]
    Compm,
    /// Full model with the memory encoder frozen at its initial state.
    #[serde(rename = "compm-frozen")]
    CompmFrozen,
    /// Full model with a randomly initialized memory encoder (no pretrained load).
    #[serde(rename = "compm-scratch")]
    CompmScratch,
}

impl VariantMode {
    pub fn uses_com(self) -> bool {
        !matches!(self, VariantMode::PmOnly)
    }

    pub fn uses_pm(self) -> bool {
        !matches!(self, VariantMode::ComOnly)
    }

    pub fn tracks_memory(self) -> bool {
        matches!(self, VariantMode::Compm | VariantMode::CompmFrozen | VariantMode::CompmScratch)
    }

    /// Whether memory-encoder parameters receive optimizer updates.
    pub fn pm_trainable(self) -> bool {
        matches!(self, VariantMode::PmOnly | VariantMode::Compm | VariantMode::CompmScratch)
    }

    /// Whether a pretrained memory checkpoint should be loaded when provided.
    pub fn loads_pretrained_pm(self) -> bool {
        matches!(self, VariantMode::Compm | VariantMode::CompmFrozen | VariantMode::PmOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantMode::ComOnly => "com",
            VariantMode::PmOnly => "pm",
            VariantMode::Compm => "compm",
            VariantMode::CompmFrozen => "compm-frozen",
            VariantMode::CompmScratch => "compm-scratch",
        }
    }
}

impl std::str::FromStr for VariantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<VariantMode> {
        match s {
            "com" => Ok(VariantMode::ComOnly),
            "pm" => Ok(VariantMode::PmOnly),
            "compm" => Ok(VariantMode::Compm),
            "compm-frozen" | "compm-f" => Ok(VariantMode::CompmFrozen),
            "compm-scratch" | "compm-s" => Ok(VariantMode::CompmScratch),
            other => Err(Error::invalid_argument(format!(
                "unknown variant `{other}`; expected com, pm, compm, compm-frozen or compm-scratch"
            ))),
        }
    }
}

impl std::fmt::Display for VariantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One extracted memory vector and the turn it came from.
pub struct Memory {
    /// 1-based turn number.
    pub turn: usize,
    /// [1×h_k] memory vector.
    pub vector: Tensor,
}

/// Result of tracking a speaker's memory sequence.
pub enum TrackedMemory {
    /// No prior same-speaker turns: an exact zero memory of the extractor's
    /// width. Fusion bypasses the projection so the identity o_t = c_t holds
    /// exactly.
    Empty { width: usize },
    /// GRU output over n ≥ 1 memories, shape [1×h_c].
    Tracked(Tensor),
}

impl TrackedMemory {
    pub fn is_empty(&self) -> bool {
        matches!(self, TrackedMemory::Empty { .. })
    }

    /// Dense view for traces: zeros when empty.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            TrackedMemory::Empty { width } => vec![0.0; *width],
            TrackedMemory::Tracked(t) => t.to_vec(),
        }
    }
}

/// Classifier head output.
pub struct Prediction {
    pub logits: Tensor,
    pub probabilities: Vec<f64>,
    /// Argmax with ties broken toward the lowest class index.
    pub predicted: usize,
}

/// Everything the forward pass computed for one turn.
pub struct ForwardTrace {
    /// Context vector; absent for the memory-only variant.
    pub c_t: Option<Vec<f64>>,
    /// (1-based turn, memory vector) per prior same-speaker turn, in turn order.
    pub memories: Vec<(usize, Vec<f64>)>,
    /// Tracked memory; zeros when the speaker has no history, absent for
    /// variants that do not track.
    pub kt_t: Option<Vec<f64>>,
    pub o_t: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// Internal forward products, still attached to a tape.
pub struct ForwardParts {
    pub c_t: Option<Tensor>,
    pub memories: Vec<Memory>,
    pub tracked: Option<TrackedMemory>,
    pub o_t: Tensor,
    pub logits: Tensor,
}

/// The assembled model.
pub struct CompmModel {
    variant: VariantMode,
    num_classes: usize,
    vocab: Vocabulary,
    com: Option<TransformerEncoder>,
    pm: Option<TransformerEncoder>,
    tracker: Option<GruTracker>,
    w_p: Option<Linear>,
    w_o: Linear,
}

impl CompmModel {
    /// Build a model for `variant`. Encoder configs must carry the
    /// vocabulary's size; the projection is created only when the two
    /// encoder architectures differ.
    pub fn new(
        rng: &mut rand_chacha::ChaCha8Rng,
        variant: VariantMode,
        com_config: Option<&EncoderConfig>,
        pm_config: Option<&EncoderConfig>,
        num_classes: usize,
        vocab: Vocabulary,
    ) -> Result<CompmModel> {
        if num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        let check_vocab = |cfg: &EncoderConfig, which: &str| -> Result<()> {
            if cfg.vocab_size != vocab.len() {
                return Err(Error::config(format!(
                    "{which} vocab_size {} does not match vocabulary of {} tokens",
                    cfg.vocab_size,
                    vocab.len()
                )));
            }
            Ok(())
        };

        let com = if variant.uses_com() {
            let cfg = com_config
                .ok_or_else(|| Error::config(format!("variant {variant} requires a context encoder config")))?;
            check_vocab(cfg, "context encoder")?;
            Some(TransformerEncoder::new(rng, cfg)?)
        } else {
            None
        };
        let pm = if variant.uses_pm() {
            let cfg = pm_config
                .ok_or_else(|| Error::config(format!("variant {variant} requires a memory encoder config")))?;
            check_vocab(cfg, "memory encoder")?;
            Some(TransformerEncoder::new(rng, cfg)?)
        } else {
            None
        };

        let (tracker, w_p) = if variant.tracks_memory() {
            let com_cfg = com_config.expect("tracking variants carry a context config");
            let pm_cfg = pm_config.expect("tracking variants carry a memory config");
            let tracker = GruTracker::new(rng, pm_cfg.hidden_dim, com_cfg.hidden_dim);
            // Shared backbone: direct addition. Mismatched encoders: a
            // bias-free alignment projection.
            let w_p = (com_cfg.arch_fingerprint() != pm_cfg.arch_fingerprint())
                .then(|| Linear::new(rng, com_cfg.hidden_dim, com_cfg.hidden_dim, false));
            (Some(tracker), w_p)
        } else {
            (None, None)
        };

        let head_in = match variant {
            VariantMode::PmOnly => pm_config.expect("checked above").hidden_dim,
            _ => com_config.expect("checked above").hidden_dim,
        };
        let w_o = Linear::new(rng, head_in, num_classes, true);

        Ok(CompmModel { variant, num_classes, vocab, com, pm, tracker, w_p, w_o })
    }

    pub fn variant(&self) -> VariantMode {
        self.variant
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn com_config(&self) -> Option<&EncoderConfig> {
        self.com.as_ref().map(|e| &e.config)
    }

    pub fn pm_config(&self) -> Option<&EncoderConfig> {
        self.pm.as_ref().map(|e| &e.config)
    }

    pub fn has_projection(&self) -> bool {
        self.w_p.is_some()
    }

    /// The alignment projection, when the encoders differ.
    pub fn projection(&self) -> Option<&Linear> {
        self.w_p.as_ref()
    }

    /// Context vector c_t from an assembled id sequence. Position 0 must be
    /// the aggregation token.
    pub fn encode_context(
        &self,
        tape: &Tape,
        ids: &[usize],
        mask: &AttentionMask,
        train: bool,
    ) -> Result<Tensor> {
        let com = self
            .com
            .as_ref()
            .ok_or_else(|| Error::contract(format!("variant {} has no context encoder", self.variant)))?;
        if ids.first() != Some(&self.vocab.cls_id()) {
            return Err(Error::contract(
                "assembled context must start with the <cls> token".to_string(),
            ));
        }
        let out = com.forward(tape, ids, mask, train)?;
        cls_vector(tape, &out)
    }

    /// Memory-encoder input for one utterance: `<cls>` + tokens, tail-truncated
    /// to the encoder's position budget.
    fn memory_ids(&self, pm: &TransformerEncoder, utterance: &Utterance) -> Vec<usize> {
        let mut ids = Vec::new();
        ids.push(self.vocab.cls_id());
        ids.extend(self.vocab.encode(&utterance.text));
        ids.truncate(pm.config.max_positions);
        ids
    }

    /// Whether the memory encoder runs with dropout during training.
    fn pm_train(&self, train: bool) -> bool {
        train && self.variant.pm_trainable()
    }

    /// One memory vector per prior turn of turn t's speaker, in turn order.
    /// An empty result is valid: it means the speaker is new.
    pub fn extract_memories(
        &self,
        tape: &Tape,
        conv: &Conversation,
        t: usize,
        train: bool,
    ) -> Result<Vec<Memory>> {
        let pm = self
            .pm
            .as_ref()
            .ok_or_else(|| Error::contract(format!("variant {} has no memory encoder", self.variant)))?;
        if t == 0 || t > conv.len() {
            return Err(Error::contract(format!("turn {t} outside 1..={}", conv.len())));
        }
        let pm_train = self.pm_train(train);
        let mut memories = Vec::new();
        for turn in conv.prior_same_speaker_turns(t) {
            let ids = self.memory_ids(pm, &conv.utterances[turn - 1]);
            let out = pm.forward(tape, &ids, &AttentionMask::all_kept(ids.len()), pm_train)?;
            memories.push(Memory { turn, vector: cls_vector(tape, &out)? });
        }
        Ok(memories)
    }

    /// Run the tracker over a memory sequence. No memories → the exact zero
    /// memory (GRU and projection are bypassed downstream).
    pub fn track(&self, tape: &Tape, memories: &[Memory], train: bool) -> Result<TrackedMemory> {
        let tracker = self
            .tracker
            .as_ref()
            .ok_or_else(|| Error::contract(format!("variant {} does not track memory", self.variant)))?;
        if memories.is_empty() {
            return Ok(TrackedMemory::Empty { width: tracker.input_dim() });
        }
        let stacked: Vec<Tensor> = memories.iter().map(|m| m.vector.clone()).collect();
        let seq = tape.concat(&stacked, 0)?;
        Ok(TrackedMemory::Tracked(tracker.forward(tape, &seq, train)?))
    }

    /// o_t = c_t + Wp(kt_t); empty memory returns c_t unchanged, and a shared
    /// backbone adds directly.
    pub fn fuse(&self, tape: &Tape, c_t: &Tensor, tracked: &TrackedMemory) -> Result<Tensor> {
        match tracked {
            TrackedMemory::Empty { .. } => Ok(c_t.clone()),
            TrackedMemory::Tracked(kt) => match &self.w_p {
                Some(w_p) => {
                    let projected = w_p.forward(tape, kt)?;
                    tape.add(c_t, &projected)
                }
                None => {
                    if kt.cols() != c_t.cols() {
                        return Err(Error::config(format!(
                            "tracked memory width {} differs from context width {} and no projection is configured",
                            kt.cols(),
                            c_t.cols()
                        )));
                    }
                    tape.add(c_t, kt)
                }
            },
        }
    }

    /// Classifier head: probabilities and argmax (ties → lowest class index).
    pub fn predict(&self, tape: &Tape, o_t: &Tensor) -> Result<Prediction> {
        let logits = self.w_o.forward(tape, o_t)?;
        let (probabilities, predicted) = softmax_argmax(&logits.to_vec());
        Ok(Prediction { logits, probabilities, predicted })
    }

    /// Full forward pass for turn t in evaluation mode.
    pub fn forward(&self, conv: &Conversation, t: usize) -> Result<ForwardTrace> {
        let tape = Tape::new();
        let parts = self.forward_parts(&tape, conv, t, self.variant, false)?;
        let (probabilities, predicted) = softmax_argmax(&parts.logits.to_vec());
        Ok(ForwardTrace {
            c_t: parts.c_t.as_ref().map(|c| c.to_vec()),
            memories: parts.memories.iter().map(|m| (m.turn, m.vector.to_vec())).collect(),
            kt_t: parts.tracked.as_ref().map(|k| k.to_vec()),
            o_t: parts.o_t.to_vec(),
            logits: parts.logits.to_vec(),
            probabilities,
            predicted,
        })
    }

    /// Logits for turn t on the caller's tape (training path).
    pub fn forward_logits(
        &self,
        tape: &Tape,
        conv: &Conversation,
        t: usize,
        train: bool,
    ) -> Result<Tensor> {
        Ok(self.forward_parts(tape, conv, t, self.variant, train)?.logits)
    }

    /// Forward pass routed as `variant` (must be supported by the built
    /// components). Lets one instance answer "what would the context-only
    /// path say" for ablation probes.
    pub fn forward_parts(
        &self,
        tape: &Tape,
        conv: &Conversation,
        t: usize,
        variant: VariantMode,
        train: bool,
    ) -> Result<ForwardParts> {
        if t == 0 || t > conv.len() {
            return Err(Error::contract(format!("turn {t} outside 1..={}", conv.len())));
        }
        if variant.uses_com() && self.com.is_none() {
            return Err(Error::contract(format!(
                "cannot run {variant} path: model `{}` has no context encoder",
                self.variant
            )));
        }
        if variant.uses_pm() && self.pm.is_none() {
            return Err(Error::contract(format!(
                "cannot run {variant} path: model `{}` has no memory encoder",
                self.variant
            )));
        }

        match variant {
            VariantMode::PmOnly => {
                let pm = self.pm.as_ref().expect("checked above");
                let ids = self.memory_ids(pm, &conv.utterances[t - 1]);
                let out =
                    pm.forward(tape, &ids, &AttentionMask::all_kept(ids.len()), self.pm_train(train))?;
                let o_t = cls_vector(tape, &out)?;
                let logits = self.w_o.forward(tape, &o_t)?;
                Ok(ForwardParts { c_t: None, memories: Vec::new(), tracked: None, o_t, logits })
            }
            VariantMode::ComOnly => {
                let com = self.com.as_ref().expect("checked above");
                let (ids, mask) = assemble_context(&self.vocab, conv, t, com.config.max_positions)?;
                let o_t = self.encode_context(tape, &ids, &mask, train)?;
                let logits = self.w_o.forward(tape, &o_t)?;
                Ok(ForwardParts {
                    c_t: Some(o_t.clone()),
                    memories: Vec::new(),
                    tracked: None,
                    o_t,
                    logits,
                })
            }
            VariantMode::Compm | VariantMode::CompmFrozen | VariantMode::CompmScratch => {
                let com = self.com.as_ref().expect("checked above");
                let (ids, mask) = assemble_context(&self.vocab, conv, t, com.config.max_positions)?;
                let c_t = self.encode_context(tape, &ids, &mask, train)?;
                let memories = self.extract_memories(tape, conv, t, train)?;
                let tracked = self.track(tape, &memories, train)?;
                let o_t = self.fuse(tape, &c_t, &tracked)?;
                let logits = self.w_o.forward(tape, &o_t)?;
                Ok(ForwardParts { c_t: Some(c_t), memories, tracked: Some(tracked), o_t, logits })
            }
        }
    }

    /// Every parameter, named, in a stable order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(com) = &self.com {
            com.append_params("com", &mut out);
        }
        if let Some(pm) = &self.pm {
            pm.append_params("pm", &mut out);
        }
        if let Some(tracker) = &self.tracker {
            tracker.append_params("tracker", &mut out);
        }
        if let Some(w_p) = &self.w_p {
            w_p.append_params("w_p", &mut out);
        }
        self.w_o.append_params("w_o", &mut out);
        out
    }

    /// Parameters the optimizer may update for this variant. The frozen
    /// variant excludes every memory-encoder parameter.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| self.variant.pm_trainable() || !name.starts_with("pm."))
            .collect()
    }

    /// Raw little-endian bytes of the memory encoder's parameters, for
    /// freeze-invariance checks.
    pub fn pm_param_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (name, p) in self.named_parameters() {
            if name.starts_with("pm.") {
                for v in p.to_vec() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        bytes
    }
}

/// Stable softmax + argmax with ties broken toward the lowest index.
pub fn softmax_argmax(logits: &[f64]) -> (Vec<f64>, usize) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    (probs, best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Utterance;
    use crate::nn::seeded_rng;

    fn tiny_config(vocab_size: usize, hidden: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_dim: hidden,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 2 * hidden,
            max_positions: 64,
            dropout_rate: 0.1,
        }
    }

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

    fn build(variant: VariantMode, seed: u64) -> (CompmModel, Conversation) {
        let c = conv(&[
            ("A", "the kettle is on"),
            ("B", "good morning to you"),
            ("A", "tea or coffee today"),
            ("C", "coffee for me please"),
            ("B", "same here thanks"),
            ("A", "coming right up"),
        ]);
        let vocab = Vocabulary::build(c.utterances.iter().map(|u| u.text.as_str()), 9);
        let cfg = tiny_config(vocab.len(), 8);
        let mut rng = seeded_rng(seed);
        let model = CompmModel::new(&mut rng, variant, Some(&cfg), Some(&cfg), 7, vocab).unwrap();
        (model, c)
    }

    #[test]
    fn extract_memories_follows_speaker_history() {
        let (model, c) = build(VariantMode::Compm, 1);
        let tape = Tape::new();
        // Turn 6 is speaker A, with prior turns 1 and 3.
        let memories = model.extract_memories(&tape, &c, 6, false).unwrap();
        assert_eq!(memories.iter().map(|m| m.turn).collect::<Vec<_>>(), vec![1, 3]);
        // Turn 4 is C's first appearance.
        assert!(model.extract_memories(&tape, &c, 4, false).unwrap().is_empty());
    }

    #[test]
    fn track_empty_is_exact_zero_and_fuse_is_identity() {
        let (model, c) = build(VariantMode::Compm, 2);
        let tape = Tape::new();
        let tracked = model.track(&tape, &[], false).unwrap();
        assert!(tracked.is_empty());
        assert_eq!(tracked.to_vec(), vec![0.0; 8]);

        let (ids, mask) = assemble_context(model.vocab(), &c, 4, 64).unwrap();
        let c_t = model.encode_context(&tape, &ids, &mask, false).unwrap();
        let o_t = model.fuse(&tape, &c_t, &tracked).unwrap();
        let (a, b) = (c_t.to_vec(), o_t.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn no_history_turn_matches_context_only_path_bitwise() {
        let (model, c) = build(VariantMode::Compm, 3);
        let tape = Tape::new();
        // Turn 2 is B's first utterance.
        let full = model.forward_parts(&tape, &c, 2, VariantMode::Compm, false).unwrap();
        let com = model.forward_parts(&tape, &c, 2, VariantMode::ComOnly, false).unwrap();
        let (a, b) = (full.logits.to_vec(), com.logits.to_vec());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tracked_memory_with_history_changes_logits() {
        let (model, c) = build(VariantMode::Compm, 4);
        let tape = Tape::new();
        // Turn 6: speaker A has history, so the paths must differ.
        let full = model.forward_parts(&tape, &c, 6, VariantMode::Compm, false).unwrap();
        let com = model.forward_parts(&tape, &c, 6, VariantMode::ComOnly, false).unwrap();
        let diff: f64 = full
            .logits
            .to_vec()
            .iter()
            .zip(com.logits.to_vec())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-12);
    }

    #[test]
    fn reversed_memories_change_tracking() {
        let (model, c) = build(VariantMode::Compm, 5);
        let tape = Tape::new();
        let memories = model.extract_memories(&tape, &c, 6, false).unwrap();
        assert_eq!(memories.len(), 2);
        let fwd = model.track(&tape, &memories, false).unwrap().to_vec();
        let reversed: Vec<Memory> = memories.into_iter().rev().collect();
        let rev = model.track(&tape, &reversed, false).unwrap().to_vec();
        let diff: f64 = fwd.iter().zip(&rev).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "tracking ignored order: {diff}");
    }

    #[test]
    fn distinct_width_encoders_get_projection_and_match_oracle() {
        let c = conv(&[("A", "one two"), ("B", "three four"), ("A", "five")]);
        let vocab = Vocabulary::build(c.utterances.iter().map(|u| u.text.as_str()), 9);
        let com_cfg = tiny_config(vocab.len(), 8);
        let pm_cfg = tiny_config(vocab.len(), 6);
        let mut rng = seeded_rng(6);
        let model =
            CompmModel::new(&mut rng, VariantMode::Compm, Some(&com_cfg), Some(&pm_cfg), 3, vocab)
                .unwrap();
        assert!(model.has_projection());

        let tape = Tape::new();
        let memories = model.extract_memories(&tape, &c, 3, false).unwrap();
        assert_eq!(memories.len(), 1);
        assert_eq!(memories[0].vector.shape(), &[1, 6]);
        let tracked = model.track(&tape, &memories, false).unwrap();
        let kt = match &tracked {
            TrackedMemory::Tracked(t) => t.clone(),
            _ => panic!("expected tracked memory"),
        };
        assert_eq!(kt.shape(), &[1, 8]);

        let (ids, mask) = assemble_context(model.vocab(), &c, 3, 64).unwrap();
        let c_t = model.encode_context(&tape, &ids, &mask, false).unwrap();
        let o_t = model.fuse(&tape, &c_t, &tracked).unwrap();

        // Independent arithmetic: o = c + kt·Wpᵀ.
        let wp = model.projection().unwrap().weight.to_vec();
        let (cv, kv, ov) = (c_t.to_vec(), kt.to_vec(), o_t.to_vec());
        for i in 0..8 {
            let proj: f64 = (0..8).map(|j| kv[j] * wp[i * 8 + j]).sum();
            assert!((ov[i] - (cv[i] + proj)).abs() < 1e-9);
        }
    }

    #[test]
    fn shared_backbone_adds_directly() {
        let (model, c) = build(VariantMode::Compm, 7);
        assert!(!model.has_projection());
        let tape = Tape::new();
        let memories = model.extract_memories(&tape, &c, 6, false).unwrap();
        let tracked = model.track(&tape, &memories, false).unwrap();
        let (ids, mask) = assemble_context(model.vocab(), &c, 6, 64).unwrap();
        let c_t = model.encode_context(&tape, &ids, &mask, false).unwrap();
        let o_t = model.fuse(&tape, &c_t, &tracked).unwrap();
        let (cv, kv, ov) = (c_t.to_vec(), tracked.to_vec(), o_t.to_vec());
        for i in 0..8 {
            assert!((ov[i] - (cv[i] + kv[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_rejects_width_mismatch_without_projection() {
        let (model, c) = build(VariantMode::Compm, 8);
        let tape = Tape::new();
        let (ids, mask) = assemble_context(model.vocab(), &c, 1, 64).unwrap();
        let c_t = model.encode_context(&tape, &ids, &mask, false).unwrap();
        let bogus = TrackedMemory::Tracked(Tensor::zeros(&[1, 5]));
        assert!(matches!(model.fuse(&tape, &c_t, &bogus), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_predicts_uniform_class_zero() {
        let (model, c) = build(VariantMode::Compm, 9);
        model.w_o.weight.set_data(&vec![0.0; model.w_o.weight.numel()]);
        if let Some(b) = &model.w_o.bias {
            b.set_data(&vec![0.0; b.numel()]);
        }
        let trace = model.forward(&c, 1).unwrap();
        assert_eq!(trace.predicted, 0);
        for p in &trace.probabilities {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_composes_from_sub_operations() {
        let (model, _) = build(VariantMode::Compm, 10);
        // Unknown words map to <unk>, fine for a composition check.
        let small = conv(&[("x", "hello there friend"), ("x", "hello again")]);
        let trace = model.forward(&small, 2).unwrap();

        let tape = Tape::new();
        let (ids, mask) = assemble_context(model.vocab(), &small, 2, 64).unwrap();
        let c_t = model.encode_context(&tape, &ids, &mask, false).unwrap();
        let memories = model.extract_memories(&tape, &small, 2, false).unwrap();
        let tracked = model.track(&tape, &memories, false).unwrap();
        let o_t = model.fuse(&tape, &c_t, &tracked).unwrap();
        let prediction = model.predict(&tape, &o_t).unwrap();

        assert_eq!(trace.logits, prediction.logits.to_vec());
        assert_eq!(trace.probabilities, prediction.probabilities);
        assert_eq!(trace.predicted, prediction.predicted);
        assert_eq!(trace.o_t, o_t.to_vec());
        assert_eq!(trace.memories.len(), 1);
        assert_eq!(trace.memories[0].0, 1);

        let total: f64 = trace.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn trainable_set_respects_variant_gating() {
        let (frozen, _) = build(VariantMode::CompmFrozen, 11);
        assert!(frozen.trainable_parameters().iter().all(|(n, _)| !n.starts_with("pm.")));
        assert!(frozen.named_parameters().iter().any(|(n, _)| n.starts_with("pm.")));

        let (com_only, _) = build(VariantMode::ComOnly, 12);
        assert!(com_only.named_parameters().iter().all(|(n, _)| !n.starts_with("pm.")));

        let (full, _) = build(VariantMode::Compm, 13);
        assert!(full.trainable_parameters().iter().any(|(n, _)| n.starts_with("pm.")));
    }

    #[test]
    fn pm_only_classifies_from_current_utterance() {
        let c = conv(&[("A", "alpha beta"), ("B", "gamma delta")]);
        let vocab = Vocabulary::build(c.utterances.iter().map(|u| u.text.as_str()), 9);
        let cfg = tiny_config(vocab.len(), 8);
        let mut rng = seeded_rng(14);
        let model =
            CompmModel::new(&mut rng, VariantMode::PmOnly, None, Some(&cfg), 3, vocab).unwrap();
        let trace = model.forward(&c, 2).unwrap();
        assert!(trace.c_t.is_none());
        assert!(trace.kt_t.is_none());
        assert_eq!(trace.probabilities.len(), 3);

        // The same utterance in a different context yields identical output.
        let other = conv(&[("Z", "totally different words"), ("B", "gamma delta")]);
        let trace2 = model.forward(&other, 2).unwrap();
        assert_eq!(trace.logits, trace2.logits);
    }
}
