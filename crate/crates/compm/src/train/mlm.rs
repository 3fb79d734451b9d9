//! Masked-token pretraining for the memory encoder: a desk-scale stand-in for
//! a pretrained language model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, lr_at, AdamW, AdamWConfig, ScheduleConfig};
use crate::data::{Conversation, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{derive_stream, seeded_rng, AttentionMask, EncoderConfig, Linear, TransformerEncoder};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Encoder architecture; `vocab_size` is overwritten with the size of the
    /// vocabulary built from the corpus.
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of total steps spent warming up.
    pub warmup_fraction: f64,
    /// Probability of masking each token position.
    pub mask_rate: f64,
    pub clip_norm: f64,
    pub speaker_capacity: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig {
                vocab_size: 0,
                hidden_dim: 16,
                num_layers: 1,
                num_heads: 2,
                ffn_dim: 32,
                max_positions: 64,
                dropout_rate: 0.1,
            },
            epochs: 20,
            batch_size: 16,
            optimizer: AdamWConfig { lr: 3e-3, ..Default::default() },
            warmup_fraction: 0.1,
            mask_rate: 0.15,
            clip_norm: 10.0,
            speaker_capacity: 9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub vocab_size: usize,
    pub utterances: usize,
    pub seed: u64,
}

/// Pretraining output: the encoder (parameters named `pm.*` when saved), its
/// vocabulary, and the loss record.
pub struct PretrainOutput {
    pub encoder: TransformerEncoder,
    pub vocab: Vocabulary,
    pub record: PretrainRecord,
}

/// Train a memory encoder by masked-token prediction over all utterances of
/// `corpus`. The prediction head is discarded; only encoder parameters are
/// meant to be checkpointed.
pub fn pretrain_pm(corpus: &[Conversation], config: &PretrainConfig) -> Result<PretrainOutput> {
    let texts: Vec<&str> = corpus
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| u.text.as_str()))
        .collect();
    if texts.is_empty() {
        return Err(Error::invalid_argument("pretraining corpus has no utterances".to_string()));
    }
    if !(0.0 < config.mask_rate && config.mask_rate < 1.0) {
        return Err(Error::invalid_argument(format!(
            "mask_rate {} outside (0,1)",
            config.mask_rate
        )));
    }

    let vocab = Vocabulary::build(texts.iter().copied(), config.speaker_capacity);
    let mut encoder_cfg = config.encoder.clone();
    encoder_cfg.vocab_size = vocab.len();
    encoder_cfg.validate()?;

    let mut rng = seeded_rng(config.seed);
    let encoder = TransformerEncoder::new(&mut rng, &encoder_cfg)?;
    let head = Linear::new(&mut rng, encoder_cfg.hidden_dim, vocab.len(), true);

    let mut params = Vec::new();
    encoder.append_params("pm", &mut params);
    head.append_params("mlm_head", &mut params);
    let mut optimizer = AdamW::new(config.optimizer, params.clone());

    // Token sequences: <cls> + utterance, truncated to the position budget.
    let examples: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut ids = vec![vocab.cls_id()];
            ids.extend(vocab.encode(t));
            ids.truncate(encoder_cfg.max_positions);
            ids
        })
        .collect();

    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = ScheduleConfig::new(
        ((total_steps as f64) * config.warmup_fraction).round() as usize,
        total_steps,
        config.optimizer.lr,
    )?;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let tape = Tape::seeded(derive_stream(&mut rng));
            let mut logit_rows: Vec<Tensor> = Vec::new();
            let mut targets: Vec<usize> = Vec::new();

            for &ex in chunk {
                let ids = &examples[ex];
                // Pick masked positions (never position 0, the <cls> slot).
                let mut masked: Vec<usize> = (1..ids.len())
                    .filter(|_| rng.gen::<f64>() < config.mask_rate)
                    .collect();
                if masked.is_empty() && ids.len() > 1 {
                    masked.push(rng.gen_range(1..ids.len()));
                }
                if masked.is_empty() {
                    continue; // single-token utterance; nothing to predict
                }
                let mut corrupted = ids.clone();
                for &p in &masked {
                    corrupted[p] = vocab.mask_id();
                }
                let out = encoder.forward(
                    &tape,
                    &corrupted,
                    &AttentionMask::all_kept(corrupted.len()),
                    true,
                )?;
                for &p in &masked {
                    let row = tape.slice(&out, 0, p, 1)?;
                    logit_rows.push(head.forward(&tape, &row)?);
                    targets.push(ids[p]);
                }
            }
            if logit_rows.is_empty() {
                continue;
            }
            let logits = tape.concat(&logit_rows, 0)?;
            let loss = tape.cross_entropy(&logits, &targets)?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step: optimizer.step_count(), last_good: None });
            }
            optimizer.zero_grads();
            tape.backward(&loss)?;
            clip_gradients(&params, config.clip_norm);
            let lr = lr_at(&schedule, optimizer.step_count());
            optimizer.step(lr)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    let record = PretrainRecord {
        epoch_losses,
        steps: optimizer.step_count(),
        vocab_size: vocab.len(),
        utterances: texts.len(),
        seed: config.seed,
    };
    Ok(PretrainOutput { encoder, vocab, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Utterance;

    fn toy_corpus(n_convs: usize) -> Vec<Conversation> {
        // Repetitive word patterns so masked prediction is learnable.
        let patterns = [
            "the red bird sings in the tree",
            "the blue fish swims in the sea",
            "a green frog jumps in the pond",
            "the red bird flies over the sea",
            "a blue fish hides in the pond",
        ];
        (0..n_convs)
            .map(|i| Conversation {
                id: format!("c{i}"),
                utterances: (0..2)
                    .map(|j| Utterance {
                        speaker: format!("s{j}"),
                        text: patterns[(i * 2 + j) % patterns.len()].to_string(),
                        label: None,
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn empty_corpus_is_an_argument_error() {
        match pretrain_pm(&[], &PretrainConfig::default()) {
            Err(Error::InvalidArgument(_)) => {}
            Err(other) => panic!("unexpected error {other:?}"),
            Ok(_) => panic!("empty corpus must be rejected"),
        }
    }

    #[test]
    fn loss_decreases_on_a_repetitive_corpus() {
        let corpus = toy_corpus(20); // 40 utterances
        let config = PretrainConfig {
            epochs: 8,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        };
        let out = pretrain_pm(&corpus, &config).unwrap();
        let first = out.record.epoch_losses[0];
        let last = *out.record.epoch_losses.last().unwrap();
        assert!(
            last < first,
            "masked-token loss did not improve: {first} -> {last}"
        );
    }

    #[test]
    fn pretraining_is_seed_deterministic() {
        let corpus = toy_corpus(6);
        let config = PretrainConfig { epochs: 2, batch_size: 4, seed: 9, ..Default::default() };
        let a = pretrain_pm(&corpus, &config).unwrap();
        let b = pretrain_pm(&corpus, &config).unwrap();
        assert_eq!(a.record.epoch_losses, b.record.epoch_losses);
    }
}
