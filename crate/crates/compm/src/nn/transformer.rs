//! Transformer encoder with learned absolute position embeddings and
//! post-layer-norm blocks.
//!
//! Dataflow per layer (all shapes [L×h]):
//!
//! ```text
//! q,k,v  = x·Wqᵀ+bq, x·Wkᵀ+bk, x·Wvᵀ+bv           (full hidden width)
//! per head: scores = q_h·k_hᵀ / √(h/heads) + mask   (mask: -1e30 on dropped keys)
//!           probs  = softmax(scores, rows)
//!           ctx_h  = probs·v_h
//! attn   = concat(ctx_h)·Woᵀ+bo, then dropout
//! x1     = layer_norm(x + attn)
//! ffn    = gelu(x1·W1ᵀ+b1)·W2ᵀ+b2, then dropout
//! x2     = layer_norm(x1 + ffn)
//! ```
//!
//! The whole stack is preceded by token+position embeddings (with dropout)
//! and followed by a final layer norm. Position 0 is reserved for the
//! aggregation token.

use rand_chacha::ChaCha8Rng;

use super::{truncated_normal, AttentionMask, EncoderConfig, LayerNormParams, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

struct EncoderLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_attn: LayerNormParams,
    ffn_in: Linear,
    ffn_out: Linear,
    norm_ffn: LayerNormParams,
}

impl EncoderLayer {
    fn new(rng: &mut ChaCha8Rng, hidden: usize, ffn: usize) -> EncoderLayer {
        EncoderLayer {
            wq: Linear::new(rng, hidden, hidden, true),
            wk: Linear::new(rng, hidden, hidden, true),
            wv: Linear::new(rng, hidden, hidden, true),
            wo: Linear::new(rng, hidden, hidden, true),
            norm_attn: LayerNormParams::new(hidden),
            ffn_in: Linear::new(rng, hidden, ffn, true),
            ffn_out: Linear::new(rng, ffn, hidden, true),
            norm_ffn: LayerNormParams::new(hidden),
        }
    }
}

/// Per-layer attention probabilities captured during a detailed forward.
pub struct EncodeDetails {
    /// `attention[layer][head]` is the [L×L] row-stochastic weight matrix.
    pub attention: Vec<Vec<Tensor>>,
}

/// Encoder stack: embeddings, attention/FFN layers, final layer norm.
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    token_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNormParams,
}

impl TransformerEncoder {
    pub fn new(rng: &mut ChaCha8Rng, config: &EncoderConfig) -> Result<TransformerEncoder> {
        config.validate()?;
        let h = config.hidden_dim;
        let token_emb = Tensor::param(
            &[config.vocab_size, h],
            truncated_normal(rng, config.vocab_size * h, 0.02),
        )?;
        let pos_emb = Tensor::param(
            &[config.max_positions, h],
            truncated_normal(rng, config.max_positions * h, 0.02),
        )?;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::new(rng, h, config.ffn_dim))
            .collect();
        Ok(TransformerEncoder {
            config: config.clone(),
            token_emb,
            pos_emb,
            layers,
            final_norm: LayerNormParams::new(h),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Contextual embeddings for a token sequence: [len × hidden].
    pub fn forward(
        &self,
        tape: &Tape,
        ids: &[usize],
        mask: &AttentionMask,
        train: bool,
    ) -> Result<Tensor> {
        Ok(self.forward_inner(tape, ids, mask, train, false)?.0)
    }

    /// Forward pass that also captures per-head attention weights.
    pub fn forward_detailed(
        &self,
        tape: &Tape,
        ids: &[usize],
        mask: &AttentionMask,
        train: bool,
    ) -> Result<(Tensor, EncodeDetails)> {
        let (out, details) = self.forward_inner(tape, ids, mask, train, true)?;
        Ok((out, details.expect("details requested")))
    }

    fn forward_inner(
        &self,
        tape: &Tape,
        ids: &[usize],
        mask: &AttentionMask,
        train: bool,
        capture: bool,
    ) -> Result<(Tensor, Option<EncodeDetails>)> {
        if ids.is_empty() {
            return Err(Error::contract("encode on empty token sequence".to_string()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_positions {}; truncate upstream",
                ids.len(),
                self.config.max_positions
            )));
        }
        if mask.len() != ids.len() {
            return Err(Error::contract(format!(
                "mask length {} does not match sequence length {}",
                mask.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocab of {}",
                self.config.vocab_size
            )));
        }

        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.embedding_lookup(&self.token_emb, ids)?;
        let pos = tape.embedding_lookup(&self.pos_emb, &positions)?;
        let mut x = tape.add(&tok, &pos)?;
        x = tape.dropout(&x, self.config.dropout_rate, train)?;

        let score_bias = mask.score_bias();
        let heads = self.config.num_heads;
        let head_dim = self.config.hidden_dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut captured: Vec<Vec<Tensor>> = Vec::new();

        for layer in &self.layers {
            let q = layer.wq.forward(tape, &x)?;
            let k = layer.wk.forward(tape, &x)?;
            let v = layer.wv.forward(tape, &x)?;

            let mut head_outputs = Vec::with_capacity(heads);
            let mut head_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice(&q, 1, h * head_dim, head_dim)?;
                let kh = tape.slice(&k, 1, h * head_dim, head_dim)?;
                let vh = tape.slice(&v, 1, h * head_dim, head_dim)?;
                let kt = tape.transpose(&kh)?;
                let scores = tape.mul_scalar(&tape.matmul(&qh, &kt)?, scale);
                let masked = tape.add(&scores, &score_bias)?;
                let probs = tape.softmax(&masked, 1)?;
                if capture {
                    head_probs.push(probs.clone());
                }
                head_outputs.push(tape.matmul(&probs, &vh)?);
            }
            if capture {
                captured.push(head_probs);
            }
            let ctx = tape.concat(&head_outputs, 1)?;
            let attn = layer.wo.forward(tape, &ctx)?;
            let attn = tape.dropout(&attn, self.config.dropout_rate, train)?;
            let x1 = layer.norm_attn.forward(tape, &tape.add(&x, &attn)?)?;

            let ffn = layer.ffn_in.forward(tape, &x1)?;
            let ffn = tape.gelu(&ffn);
            let ffn = layer.ffn_out.forward(tape, &ffn)?;
            let ffn = tape.dropout(&ffn, self.config.dropout_rate, train)?;
            x = layer.norm_ffn.forward(tape, &tape.add(&x1, &ffn)?)?;
        }

        let out = self.final_norm.forward(tape, &x)?;
        let details = capture.then_some(EncodeDetails { attention: captured });
        Ok((out, details))
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.token_emb"), self.token_emb.clone()));
        out.push((format!("{prefix}.pos_emb"), self.pos_emb.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            let base = format!("{prefix}.layer{i}");
            layer.wq.append_params(&format!("{base}.attn.wq"), out);
            layer.wk.append_params(&format!("{base}.attn.wk"), out);
            layer.wv.append_params(&format!("{base}.attn.wv"), out);
            layer.wo.append_params(&format!("{base}.attn.wo"), out);
            layer.norm_attn.append_params(&format!("{base}.norm_attn"), out);
            layer.ffn_in.append_params(&format!("{base}.ffn_in"), out);
            layer.ffn_out.append_params(&format!("{base}.ffn_out"), out);
            layer.norm_ffn.append_params(&format!("{base}.norm_ffn"), out);
        }
        self.final_norm.append_params(&format!("{prefix}.final_norm"), out);
    }
}

/// Row 0 of an encoder output: the aggregation-token vector, shape [1×hidden].
pub fn cls_vector(tape: &Tape, encoded: &Tensor) -> Result<Tensor> {
    if encoded.shape().len() != 2 || encoded.rows() == 0 {
        return Err(Error::contract("cls_vector expects a non-empty [len×hidden] tensor".to_string()));
    }
    tape.slice(encoded, 0, 0, 1)
}
