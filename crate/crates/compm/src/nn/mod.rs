//! Neural building blocks: embeddings, transformer encoder, GRU tracker,
//! linear heads, and parameter initialization.

mod gru;
mod transformer;

pub use gru::GruTracker;
pub use transformer::{cls_vector, EncodeDetails, TransformerEncoder};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Layer-norm epsilon used across the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive score for masked attention keys. Finite so gradients stay clean,
/// large enough that exp() underflows to exactly zero.
pub const MASK_SCORE: f64 = -1e30;

/// Shape of one encoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::config("encoder dims/layers/heads must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.ffn_dim == 0 {
            return Err(Error::config("vocab_size, max_positions, ffn_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Two encoders "share a backbone" when their architectures coincide;
    /// max_positions and dropout are operational knobs, not architecture.
    pub fn arch_fingerprint(&self) -> (usize, usize, usize, usize, usize) {
        (self.vocab_size, self.hidden_dim, self.num_layers, self.num_heads, self.ffn_dim)
    }
}

/// Per-position keep/ignore flags for attention over padded sequences.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(keep: Vec<bool>) -> Result<AttentionMask> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::contract("attention mask must keep at least one position".to_string()));
        }
        Ok(AttentionMask { keep })
    }

    pub fn all_kept(len: usize) -> AttentionMask {
        AttentionMask { keep: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn is_kept(&self, pos: usize) -> bool {
        self.keep[pos]
    }

    pub fn kept_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }

    /// Constant [L×L] additive score bias: column j is `MASK_SCORE` when
    /// position j is masked, 0 otherwise.
    pub fn score_bias(&self) -> Tensor {
        let l = self.keep.len();
        let mut data = vec![0.0; l * l];
        for j in 0..l {
            if !self.keep[j] {
                for i in 0..l {
                    data[i * l + j] = MASK_SCORE;
                }
            }
        }
        Tensor::new(vec![l, l], data, false)
    }
}

/// Dense layer computing x·Wᵀ (+ bias). Weight is stored [out×in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, with_bias: bool) -> Linear {
        let weight = Tensor::param(&[out_dim, in_dim], truncated_normal(rng, out_dim * in_dim, 0.02))
            .expect("linear weight shape");
        let bias = with_bias
            .then(|| Tensor::param(&[out_dim], vec![0.0; out_dim]).expect("linear bias shape"));
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let wt = tape.transpose(&self.weight)?;
        let y = tape.matmul(x, &wt)?;
        match &self.bias {
            Some(b) => tape.add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Learned per-feature scale and shift for layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: Tensor::param(&[dim], vec![1.0; dim]).expect("gamma shape"),
            beta: Tensor::param(&[dim], vec![0.0; dim]).expect("beta shape"),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// Normal(0, std) samples truncated at ±2 std (resampled beyond).
pub fn truncated_normal(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..len)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Random orthogonal dim×dim matrix via Gram-Schmidt on Gaussian rows.
pub fn orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let mut rows: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| dist.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..dim {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (v, w) in tail[0].iter_mut().zip(&head[j]) {
                    *v -= dot * w;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            return rows.into_iter().flatten().collect();
        }
    }
}

/// Seeded RNG used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a master RNG.
pub fn derive_stream(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen::<u64>()
}
