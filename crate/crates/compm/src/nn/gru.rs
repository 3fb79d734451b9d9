//! Stacked unidirectional GRU used to track memory vectors.
//!
//! Gate convention (fixed so the recurrence is unambiguous):
//!
//! ```text
//! z_s = σ(x_s·Wzᵀ + h_{s-1}·Uzᵀ + bz)        update gate
//! r_s = σ(x_s·Wrᵀ + h_{s-1}·Urᵀ + br)        reset gate
//! ĥ_s = tanh(x_s·Whᵀ + (r_s ⊙ h_{s-1})·Uhᵀ + bh)
//! h_s = (1 − z_s) ⊙ ĥ_s + z_s ⊙ h_{s-1}
//! ```
//!
//! with h_0 = 0. Input matrices are truncated-normal initialized, recurrent
//! matrices orthogonal, biases zero.

use rand_chacha::ChaCha8Rng;

use super::{orthogonal, truncated_normal};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

const GRU_LAYERS: usize = 2;

/// Dropout applied between stacked layers during training.
pub const GRU_INTER_LAYER_DROPOUT: f64 = 0.3;

struct Gate {
    w: Tensor, // [hidden × in]
    u: Tensor, // [hidden × hidden]
    b: Tensor, // [hidden]
}

impl Gate {
    fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Gate {
        Gate {
            w: Tensor::param(&[hidden, in_dim], truncated_normal(rng, hidden * in_dim, 0.02))
                .expect("gate w"),
            u: Tensor::param(&[hidden, hidden], orthogonal(rng, hidden)).expect("gate u"),
            b: Tensor::param(&[hidden], vec![0.0; hidden]).expect("gate b"),
        }
    }

    /// x·Wᵀ + h·Uᵀ + b, shape [1×hidden].
    fn pre_activation(&self, tape: &Tape, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let xw = tape.matmul(x, &tape.transpose(&self.w)?)?;
        let hu = tape.matmul(h, &tape.transpose(&self.u)?)?;
        tape.add_bias(&tape.add(&xw, &hu)?, &self.b)
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.u"), self.u.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

struct GruLayer {
    update: Gate,
    reset: Gate,
    candidate: Gate,
    hidden: usize,
}

impl GruLayer {
    fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> GruLayer {
        GruLayer {
            update: Gate::new(rng, in_dim, hidden),
            reset: Gate::new(rng, in_dim, hidden),
            candidate: Gate::new(rng, in_dim, hidden),
            hidden,
        }
    }

    fn step(&self, tape: &Tape, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let z = tape.sigmoid(&self.update.pre_activation(tape, x, h)?);
        let r = tape.sigmoid(&self.reset.pre_activation(tape, x, h)?);
        let gated_h = tape.mul(&r, h)?;
        let cand = tape.tanh(&self.candidate.pre_activation(tape, x, &gated_h)?);
        let one_minus_z = tape.add_scalar(&tape.mul_scalar(&z, -1.0), 1.0);
        tape.add(&tape.mul(&one_minus_z, &cand)?, &tape.mul(&z, h)?)
    }
}

/// Two stacked unidirectional GRU layers: input width `input_dim`, hidden and
/// output width `output_dim`.
pub struct GruTracker {
    layers: Vec<GruLayer>,
    input_dim: usize,
    output_dim: usize,
}

impl GruTracker {
    pub fn new(rng: &mut ChaCha8Rng, input_dim: usize, output_dim: usize) -> GruTracker {
        let mut layers = Vec::with_capacity(GRU_LAYERS);
        layers.push(GruLayer::new(rng, input_dim, output_dim));
        for _ in 1..GRU_LAYERS {
            layers.push(GruLayer::new(rng, output_dim, output_dim));
        }
        GruTracker { layers, input_dim, output_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Final-step top-layer hidden state for a [n×input_dim] sequence, n ≥ 1.
    pub fn forward(&self, tape: &Tape, sequence: &Tensor, train: bool) -> Result<Tensor> {
        let all = self.forward_sequence(tape, sequence, train)?;
        let n = all.rows();
        tape.slice(&all, 0, n - 1, 1)
    }

    /// Top-layer hidden states for every step: [n×output_dim].
    pub fn forward_sequence(&self, tape: &Tape, sequence: &Tensor, train: bool) -> Result<Tensor> {
        if sequence.shape().len() != 2 || sequence.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "gru_forward",
                lhs: sequence.shape().to_vec(),
                rhs: vec![0, self.input_dim],
            });
        }
        let n = sequence.rows();
        if n == 0 {
            return Err(Error::contract(
                "gru_forward on empty sequence; empty memories are the caller's case".to_string(),
            ));
        }

        let mut inputs: Vec<Tensor> = (0..n)
            .map(|s| tape.slice(sequence, 0, s, 1))
            .collect::<Result<_>>()?;

        for (li, layer) in self.layers.iter().enumerate() {
            let mut h = Tensor::zeros(&[1, layer.hidden]);
            let mut outputs = Vec::with_capacity(n);
            for x in &inputs {
                h = layer.step(tape, x, &h)?;
                outputs.push(h.clone());
            }
            // Inter-layer dropout only: the top layer's outputs are returned as-is.
            if li + 1 < self.layers.len() {
                for out in outputs.iter_mut() {
                    *out = tape.dropout(out, GRU_INTER_LAYER_DROPOUT, train)?;
                }
            }
            inputs = outputs;
        }
        tape.concat(&inputs, 0)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let base = format!("{prefix}.layer{i}");
            layer.update.append_params(&format!("{base}.update"), out);
            layer.reset.append_params(&format!("{base}.reset"), out);
            layer.candidate.append_params(&format!("{base}.candidate"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn zero_parameters_force_zero_output() {
        let mut rng = seeded_rng(0);
        let gru = GruTracker::new(&mut rng, 4, 4);
        let mut params = Vec::new();
        gru.append_params("gru", &mut params);
        for (_, p) in &params {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let tape = Tape::new();
        let seq = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f64).collect()).unwrap();
        let out = gru.forward(&tape, &seq, false).unwrap();
        // All gates at 0.5/0, candidate tanh(0)=0, h stays 0 forever.
        assert_eq!(out.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn full_sequence_matches_stepwise_composition() {
        let mut rng = seeded_rng(8);
        let gru = GruTracker::new(&mut rng, 3, 5);
        let tape = Tape::new();
        let seq = Tensor::from_vec(
            &[4, 3],
            vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.5, 1.0, 1.0, -1.0, -0.3, 0.2, 0.4],
        )
        .unwrap();
        let whole = gru.forward_sequence(&tape, &seq, false).unwrap();

        // Feeding prefixes one step longer each time reproduces each row.
        for n in 1..=4 {
            let prefix = tape.slice(&seq, 0, 0, n).unwrap();
            let out = gru.forward(&tape, &prefix, false).unwrap();
            let expected = tape.slice(&whole, 0, n - 1, 1).unwrap();
            let (a, b) = (out.to_vec(), expected.to_vec());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causality_later_steps_only() {
        let mut rng = seeded_rng(21);
        let gru = GruTracker::new(&mut rng, 3, 4);
        let tape = Tape::new();
        let base: Vec<f64> = vec![0.3, -0.1, 0.2, 0.6, 0.5, -0.4, -0.2, 0.1, 0.9];
        let seq = Tensor::from_vec(&[3, 3], base.clone()).unwrap();
        let out_a = gru.forward_sequence(&tape, &seq, false).unwrap().to_vec();

        // Perturb step 1 (0-based): steps ≥ 1 may change, step 0 must not.
        let mut perturbed = base.clone();
        perturbed[3] += 0.7;
        let seq_b = Tensor::from_vec(&[3, 3], perturbed).unwrap();
        let out_b = gru.forward_sequence(&tape, &seq_b, false).unwrap().to_vec();

        for j in 0..4 {
            assert_eq!(out_a[j], out_b[j], "step 0 must be untouched");
        }
        let later_diff: f64 = (4..12).map(|i| (out_a[i] - out_b[i]).abs()).sum();
        assert!(later_diff > 1e-9);
    }

    #[test]
    fn inter_layer_dropout_train_only() {
        let mut rng = seeded_rng(33);
        let gru = GruTracker::new(&mut rng, 3, 4);
        let seq = Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap();

        // Eval is deterministic regardless of tape seeding.
        let e1 = gru.forward(&Tape::new(), &seq, false).unwrap().to_vec();
        let e2 = gru.forward(&Tape::seeded(1), &seq, false).unwrap().to_vec();
        assert_eq!(e1, e2);

        // Two differently seeded train tapes disagree (dropout active).
        let t1 = gru.forward(&Tape::seeded(1), &seq, true).unwrap().to_vec();
        let t2 = gru.forward(&Tape::seeded(2), &seq, true).unwrap().to_vec();
        assert_ne!(t1, t2);
    }
}
