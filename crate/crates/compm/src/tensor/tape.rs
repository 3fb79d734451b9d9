//! Operation tape: records forward ops, replays them in reverse for gradients.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_raw, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_TAPE_UID.fetch_add(1, Ordering::Relaxed)
}

const GELU_COEFF: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A recorded operation together with whatever the backward pass needs.
enum Op {
    Add { a: Tensor, b: Tensor },
    AddScalar { x: Tensor },
    MulScalar { x: Tensor, c: f64 },
    Mul { a: Tensor, b: Tensor },
    AddBias { x: Tensor, bias: Tensor },
    Matmul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Tanh { x: Tensor },
    Sigmoid { x: Tensor },
    Gelu { x: Tensor, tanh_u: Vec<f64> },
    SoftmaxRows { x: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Tensor, labels: Vec<usize>, probs: Vec<f64> },
    EmbeddingLookup { table: Tensor, ids: Vec<usize> },
    Dropout { x: Tensor, scaled_mask: Vec<f64> },
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { x: Tensor, axis: usize, start: usize },
    Mean { x: Tensor },
}

struct Node {
    op: Op,
    output: Tensor,
}

/// Execution tape. One tape per thread of execution; training tapes carry a
/// seeded RNG so dropout masks are reproducible.
pub struct Tape {
    uid: Cell<u64>,
    nodes: RefCell<Vec<Node>>,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Tape {
    /// Evaluation tape: deterministic, dropout not available.
    pub fn new() -> Tape {
        Tape {
            uid: Cell::new(fresh_uid()),
            nodes: RefCell::new(Vec::new()),
            rng: None,
        }
    }

    /// Training tape with a seeded RNG for dropout masks.
    pub fn seeded(seed: u64) -> Tape {
        Tape {
            uid: Cell::new(fresh_uid()),
            nodes: RefCell::new(Vec::new()),
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drop every recorded node. Tensors produced by this tape are detached:
    /// a subsequent backward through them is a contract error.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.uid.set(fresh_uid());
    }

    fn record(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let out = Tensor::new(shape, data, requires_grad);
        out.set_tape_uid(self.uid.get());
        self.nodes.borrow_mut().push(Node { op, output: out.clone() });
        out
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.with_data(|av| b.with_data(|bv| av.iter().zip(bv).map(|(x, y)| x + y).collect::<Vec<_>>()));
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(Op::Add { a: a.clone(), b: b.clone() }, a.shape().to_vec(), data, rg))
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.with_data(|xv| xv.iter().map(|v| v + c).collect::<Vec<_>>());
        self.record(Op::AddScalar { x: x.clone() }, x.shape().to_vec(), data, x.requires_grad())
    }

    pub fn mul_scalar(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.with_data(|xv| xv.iter().map(|v| v * c).collect::<Vec<_>>());
        self.record(Op::MulScalar { x: x.clone(), c }, x.shape().to_vec(), data, x.requires_grad())
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.with_data(|av| b.with_data(|bv| av.iter().zip(bv).map(|(x, y)| x * y).collect::<Vec<_>>()));
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(Op::Mul { a: a.clone(), b: b.clone() }, a.shape().to_vec(), data, rg))
    }

    /// Add a length-n bias vector to every row of an [m×n] tensor.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let n = x.cols();
        if bias.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let m = x.rows();
        let data = x.with_data(|xv| {
            bias.with_data(|bv| {
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        out.push(xv[i * n + j] + bv[j]);
                    }
                }
                out
            })
        });
        let rg = x.requires_grad() || bias.requires_grad();
        Ok(self.record(Op::AddBias { x: x.clone(), bias: bias.clone() }, x.shape().to_vec(), data, rg))
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    /// Matrix product a[m×k] · b[k×n].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let data = a.with_data(|av| b.with_data(|bv| matmul_raw(av, bv, m, k, n)));
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(Op::Matmul { a: a.clone(), b: b.clone() }, vec![m, n], data, rg))
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::contract(format!(
                "transpose expects a 2-D tensor, got shape {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let data = x.with_data(|xv| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = xv[i * n + j];
                }
            }
            out
        });
        Ok(self.record(Op::Transpose { x: x.clone() }, vec![n, m], data, x.requires_grad()))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn tanh(&self, x: &Tensor) -> Tensor {
        let data = x.with_data(|xv| xv.iter().map(|v| v.tanh()).collect::<Vec<_>>());
        self.record(Op::Tanh { x: x.clone() }, x.shape().to_vec(), data, x.requires_grad())
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let data = x.with_data(|xv| xv.iter().map(|v| sigmoid_scalar(*v)).collect::<Vec<_>>());
        self.record(Op::Sigmoid { x: x.clone() }, x.shape().to_vec(), data, x.requires_grad())
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&self, x: &Tensor) -> Tensor {
        let c = sqrt_2_over_pi();
        let (data, tanh_u) = x.with_data(|xv| {
            let mut out = Vec::with_capacity(xv.len());
            let mut tu = Vec::with_capacity(xv.len());
            for &v in xv {
                let t = (c * (v + GELU_COEFF * v * v * v)).tanh();
                tu.push(t);
                out.push(0.5 * v * (1.0 + t));
            }
            (out, tu)
        });
        self.record(Op::Gelu { x: x.clone(), tanh_u }, x.shape().to_vec(), data, x.requires_grad())
    }

    // ── Normalization and reductions ────────────────────────────────────

    /// Numerically stable softmax along `axis` of a 1-D or 2-D tensor.
    /// Each slice is shifted by its max before exponentiation.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let finite = x.with_data(|xv| xv.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("softmax input"));
        }
        match (x.shape().len(), axis) {
            (1, 0) | (2, 1) => self.softmax_rows(x),
            (2, 0) => {
                let xt = self.transpose(x)?;
                let st = self.softmax_rows(&xt)?;
                self.transpose(&st)
            }
            _ => Err(Error::contract(format!(
                "softmax axis {} invalid for shape {:?}",
                axis,
                x.shape()
            ))),
        }
    }

    fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = (x.rows(), x.cols());
        let data = x.with_data(|xv| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] /= sum;
                }
            }
            out
        });
        Ok(self.record(Op::SoftmaxRows { x: x.clone() }, x.shape().to_vec(), data, x.requires_grad()))
    }

    /// Layer normalization over the last dimension with learned scale/shift.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let n = x.cols();
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let m = x.rows();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let data = x.with_data(|xv| {
            gamma.with_data(|gv| {
                beta.with_data(|bv| {
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        inv_std[i] = inv;
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            xhat[i * n + j] = xh;
                            out[i * n + j] = gv[j] * xh + bv[j];
                        }
                    }
                    out
                })
            })
        });
        let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.record(
            Op::LayerNorm { x: x.clone(), gamma: gamma.clone(), beta: beta.clone(), xhat, inv_std },
            x.shape().to_vec(),
            data,
            rg,
        ))
    }

    /// Mean negative log-probability of the gold class per row, averaged over rows.
    pub fn cross_entropy(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if logits.shape().len() != 2 || logits.rows() != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy: logits shape {:?} incompatible with {} labels",
                logits.shape(),
                labels.len()
            )));
        }
        let (b, c) = (logits.rows(), logits.cols());
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::LabelOutOfRange { index: label, classes: c, example: i });
            }
        }
        let mut probs = vec![0.0; b * c];
        let loss = logits.with_data(|lv| {
            let mut total = 0.0;
            for i in 0..b {
                let row = &lv[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    probs[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    probs[i * c + j] /= sum;
                }
                let lse = max + sum.ln();
                total += lse - row[labels[i]];
            }
            total / b as f64
        });
        let rg = logits.requires_grad();
        Ok(self.record(
            Op::CrossEntropy { logits: logits.clone(), labels: labels.to_vec(), probs },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Gather rows of an embedding table: table[V×d], ids → [len×d].
    pub fn embedding_lookup(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.shape().len() != 2 {
            return Err(Error::contract("embedding_lookup expects a 2-D table".to_string()));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding_lookup on empty id sequence".to_string()));
        }
        let (v, d) = (table.rows(), table.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let data = table.with_data(|tv| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
            out
        });
        Ok(self.record(
            Op::EmbeddingLookup { table: table.clone(), ids: ids.to_vec() },
            vec![ids.len(), d],
            data,
            table.requires_grad(),
        ))
    }

    /// Inverted dropout: in train mode kept units are scaled by 1/(1−p) so the
    /// expectation is preserved; in eval mode this is the identity.
    pub fn dropout(&self, x: &Tensor, p: f64, train: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid_argument(format!("dropout rate {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(x.clone());
        }
        let rng = self.rng.as_ref().ok_or_else(|| {
            Error::contract("dropout in train mode requires a seeded tape".to_string())
        })?;
        let scale = 1.0 / (1.0 - p);
        let scaled_mask: Vec<f64> = {
            let mut r = rng.borrow_mut();
            (0..x.numel()).map(|_| if r.gen::<f64>() < p { 0.0 } else { scale }).collect()
        };
        let data = x.with_data(|xv| xv.iter().zip(&scaled_mask).map(|(v, m)| v * m).collect::<Vec<_>>());
        Ok(self.record(
            Op::Dropout { x: x.clone(), scaled_mask },
            x.shape().to_vec(),
            data,
            x.requires_grad(),
        ))
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors".to_string()));
        }
        if axis > 1 || parts.iter().any(|p| p.shape().len() != 2) {
            return Err(Error::contract("concat supports 2-D tensors, axis 0 or 1".to_string()));
        }
        let (r0, c0) = (parts[0].rows(), parts[0].cols());
        for p in &parts[1..] {
            let ok = if axis == 0 { p.cols() == c0 } else { p.rows() == r0 };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (rows, cols, data) = if axis == 0 {
            let rows: usize = parts.iter().map(|p| p.rows()).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for p in parts {
                p.with_data(|pv| data.extend_from_slice(pv));
            }
            (rows, c0, data)
        } else {
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for p in parts {
                    let pc = p.cols();
                    p.with_data(|pv| data.extend_from_slice(&pv[i * pc..(i + 1) * pc]));
                }
            }
            (r0, cols, data)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.record(Op::Concat { parts: parts.to_vec(), axis }, vec![rows, cols], data, rg))
    }

    /// Contiguous range along `axis` of a 2-D tensor: rows (axis 0) or columns (axis 1).
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if x.shape().len() != 2 || axis > 1 {
            return Err(Error::contract("slice supports 2-D tensors, axis 0 or 1".to_string()));
        }
        let extent = x.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::contract(format!(
                "slice range {start}..{} out of bounds for extent {extent}",
                start + len
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let (shape, data) = if axis == 0 {
            let data = x.with_data(|xv| xv[start * n..(start + len) * n].to_vec());
            (vec![len, n], data)
        } else {
            let data = x.with_data(|xv| {
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
                }
                out
            });
            (vec![m, len], data)
        };
        Ok(self.record(Op::Slice { x: x.clone(), axis, start }, shape, data, x.requires_grad()))
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean(&self, x: &Tensor) -> Tensor {
        let n = x.numel() as f64;
        let mean = x.with_data(|xv| xv.iter().sum::<f64>() / n);
        self.record(Op::Mean { x: x.clone() }, vec![1], vec![mean], x.requires_grad())
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulate gradients of `root` with respect to every tensor that
    /// requires them. `root` must be a scalar produced by this tape (or a
    /// scalar leaf). Repeated calls accumulate additively.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if !root.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        match root.tape_uid() {
            Some(uid) if uid != self.uid.get() => {
                return Err(Error::contract(
                    "backward root does not belong to this tape (cleared or foreign tape)".to_string(),
                ));
            }
            None => {
                // Constant graph: the root is a leaf; only it can receive gradient.
                if root.requires_grad() {
                    root.accumulate_grad(&[1.0]);
                }
                return Ok(());
            }
            _ => {}
        }

        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(root.id(), vec![1.0]);

        let nodes = self.nodes.borrow();
        let tape_uid = self.uid.get();
        for node in nodes.iter().rev() {
            let Some(gout) = flowing.remove(&node.output.id()) else {
                continue;
            };
            if node.output.requires_grad() {
                node.output.accumulate_grad(&gout);
            }
            for (input, gin) in backward_op(&node.op, &gout, &node.output) {
                if input.tape_uid() == Some(tape_uid) {
                    match flowing.entry(input.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (acc, d) in e.get_mut().iter_mut().zip(&gin) {
                                *acc += d;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(gin);
                        }
                    }
                } else if input.requires_grad() {
                    input.accumulate_grad(&gin);
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Per-op vector-Jacobian products: given d(loss)/d(output), produce
/// d(loss)/d(input) contributions for each input.
fn backward_op(op: &Op, gout: &[f64], output: &Tensor) -> Vec<(Tensor, Vec<f64>)> {
    match op {
        Op::Add { a, b } => vec![(a.clone(), gout.to_vec()), (b.clone(), gout.to_vec())],
        Op::AddScalar { x } => vec![(x.clone(), gout.to_vec())],
        Op::MulScalar { x, c } => vec![(x.clone(), gout.iter().map(|g| g * c).collect())],
        Op::Mul { a, b } => {
            let ga = b.with_data(|bv| gout.iter().zip(bv).map(|(g, v)| g * v).collect());
            let gb = a.with_data(|av| gout.iter().zip(av).map(|(g, v)| g * v).collect());
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::AddBias { x, bias } => {
            let (m, n) = (x.rows(), x.cols());
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gb[j] += gout[i * n + j];
                }
            }
            vec![(x.clone(), gout.to_vec()), (bias.clone(), gb)]
        }
        Op::Matmul { a, b } => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            // ga[i][p] = Σ_j g[i][j]·b[p][j];  gb[p][j] = Σ_i a[i][p]·g[i][j]
            let ga = b.with_data(|bv| {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gout[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                ga
            });
            let gb = a.with_data(|av| {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av_ip = av[i * k + p];
                        if av_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av_ip * gout[i * n + j];
                        }
                    }
                }
                gb
            });
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Transpose { x } => {
            let (m, n) = (x.rows(), x.cols());
            // gout has shape [n×m]; transpose it back to [m×n].
            let mut gx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    gx[i * n + j] = gout[j * m + i];
                }
            }
            vec![(x.clone(), gx)]
        }
        Op::Tanh { x } => {
            let gx = output.with_data(|yv| {
                gout.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect()
            });
            vec![(x.clone(), gx)]
        }
        Op::Sigmoid { x } => {
            let gx = output.with_data(|yv| {
                gout.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect()
            });
            vec![(x.clone(), gx)]
        }
        Op::Gelu { x, tanh_u } => {
            let c = sqrt_2_over_pi();
            let gx = x.with_data(|xv| {
                gout.iter()
                    .zip(xv)
                    .zip(tanh_u)
                    .map(|((g, &v), &t)| {
                        let du = c * (1.0 + 3.0 * GELU_COEFF * v * v);
                        let dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        g * dy
                    })
                    .collect()
            });
            vec![(x.clone(), gx)]
        }
        Op::SoftmaxRows { x } => {
            let (m, n) = (output.rows(), output.cols());
            let gx = output.with_data(|yv| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let y = &yv[i * n..(i + 1) * n];
                    let g = &gout[i * n..(i + 1) * n];
                    let dot: f64 = g.iter().zip(y).map(|(gj, yj)| gj * yj).sum();
                    for j in 0..n {
                        gx[i * n + j] = y[j] * (g[j] - dot);
                    }
                }
                gx
            });
            vec![(x.clone(), gx)]
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (m, n) = (x.rows(), x.cols());
            let nf = n as f64;
            let mut gx = vec![0.0; m * n];
            let mut ggamma = vec![0.0; n];
            let mut gbeta = vec![0.0; n];
            gamma.with_data(|gv| {
                for i in 0..m {
                    let g = &gout[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        ggamma[j] += g[j] * xh[j];
                        gbeta[j] += g[j];
                        let dxhat = g[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xh[j];
                    }
                    let inv = inv_std[i];
                    for j in 0..n {
                        let dxhat = g[j] * gv[j];
                        gx[i * n + j] =
                            inv * (dxhat - sum_dxhat / nf - xh[j] * sum_dxhat_xhat / nf);
                    }
                }
            });
            vec![(x.clone(), gx), (gamma.clone(), ggamma), (beta.clone(), gbeta)]
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let (b, c) = (logits.rows(), logits.cols());
            let g0 = gout[0];
            let mut gl = vec![0.0; b * c];
            for i in 0..b {
                for j in 0..c {
                    let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                    gl[i * c + j] = g0 * (probs[i * c + j] - indicator) / b as f64;
                }
            }
            vec![(logits.clone(), gl)]
        }
        Op::EmbeddingLookup { table, ids } => {
            let d = table.cols();
            let mut gt = vec![0.0; table.numel()];
            for (pos, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += gout[pos * d + j];
                }
            }
            vec![(table.clone(), gt)]
        }
        Op::Dropout { x, scaled_mask } => {
            let gx = gout.iter().zip(scaled_mask).map(|(g, m)| g * m).collect();
            vec![(x.clone(), gx)]
        }
        Op::Concat { parts, axis } => {
            let mut grads = Vec::with_capacity(parts.len());
            if *axis == 0 {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    grads.push((p.clone(), gout[offset..offset + len].to_vec()));
                    offset += len;
                }
            } else {
                let rows = parts[0].rows();
                let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
                let mut col_offset = 0;
                for p in parts {
                    let pc = p.cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for i in 0..rows {
                        let s = i * total_cols + col_offset;
                        gp.extend_from_slice(&gout[s..s + pc]);
                    }
                    grads.push((p.clone(), gp));
                    col_offset += pc;
                }
            }
            grads
        }
        Op::Slice { x, axis, start } => {
            let (m, n) = (x.rows(), x.cols());
            let mut gx = vec![0.0; m * n];
            if *axis == 0 {
                let rows = output.rows();
                gx[start * n..(start + rows) * n].copy_from_slice(gout);
            } else {
                let len = output.cols();
                for i in 0..m {
                    for j in 0..len {
                        gx[i * n + start + j] = gout[i * len + j];
                    }
                }
            }
            vec![(x.clone(), gx)]
        }
        Op::Mean { x } => {
            let scale = gout[0] / x.numel() as f64;
            vec![(x.clone(), vec![scale; x.numel()])]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.matmul(&eye, &x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_direct_value() {
        let tape = Tape::new();
        let x = t(&[2], &[0.0, 0.0]);
        let y = tape.softmax(&x, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);

        // Direct exp/sum evaluation.
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let y = tape.softmax(&x, 0).unwrap().to_vec();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (a, e) in y.iter().zip(&exps) {
            assert!((a - e / sum).abs() < 1e-12);
        }
        assert!((y[0] - 0.09003).abs() < 1e-5);
        assert!((y[1] - 0.24473).abs() < 1e-5);
        assert!((y[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::new();
        let x = t(&[4], &[0.3, -1.2, 2.5, 0.0]);
        let shifted = t(&[4], &[0.3 + 7.5, -1.2 + 7.5, 2.5 + 7.5, 7.5]);
        let a = tape.softmax(&x, 0).unwrap().to_vec();
        let b = tape.softmax(&shifted, 0).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::new();
        let x = t(&[2], &[f64::NAN, 0.0]);
        assert!(matches!(tape.softmax(&x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_axis0_matches_transposed_rows() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]);
        let cols = tape.softmax(&x, 0).unwrap();
        // Column sums are 1.
        let v = cols.to_vec();
        for j in 0..3 {
            let s = v[j] + v[3 + j];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        let tape = Tape::new();
        // Near-certain gold class drives the loss toward zero.
        let logits = t(&[1, 3], &[30.0, 0.0, 0.0]);
        let loss = tape.cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.item() < 1e-9);

        // Uniform logits over 7 classes: ln 7.
        let logits = t(&[1, 7], &[0.0; 7]);
        let loss = tape.cross_entropy(&logits, &[3]).unwrap();
        assert!((loss.item() - 7.0f64.ln()).abs() < 1e-12);
        assert!((loss.item() - 1.94591).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let tape = Tape::new();
        let logits = t(&[2, 3], &[0.0; 6]);
        let err = tape.cross_entropy(&logits, &[1, 5]).unwrap_err();
        match err {
            Error::LabelOutOfRange { index, classes, example } => {
                assert_eq!(index, 5);
                assert_eq!(classes, 3);
                assert_eq!(example, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_on_constant_graph_leaves_grads_zero() {
        let tape = Tape::new();
        let w = p(&[2], &[1.0, 2.0]);
        let root = Tensor::scalar(5.0);
        tape.backward(&root).unwrap();
        assert!(w.grad().is_none());
        assert_eq!(w.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let tape = Tape::new();
        let w = p(&[2, 2], &[1.0, -1.0, 0.5, 2.0]);
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.matmul(&w, &x).unwrap();
        let loss = tape.mean(&y);
        tape.backward(&loss).unwrap();
        let g1 = w.grad().unwrap();
        tape.backward(&loss).unwrap();
        let g2 = w.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = p(&[2], &[1.0, 2.0]);
        let y = tape.mul_scalar(&x, 2.0);
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_cleared_tape() {
        let tape = Tape::new();
        let x = p(&[1], &[3.0]);
        let y = tape.mul_scalar(&x, 2.0);
        tape.clear();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn clear_releases_recorded_nodes() {
        let tape = Tape::new();
        let x = p(&[1], &[3.0]);
        let y = tape.mul_scalar(&x, 2.0);
        assert_eq!(x.handle_count(), 2); // caller + tape node
        tape.clear();
        assert_eq!(x.handle_count(), 1);
        drop(y);
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // loss = sum(A·B) via mean·numel; dA = 1·Bᵀ, dB = Aᵀ·1.
        let tape = Tape::new();
        let a = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = p(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let y = tape.matmul(&a, &b).unwrap();
        let loss = tape.mul_scalar(&tape.mean(&y), 4.0);
        tape.backward(&loss).unwrap();
        // d/dA[i][p] = Σ_j B[p][j] → row sums of B.
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        // d/dB[p][j] = Σ_i A[i][p] → column sums of A.
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let eval_tape = Tape::new();
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let y = eval_tape.dropout(&x, 0.5, false).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert_eq!(y.id(), x.id());

        // Train mode on an unseeded tape is a contract error.
        assert!(eval_tape.dropout(&x, 0.5, true).is_err());

        let train_tape = Tape::seeded(7);
        let ones = t(&[100_000], &vec![1.0; 100_000]);
        let y = train_tape.dropout(&ones, 0.3, true).unwrap();
        let mean: f64 = y.to_vec().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "dropout expectation drifted: {mean}");
        for v in y.to_vec() {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_backward_uses_saved_mask() {
        let tape = Tape::seeded(3);
        let x = p(&[6], &[1.0; 6]);
        let y = tape.dropout(&x, 0.5, true).unwrap();
        let loss = tape.mul_scalar(&tape.mean(&y), 6.0); // sum
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        let yv = y.to_vec();
        for (gi, yi) in g.iter().zip(&yv) {
            assert_eq!(*gi, *yi); // input was all ones, so grad equals the scaled mask
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let b = t(&[2, 3], &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let c = tape.concat(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        let back = tape.slice(&c, 0, 1, 2).unwrap();
        assert_eq!(back.to_vec(), b.to_vec());

        let wide = tape.concat(&[b.clone(), b.clone()], 1).unwrap();
        assert_eq!(wide.shape(), &[2, 6]);
        let right = tape.slice(&wide, 1, 3, 3).unwrap();
        assert_eq!(right.to_vec(), b.to_vec());
    }

    #[test]
    fn layer_norm_rows_are_normalized() {
        let tape = Tape::new();
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let gamma = t(&[4], &[1.0; 4]);
        let beta = t(&[4], &[0.0; 4]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let v = y.to_vec();
        for i in 0..2 {
            let row = &v[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let tape = Tape::new();
        let table = p(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let out = tape.embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.to_vec(), vec![20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);

        let loss = tape.mul_scalar(&tape.mean(&out), 6.0); // sum
        tape.backward(&loss).unwrap();
        // Row 2 gathered twice, row 0 once, row 1 never.
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        assert!(tape.embedding_lookup(&table, &[3]).is_err());
    }
}
