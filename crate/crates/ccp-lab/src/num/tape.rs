use super::batchnorm::{BatchNormState, BnMode};
use super::linalg::{matmul, matmul_nt, matmul_tn};
use super::tensor::Tensor;
use super::{NumError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in execution order (so the vector is already a
/// topological order) and [`Tape::backward`] walks it in reverse. Each node
/// owns its forward value; gradients are allocated lazily during the
/// backward pass. Ops that need forward intermediates (softmax
/// probabilities, normalized activations) stash them in their op record.
pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowVec(usize, usize),
    ColMinus(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mode: BnMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormRows {
        x: usize,
        inv_norm: Vec<f64>,
    },
    RowLogSumExp {
        x: usize,
        softmax: Vec<f64>,
    },
    SumAll(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    EmbedLookup {
        table: usize,
        ids: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        softmax: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, as a tensor of the
    /// same shape. Zero if the node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Tensor::new(node.value.shape().to_vec(), data).expect("grad shape")
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Scale(a.0, c))
    }

    /// `x[r, c] + v[c]` — broadcast a bias row over every row of `x`.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let cols = *self.shape(x).last().expect("add_row_vec: x has no dims");
        assert_eq!(self.shape(v), [cols], "add_row_vec: bias length");
        let vd = self.data(v).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, a)| a + vd[i % cols])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x.0) || self.needs(v.0);
        self.push(value, needs, Op::AddRowVec(x.0, v.0))
    }

    /// `out[r, c] = v[r] - x[r, c]` — broadcast a column vector minus a matrix.
    pub fn col_minus(&mut self, v: Var, x: Var) -> Var {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        assert_eq!(self.shape(v), [r], "col_minus: column length");
        let vd = self.data(v).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, a)| vd[i / c] - a)
            .collect();
        let value = Tensor::new(vec![r, c], data).unwrap();
        let needs = self.needs(v.0) || self.needs(x.0);
        self.push(value, needs, Op::ColMinus(v.0, x.0))
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul: inner dims");
        let data = matmul(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::MatMul(a.0, b.0))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (n, k2) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul_nt: inner dims");
        let data = matmul_nt(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::MatMulNT(a.0, b.0))
    }

    // ---- activations and normalizers ----

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Gelu(x.0))
    }

    /// Per-row normalization over the last dimension with learned affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let f = *self.shape(x).last().expect("layer_norm: x has no dims");
        assert_eq!(self.shape(gamma), [f], "layer_norm: gamma length");
        assert_eq!(self.shape(beta), [f], "layer_norm: beta length");
        let rows = self.data(x).len() / f;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; rows * f];
        let mut xhat = vec![0.0; rows * f];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..f {
                let h = (row[j] - mean) * istd;
                xhat[r * f + j] = h;
                out[r * f + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out).unwrap();
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            value,
            needs,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Batch normalization over the batch dimension of `x[B, F]`.
    ///
    /// Train mode normalizes by the batch mean and biased batch variance and
    /// folds them into the running statistics
    /// (`running ← (1−momentum)·running + momentum·batch`); eval mode
    /// normalizes by the running statistics and leaves them untouched. Both
    /// modes are differentiable w.r.t. `x`, `gamma`, and `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(NumError::Invalid("batch_norm expects a 2-D input".into()));
        }
        let (b, f) = (self.shape(x)[0], self.shape(x)[1]);
        if state.features() != f || self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(NumError::ShapeMismatch {
                expected: vec![f],
                got: vec![state.features()],
            });
        }
        if mode == BnMode::Train && b < 2 {
            return Err(NumError::BatchTooSmall(b));
        }
        let eps = state.epsilon;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let betad = self.data(beta);

        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for r in 0..b {
                    for j in 0..f {
                        mean[j] += xd[r * f + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= b as f64;
                }
                for r in 0..b {
                    for j in 0..f {
                        let d = xd[r * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= b as f64;
                }
                (mean, var)
            }
            BnMode::Eval => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            ),
        };

        let mut inv_std = vec![0.0; f];
        for j in 0..f {
            inv_std[j] = 1.0 / (var[j] + eps).sqrt();
        }
        let mut out = vec![0.0; b * f];
        let mut xhat = vec![0.0; b * f];
        for r in 0..b {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = gd[j] * h + betad[j];
            }
        }

        if mode == BnMode::Train {
            state.update_running(&mean, &var);
        }

        let value = Tensor::new(vec![b, f], out).unwrap();
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            value,
            needs,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mode,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows rescaled to unit Euclidean norm; errors on a zero row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        let mut inv_norm = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumError::ZeroRow { row: i });
            }
            inv_norm[i] = 1.0 / norm;
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(vec![r, c], out).unwrap();
        let needs = self.needs(x.0);
        Ok(self.push(value, needs, Op::L2NormRows { x: x.0, inv_norm }))
    }

    /// Row-wise log-sum-exp of `x[R, C]`, yielding a length-`R` vector.
    pub fn row_logsumexp(&mut self, x: Var) -> Var {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r];
        let mut softmax = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                softmax[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                softmax[i * c + j] /= sum;
            }
            out[i] = max + sum.ln();
        }
        let value = Tensor::new(vec![r], out).unwrap();
        let needs = self.needs(x.0);
        self.push(value, needs, Op::RowLogSumExp { x: x.0, softmax })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(s), needs, Op::SumAll(x.0))
    }

    // ---- shape ops ----

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let c = self.shape(a)[1];
        assert_eq!(c, self.shape(b)[1], "concat_rows: column mismatch");
        let rows = self.shape(a)[0] + self.shape(b)[0];
        let mut data = Vec::with_capacity(rows * c);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let value = Tensor::new(vec![rows, c], data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::ConcatRows(a.0, b.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let r = self.shape(a)[0];
        assert_eq!(r, self.shape(b)[0], "concat_cols: row mismatch");
        let (c1, c2) = (self.shape(a)[1], self.shape(b)[1]);
        let mut data = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            data.extend_from_slice(&self.data(a)[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&self.data(b)[i * c2..(i + 1) * c2]);
        }
        let value = Tensor::new(vec![r, c1 + c2], data).unwrap();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::ConcatCols(a.0, b.0))
    }

    /// Select rows of `x` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let c = self.shape(x)[1];
        let rows = self.shape(x)[0];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of range {rows}");
            data.extend_from_slice(&self.data(x)[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data).unwrap();
        let needs = self.needs(x.0);
        self.push(
            value,
            needs,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Embedding lookup: rows of `table[V, D]` selected by token id.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
        for &id in ids {
            if id >= v {
                return Err(NumError::Invalid(format!(
                    "unknown token id {id} (vocabulary size {v})"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data).unwrap();
        let needs = self.needs(table.0);
        Ok(self.push(
            value,
            needs,
            Op::EmbedLookup {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `logits[T, V]` against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = (self.shape(logits)[0], self.shape(logits)[1]);
        if t != targets.len() {
            return Err(NumError::ShapeMismatch {
                expected: vec![t],
                got: vec![targets.len()],
            });
        }
        let ld = self.data(logits);
        let mut softmax = vec![0.0; t * v];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(NumError::Invalid(format!(
                    "target {target} out of vocabulary {v}"
                )));
            }
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                softmax[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                softmax[r * v + j] /= sum;
            }
            total += max + sum.ln() - row[target];
        }
        let value = Tensor::scalar(total / t as f64);
        let needs = self.needs(logits.0);
        Ok(self.push(
            value,
            needs,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                softmax,
            },
        ))
    }

    /// Fused multi-head scaled-dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, dim]` with `dim = heads · head_dim`;
    /// `valid[b·seq + s] == false` masks key position `s` of sentence `b`
    /// out of every softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        valid: &[bool],
    ) -> Var {
        let dim = self.shape(q)[1];
        assert_eq!(self.shape(q), self.shape(k));
        assert_eq!(self.shape(q), self.shape(v));
        assert_eq!(self.shape(q)[0], batch * seq, "attention: rows");
        assert_eq!(valid.len(), batch * seq, "attention: mask length");
        assert_eq!(dim % heads, 0, "attention: dim divisible by heads");
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut out = vec![0.0; batch * seq * dim];
        let mut probs = vec![0.0; batch * heads * seq * seq];

        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                for t in 0..seq {
                    let qrow = &qd[(b * seq + t) * dim + col..(b * seq + t) * dim + col + hd];
                    let pbase = ((b * heads + h) * seq + t) * seq;
                    // scores over valid keys
                    let mut max = f64::NEG_INFINITY;
                    let mut scores = vec![f64::NEG_INFINITY; seq];
                    for s in 0..seq {
                        if !valid[b * seq + s] {
                            continue;
                        }
                        let krow = &kd[(b * seq + s) * dim + col..(b * seq + s) * dim + col + hd];
                        let mut dot = 0.0;
                        for d in 0..hd {
                            dot += qrow[d] * krow[d];
                        }
                        let sc = dot * scale;
                        scores[s] = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                    let mut sum = 0.0;
                    for s in 0..seq {
                        if scores[s] > f64::NEG_INFINITY {
                            let e = (scores[s] - max).exp();
                            probs[pbase + s] = e;
                            sum += e;
                        }
                    }
                    for s in 0..seq {
                        probs[pbase + s] /= sum;
                    }
                    let orow = (b * seq + t) * dim + col;
                    for s in 0..seq {
                        let p = probs[pbase + s];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(b * seq + s) * dim + col..(b * seq + s) * dim + col + hd];
                        for d in 0..hd {
                            out[orow + d] += p * vrow[d];
                        }
                    }
                }
            }
        }

        let value = Tensor::new(vec![batch * seq, dim], out).unwrap();
        let needs = self.needs(q.0) || self.needs(k.0) || self.needs(v.0);
        self.push(
            value,
            needs,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    // ---- backward ----

    /// Reverse-accumulate gradients of a scalar `loss` through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumError::Invalid(
                "backward target must be a scalar".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let len = self.nodes[id].value.len();
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, i: usize, grad: &[f64]) {
        // Ops move out of self.nodes[i].op are avoided by matching on a raw
        // pointer-free copy of the small fields and borrowing aux slices.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            &Op::Mul(a, b) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Scale(a, c) => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(a, &da);
            }
            &Op::AddRowVec(x, v) => {
                self.accumulate(x, grad);
                let cols = self.nodes[v].value.len();
                let mut dv = vec![0.0; cols];
                for (idx, g) in grad.iter().enumerate() {
                    dv[idx % cols] += g;
                }
                self.accumulate(v, &dv);
            }
            &Op::ColMinus(v, x) => {
                let cols = self.nodes[x].value.shape()[1];
                let rows = self.nodes[v].value.len();
                let mut dv = vec![0.0; rows];
                for (idx, g) in grad.iter().enumerate() {
                    dv[idx / cols] += g;
                }
                self.accumulate(v, &dv);
                let dx: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(x, &dx);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (
                    self.nodes[a].value.shape()[0],
                    self.nodes[a].value.shape()[1],
                );
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].needs_grad {
                    // dA = G · Bᵀ
                    let da = matmul_nt(grad, self.nodes[b].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // dB = Aᵀ · G
                    let db = matmul_tn(self.nodes[a].value.data(), grad, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = (
                    self.nodes[a].value.shape()[0],
                    self.nodes[a].value.shape()[1],
                );
                let n = self.nodes[b].value.shape()[0];
                if self.nodes[a].needs_grad {
                    // out = A·Bᵀ, dA = G · B
                    let da = matmul(grad, self.nodes[b].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // dB = Gᵀ · A
                    let db = matmul_tn(grad, self.nodes[a].value.data(), m, n, k);
                    self.accumulate(b, &db);
                }
            }
            &Op::Gelu(x) => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(self.nodes[x].value.data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let f = self.nodes[gamma].value.len();
                let rows = xhat.len() / f;
                let gd = self.nodes[gamma].value.data();

                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = vec![0.0; rows * f];
                for r in 0..rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..f {
                        let g = grad[r * f + j];
                        let h = xhat[r * f + j];
                        dgamma[j] += g * h;
                        dbeta[j] += g;
                        let dxh = g * gd[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * h;
                    }
                    mean_dxhat /= f as f64;
                    mean_dxhat_xhat /= f as f64;
                    for j in 0..f {
                        let dxh = grad[r * f + j] * gd[j];
                        dx[r * f + j] =
                            inv_std[r] * (dxh - mean_dxhat - xhat[r * f + j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta, mode) = (*x, *gamma, *beta, *mode);
                let f = self.nodes[gamma].value.len();
                let b = xhat.len() / f;
                let gd = self.nodes[gamma].value.data();

                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..b {
                    for j in 0..f {
                        let g = grad[r * f + j];
                        dgamma[j] += g * xhat[r * f + j];
                        dbeta[j] += g;
                    }
                }

                let mut dx = vec![0.0; b * f];
                match mode {
                    BnMode::Eval => {
                        // Running stats are constants: dx = g·gamma·inv_std.
                        for r in 0..b {
                            for j in 0..f {
                                dx[r * f + j] = grad[r * f + j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                    BnMode::Train => {
                        // Batch stats depend on x.
                        let mut sum_dxhat = vec![0.0; f];
                        let mut sum_dxhat_xhat = vec![0.0; f];
                        for r in 0..b {
                            for j in 0..f {
                                let dxh = grad[r * f + j] * gd[j];
                                sum_dxhat[j] += dxh;
                                sum_dxhat_xhat[j] += dxh * xhat[r * f + j];
                            }
                        }
                        let bf = b as f64;
                        for r in 0..b {
                            for j in 0..f {
                                let dxh = grad[r * f + j] * gd[j];
                                dx[r * f + j] = inv_std[j] / bf
                                    * (bf * dxh
                                        - sum_dxhat[j]
                                        - xhat[r * f + j] * sum_dxhat_xhat[j]);
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::L2NormRows { x, inv_norm } => {
                let x = *x;
                let c = self.nodes[x].value.shape()[1];
                let r = inv_norm.len();
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += grad[row * c + j] * y[row * c + j];
                    }
                    for j in 0..c {
                        dx[row * c + j] =
                            (grad[row * c + j] - y[row * c + j] * dot) * inv_norm[row];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::RowLogSumExp { x, softmax } => {
                let x = *x;
                let c = self.nodes[x].value.shape()[1];
                let r = grad.len();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..c {
                        dx[row * c + j] = grad[row] * softmax[row * c + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::SumAll(x) => {
                let dx = vec![grad[0]; self.nodes[x].value.len()];
                self.accumulate(x, &dx);
            }
            &Op::ConcatRows(a, b) => {
                let na = self.nodes[a].value.len();
                self.accumulate(a, &grad[..na]);
                self.accumulate(b, &grad[na..]);
            }
            &Op::ConcatCols(a, b) => {
                let (c1, c2) = (
                    self.nodes[a].value.shape()[1],
                    self.nodes[b].value.shape()[1],
                );
                let r = self.nodes[a].value.shape()[0];
                let mut da = vec![0.0; r * c1];
                let mut db = vec![0.0; r * c2];
                for row in 0..r {
                    let base = row * (c1 + c2);
                    da[row * c1..(row + 1) * c1].copy_from_slice(&grad[base..base + c1]);
                    db[row * c2..(row + 1) * c2]
                        .copy_from_slice(&grad[base + c1..base + c1 + c2]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let c = self.nodes[x].value.shape()[1];
                let mut dx = vec![0.0; self.nodes[x].value.len()];
                for (out_row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += grad[out_row * c + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::EmbedLookup { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].value.shape()[1];
                let mut dt = vec![0.0; self.nodes[table].value.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[row * d + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                softmax,
            } => {
                let logits = *logits;
                let t = targets.len();
                let v = self.nodes[logits].value.shape()[1];
                let gscale = grad[0] / t as f64;
                let mut dl = vec![0.0; t * v];
                for r in 0..t {
                    for j in 0..v {
                        let delta = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * v + j] = (softmax[r * v + j] - delta) * gscale;
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let dim = self.nodes[q].value.shape()[1];
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let qd = self.nodes[q].value.data();
                let kd = self.nodes[k].value.data();
                let vd = self.nodes[v].value.data();

                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];

                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * hd;
                        for t in 0..seq {
                            let pbase = ((b * heads + h) * seq + t) * seq;
                            let gout = &grad
                                [(b * seq + t) * dim + col..(b * seq + t) * dim + col + hd];
                            // dP[t,s] and accumulation into dV
                            let mut dp = vec![0.0; seq];
                            for s in 0..seq {
                                let p = probs[pbase + s];
                                if p == 0.0 {
                                    continue;
                                }
                                let vrow =
                                    &vd[(b * seq + s) * dim + col..(b * seq + s) * dim + col + hd];
                                let mut acc = 0.0;
                                for d in 0..hd {
                                    acc += gout[d] * vrow[d];
                                    dv[(b * seq + s) * dim + col + d] += p * gout[d];
                                }
                                dp[s] = acc;
                            }
                            // softmax backward: ds = P ⊙ (dP − Σ P·dP)
                            let mut dot = 0.0;
                            for s in 0..seq {
                                dot += probs[pbase + s] * dp[s];
                            }
                            for s in 0..seq {
                                let p = probs[pbase + s];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[s] - dot) * scale;
                                let qrow = (b * seq + t) * dim + col;
                                let krow = (b * seq + s) * dim + col;
                                for d in 0..hd {
                                    dq[qrow + d] += ds * kd[krow + d];
                                    dk[krow + d] += ds * qd[qrow + d];
                                }
                            }
                        }
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_backward() {
        // loss = sum(a ⊙ (a + b)) ⇒ da = 2a + b, db = a
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![2], vec![5.0, -1.0]).unwrap(), true);
        let s = tape.add(a, b);
        let p = tape.mul(a, s);
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[9.0, 5.0]);
        assert_eq!(tape.grad(b).data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_backward_matches_hand_result() {
        // loss = sum(A·B); dA = ones·Bᵀ, dB = Aᵀ·ones
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap(), true);
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn logsumexp_is_stable_and_correct() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_rows(&[vec![1000.0, 1000.0], vec![0.0, (2.0f64).ln()]]).unwrap(),
            true,
        );
        let lse = tape.row_logsumexp(x);
        let v = tape.value(lse).data().to_vec();
        assert!((v[0] - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
        assert!((v[1] - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let g = tape.gather_rows(x, &[0, 0, 1]);
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_lookup_rejects_unknown_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(vec![4, 3]), true);
        assert!(tape.embed_lookup(table, &[0, 3]).is_ok());
        assert!(tape.embed_lookup(table, &[4]).is_err());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 7]), true);
        let loss = tape.softmax_cross_entropy(logits, &[0, 3, 6]).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(tape.backward(x).is_err());
    }
}
