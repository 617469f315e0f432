//! Reverse-mode tape over [`Tensor`] values.
//!
//! A tape is built and consumed by one execution context: record the
//! forward pass, call [`Tape::backward`] (or [`Tape::backward_seeded`])
//! exactly once, read gradients for the marked leaves. Saved inputs are
//! kept on the tape, nothing is recomputed.

use std::collections::HashMap;

use super::ops;
use super::{Scalar, Tensor, TensorError};

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeState {
    Recording,
    Consumed,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Add {
        a: VarId,
        b: VarId,
    },
    AddBiasRows {
        x: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        a: VarId,
        c: T,
    },
    Matmul {
        a: VarId,
        b: VarId,
    },
    Transpose {
        a: VarId,
    },
    Reshape {
        a: VarId,
    },
    ConcatRows {
        parts: Vec<VarId>,
    },
    SliceRows {
        a: VarId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<VarId>,
    },
    SliceCols {
        a: VarId,
        start: usize,
    },
    EmbeddingLookup {
        table: VarId,
        ids: Vec<usize>,
    },
    Gelu {
        a: VarId,
    },
    L2Normalize {
        a: VarId,
    },
    SoftmaxRows {
        a: VarId,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    Conv2dSame {
        x: VarId,
        kernel: VarId,
        bias: VarId,
    },
    Patchify {
        x: VarId,
        patch: usize,
    },
    CrossEntropyLogits {
        logits: VarId,
        targets: Vec<usize>,
    },
    Sum {
        a: VarId,
    },
    Mean {
        a: VarId,
    },
}

impl<T> Op<T> {
    fn for_each_input(&self, mut f: impl FnMut(VarId)) {
        match self {
            Op::Input => {}
            Op::Add { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => {
                f(*a);
                f(*b);
            }
            Op::AddBiasRows { x, b } => {
                f(*x);
                f(*b);
            }
            Op::Scale { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Gelu { a }
            | Op::L2Normalize { a }
            | Op::SoftmaxRows { a }
            | Op::Sum { a }
            | Op::Mean { a } => f(*a),
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => {
                for &p in parts {
                    f(p);
                }
            }
            Op::EmbeddingLookup { table, .. } => f(*table),
            Op::LayerNorm { x, gain, bias } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::Conv2dSame { x, kernel, bias } => {
                f(*x);
                f(*kernel);
                f(*bias);
            }
            Op::Patchify { x, .. } => f(*x),
            Op::CrossEntropyLogits { logits, .. } => f(*logits),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradients for the marked leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_leaf: HashMap<VarId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, leaf: VarId) -> &Tensor<T> {
        self.by_leaf
            .get(&leaf)
            .expect("queried gradient for a var that was not marked as a leaf")
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

const LN_EPS: f64 = 1e-5;

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaves: Vec<VarId>,
    state: TapeState,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: Vec::new(),
            state: TapeState::Recording,
            flops: 0,
        }
    }

    /// Records an input that should receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        let id = self.push(Op::Input, value);
        self.leaves.push(id);
        id
    }

    /// Records an input treated as a constant (no gradient kept).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Input, value)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn leaves(&self) -> &[VarId] {
        &self.leaves
    }

    pub fn state(&self) -> TapeState {
        self.state
    }

    /// Forward arithmetic cost recorded so far (see each op for its count).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    // ---- arithmetic ----

    /// Elementwise sum; dims must match exactly. Cost: numel.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dims() != tb.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.dims().to_vec(),
                right: tb.dims().to_vec(),
            });
        }
        let data: Vec<T> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = ta.dims().to_vec();
        self.flops += data.len() as u64;
        Ok(self.push(Op::Add { a, b }, Tensor::new(dims, data).unwrap()))
    }

    /// Adds a `[n]` bias vector to every trailing-axis row of `x`.
    /// This is the only broadcast the tape offers. Cost: numel.
    pub fn add_bias_rows(&mut self, x: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let n = tx.last_dim();
        if tb.rank() != 1 || tb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_rows",
                left: tx.dims().to_vec(),
                right: tb.dims().to_vec(),
            });
        }
        let rows = tx.lead_rows();
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                data[r * n + j] = data[r * n + j] + tb.data()[j];
            }
        }
        let dims = tx.dims().to_vec();
        self.flops += data.len() as u64;
        Ok(self.push(Op::AddBiasRows { x, b }, Tensor::new(dims, data).unwrap()))
    }

    /// Elementwise (Hadamard) product. Cost: numel.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dims() != tb.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: ta.dims().to_vec(),
                right: tb.dims().to_vec(),
            });
        }
        let data: Vec<T> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = ta.dims().to_vec();
        self.flops += data.len() as u64;
        Ok(self.push(Op::Mul { a, b }, Tensor::new(dims, data).unwrap()))
    }

    /// Multiplies by a compile-time constant scalar. Cost: numel.
    pub fn scale(&mut self, a: VarId, c: T) -> VarId {
        let ta = &self.nodes[a.0].value;
        let data: Vec<T> = ta.data().iter().map(|&x| x * c).collect();
        let dims = ta.dims().to_vec();
        self.flops += data.len() as u64;
        self.push(Op::Scale { a, c }, Tensor::new(dims, data).unwrap())
    }

    /// 2-D matrix product `[m,k]x[k,n] -> [m,n]`. Cost: 2mkn.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.dims()[1] != tb.dims()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.dims().to_vec(),
                right: tb.dims().to_vec(),
            });
        }
        let (m, k) = (ta.dims()[0], ta.dims()[1]);
        let n = tb.dims()[1];
        let mut out = vec![T::ZERO; m * n];
        ops::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out).unwrap()))
    }

    /// 2-D transpose. Cost: 0 (data movement).
    pub fn transpose(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(TensorError::BadDims {
                op: "transpose",
                expected: "rank 2".into(),
                got: ta.dims().to_vec(),
            });
        }
        let (m, n) = (ta.dims()[0], ta.dims()[1]);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose { a }, Tensor::new(vec![n, m], out).unwrap()))
    }

    /// Reinterprets the buffer under new dims of equal numel. Cost: 0.
    pub fn reshape(&mut self, a: VarId, dims: &[usize]) -> Result<VarId, TensorError> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = dims.iter().product();
        if numel != ta.numel() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::BadDims {
                op: "reshape",
                expected: format!("dims with product {}", ta.numel()),
                got: dims.to_vec(),
            });
        }
        let t = Tensor::new(dims.to_vec(), ta.data().to_vec()).unwrap();
        Ok(self.push(Op::Reshape { a }, t))
    }

    /// Stacks 2-D parts with equal column counts along the row axis. Cost: 0.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let n = self.nodes[parts[0].0].value.dims()[1];
        let mut rows = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.rank() != 2 || tp.dims()[1] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].value.dims().to_vec(),
                    right: tp.dims().to_vec(),
                });
            }
            rows += tp.dims()[0];
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let t = Tensor::new(vec![rows, n], data).unwrap();
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            t,
        ))
    }

    /// Takes `len` consecutive rows starting at `start`. Cost: 0.
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 || start + len > ta.dims()[0] || len == 0 {
            return Err(TensorError::BadDims {
                op: "slice_rows",
                expected: format!("rows {}..{} within", start, start + len),
                got: ta.dims().to_vec(),
            });
        }
        let n = ta.dims()[1];
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data).unwrap();
        Ok(self.push(Op::SliceRows { a, start }, t))
    }

    /// Stacks 2-D parts with equal row counts along the column axis. Cost: 0.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let m = self.nodes[parts[0].0].value.dims()[0];
        let mut cols = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.rank() != 2 || tp.dims()[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].value.dims().to_vec(),
                    right: tp.dims().to_vec(),
                });
            }
            cols += tp.dims()[1];
        }
        let mut data = vec![T::ZERO; m * cols];
        let mut off = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            let pn = tp.dims()[1];
            for r in 0..m {
                data[r * cols + off..r * cols + off + pn]
                    .copy_from_slice(&tp.data()[r * pn..(r + 1) * pn]);
            }
            off += pn;
        }
        let t = Tensor::new(vec![m, cols], data).unwrap();
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            t,
        ))
    }

    /// Takes `len` consecutive columns starting at `start`. Cost: 0.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 || start + len > ta.dims()[1] || len == 0 {
            return Err(TensorError::BadDims {
                op: "slice_cols",
                expected: format!("cols {}..{} within", start, start + len),
                got: ta.dims().to_vec(),
            });
        }
        let (m, n) = (ta.dims()[0], ta.dims()[1]);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.data()[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], data).unwrap();
        Ok(self.push(Op::SliceCols { a, start }, t))
    }

    /// Gathers rows of a `[v,d]` table; gradient scatters back. Cost: 0.
    pub fn embedding_lookup(&mut self, table: VarId, ids: &[usize]) -> Result<VarId, TensorError> {
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(TensorError::BadDims {
                op: "embedding_lookup",
                expected: "rank-2 table".into(),
                got: tt.dims().to_vec(),
            });
        }
        let (v, d) = (tt.dims()[0], tt.dims()[1]);
        if ids.is_empty() {
            return Err(TensorError::BadDims {
                op: "embedding_lookup",
                expected: "at least one id".into(),
                got: vec![0],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::BadDims {
                op: "embedding_lookup",
                expected: format!("ids < {v}"),
                got: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data).unwrap();
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    /// Tanh-approximation GELU. Cost: 8 * numel (nominal).
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let data: Vec<T> = ta.data().iter().map(|&x| ops::gelu(x)).collect();
        let dims = ta.dims().to_vec();
        self.flops += 8 * data.len() as u64;
        self.push(Op::Gelu { a }, Tensor::new(dims, data).unwrap())
    }

    /// Divides every trailing-axis vector by its Euclidean norm.
    /// Cost: 3 * numel + 2 per vector (nominal).
    pub fn l2_normalize(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let n = ta.last_dim();
        let rows = ta.lead_rows();
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let mut sq = T::ZERO;
            for &v in row.iter() {
                sq += v * v;
            }
            let norm = sq.sqrt();
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        let dims = ta.dims().to_vec();
        self.flops += 3 * data.len() as u64 + 2 * rows as u64;
        self.push(Op::L2Normalize { a }, Tensor::new(dims, data).unwrap())
    }

    /// Row softmax over the trailing axis, max-subtracted for stability.
    /// Cost: 4 * numel (nominal).
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let n = ta.last_dim();
        let rows = ta.lead_rows();
        let mut data = ta.data().to_vec();
        ops::softmax_rows(&mut data, rows, n);
        let dims = ta.dims().to_vec();
        self.flops += 4 * data.len() as u64;
        self.push(Op::SoftmaxRows { a }, Tensor::new(dims, data).unwrap())
    }

    /// Per-vector layer norm over the trailing axis followed by the affine
    /// map `gain * xhat + bias`; epsilon 1e-5. Cost: 8 * numel (nominal).
    pub fn layernorm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = tx.last_dim();
        if tg.rank() != 1 || tg.numel() != d || tb.rank() != 1 || tb.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                left: tx.dims().to_vec(),
                right: tg.dims().to_vec(),
            });
        }
        let rows = tx.lead_rows();
        let mut data = tx.data().to_vec();
        let dd = T::from_f64(d as f64);
        let eps = T::from_f64(LN_EPS);
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row.iter() {
                mean += v;
            }
            mean = mean / dd;
            let mut var = T::ZERO;
            for &v in row.iter() {
                let c = v - mean;
                var += c * c;
            }
            var = var / dd;
            let rstd = T::ONE / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = tg.data()[j] * ((*v - mean) * rstd) + tb.data()[j];
            }
        }
        let dims = tx.dims().to_vec();
        self.flops += 8 * data.len() as u64;
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            Tensor::new(dims, data).unwrap(),
        ))
    }

    /// Stride-1 zero-padded conv preserving spatial dims; odd kernels only.
    /// Cost: h * w * cout * (2 * cin * k^2 + 1).
    pub fn conv2d_same(
        &mut self,
        x: VarId,
        kernel: VarId,
        bias: VarId,
    ) -> Result<VarId, TensorError> {
        let (tx, tk, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        if tx.rank() != 3 || tk.rank() != 4 {
            return Err(TensorError::BadDims {
                op: "conv2d_same",
                expected: "x [c,h,w], kernel [co,ci,k,k]".into(),
                got: tx.dims().to_vec(),
            });
        }
        let (cin, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
        let (cout, kci, kh, kw) = (tk.dims()[0], tk.dims()[1], tk.dims()[2], tk.dims()[3]);
        if kh != kw || kci != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                left: tx.dims().to_vec(),
                right: tk.dims().to_vec(),
            });
        }
        if kh % 2 == 0 {
            return Err(TensorError::EvenKernel(kh));
        }
        if tb.rank() != 1 || tb.numel() != cout {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                left: tk.dims().to_vec(),
                right: tb.dims().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; cout * h * w];
        ops::conv2d_same(tx.data(), tk.data(), tb.data(), &mut out, cin, cout, h, w, kh);
        self.flops += (h * w * cout * (2 * cin * kh * kh + 1)) as u64;
        Ok(self.push(
            Op::Conv2dSame { x, kernel, bias },
            Tensor::new(vec![cout, h, w], out).unwrap(),
        ))
    }

    /// Splits a `[c,h,w]` image into p x p patch rows (raster order,
    /// channel-major within a row). Cost: 0.
    pub fn patchify(&mut self, x: VarId, patch: usize) -> Result<VarId, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 3 || tx.dims()[1] % patch != 0 || tx.dims()[2] % patch != 0 {
            return Err(TensorError::BadDims {
                op: "patchify",
                expected: format!("[c,h,w] with h,w divisible by {patch}"),
                got: tx.dims().to_vec(),
            });
        }
        let (c, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
        let rows = (h / patch) * (w / patch);
        let cols = c * patch * patch;
        let mut out = vec![T::ZERO; rows * cols];
        ops::patchify(tx.data(), &mut out, c, h, w, patch);
        Ok(self.push(
            Op::Patchify { x, patch },
            Tensor::new(vec![rows, cols], out).unwrap(),
        ))
    }

    /// Mean cross entropy of `[n,c]` logit rows against integer targets.
    /// Cost: 5 * numel (nominal).
    pub fn cross_entropy_logits(
        &mut self,
        logits: VarId,
        targets: &[usize],
    ) -> Result<VarId, TensorError> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 2 || tl.dims()[0] != targets.len() {
            return Err(TensorError::BadDims {
                op: "cross_entropy_logits",
                expected: format!("[{},c] logits", targets.len()),
                got: tl.dims().to_vec(),
            });
        }
        let (n, c) = (tl.dims()[0], tl.dims()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::BadDims {
                op: "cross_entropy_logits",
                expected: format!("targets < {c}"),
                got: vec![bad],
            });
        }
        let mut loss = T::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = &tl.data()[i * c..(i + 1) * c];
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - m).exp();
            }
            loss += m + sum.ln() - row[t];
        }
        loss = loss / T::from_f64(n as f64);
        self.flops += 5 * (n * c) as u64;
        Ok(self.push(
            Op::CrossEntropyLogits {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Sums every element into a `[1]` tensor. Cost: numel.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let mut s = T::ZERO;
        for &v in ta.data() {
            s += v;
        }
        self.flops += ta.numel() as u64;
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    /// Arithmetic mean of every element into a `[1]` tensor. Cost: numel.
    pub fn mean(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a.0].value;
        let mut s = T::ZERO;
        for &v in ta.data() {
            s += v;
        }
        s = s / T::from_f64(ta.numel() as f64);
        self.flops += ta.numel() as u64;
        self.push(Op::Mean { a }, Tensor::scalar(s))
    }

    // ---- backward ----

    /// Seeds the final output with `seed` and runs the reverse sweep.
    pub fn backward(&mut self, seed: Tensor<T>) -> Result<Gradients<T>, TensorError> {
        let last = VarId(
            self.nodes
                .len()
                .checked_sub(1)
                .expect("backward on an empty tape"),
        );
        self.backward_seeded(vec![(last, seed)])
    }

    /// Seeds an arbitrary set of nodes and runs the reverse sweep once.
    /// Consumes the tape: a second call is a state error.
    pub fn backward_seeded(
        &mut self,
        seeds: Vec<(VarId, Tensor<T>)>,
    ) -> Result<Gradients<T>, TensorError> {
        if self.state == TapeState::Consumed {
            return Err(TensorError::TapeConsumed);
        }
        for (id, seed) in &seeds {
            let out_dims = self.nodes[id.0].value.dims();
            if seed.dims() != out_dims {
                return Err(TensorError::BadSeed {
                    seed: seed.dims().to_vec(),
                    out: out_dims.to_vec(),
                });
            }
        }
        self.state = TapeState::Consumed;

        // A node needs an adjoint only if a marked leaf is reachable from
        // it; gradients never flow into constants, which skips roughly half
        // the backward arithmetic on a frozen model.
        let mut needs = vec![false; self.nodes.len()];
        for &leaf in &self.leaves {
            needs[leaf.0] = true;
        }
        for idx in 0..self.nodes.len() {
            if needs[idx] {
                continue;
            }
            let mut any = false;
            self.nodes[idx].op.for_each_input(|input| {
                any |= needs[input.0];
            });
            needs[idx] = any;
        }

        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            if !needs[id.0] {
                continue;
            }
            match &mut adj[id.0] {
                Some(buf) => {
                    for (dst, src) in buf.iter_mut().zip(seed.data()) {
                        *dst += *src;
                    }
                }
                slot => *slot = Some(seed.into_data()),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-attach the adjoint for leaves so it survives extraction.
            if matches!(self.nodes[idx].op, Op::Input) {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut adj, &needs);
        }

        let mut by_leaf = HashMap::with_capacity(self.leaves.len());
        for &leaf in &self.leaves {
            let dims = self.nodes[leaf.0].value.dims().to_vec();
            let grad = match adj[leaf.0].take() {
                Some(buf) => Tensor::new(dims, buf).unwrap(),
                None => Tensor::zeros(&dims),
            };
            by_leaf.insert(leaf, grad);
        }
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>], needs: &[bool]) {
        let numel_of = |id: VarId| self.nodes[id.0].value.numel();
        // Shadows the free accumulate with a needs-gated one for this sweep.
        let accumulate = |adj: &mut [Option<Vec<T>>],
                          id: VarId,
                          numel: usize,
                          f: &mut dyn FnMut(&mut [T])| {
            if !needs[id.0] {
                return;
            }
            let buf = adj[id.0].get_or_insert_with(|| vec![T::ZERO; numel]);
            f(buf);
        };
        match &self.nodes[idx].op {
            Op::Input => unreachable!("inputs are handled in the sweep"),
            Op::Add { a, b } => {
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
                accumulate(adj, *b, numel_of(*b), &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
            }
            Op::AddBiasRows { x, b } => {
                accumulate(adj, *x, numel_of(*x), &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
                let n = self.nodes[b.0].value.numel();
                accumulate(adj, *b, n, &mut |buf| {
                    for (i, &s) in g.iter().enumerate() {
                        buf[i % n] += s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ta = self.nodes[a.0].value.data();
                let tb = self.nodes[b.0].value.data();
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * tb[i];
                    }
                });
                accumulate(adj, *b, numel_of(*b), &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ta[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += *s * c;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.dims()[0], ta.dims()[1]);
                let n = tb.dims()[1];
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    ops::matmul_grad_a(g, tb.data(), buf, m, k, n);
                });
                accumulate(adj, *b, numel_of(*b), &mut |buf| {
                    ops::matmul_grad_b(g, ta.data(), buf, m, k, n);
                });
            }
            Op::Transpose { a } => {
                let (n, m) = {
                    let d = self.nodes[idx].value.dims();
                    (d[0], d[1])
                };
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pn = numel_of(p);
                    accumulate(adj, p, pn, &mut |buf| {
                        for (d, s) in buf.iter_mut().zip(&g[off..off + pn]) {
                            *d += *s;
                        }
                    });
                    off += pn;
                }
            }
            Op::SliceRows { a, start } => {
                let n = self.nodes[a.0].value.dims()[1];
                let off = start * n;
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for (i, &s) in g.iter().enumerate() {
                        buf[off + i] += s;
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[parts[0].0].value.dims()[0];
                let cols = self.nodes[idx].value.dims()[1];
                let mut off = 0;
                for &p in parts {
                    let pn = self.nodes[p.0].value.dims()[1];
                    accumulate(adj, p, numel_of(p), &mut |buf| {
                        for r in 0..m {
                            for j in 0..pn {
                                buf[r * pn + j] += g[r * cols + off + j];
                            }
                        }
                    });
                    off += pn;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = {
                    let d = self.nodes[a.0].value.dims();
                    (d[0], d[1])
                };
                let len = self.nodes[idx].value.dims()[1];
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for r in 0..m {
                        for j in 0..len {
                            buf[r * n + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::EmbeddingLookup { table, ids } => {
                let d = self.nodes[table.0].value.dims()[1];
                accumulate(adj, *table, numel_of(*table), &mut |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let ta = self.nodes[a.0].value.data();
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ops::gelu_grad(ta[i]);
                    }
                });
            }
            Op::L2Normalize { a } => {
                let ta = &self.nodes[a.0].value;
                let y = self.nodes[idx].value.data();
                let n = ta.last_dim();
                let rows = ta.lead_rows();
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for r in 0..rows {
                        let o = r * n;
                        let mut norm_sq = T::ZERO;
                        for j in 0..n {
                            norm_sq += ta.data()[o + j] * ta.data()[o + j];
                        }
                        let norm = norm_sq.sqrt();
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            dot += y[o + j] * g[o + j];
                        }
                        for j in 0..n {
                            buf[o + j] += (g[o + j] - y[o + j] * dot) / norm;
                        }
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let s = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.lead_rows();
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for r in 0..rows {
                        let o = r * n;
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            dot += g[o + j] * s[o + j];
                        }
                        for j in 0..n {
                            buf[o + j] += s[o + j] * (g[o + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = &self.nodes[x.0].value;
                let tg = self.nodes[gain.0].value.data();
                let d = tx.last_dim();
                let rows = tx.lead_rows();
                let dd = T::from_f64(d as f64);
                let eps = T::from_f64(LN_EPS);
                // Recompute per-row stats from the saved input.
                let mut xhat = vec![T::ZERO; tx.numel()];
                let mut rstds = vec![T::ZERO; rows];
                for r in 0..rows {
                    let o = r * d;
                    let row = &tx.data()[o..o + d];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean / dd;
                    let mut var = T::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var / dd;
                    let rstd = T::ONE / (var + eps).sqrt();
                    rstds[r] = rstd;
                    for j in 0..d {
                        xhat[o + j] = (row[j] - mean) * rstd;
                    }
                }
                accumulate(adj, *gain, d, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                accumulate(adj, *bias, d, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                accumulate(adj, *x, numel_of(*x), &mut |buf| {
                    for r in 0..rows {
                        let o = r * d;
                        let mut mean_h = T::ZERO;
                        let mut mean_hx = T::ZERO;
                        for j in 0..d {
                            let hj = g[o + j] * tg[j];
                            mean_h += hj;
                            mean_hx += hj * xhat[o + j];
                        }
                        mean_h = mean_h / dd;
                        mean_hx = mean_hx / dd;
                        for j in 0..d {
                            let hj = g[o + j] * tg[j];
                            buf[o + j] += rstds[r] * (hj - mean_h - xhat[o + j] * mean_hx);
                        }
                    }
                });
            }
            Op::Conv2dSame { x, kernel, bias } => {
                let tx = &self.nodes[x.0].value;
                let tk = &self.nodes[kernel.0].value;
                let (cin, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
                let (cout, k) = (tk.dims()[0], tk.dims()[2]);
                // The three adjoints accumulate in one pass; unneeded ones
                // land in scratch buffers that are dropped afterwards.
                let mut dx = adj[x.0].take().unwrap_or_else(|| vec![T::ZERO; tx.numel()]);
                let mut dk = adj[kernel.0]
                    .take()
                    .unwrap_or_else(|| vec![T::ZERO; tk.numel()]);
                let mut db = adj[bias.0].take().unwrap_or_else(|| vec![T::ZERO; cout]);
                ops::conv2d_same_grad(
                    g,
                    tx.data(),
                    tk.data(),
                    &mut dx,
                    &mut dk,
                    &mut db,
                    cin,
                    cout,
                    h,
                    w,
                    k,
                    needs[x.0],
                    needs[kernel.0],
                );
                if needs[x.0] {
                    adj[x.0] = Some(dx);
                }
                if needs[kernel.0] {
                    adj[kernel.0] = Some(dk);
                }
                if needs[bias.0] {
                    adj[bias.0] = Some(db);
                }
            }
            Op::Patchify { x, patch } => {
                let tx = &self.nodes[x.0].value;
                let (c, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
                let p = *patch;
                accumulate(adj, *x, numel_of(*x), &mut |buf| {
                    ops::patchify_grad(g, buf, c, h, w, p);
                });
            }
            Op::CrossEntropyLogits { logits, targets } => {
                let tl = &self.nodes[logits.0].value;
                let (n, c) = (tl.dims()[0], tl.dims()[1]);
                let gscale = g[0] / T::from_f64(n as f64);
                accumulate(adj, *logits, numel_of(*logits), &mut |buf| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &tl.data()[i * c..(i + 1) * c];
                        let mut m = row[0];
                        for &v in row {
                            m = m.maximum(v);
                        }
                        let mut sum = T::ZERO;
                        for &v in row {
                            sum += (v - m).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - m).exp() / sum;
                            let ind = if j == t { T::ONE } else { T::ZERO };
                            buf[i * c + j] += gscale * (p - ind);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for d in buf.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::Mean { a } => {
                let s = g[0] / T::from_f64(numel_of(*a) as f64);
                accumulate(adj, *a, numel_of(*a), &mut |buf| {
                    for d in buf.iter_mut() {
                        *d += s;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::<f64>::eye(2));
        let b = tape.constant(t2(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t2(1, 1, vec![2.0]));
        let b = tape.constant(t2(1, 1, vec![3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, vec![0.0; 6]));
        let b = tape.constant(t2(2, 2, vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_extreme() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_vec(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(x);
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::<f64>::from_vec(vec![1000.0, 0.0]));
        let s = tape.softmax_rows(x);
        let out = tape.value(s).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()));
        let s = tape.softmax_rows(x);
        let v = tape.value(s);
        for r in 0..3 {
            let sum: f64 = v.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_row_and_zero_gain() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_vec(vec![5.0; 8]));
        let g = tape.constant(Tensor::<f64>::from_vec(vec![1.0; 8]));
        let b = tape.constant(Tensor::<f64>::from_vec(vec![0.0; 8]));
        let y = tape.layernorm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-12);
        }

        let x = tape.constant(Tensor::<f64>::from_vec(vec![1.0, -3.0, 2.5, 0.0]));
        let g = tape.constant(Tensor::<f64>::from_vec(vec![0.0; 4]));
        let b = tape.constant(Tensor::<f64>::from_vec(vec![7.0, -1.0, 0.5, 2.0]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -1.0, 0.5, 2.0]);
    }

    #[test]
    fn backward_identity_and_square() {
        // f(x) = x with seed g returns g.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.scale(x, 1.0);
        let _ = y;
        let grads = tape.backward(Tensor::from_vec(vec![0.5, -2.0])).unwrap();
        assert_eq!(grads.get(x).data(), &[0.5, -2.0]);

        // f(x) = sum(x^2), x = [1,2,3] -> grad [2,4,6].
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let _ = tape.sum(sq);
        let grads = tape.backward(Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let _ = tape.scale(x, 2.0);
        tape.backward(Tensor::scalar(1.0)).unwrap();
        let err = tape.backward(Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, TensorError::TapeConsumed));
    }

    #[test]
    fn backward_returns_one_gradient_per_leaf_with_leaf_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let unused = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.add_bias_rows(a, b).unwrap();
        let _ = tape.sum(y);
        let grads = tape.backward(Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.len(), 3);
        assert_eq!(grads.get(a).dims(), &[3, 2]);
        assert_eq!(grads.get(b).dims(), &[2]);
        assert_eq!(grads.get(unused).dims(), &[4]);
        assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_kernel_is_identity_bitwise() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::new(
            vec![2, 4, 4],
            (0..32).map(|i| (i as f32) * 0.173 - 2.0).collect(),
        )
        .unwrap();
        let xid = tape.constant(x.clone());
        let mut ker = Tensor::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            ker.data_mut()[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let k = tape.constant(ker);
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d_same(xid, k, b).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv_zero_kernel_gives_constant_bias_planes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[3, 5, 5], 0.7));
        let k = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let b = tape.constant(Tensor::from_vec(vec![1.25, -0.5]));
        let y = tape.conv2d_same(x, k, b).unwrap();
        let out = tape.value(y);
        assert!(out.data()[..25].iter().all(|&v| v == 1.25));
        assert!(out.data()[25..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn conv_rejects_even_kernels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d_same(x, k, b),
            Err(TensorError::EvenKernel(2))
        ));
    }

    #[test]
    fn conv_preserves_spatial_dims_for_odd_kernels() {
        for k in [1usize, 3, 5] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::filled(&[2, 7, 9], 0.3));
            let ker = tape.constant(Tensor::filled(&[4, 2, k, k], 0.1));
            let b = tape.constant(Tensor::zeros(&[4]));
            let y = tape.conv2d_same(x, ker, b).unwrap();
            assert_eq!(tape.value(y).dims(), &[4, 7, 9]);
        }
    }

    #[test]
    fn embedding_repeated_ids_give_identical_rows() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(t2(4, 3, (0..12).map(|i| i as f64).collect()));
        let out = tape.embedding_lookup(table, &[2, 2]).unwrap();
        let v = tape.value(out);
        assert_eq!(&v.data()[..3], &v.data()[3..]);
        assert_eq!(&v.data()[..3], &[6.0, 7.0, 8.0]);

        assert!(tape.embedding_lookup(table, &[]).is_err());
        assert!(tape.embedding_lookup(table, &[4]).is_err());
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(4, 3, (0..12).map(|i| i as f64).collect()));
        let top = tape.slice_rows(x, 0, 2).unwrap();
        let bot = tape.slice_rows(x, 2, 2).unwrap();
        let back = tape.concat_rows(&[top, bot]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());

        let left = tape.slice_cols(x, 0, 1).unwrap();
        let right = tape.slice_cols(x, 1, 2).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t2(4, 4, vec![0.0; 16]));
        let loss = tape.cross_entropy_logits(logits, &[0, 1, 2, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_rows_have_unit_norm() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(2, 3, vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]));
        let y = tape.l2_normalize(x);
        let v = tape.value(y);
        for r in 0..2 {
            let norm: f64 = v.data()[r * 3..(r + 1) * 3].iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!((v.data()[0] - 0.6).abs() < 1e-12);
    }
}
