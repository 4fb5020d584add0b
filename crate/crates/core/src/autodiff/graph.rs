use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::Scalar;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_rows_in_place};
use super::{Tensor, TensorError};

const NORM_EPS: f64 = 1e-5;

/// Which stochastic layers are live during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForwardMode {
    /// All dropout active, batch norm uses batch statistics.
    Train,
    /// No dropout, batch norm uses running statistics.
    Eval,
    /// Only MC-flagged dropout active, batch norm uses running statistics.
    StochasticEval,
}

impl ForwardMode {
    pub fn dropout_active(self, mc_flag: bool) -> bool {
        match self {
            ForwardMode::Train => true,
            ForwardMode::Eval => false,
            ForwardMode::StochasticEval => mc_flag,
        }
    }

    pub fn uses_batch_stats(self) -> bool {
        self == ForwardMode::Train
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch mean and biased variance per column, produced by a train-mode
/// batch norm so the caller can update running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    AddRowBroadcast {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Unfold {
        x: Var,
        height: usize,
    },
    MaxPoolSegments {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended during the forward pass and
/// walked in reverse by [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: ForwardMode,
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for nodes that do not require gradients (frozen parameters,
    /// constants) or that the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(mismatch(
            op,
            format!("expected rank-2 input, got shape {other:?}"),
        )),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

/// Inverted-dropout mask: zero with probability `rate`, `1/(1-rate)` otherwise.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut RngStream) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            let u: f64 = rng.uniform();
            if u < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub(crate) fn check_rate(rate: f64) -> Result<(), TensorError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(TensorError::InvalidRate(rate))
    }
}

/// Standalone dropout on a tensor, following the same activity rules as
/// the graph primitive.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    mode: ForwardMode,
    mc_flag: bool,
    rng: Option<&mut RngStream>,
) -> Result<Tensor<T>, TensorError> {
    check_rate(rate)?;
    if rate == 0.0 || !mode.dropout_active(mc_flag) {
        return Ok(x.clone());
    }
    let rng = rng.ok_or(TensorError::MissingRng { op: "dropout" })?;
    let mask = dropout_mask::<T>(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Row-wise softmax of a rank-2 tensor (or a single row).
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (_, cols) = x.rows_cols();
    let mut data = x.data().to_vec();
    softmax_rows_in_place(&mut data, cols);
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: ForwardMode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }, rg))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2("add_bias", self.value(x))?;
        if self.value(bias).len() != c {
            return Err(mismatch(
                "add_bias",
                format!("bias len {} for {c} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(
            Tensor::new(vec![r, c], data)?,
            Op::AddRowBroadcast { x, bias },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| gelu_parts(e).0).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2("softmax", self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        softmax_rows_in_place(&mut data, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::SoftmaxRows { x }, rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2("layer_norm", self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(mismatch(
                "layer_norm",
                format!("affine params must have {c} entries"),
            ));
        }
        let eps = T::lit(NORM_EPS);
        let n = T::from_usize_lossy(c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(|(j, &h)| g[j] * h + b[j]))
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-column normalization over rows. Train mode normalizes with batch
    /// statistics and returns them; other modes use `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let (r, c) = dims2("batch_norm", self.value(x))?;
        if self.value(gamma).len() != c
            || self.value(beta).len() != c
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(mismatch(
                "batch_norm",
                format!("per-channel params must have {c} entries"),
            ));
        }
        let eps = T::lit(NORM_EPS);
        let batch_stats = self.mode.uses_batch_stats();
        let xs = self.value(x).data();
        let (mean, var) = if batch_stats {
            if r == 0 {
                return Err(mismatch("batch_norm", "empty batch"));
            }
            let n = T::from_usize_lossy(r);
            let mut mean = vec![T::zero(); c];
            for row in xs.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); c];
            for row in xs.chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xs
            .chunks(c)
            .flat_map(|row| {
                (0..c)
                    .map(|j| (row[j] - mean[j]) * inv_std[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(|(j, &h)| g[j] * h + b[j]))
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(vec![r, c], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Embedding lookup: output row `i` is row `rows[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (tr, c) = dims2("gather_rows", self.value(table))?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= tr {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: tr,
                });
            }
            out.extend_from_slice(self.value(table).row(r));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start + width > c {
            return Err(mismatch(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + width),
            ));
        }
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, width], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no inputs"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(dims2("concat_cols", self.value(p))?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(mismatch(
                "concat_cols",
                format!("row counts differ: {dims:?}"),
            ));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no inputs"));
        }
        let cols = dims2("concat_rows", self.value(parts[0]))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.value(p))?;
            if c != cols {
                return Err(mismatch(
                    "concat_rows",
                    format!("column counts {cols} vs {c}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Sliding windows of `height` consecutive rows, each flattened into one
    /// output row: `[n, w] -> [n - height + 1, height * w]`.
    pub fn unfold(&mut self, x: Var, height: usize) -> Result<Var, TensorError> {
        let (n, w) = dims2("unfold", self.value(x))?;
        if height == 0 || height > n {
            return Err(mismatch(
                "unfold",
                format!("window height {height} over {n} rows"),
            ));
        }
        let out_rows = n - height + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(out_rows * height * w);
        for i in 0..out_rows {
            out.extend_from_slice(&src[i * w..(i + height) * w]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![out_rows, height * w], out)?,
            Op::Unfold { x, height },
            rg,
        ))
    }

    /// Column-wise max over consecutive row segments of the given lengths.
    /// Output has one row per segment.
    pub fn max_pool_segments(&mut self, x: Var, lengths: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = dims2("max_pool", self.value(x))?;
        if lengths.iter().sum::<usize>() != r || lengths.contains(&0) {
            return Err(mismatch(
                "max_pool",
                format!("segments {lengths:?} over {r} rows"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(lengths.len() * c);
        let mut argmax = Vec::with_capacity(lengths.len() * c);
        let mut start = 0;
        for &len in lengths {
            for j in 0..c {
                let mut best = start;
                for i in start + 1..start + len {
                    if src[i * c + j] > src[best * c + j] {
                        best = i;
                    }
                }
                out.push(src[best * c + j]);
                argmax.push(best);
            }
            start += len;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![lengths.len(), c], out)?,
            Op::MaxPoolSegments { x, argmax },
            rg,
        ))
    }

    /// Inverted dropout. Active in `Train` mode, and in `StochasticEval` only
    /// when `mc_flag` is set; inactive dropout returns `x` unchanged.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        mc_flag: bool,
        rng: Option<&mut RngStream>,
    ) -> Result<Var, TensorError> {
        check_rate(rate)?;
        if rate == 0.0 || !self.mode.dropout_active(mc_flag) {
            return Ok(x);
        }
        let rng = rng.ok_or(TensorError::MissingRng { op: "dropout" })?;
        let mask = dropout_mask::<T>(self.value(x).len(), rate, rng);
        Ok(self.apply_mask(x, mask))
    }

    /// Multiplies by a precomputed dropout mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let v = self.value(x);
        assert_eq!(mask.len(), v.len(), "dropout mask length");
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let (b, c) = dims2("softmax_cross_entropy", self.value(logits))?;
        if targets.len() != b || b == 0 {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("{} targets for {b} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: t,
                bound: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, (logit_row, &t)) in probs
            .chunks_mut(c)
            .zip(self.value(logits).data().chunks(c).zip(targets))
        {
            let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logit_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            loss += lse - logit_row[t];
            for (p, &z) in row.iter_mut().zip(logit_row) {
                *p = (z - lse).exp();
            }
        }
        loss /= T::from_usize_lossy(b);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Propagates d(loss)/d(node) back to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(TensorError::BackwardBeforeForward);
        };
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = val(*a).rows_cols();
                let n = val(*b).rows_cols().1;
                if wants(*a) {
                    acc(*a, gemm_nt(gy, val(*b).data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, gemm_tn(val(*a).data(), gy, k, m, n));
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = val(*a).rows_cols();
                let n = val(*b).rows_cols().0;
                if wants(*a) {
                    acc(*a, gemm_nn(gy, val(*b).data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, gemm_tn(gy, val(*a).data(), n, m, k));
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                let c = val(*bias).len();
                if wants(*bias) {
                    let mut gb = vec![T::zero(); c];
                    for row in gy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    acc(*bias, gb);
                }
                acc(*x, gy.to_vec());
            }
            Op::Add { a, b } => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    acc(
                        *a,
                        gy.iter()
                            .zip(val(*b).data())
                            .map(|(&g, &y)| g * y)
                            .collect(),
                    );
                }
                if wants(*b) {
                    acc(
                        *b,
                        gy.iter()
                            .zip(val(*a).data())
                            .map(|(&g, &y)| g * y)
                            .collect(),
                    );
                }
            }
            Op::Scale { x, factor } => acc(*x, gy.iter().map(|&g| g * *factor).collect()),
            Op::Relu { x } => acc(
                *x,
                gy.iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            ),
            Op::Gelu { x } => acc(
                *x,
                gy.iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| g * gelu_parts(v).1)
                    .collect(),
            ),
            Op::SoftmaxRows { x } => {
                let c = node.value.rows_cols().1;
                let mut gx = Vec::with_capacity(gy.len());
                for (yr, gr) in node.value.data().chunks(c).zip(gy.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*gamma).len();
                let g = val(*gamma).data();
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (hr, gr) in xhat.chunks(c).zip(gy.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                if wants(*x) {
                    let n = T::from_usize_lossy(c);
                    let mut gx = Vec::with_capacity(gy.len());
                    for ((hr, gr), &inv) in xhat.chunks(c).zip(gy.chunks(c)).zip(inv_std) {
                        let dh: Vec<T> = gr.iter().zip(g).map(|(&a, &b)| a * b).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| inv / n * (n * d - s1 - h * s2)),
                        );
                    }
                    acc(*x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = val(*gamma).len();
                let g = val(*gamma).data();
                let mut sum_dh = vec![T::zero(); c];
                let mut sum_dh_h = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (hr, gr) in xhat.chunks(c).zip(gy.chunks(c)) {
                    for j in 0..c {
                        gb[j] += gr[j];
                        sum_dh_h[j] += gr[j] * hr[j];
                    }
                }
                // d/dgamma is sum(dy * xhat); dxhat = dy * gamma.
                let gg = sum_dh_h.clone();
                for j in 0..c {
                    sum_dh[j] = gb[j] * g[j];
                    sum_dh_h[j] *= g[j];
                }
                if wants(*x) {
                    let rows = gy.len() / c.max(1);
                    let n = T::from_usize_lossy(rows);
                    let mut gx = Vec::with_capacity(gy.len());
                    for (hr, gr) in xhat.chunks(c).zip(gy.chunks(c)) {
                        for j in 0..c {
                            let dh = gr[j] * g[j];
                            gx.push(if *batch_stats {
                                inv_std[j] / n * (n * dh - sum_dh[j] - hr[j] * sum_dh_h[j])
                            } else {
                                dh * inv_std[j]
                            });
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::GatherRows { table, rows } => {
                if wants(*table) {
                    let (tr, c) = val(*table).rows_cols();
                    let mut gt = vec![T::zero(); tr * c];
                    for (gr, &r) in gy.chunks(c).zip(rows) {
                        gt[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &b)| *a += b);
                    }
                    acc(*table, gt);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).rows_cols();
                let w = node.value.rows_cols().1;
                let mut gx = vec![T::zero(); r * c];
                for (i, gr) in gy.chunks(w).enumerate() {
                    gx[i * c + start..i * c + start + w].copy_from_slice(gr);
                }
                acc(*x, gx);
            }
            Op::ConcatCols { parts } => {
                let total = node.value.rows_cols().1;
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).rows_cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(r * c);
                        for row in gy.chunks(total) {
                            gp.extend_from_slice(&row[offset..offset + c]);
                        }
                        acc(p, gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, gy[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Unfold { x, height } => {
                let (n, w) = val(*x).rows_cols();
                let row_len = height * w;
                let mut gx = vec![T::zero(); n * w];
                for (i, gr) in gy.chunks(row_len).enumerate() {
                    gx[i * w..i * w + row_len]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, &b)| *a += b);
                }
                acc(*x, gx);
            }
            Op::MaxPoolSegments { x, argmax } => {
                let (r, c) = val(*x).rows_cols();
                let mut gx = vec![T::zero(); r * c];
                for (k, (&g, &row)) in gy.iter().zip(argmax).enumerate() {
                    gx[row * c + k % c] += g;
                }
                acc(*x, gx);
            }
            Op::Dropout { x, mask } => acc(*x, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect()),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).rows_cols().1;
                let b = targets.len();
                let scale = gy[0] / T::from_usize_lossy(b);
                let mut gl = probs.clone();
                for (row, &t) in gl.chunks_mut(c).zip(targets) {
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, gl);
            }
            Op::Sum { x } => acc(*x, vec![gy[0]; val(*x).len()]),
        }
    }
}
