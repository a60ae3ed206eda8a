//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation records a node holding its output value and enough
//! state to run the backward rule. Backward traverses nodes in reverse
//! insertion order (reverse topological order by construction) and
//! accumulates gradients additively at fan-out points.

use std::collections::BTreeMap;

use super::{Array, Scalar, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf {
        name: Option<String>,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// `a [.. , d] + b [d]`, bias broadcast over the last axis.
    AddBias {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    /// `a [.. , d] * b [d]`, per-feature scale broadcast over the last axis.
    MulBias {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: S,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    /// `a [m,k] x b[n,k]^T -> [m,n]`
    MatmulNT {
        a: usize,
        b: usize,
    },
    Gelu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    LogSigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    MeanPool {
        a: usize,
        stride: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        padding: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        log_probs: Vec<S>,
        n_masked: usize,
    },
    MaskedLogprobSum {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        log_probs: Vec<S>,
    },
    /// Preference loss on summed response log-probabilities. Reference
    /// terms enter as constants; the scalar math runs in f64 so that a
    /// zero margin yields ln 2 to full double precision.
    DpoLoss {
        lp_w: usize,
        lp_l: usize,
        ref_w: f64,
        ref_l: f64,
        beta: f64,
    },
    Sum {
        a: usize,
    },
}

struct Node<S: Scalar> {
    value: Array<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Records operations for one forward pass; consumed by `backward`.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar convenience accessor; panics if `v` is not a single element.
    pub fn scalar_value(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar, got shape {:?}", val.shape());
        val.data()[0]
    }

    fn push(&mut self, value: Array<S>, requires_grad: bool, op: Op<S>) -> Var {
        assert!(!self.done, "tape already backpropagated");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a constant input; no gradient flows into it.
    pub fn constant(&mut self, a: Array<S>) -> Var {
        self.push(a, false, Op::Leaf { name: None })
    }

    /// Record a trainable leaf. Gradients are collected by name after
    /// backward.
    pub fn leaf(&mut self, name: impl Into<String>, a: Array<S>) -> Var {
        self.push(
            a,
            true,
            Op::Leaf {
                name: Some(name.into()),
            },
        )
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            let data: Vec<S> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x.add(*y))
                .collect();
            let shape = sa.to_vec();
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(Array::new(shape, data), rg, Op::Add { a: a.0, b: b.0 }))
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let d = sb[0];
            let mut data = self.value(a).data().to_vec();
            let bias = self.value(b).data();
            for chunk in data.chunks_mut(d) {
                for (x, y) in chunk.iter_mut().zip(bias) {
                    *x = x.add(*y);
                }
            }
            let shape = sa.to_vec();
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(Array::new(shape, data), rg, Op::AddBias { a: a.0, b: b.0 }))
        } else {
            Err(TensorError::ShapeError {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            let data: Vec<S> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x.mul(*y))
                .collect();
            let shape = sa.to_vec();
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(Array::new(shape, data), rg, Op::Mul { a: a.0, b: b.0 }))
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let d = sb[0];
            let mut data = self.value(a).data().to_vec();
            let scalev = self.value(b).data();
            for chunk in data.chunks_mut(d) {
                for (x, y) in chunk.iter_mut().zip(scalev) {
                    *x = x.mul(*y);
                }
            }
            let shape = sa.to_vec();
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(Array::new(shape, data), rg, Op::MulBias { a: a.0, b: b.0 }))
        } else {
            Err(TensorError::ShapeError {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let data: Vec<S> = self.value(a).data().iter().map(|x| x.mul(c)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::new(shape, data), rg, Op::Scale { a: a.0, c })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .map(|x| S::from_f64(gelu_f64(x.to_f64())))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::new(shape, data), rg, Op::Gelu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .map(|x| S::from_f64(sigmoid_f64(x.to_f64())))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::new(shape, data), rg, Op::Sigmoid { a: a.0 })
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .map(|x| S::from_f64(log_sigmoid_f64(x.to_f64())))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::new(shape, data), rg, Op::LogSigmoid { a: a.0 })
    }

    // ---- matrix ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeError {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        raw_matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::new(vec![m, n], out), rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// `a [m,k] x b [n,k]^T -> [m,n]`; used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeError {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![S::zero(); m * n];
        raw_matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::new(vec![m, n], out), rg, Op::MatmulNT { a: a.0, b: b.0 }))
    }

    // ---- normalization ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (value, axis) = softmax_impl(self.value(a), axis, false)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Softmax { a: a.0, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (value, axis) = softmax_impl(self.value(a), axis, true)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::LogSoftmax { a: a.0, axis }))
    }

    /// Per-row normalization of a rank-2 input to zero mean and unit
    /// variance (no affine part; compose with `mul`/`add` for scale and
    /// shift).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let val = self.value(a);
        if val.shape().len() != 2 {
            return Err(TensorError::ShapeError {
                op: "layer_norm",
                lhs: val.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (val.rows(), val.cols());
        let mut out = vec![S::zero(); rows * cols];
        let mut means = vec![S::zero(); rows];
        let mut rstds = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &val.data()[r * cols..(r + 1) * cols];
            let mut mean = 0.0f64;
            for x in row {
                mean += x.to_f64();
            }
            mean /= cols as f64;
            let mut var = 0.0f64;
            for x in row {
                let d = x.to_f64() - mean;
                var += d * d;
            }
            var /= cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = S::from_f64(mean);
            rstds[r] = S::from_f64(rstd);
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = S::from_f64((x.to_f64() - mean) * rstd);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Array::new(vec![rows, cols], out),
            rg,
            Op::LayerNorm {
                a: a.0,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    // ---- structural ----

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::ShapeError {
                op: "embedding_lookup",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (t.rows(), t.cols());
        for &id in ids {
            if id >= v {
                return Err(TensorError::TargetOutOfRange { id, vocab: v });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Array::new(vec![ids.len(), d], out),
            rg,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenate rank-2 arrays along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat of zero arrays");
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 || axis > 1 {
            return Err(TensorError::ShapeError {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let other_axis = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[other_axis] != first[other_axis] {
                return Err(TensorError::ShapeError {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = vec![S::zero(); shape[0] * shape[1]];
        if axis == 0 {
            let mut row = 0;
            for &p in parts {
                let v = self.value(p);
                out[row * shape[1]..row * shape[1] + v.len()].copy_from_slice(v.data());
                row += v.rows();
            }
        } else {
            let rows = shape[0];
            let mut col = 0;
            for &p in parts {
                let v = self.value(p);
                let w = v.cols();
                for r in 0..rows {
                    out[r * shape[1] + col..r * shape[1] + col + w]
                        .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
                col += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::new(shape, out),
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// Slice `len` indices starting at `start` along `axis` of a rank-2
    /// array.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = self.value(a);
        let s = v.shape().to_vec();
        if s.len() != 2 || axis > 1 || start + len > s[axis] || len == 0 {
            return Err(TensorError::ShapeError {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, len],
            });
        }
        let out = if axis == 0 {
            v.data()[start * s[1]..(start + len) * s[1]].to_vec()
        } else {
            let mut out = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                out.extend_from_slice(&v.data()[r * s[1] + start..r * s[1] + start + len]);
            }
            out
        };
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Array::new(shape, out),
            rg,
            Op::Slice {
                a: a.0,
                axis,
                start,
                len,
            },
        ))
    }

    /// Non-overlapping mean pooling over rows with ceil semantics: the
    /// final window averages whatever remainder is left.
    pub fn mean_pool(&mut self, a: Var, stride: usize) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.shape().len() != 2 || stride == 0 {
            return Err(TensorError::ShapeError {
                op: "mean_pool",
                lhs: v.shape().to_vec(),
                rhs: vec![stride],
            });
        }
        let (t, d) = (v.rows(), v.cols());
        let n_out = t.div_ceil(stride);
        let mut out = vec![S::zero(); n_out * d];
        for i in 0..n_out {
            let lo = i * stride;
            let hi = (lo + stride).min(t);
            let inv = S::from_f64(1.0 / (hi - lo) as f64);
            for r in lo..hi {
                for c in 0..d {
                    out[i * d + c] = out[i * d + c].add(v.data()[r * d + c].mul(inv));
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Array::new(vec![n_out, d], out),
            rg,
            Op::MeanPool { a: a.0, stride },
        ))
    }

    /// 1-D convolution over time. `x` is `[T, C_in]`, `w` is
    /// `[C_out, K, C_in]`, `b` is `[C_out]`. Zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 3 || ws[2] != xs[1] || stride == 0 {
            return Err(TensorError::ShapeError {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (t, c_in) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[1]);
        if self.value(b).shape() != [c_out] {
            return Err(TensorError::ShapeError {
                op: "conv1d",
                lhs: self.value(b).shape().to_vec(),
                rhs: vec![c_out],
            });
        }
        if t + 2 * padding < k {
            return Err(TensorError::ShapeError {
                op: "conv1d",
                lhs: vec![t],
                rhs: vec![k, padding],
            });
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let mut out = vec![S::zero(); t_out * c_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for ti in 0..t_out {
                for co in 0..c_out {
                    let mut acc = bv[co];
                    for kk in 0..k {
                        let j = (ti * stride + kk) as isize - padding as isize;
                        if j < 0 || j >= t as isize {
                            continue;
                        }
                        let xrow = &xv[j as usize * c_in..(j as usize + 1) * c_in];
                        let wrow = &wv[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                        let mut dot = S::zero();
                        for (xx, ww) in xrow.iter().zip(wrow) {
                            dot = dot.add(xx.mul(*ww));
                        }
                        acc = acc.add(dot);
                    }
                    out[ti * c_out + co] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Array::new(vec![t_out, c_out], out),
            rg,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                padding,
            },
        ))
    }

    // ---- losses ----

    /// Mean negative log-likelihood over masked positions of
    /// `[T, V]` logits.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (log_probs, n_masked, total) = nll_forward(self.value(logits), targets, mask)?;
        let loss = S::from_f64(-total / n_masked as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Array::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                log_probs,
                n_masked,
            },
        ))
    }

    /// Sum of `log_softmax(logits)[t, targets[t]]` over masked positions.
    /// Independent of `cross_entropy`, so the two can cross-check.
    pub fn masked_logprob_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (log_probs, _n, total) = nll_forward(self.value(logits), targets, mask)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Array::scalar(S::from_f64(total)),
            rg,
            Op::MaskedLogprobSum {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                log_probs,
            },
        ))
    }

    /// `-log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l)))` with the
    /// policy terms on the tape and the reference terms as constants.
    pub fn dpo_loss(
        &mut self,
        lp_w: Var,
        lp_l: Var,
        ref_w: f64,
        ref_l: f64,
        beta: f64,
    ) -> Result<Var, TensorError> {
        if self.value(lp_w).len() != 1 || self.value(lp_l).len() != 1 {
            return Err(TensorError::ShapeError {
                op: "dpo_loss",
                lhs: self.value(lp_w).shape().to_vec(),
                rhs: self.value(lp_l).shape().to_vec(),
            });
        }
        let m = (self.scalar_value(lp_w).to_f64() - ref_w) - (self.scalar_value(lp_l).to_f64() - ref_l);
        let loss = -log_sigmoid_f64(beta * m);
        let rg = self.rg(lp_w) || self.rg(lp_l);
        Ok(self.push(
            Array::scalar(S::from_f64(loss)),
            rg,
            Op::DpoLoss {
                lp_w: lp_w.0,
                lp_l: lp_l.0,
                ref_w,
                ref_l,
                beta,
            },
        ))
    }

    /// Sum of all elements to a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = 0.0f64;
        for x in self.value(a).data() {
            acc += x.to_f64();
        }
        let rg = self.rg(a);
        self.push(Array::scalar(S::from_f64(acc)), rg, Op::Sum { a: a.0 })
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss. The tape is consumed: recording
    /// further operations afterwards panics.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::ShapeError {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let seed = Array::scalar(S::one());
        self.backward_seeded(loss, seed);
        Ok(())
    }

    /// Backpropagate from `v` with an explicit output gradient.
    pub fn backward_seeded(&mut self, v: Var, seed: Array<S>) {
        assert!(!self.done, "tape already backpropagated");
        assert_eq!(seed.shape(), self.value(v).shape(), "seed shape mismatch");
        self.done = true;
        self.nodes[v.0].grad = Some(seed.into_data());
        for i in (0..=v.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.step_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
    }

    /// Gradients of all named leaves, keyed by name.
    pub fn leaf_gradients(&self) -> BTreeMap<String, Array<S>> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Leaf { name: Some(n) } = &node.op {
                if let Some(g) = &node.grad {
                    out.insert(n.clone(), Array::new(node.value.shape().to_vec(), g.clone()));
                }
            }
        }
        out
    }

    fn accum(&mut self, target: usize, update: impl FnOnce(&mut [S])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        if self.nodes[target].grad.is_none() {
            self.nodes[target].grad = Some(vec![S::zero(); self.nodes[target].value.len()]);
        }
        update(self.nodes[target].grad.as_mut().unwrap());
    }

    fn step_backward(&mut self, i: usize, g: &[S]) {
        // Ops are matched by moving cheap copies of the metadata out;
        // values are read through raw indices to appease the borrow
        // checker without cloning activations.
        macro_rules! val {
            ($id:expr) => {
                self.nodes[$id].value.data()
            };
        }
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x = x.add(*y);
                    }
                });
                self.accum(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x = x.add(*y);
                    }
                });
            }
            Op::AddBias { a, b } => {
                let (a, b) = (*a, *b);
                let d = self.nodes[b].value.len();
                self.accum(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x = x.add(*y);
                    }
                });
                self.accum(b, |gb| {
                    for chunk in g.chunks(d) {
                        for (x, y) in gb.iter_mut().zip(chunk) {
                            *x = x.add(*y);
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av: Vec<S> = val!(a).to_vec();
                let bv: Vec<S> = val!(b).to_vec();
                self.accum(a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&bv) {
                        *x = x.add(y.mul(*z));
                    }
                });
                self.accum(b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&av) {
                        *x = x.add(y.mul(*z));
                    }
                });
            }
            Op::MulBias { a, b } => {
                let (a, b) = (*a, *b);
                let av: Vec<S> = val!(a).to_vec();
                let bv: Vec<S> = val!(b).to_vec();
                let d = bv.len();
                self.accum(a, |ga| {
                    for (chunk_g, chunk_x) in ga.chunks_mut(d).zip(g.chunks(d)) {
                        for ((x, y), z) in chunk_g.iter_mut().zip(chunk_x).zip(&bv) {
                            *x = x.add(y.mul(*z));
                        }
                    }
                });
                self.accum(b, |gb| {
                    for (chunk_g, chunk_a) in g.chunks(d).zip(av.chunks(d)) {
                        for ((x, y), z) in gb.iter_mut().zip(chunk_g).zip(chunk_a) {
                            *x = x.add(y.mul(*z));
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                self.accum(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x = x.add(y.mul(c));
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                let av: Vec<S> = val!(a).to_vec();
                let bv: Vec<S> = val!(b).to_vec();
                // dA = dC * B^T
                self.accum(a, |ga| raw_matmul_nt(g, &bv, m, n, k, ga));
                // dB = A^T * dC
                self.accum(b, |gb| raw_matmul_tn(&av, g, m, k, n, gb));
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.rows();
                let av: Vec<S> = val!(a).to_vec();
                let bv: Vec<S> = val!(b).to_vec();
                // C = A * B^T: dA = dC * B, dB = dC^T * A
                self.accum(a, |ga| raw_matmul(g, &bv, m, n, k, ga));
                self.accum(b, |gb| raw_matmul_tn(g, &av, m, n, k, gb));
            }
            Op::Gelu { a } => {
                let a = *a;
                let av: Vec<S> = val!(a).to_vec();
                self.accum(a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&av) {
                        *x = x.add(y.mul(S::from_f64(gelu_grad_f64(z.to_f64()))));
                    }
                });
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let ov: Vec<S> = self.nodes[i].value.data().to_vec();
                self.accum(a, |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(&ov) {
                        let sf = s.to_f64();
                        *x = x.add(y.mul(S::from_f64(sf * (1.0 - sf))));
                    }
                });
            }
            Op::LogSigmoid { a } => {
                let a = *a;
                let av: Vec<S> = val!(a).to_vec();
                self.accum(a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&av) {
                        // d/dx log sigmoid(x) = sigmoid(-x)
                        *x = x.add(y.mul(S::from_f64(sigmoid_f64(-z.to_f64()))));
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                let out = self.nodes[i].value.clone();
                self.accum(a, |ga| softmax_backward(&out, g, axis, ga));
            }
            Op::LogSoftmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                let out = self.nodes[i].value.clone();
                self.accum(a, |ga| log_softmax_backward(&out, g, axis, ga));
            }
            Op::LayerNorm { a, mean, rstd } => {
                let a = *a;
                let mean = mean.clone();
                let rstd = rstd.clone();
                let xv: Vec<S> = val!(a).to_vec();
                let cols = self.nodes[a].value.cols();
                self.accum(a, |ga| {
                    for r in 0..mean.len() {
                        let row_x = &xv[r * cols..(r + 1) * cols];
                        let row_g = &g[r * cols..(r + 1) * cols];
                        let (m, rs) = (mean[r].to_f64(), rstd[r].to_f64());
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for (gg, xx) in row_g.iter().zip(row_x) {
                            let xhat = (xx.to_f64() - m) * rs;
                            sum_g += gg.to_f64();
                            sum_gx += gg.to_f64() * xhat;
                        }
                        let n = cols as f64;
                        for (c, (gg, xx)) in row_g.iter().zip(row_x).enumerate() {
                            let xhat = (xx.to_f64() - m) * rs;
                            let d = rs * (gg.to_f64() - sum_g / n - xhat * sum_gx / n);
                            let slot = &mut ga[r * cols + c];
                            *slot = slot.add(S::from_f64(d));
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].value.cols();
                self.accum(table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x = x.add(*y);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let total_cols = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = (self.nodes[p].value.rows(), self.nodes[p].value.cols());
                    if axis == 0 {
                        let start = offset * total_cols;
                        let seg = &g[start..start + pr * pc];
                        self.accum(p, |gp| {
                            for (x, y) in gp.iter_mut().zip(seg) {
                                *x = x.add(*y);
                            }
                        });
                        offset += pr;
                    } else {
                        let off = offset;
                        self.accum(p, |gp| {
                            for r in 0..pr {
                                let src = &g[r * total_cols + off..r * total_cols + off + pc];
                                let dst = &mut gp[r * pc..(r + 1) * pc];
                                for (x, y) in dst.iter_mut().zip(src) {
                                    *x = x.add(*y);
                                }
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let (a, axis, start, len) = (*a, *axis, *start, *len);
                let (ar, ac) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let _ = ar;
                self.accum(a, |ga| {
                    if axis == 0 {
                        let dst = &mut ga[start * ac..(start + len) * ac];
                        for (x, y) in dst.iter_mut().zip(g) {
                            *x = x.add(*y);
                        }
                    } else {
                        let rows = g.len() / len;
                        for r in 0..rows {
                            let src = &g[r * len..(r + 1) * len];
                            let dst = &mut ga[r * ac + start..r * ac + start + len];
                            for (x, y) in dst.iter_mut().zip(src) {
                                *x = x.add(*y);
                            }
                        }
                    }
                });
            }
            Op::MeanPool { a, stride } => {
                let (a, stride) = (*a, *stride);
                let (t, d) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                self.accum(a, |ga| {
                    let n_out = t.div_ceil(stride);
                    for i2 in 0..n_out {
                        let lo = i2 * stride;
                        let hi = (lo + stride).min(t);
                        let inv = S::from_f64(1.0 / (hi - lo) as f64);
                        for r in lo..hi {
                            for c in 0..d {
                                let slot = &mut ga[r * d + c];
                                *slot = slot.add(g[i2 * d + c].mul(inv));
                            }
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (x, w, b, stride, padding) = (*x, *w, *b, *stride, *padding);
                let (t, c_in) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let ws = self.nodes[w].value.shape().to_vec();
                let (c_out, k) = (ws[0], ws[1]);
                let t_out = (t + 2 * padding - k) / stride + 1;
                let xv: Vec<S> = val!(x).to_vec();
                let wv: Vec<S> = val!(w).to_vec();
                self.accum(b, |gb| {
                    for ti in 0..t_out {
                        for co in 0..c_out {
                            gb[co] = gb[co].add(g[ti * c_out + co]);
                        }
                    }
                });
                self.accum(w, |gw| {
                    for ti in 0..t_out {
                        for co in 0..c_out {
                            let go = g[ti * c_out + co];
                            for kk in 0..k {
                                let j = (ti * stride + kk) as isize - padding as isize;
                                if j < 0 || j >= t as isize {
                                    continue;
                                }
                                let xrow = &xv[j as usize * c_in..(j as usize + 1) * c_in];
                                let wrow = &mut gw[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                                for (d, xx) in wrow.iter_mut().zip(xrow) {
                                    *d = d.add(go.mul(*xx));
                                }
                            }
                        }
                    }
                });
                self.accum(x, |gx| {
                    for ti in 0..t_out {
                        for co in 0..c_out {
                            let go = g[ti * c_out + co];
                            for kk in 0..k {
                                let j = (ti * stride + kk) as isize - padding as isize;
                                if j < 0 || j >= t as isize {
                                    continue;
                                }
                                let wrow = &wv[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                                let xrow = &mut gx[j as usize * c_in..(j as usize + 1) * c_in];
                                for (d, ww) in xrow.iter_mut().zip(wrow) {
                                    *d = d.add(go.mul(*ww));
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                log_probs,
                n_masked,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let lp = log_probs.clone();
                let n_masked = *n_masked;
                let v = self.nodes[logits].value.cols();
                let g0 = g[0];
                self.accum(logits, |gl| {
                    let inv = 1.0 / n_masked as f64;
                    for (t, (&tgt, &m)) in targets.iter().zip(&mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..v {
                            let p = lp[t * v + c].to_f64().exp();
                            let onehot = if c == tgt { 1.0 } else { 0.0 };
                            let slot = &mut gl[t * v + c];
                            *slot = slot.add(g0.mul(S::from_f64((p - onehot) * inv)));
                        }
                    }
                });
            }
            Op::MaskedLogprobSum {
                logits,
                targets,
                mask,
                log_probs,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let lp = log_probs.clone();
                let v = self.nodes[logits].value.cols();
                let g0 = g[0];
                self.accum(logits, |gl| {
                    for (t, (&tgt, &m)) in targets.iter().zip(&mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..v {
                            let p = lp[t * v + c].to_f64().exp();
                            let onehot = if c == tgt { 1.0 } else { 0.0 };
                            let slot = &mut gl[t * v + c];
                            *slot = slot.add(g0.mul(S::from_f64(onehot - p)));
                        }
                    }
                });
            }
            Op::DpoLoss {
                lp_w,
                lp_l,
                ref_w,
                ref_l,
                beta,
            } => {
                let (lp_w, lp_l) = (*lp_w, *lp_l);
                let (ref_w, ref_l, beta) = (*ref_w, *ref_l, *beta);
                let m = (self.nodes[lp_w].value.data()[0].to_f64() - ref_w)
                    - (self.nodes[lp_l].value.data()[0].to_f64() - ref_l);
                // dL/dm for L = -log sigmoid(beta m)
                let dm = -beta * sigmoid_f64(-beta * m);
                let g0 = g[0];
                self.accum(lp_w, |gw| {
                    gw[0] = gw[0].add(g0.mul(S::from_f64(dm)));
                });
                self.accum(lp_l, |gl| {
                    gl[0] = gl[0].add(g0.mul(S::from_f64(-dm)));
                });
            }
            Op::Sum { a } => {
                let a = *a;
                let g0 = g[0];
                self.accum(a, |ga| {
                    for x in ga.iter_mut() {
                        *x = x.add(g0);
                    }
                });
            }
        }
    }
}

// ---- raw kernels ----

/// `c [m,n] += a [m,k] * b [k,n]`
pub fn raw_matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = cv.add(aip.mul(*bv));
            }
        }
    }
}

/// `c [m,n] += a [m,k] * b[n,k]^T`
pub fn raw_matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc.add(av.mul(*bv));
            }
            c[i * n + j] = c[i * n + j].add(acc);
        }
    }
}

/// `c [k,n] += a[m,k]^T * b [m,n]`
pub fn raw_matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let api = a[p * k + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = cv.add(api.mul(*bv));
            }
        }
    }
}

// ---- scalar math ----

fn gelu_f64(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sigmoid(x)) = -softplus(-x)`.
pub(crate) fn log_sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_impl<S: Scalar>(
    input: &Array<S>,
    axis: usize,
    log: bool,
) -> Result<(Array<S>, usize), TensorError> {
    let shape = input.shape();
    let (rows, cols, axis) = match shape.len() {
        1 => (1, shape[0], 1),
        2 => {
            if axis > 1 {
                return Err(TensorError::ShapeError {
                    op: "softmax",
                    lhs: shape.to_vec(),
                    rhs: vec![axis],
                });
            }
            (shape[0], shape[1], axis)
        }
        _ => {
            return Err(TensorError::ShapeError {
                op: "softmax",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            })
        }
    };
    let mut out = vec![S::zero(); rows * cols];
    // Normalize each slice along `axis` of the logical [rows, cols] view.
    let (n_slices, slice_len, stride, base_step) = if axis == 1 {
        (rows, cols, 1usize, cols)
    } else {
        (cols, rows, cols, 1usize)
    };
    for s in 0..n_slices {
        let base = s * base_step;
        let mut maxv = f64::NEG_INFINITY;
        for t in 0..slice_len {
            maxv = maxv.max(input.data()[base + t * stride].to_f64());
        }
        let mut denom = 0.0f64;
        for t in 0..slice_len {
            denom += (input.data()[base + t * stride].to_f64() - maxv).exp();
        }
        let log_denom = denom.ln();
        for t in 0..slice_len {
            let z = input.data()[base + t * stride].to_f64() - maxv;
            out[base + t * stride] = if log {
                S::from_f64(z - log_denom)
            } else {
                S::from_f64((z - log_denom).exp())
            };
        }
    }
    Ok((Array::new(shape.to_vec(), out), axis))
}

fn softmax_backward<S: Scalar>(out: &Array<S>, g: &[S], axis: usize, ga: &mut [S]) {
    let shape = out.shape();
    let (rows, cols) = if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1])
    };
    let (n_slices, slice_len, stride, base_step) = if axis == 1 {
        (rows, cols, 1usize, cols)
    } else {
        (cols, rows, cols, 1usize)
    };
    for s in 0..n_slices {
        let base = s * base_step;
        let mut dot = 0.0f64;
        for t in 0..slice_len {
            dot += g[base + t * stride].to_f64() * out.data()[base + t * stride].to_f64();
        }
        for t in 0..slice_len {
            let idx = base + t * stride;
            let p = out.data()[idx].to_f64();
            ga[idx] = ga[idx].add(S::from_f64(p * (g[idx].to_f64() - dot)));
        }
    }
}

fn log_softmax_backward<S: Scalar>(out: &Array<S>, g: &[S], axis: usize, ga: &mut [S]) {
    let shape = out.shape();
    let (rows, cols) = if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1])
    };
    let (n_slices, slice_len, stride, base_step) = if axis == 1 {
        (rows, cols, 1usize, cols)
    } else {
        (cols, rows, cols, 1usize)
    };
    for s in 0..n_slices {
        let base = s * base_step;
        let mut sum_g = 0.0f64;
        for t in 0..slice_len {
            sum_g += g[base + t * stride].to_f64();
        }
        for t in 0..slice_len {
            let idx = base + t * stride;
            let p = out.data()[idx].to_f64().exp();
            ga[idx] = ga[idx].add(S::from_f64(g[idx].to_f64() - p * sum_g));
        }
    }
}

/// Shared forward for the two NLL-style losses: per-row log-softmax plus
/// the masked total of target log-probabilities.
fn nll_forward<S: Scalar>(
    logits: &Array<S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(Vec<S>, usize, f64), TensorError> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(TensorError::ShapeError {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let n_masked = mask.iter().filter(|m| **m).count();
    if n_masked == 0 {
        return Err(TensorError::EmptyLoss);
    }
    let v = logits.cols();
    for (&tgt, &m) in targets.iter().zip(mask) {
        if m && tgt >= v {
            return Err(TensorError::TargetOutOfRange { id: tgt, vocab: v });
        }
    }
    let (lp, _) = softmax_impl(logits, 1, true)?;
    let mut total = 0.0f64;
    for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total += lp.data()[t * v + tgt].to_f64();
        }
    }
    Ok((lp.into_data(), n_masked, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut t = tape();
        let x = t.constant(Array::full(vec![7], 3.25));
        let s = t.softmax(x, 1).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_at_zero_is_minus_ln2() {
        let mut t = tape();
        let x = t.constant(Array::scalar(0.0));
        let y = t.log_sigmoid(x);
        assert!((t.scalar_value(y) - (-std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn mean_pool_ceil_semantics() {
        // length 5, stride 2 -> 3 rows; last pool averages the remainder
        let mut t = tape();
        let x = t.constant(Array::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = t.mean_pool(x, 2).unwrap();
        assert_eq!(t.value(y).shape(), &[3, 1]);
        assert_eq!(t.value(y).data(), &[1.5, 3.5, 5.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut t = tape();
        let x = t.constant(Array::zeros(vec![3, 7]));
        let loss = t.cross_entropy(x, &[0, 3, 6], &[true, true, true]).unwrap();
        assert!((t.scalar_value(loss) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_sharp_logits_approach_zero() {
        let mut t = tape();
        let mut data = vec![0.0f64; 5];
        data[2] = 50.0;
        let x = t.constant(Array::new(vec![1, 5], data));
        let loss = t.cross_entropy(x, &[2], &[true]).unwrap();
        assert!(t.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_f64_oracle_on_fixture() {
        // 3x5 fixture, frozen values; oracle is an independent
        // log-sum-exp evaluation below.
        let logits = vec![
            0.31, -1.2, 0.05, 2.1, -0.7, //
            1.4, 0.3, -0.9, 0.0, 0.25, //
            -2.0, 0.8, 1.0, -0.4, 0.6,
        ];
        let targets = [3usize, 0, 2];
        let mask = [true, true, true];
        let mut expected = 0.0f64;
        for t in 0..3 {
            let row = &logits[t * 5..(t + 1) * 5];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            expected += lse - row[targets[t]];
        }
        expected /= 3.0;

        let mut t = tape();
        let x = t.constant(Array::new(vec![3, 5], logits));
        let loss = t.cross_entropy(x, &targets, &mask).unwrap();
        assert!((t.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_rejected() {
        let mut t = tape();
        let x = t.constant(Array::zeros(vec![2, 4]));
        let err = t.cross_entropy(x, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyLoss));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut t = tape();
        let x = t.leaf("x", Array::new(vec![3], vec![1.0, -2.0, 0.5]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x*x (x used twice through mul) -> dy/dx = 2x
        let mut t = tape();
        let x = t.leaf("x", Array::new(vec![2], vec![3.0, -1.5]));
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, -3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_named() {
        let mut t = tape();
        let a = t.constant(Array::zeros(vec![2, 3]));
        let b = t.constant(Array::zeros(vec![4, 5]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn dpo_loss_zero_margin_is_ln2() {
        let mut t = tape();
        let w = t.leaf("w", Array::scalar(-5.0));
        let l = t.leaf("l", Array::scalar(-9.0));
        let loss = t.dpo_loss(w, l, -5.0, -9.0, 0.1).unwrap();
        assert_eq!(t.scalar_value(loss), std::f64::consts::LN_2);
    }

    #[test]
    fn dpo_loss_unit_margin_fixture() {
        // beta=1, (lp_w - ref_w)=1, (lp_l - ref_l)=0 -> ln(1 + e^-1)
        let mut t = tape();
        let w = t.leaf("w", Array::scalar(1.0));
        let l = t.leaf("l", Array::scalar(0.0));
        let loss = t.dpo_loss(w, l, 0.0, 0.0, 1.0).unwrap();
        assert!((t.scalar_value(loss) - 0.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn dpo_loss_monotone_in_margin() {
        let eval = |m: f64| -log_sigmoid_f64(0.5 * m);
        assert!(eval(10.0) < eval(1.0));
        assert!(eval(1.0) < eval(0.0));
        assert!(eval(0.0) < eval(-4.0));
        assert!(eval(500.0) < 1e-9);
        assert!(eval(-500.0) > 100.0);
    }

    #[test]
    fn logprob_sum_matches_cross_entropy_identity() {
        let mut t = tape();
        let logits: Vec<f64> = (0..20).map(|i| ((i * 7 + 3) % 11) as f64 * 0.37 - 1.0).collect();
        let x = t.constant(Array::new(vec![4, 5], logits));
        let targets = [1usize, 4, 0, 2];
        let mask = [true, false, true, true];
        let lp = t.masked_logprob_sum(x, &targets, &mask).unwrap();
        let ce = t.cross_entropy(x, &targets, &mask).unwrap();
        let n_masked = 3.0;
        assert!((t.scalar_value(lp) - t.scalar_value(ce) * -n_masked).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut t = tape();
        let x = t.constant(Array::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let y = t.layer_norm(x, 1e-5).unwrap();
        for r in 0..2 {
            let row = &t.value(y).data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_slice_roundtrip_axis1() {
        let mut t = tape();
        let a = t.constant(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Array::new(vec![2, 1], vec![9.0, 8.0]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(s).data(), &[9.0, 8.0]);
    }
}
