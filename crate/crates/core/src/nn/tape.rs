//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! The tape is a flat arena of nodes built during the forward pass and walked
//! once in reverse for gradients. Everything is sequential and allocation
//! order is fixed by construction, so identical inputs produce bitwise
//! identical outputs and gradients — the property the training determinism
//! contract rests on.
//!
//! Grouped point data uses the convention `rows = groups * k`: pooling,
//! group-softmax and repeat ops all interpret rows in contiguous blocks of
//! `k`. Operations panic on malformed shapes (programmer error); the network
//! modules validate user-facing shapes before building tape nodes.

use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Neg(Value),
    ScaleConst(Value, S),
    AddBias(Value, Value),
    MulBias(Value, Value),
    MulColBroadcast(Value, Value),
    MatMul(Value, Value),
    Transpose(Value),
    Relu(Value),
    Sigmoid(Value),
    Exp(Value),
    Sqrt(Value),
    Sin(Value),
    Cos(Value),
    Asin(Value),
    Atan2(Value, Value),
    ConcatCols(Vec<Value>),
    SliceCols(Value, usize, usize),
    Reshape(Value),
    GatherRows(Value, Rc<Vec<usize>>),
    RepeatInterleave(Value, usize),
    SumPoolBlocks(Value, usize),
    MeanPoolBlocks(Value, usize),
    MaxPoolBlocks(Value, usize, Vec<usize>),
    GroupSoftmax(Value, usize),
    ChannelBlockSum(Value, usize),
    ChannelBlockMul(Value, Value, usize),
    SumAll(Value),
    BatchNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        mean: Tensor<S>,
        inv_std: Tensor<S>,
    },
    BilinearSample {
        map: Value,
        uv: Value,
        h: usize,
        w: usize,
    },
    Conv3x3 {
        x: Value,
        w: Value,
        h: usize,
        wdt: usize,
        stride: usize,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_leaves: Vec<(ParamId, Value)>,
    param_cache: HashMap<ParamId, Value>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Value) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn param_leaves(&self) -> &[(ParamId, Value)] {
        &self.param_leaves
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<S>) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a named parameter (used by tests).
    pub fn variable(&mut self, t: Tensor<S>) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated requests for the same parameter return the
    /// same node so that shared weights accumulate gradients from every use.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Value {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_cache.insert(id, v);
        self.param_leaves.push((id, v));
        v
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let req = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "sub shape");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let req = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let req = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), req)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| -v);
        let req = self.needs(a);
        self.push(t, Op::Neg(a), req)
    }

    pub fn scale(&mut self, a: Value, c: S) -> Value {
        let t = self.value(a).map(|v| v * c);
        let req = self.needs(a);
        self.push(t, Op::ScaleConst(a, c), req)
    }

    /// `x + b` with `b` broadcast over rows; `b` is `1 x C`.
    pub fn add_bias(&mut self, x: Value, b: Value) -> Value {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!(tb.rows, 1, "bias must be a single row");
        assert_eq!(tx.cols, tb.cols, "bias width");
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *o = *o + bv;
            }
        }
        let req = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), req)
    }

    /// `x * s` with per-channel scale `s` (`1 x C`) broadcast over rows.
    pub fn mul_bias(&mut self, x: Value, s: Value) -> Value {
        let (tx, ts) = (self.value(x), self.value(s));
        assert_eq!(ts.rows, 1, "scale must be a single row");
        assert_eq!(tx.cols, ts.cols, "scale width");
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (o, &sv) in out.row_mut(r).iter_mut().zip(&ts.data) {
                *o = *o * sv;
            }
        }
        let req = self.needs(x) || self.needs(s);
        self.push(out, Op::MulBias(x, s), req)
    }

    /// `x * s` with per-row scale `s` (`R x 1`) broadcast over channels.
    pub fn mul_col(&mut self, x: Value, s: Value) -> Value {
        let (tx, ts) = (self.value(x), self.value(s));
        assert_eq!(ts.cols, 1, "column scale must have one channel");
        assert_eq!(tx.rows, ts.rows, "column scale rows");
        let mut out = tx.clone();
        for r in 0..out.rows {
            let sv = ts.data[r];
            for o in out.row_mut(r) {
                *o = *o * sv;
            }
        }
        let req = self.needs(x) || self.needs(s);
        self.push(out, Op::MulColBroadcast(x, s), req)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension");
        let out = matmul_raw(ta, tb);
        let req = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), req)
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.cols, ta.rows);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out.set(c, r, ta.get(r, c));
            }
        }
        let req = self.needs(a);
        self.push(out, Op::Transpose(a), req)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| v.max(S::zero()));
        let req = self.needs(a);
        self.push(t, Op::Relu(a), req)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let t = self
            .value(a)
            .map(|v| S::one() / (S::one() + (-v).exp()));
        let req = self.needs(a);
        self.push(t, Op::Sigmoid(a), req)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| v.exp());
        let req = self.needs(a);
        self.push(t, Op::Exp(a), req)
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| v.sqrt());
        let req = self.needs(a);
        self.push(t, Op::Sqrt(a), req)
    }

    pub fn sin(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| v.sin());
        let req = self.needs(a);
        self.push(t, Op::Sin(a), req)
    }

    pub fn cos(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| v.cos());
        let req = self.needs(a);
        self.push(t, Op::Cos(a), req)
    }

    pub fn asin(&mut self, a: Value) -> Value {
        let t = self.value(a).map(|v| v.max(-S::one()).min(S::one()).asin());
        let req = self.needs(a);
        self.push(t, Op::Asin(a), req)
    }

    /// Element-wise `atan2(y, x)` over same-shape tensors.
    pub fn atan2(&mut self, y: Value, x: Value) -> Value {
        let (ty, tx) = (self.value(y), self.value(x));
        assert_eq!((ty.rows, ty.cols), (tx.rows, tx.cols), "atan2 shape");
        let data = ty
            .data
            .iter()
            .zip(&tx.data)
            .map(|(&yv, &xv)| yv.atan2(xv))
            .collect();
        let t = Tensor::new(ty.rows, ty.cols, data);
        let req = self.needs(y) || self.needs(x);
        self.push(t, Op::Atan2(y, x), req)
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows, rows, "concat rows");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + tp.cols].copy_from_slice(tp.row(r));
            }
            offset += tp.cols;
        }
        let req = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), req)
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, len: usize) -> Value {
        let ta = self.value(a);
        assert!(start + len <= ta.cols, "slice range");
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let req = self.needs(a);
        self.push(out, Op::SliceCols(a, start, len), req)
    }

    pub fn reshape(&mut self, a: Value, rows: usize, cols: usize) -> Value {
        let ta = self.value(a);
        assert_eq!(ta.len(), rows * cols, "reshape size");
        let out = Tensor::new(rows, cols, ta.data.clone());
        let req = self.needs(a);
        self.push(out, Op::Reshape(a), req)
    }

    pub fn gather_rows(&mut self, a: Value, indices: Rc<Vec<usize>>) -> Value {
        let ta = self.value(a);
        let mut out = Tensor::zeros(indices.len(), ta.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(ta.row(i));
        }
        let req = self.needs(a);
        self.push(out, Op::GatherRows(a, indices), req)
    }

    /// Repeat each row `k` times: `M x C -> (M*k) x C`.
    pub fn repeat_rows(&mut self, a: Value, k: usize) -> Value {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.rows * k, ta.cols);
        for r in 0..ta.rows {
            for j in 0..k {
                out.row_mut(r * k + j).copy_from_slice(ta.row(r));
            }
        }
        let req = self.needs(a);
        self.push(out, Op::RepeatInterleave(a, k), req)
    }

    fn pool_check(&self, a: Value, k: usize) -> (usize, usize) {
        let ta = self.value(a);
        assert!(k >= 1 && ta.rows % k == 0, "pool block size");
        (ta.rows / k, ta.cols)
    }

    pub fn sum_pool(&mut self, a: Value, k: usize) -> Value {
        let (groups, cols) = self.pool_check(a, k);
        let ta = self.value(a);
        let mut out = Tensor::zeros(groups, cols);
        for g in 0..groups {
            for j in 0..k {
                let row = ta.row(g * k + j);
                for (o, &v) in out.row_mut(g).iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
        }
        let req = self.needs(a);
        self.push(out, Op::SumPoolBlocks(a, k), req)
    }

    pub fn mean_pool(&mut self, a: Value, k: usize) -> Value {
        let (groups, cols) = self.pool_check(a, k);
        let ta = self.value(a);
        let inv = S::one() / S::from_usize(k);
        let mut out = Tensor::zeros(groups, cols);
        for g in 0..groups {
            for j in 0..k {
                let row = ta.row(g * k + j);
                for (o, &v) in out.row_mut(g).iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            for o in out.row_mut(g) {
                *o = *o * inv;
            }
        }
        let req = self.needs(a);
        self.push(out, Op::MeanPoolBlocks(a, k), req)
    }

    pub fn max_pool(&mut self, a: Value, k: usize) -> Value {
        let (groups, cols) = self.pool_check(a, k);
        let ta = self.value(a);
        let mut out = Tensor::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = ta.get(g * k, c);
                let mut best_j = 0usize;
                for j in 1..k {
                    let v = ta.get(g * k + j, c);
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out.set(g, c, best);
                argmax[g * cols + c] = best_j;
            }
        }
        let req = self.needs(a);
        self.push(out, Op::MaxPoolBlocks(a, k, argmax), req)
    }

    /// Softmax over the `k` rows of each block, independently per channel.
    pub fn group_softmax(&mut self, a: Value, k: usize) -> Value {
        let (groups, cols) = self.pool_check(a, k);
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.rows, ta.cols);
        for g in 0..groups {
            for c in 0..cols {
                let mut max = S::neg_infinity();
                for j in 0..k {
                    max = max.max(ta.get(g * k + j, c));
                }
                let mut total = S::zero();
                for j in 0..k {
                    let e = (ta.get(g * k + j, c) - max).exp();
                    out.set(g * k + j, c, e);
                    total = total + e;
                }
                for j in 0..k {
                    let v = out.get(g * k + j, c) / total;
                    out.set(g * k + j, c, v);
                }
            }
        }
        let _ = groups;
        let req = self.needs(a);
        self.push(out, Op::GroupSoftmax(a, k), req)
    }

    /// Sum over contiguous channel blocks of width `b`: `R x (h*b) -> R x h`.
    pub fn channel_block_sum(&mut self, a: Value, b: usize) -> Value {
        let ta = self.value(a);
        assert!(b >= 1 && ta.cols % b == 0, "channel block width");
        let heads = ta.cols / b;
        let mut out = Tensor::zeros(ta.rows, heads);
        for r in 0..ta.rows {
            let row = ta.row(r);
            for h in 0..heads {
                let mut acc = S::zero();
                for v in &row[h * b..(h + 1) * b] {
                    acc = acc + *v;
                }
                out.set(r, h, acc);
            }
        }
        let req = self.needs(a);
        self.push(out, Op::ChannelBlockSum(a, b), req)
    }

    /// Multiply each channel block of `x` by the matching per-block scalar in
    /// `s`: `s: R x h`, `x: R x (h*b)`.
    pub fn channel_block_mul(&mut self, s: Value, x: Value, b: usize) -> Value {
        let (ts, tx) = (self.value(s), self.value(x));
        assert_eq!(ts.rows, tx.rows, "channel block rows");
        assert_eq!(ts.cols * b, tx.cols, "channel block width");
        let mut out = tx.clone();
        for r in 0..tx.rows {
            for h in 0..ts.cols {
                let sv = ts.get(r, h);
                for o in &mut out.row_mut(r)[h * b..(h + 1) * b] {
                    *o = *o * sv;
                }
            }
        }
        let req = self.needs(s) || self.needs(x);
        self.push(out, Op::ChannelBlockMul(s, x, b), req)
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let total = self
            .value(a)
            .data
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let req = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), req)
    }

    /// Batch normalization with batch statistics (training graph).
    /// Statistics are computed per channel over all rows.
    pub fn batch_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: S) -> Value {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows, tx.cols);
        assert!(rows >= 1, "batch norm needs at least one row");
        let inv_n = S::one() / S::from_usize(rows);
        let mut mean = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (m, &v) in mean.data.iter_mut().zip(tx.row(r)) {
                *m = *m + v;
            }
        }
        for m in &mut mean.data {
            *m = *m * inv_n;
        }
        let mut var: Tensor<S> = Tensor::zeros(1, cols);
        for r in 0..rows {
            for c in 0..cols {
                let d = tx.get(r, c) - mean.data[c];
                var.data[c] = var.data[c] + d * d;
            }
        }
        let mut inv_std = Tensor::zeros(1, cols);
        for c in 0..cols {
            var.data[c] = var.data[c] * inv_n;
            inv_std.data[c] = S::one() / (var.data[c] + eps).sqrt();
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        assert_eq!(tg.cols, cols, "gamma width");
        assert_eq!(tb.cols, cols, "beta width");
        let mut out = Tensor::zeros(rows, cols);
        let tx = self.value(x);
        for r in 0..rows {
            for c in 0..cols {
                let xhat = (tx.get(r, c) - mean.data[c]) * inv_std.data[c];
                out.set(r, c, tg.data[c] * xhat + tb.data[c]);
            }
        }
        let req = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            req,
        )
    }

    /// Per-channel batch statistics of a value, for running-average updates.
    pub fn batch_stats(&self, x: Value) -> (Tensor<S>, Tensor<S>) {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows, tx.cols);
        let inv_n = S::one() / S::from_usize(rows);
        let mut mean = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (m, &v) in mean.data.iter_mut().zip(tx.row(r)) {
                *m = *m + v;
            }
        }
        for m in &mut mean.data {
            *m = *m * inv_n;
        }
        let mut var = Tensor::zeros(1, cols);
        for r in 0..rows {
            for c in 0..cols {
                let d = tx.get(r, c) - mean.data[c];
                var.data[c] = var.data[c] + d * d;
            }
        }
        for v in &mut var.data {
            *v = *v * inv_n;
        }
        (mean, var)
    }

    /// Bilinear sampling of a `(h*w) x C` feature map at continuous `M x 2`
    /// pixel coordinates `(u, v)`. Coordinates are clamped to
    /// `[-0.5, extent - 0.5]` and corners replicate at the border, so the
    /// result is finite for any finite input. Differentiable with respect to
    /// both the map and the coordinates.
    pub fn bilinear_sample(&mut self, map: Value, uv: Value, h: usize, w: usize) -> Value {
        let (tm, tuv) = (self.value(map), self.value(uv));
        assert_eq!(tm.rows, h * w, "map rows");
        assert_eq!(tuv.cols, 2, "uv must be M x 2");
        let cols = tm.cols;
        let mut out = Tensor::zeros(tuv.rows, cols);
        for m in 0..tuv.rows {
            let (u, v) = clamp_uv(tuv.get(m, 0), tuv.get(m, 1), h, w);
            let (x0, y0, fu, fv) = corner_of(u, v);
            let (x0c, x1c) = (clamp_idx(x0, w), clamp_idx(x0 + 1, w));
            let (y0c, y1c) = (clamp_idx(y0, h), clamp_idx(y0 + 1, h));
            let w00 = (S::one() - fu) * (S::one() - fv);
            let w10 = fu * (S::one() - fv);
            let w01 = (S::one() - fu) * fv;
            let w11 = fu * fv;
            let rows = [
                (w00, tm.row(y0c * w + x0c)),
                (w10, tm.row(y0c * w + x1c)),
                (w01, tm.row(y1c * w + x0c)),
                (w11, tm.row(y1c * w + x1c)),
            ];
            let out_row = out.row_mut(m);
            for (wt, src) in rows {
                for (o, &s) in out_row.iter_mut().zip(src) {
                    *o = *o + wt * s;
                }
            }
        }
        let req = self.needs(map) || self.needs(uv);
        self.push(out, Op::BilinearSample { map, uv, h, w }, req)
    }

    /// 3x3 convolution with padding 1 over an image stored as `(h*w) x Cin`.
    /// Weights are `Cout x (9 * Cin)` with layout `k * Cin + ci`.
    pub fn conv3x3(&mut self, x: Value, weights: Value, h: usize, w: usize, stride: usize) -> Value {
        let (tx, tw) = (self.value(x), self.value(weights));
        assert_eq!(tx.rows, h * w, "conv input rows");
        let cin = tx.cols;
        assert_eq!(tw.cols, 9 * cin, "conv weight width");
        let cout = tw.rows;
        let (ho, wo) = conv_out_dims(h, w, stride);
        let mut out = Tensor::zeros(ho * wo, cout);
        for oy in 0..ho {
            for ox in 0..wo {
                let out_row = (oy * wo + ox) * cout;
                for ky in 0..3usize {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_row = tx.row(iy as usize * w + ix as usize);
                        let k = ky * 3 + kx;
                        for co in 0..cout {
                            let w_row = &tw.row(co)[k * cin..(k + 1) * cin];
                            let mut acc = S::zero();
                            for (a, b) in x_row.iter().zip(w_row) {
                                acc = acc + *a * *b;
                            }
                            out.data[out_row + co] = out.data[out_row + co] + acc;
                        }
                    }
                }
            }
        }
        let req = self.needs(x) || self.needs(weights);
        self.push(
            out,
            Op::Conv3x3 {
                x,
                w: weights,
                h,
                wdt: w,
                stride,
            },
            req,
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Value) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Value, delta: Tensor<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                    *e = *e + *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b);
                    let d = Tensor::new(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect(),
                    );
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    let d = Tensor::new(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&ta.data).map(|(&x, &y)| x * y).collect(),
                    );
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::ScaleConst(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let mut d = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in d.data.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MulBias(x, s) => {
                let ts = self.value(*s);
                if self.needs(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        for (o, &sv) in d.row_mut(r).iter_mut().zip(&ts.data) {
                            *o = *o * sv;
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*s) {
                    let tx = self.value(*x);
                    let mut d = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            d.data[c] = d.data[c] + g.get(r, c) * tx.get(r, c);
                        }
                    }
                    self.accumulate(grads, *s, d);
                }
            }
            Op::MulColBroadcast(x, s) => {
                let ts = self.value(*s);
                if self.needs(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        let sv = ts.data[r];
                        for o in d.row_mut(r) {
                            *o = *o * sv;
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*s) {
                    let tx = self.value(*x);
                    let mut d = Tensor::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        let mut acc = S::zero();
                        for c in 0..g.cols {
                            acc = acc + g.get(r, c) * tx.get(r, c);
                        }
                        d.data[r] = acc;
                    }
                    self.accumulate(grads, *s, d);
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b);
                    self.accumulate(grads, *a, matmul_bt(g, tb));
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    self.accumulate(grads, *b, matmul_at(ta, g));
                }
            }
            Op::Transpose(a) => {
                let mut d = Tensor::zeros(g.cols, g.rows);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        d.set(c, r, g.get(r, c));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| gv * yv)
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let half = S::from_f64(0.5);
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| gv * half / yv.max(S::epsilon()))
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let ta = self.value(*a);
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &xv)| gv * xv.cos())
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let ta = self.value(*a);
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &xv)| -gv * xv.sin())
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Asin(a) => {
                let ta = self.value(*a);
                let d = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &xv)| {
                            let denom = (S::one() - xv * xv).max(S::epsilon()).sqrt();
                            gv / denom
                        })
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::Atan2(y, x) => {
                let (ty, tx) = (self.value(*y), self.value(*x));
                if self.needs(*y) {
                    let d = Tensor::new(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(ty.data.iter().zip(&tx.data))
                            .map(|(&gv, (&yv, &xv))| gv * xv / (xv * xv + yv * yv))
                            .collect(),
                    );
                    self.accumulate(grads, *y, d);
                }
                if self.needs(*x) {
                    let d = Tensor::new(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(ty.data.iter().zip(&tx.data))
                            .map(|(&gv, (&yv, &xv))| -gv * yv / (xv * xv + yv * yv))
                            .collect(),
                    );
                    self.accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.needs(p) {
                        let mut d = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start, len) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                let d = Tensor::new(ta.rows, ta.cols, g.data.clone());
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RepeatInterleave(a, k) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    for j in 0..*k {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(r * k + j)) {
                            *o = *o + v;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumPoolBlocks(a, k) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for gi in 0..g.rows {
                    for j in 0..*k {
                        d.row_mut(gi * k + j).copy_from_slice(g.row(gi));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanPoolBlocks(a, k) => {
                let ta = self.value(*a);
                let inv = S::one() / S::from_usize(*k);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for gi in 0..g.rows {
                    for j in 0..*k {
                        for (o, &v) in d.row_mut(gi * k + j).iter_mut().zip(g.row(gi)) {
                            *o = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaxPoolBlocks(a, k, argmax) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for gi in 0..g.rows {
                    for c in 0..g.cols {
                        let j = argmax[gi * g.cols + c];
                        let dst = (gi * k + j) * d.cols + c;
                        d.data[dst] = d.data[dst] + g.get(gi, c);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::GroupSoftmax(a, k) => {
                let y = &node.value;
                let groups = y.rows / k;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for gi in 0..groups {
                    for c in 0..y.cols {
                        let mut dot = S::zero();
                        for j in 0..*k {
                            dot = dot + y.get(gi * k + j, c) * g.get(gi * k + j, c);
                        }
                        for j in 0..*k {
                            let alpha = y.get(gi * k + j, c);
                            d.set(gi * k + j, c, alpha * (g.get(gi * k + j, c) - dot));
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ChannelBlockSum(a, b) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    for h in 0..g.cols {
                        let gv = g.get(r, h);
                        for o in &mut d.row_mut(r)[h * b..(h + 1) * b] {
                            *o = gv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ChannelBlockMul(s, x, b) => {
                let (ts, tx) = (self.value(*s), self.value(*x));
                if self.needs(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        for h in 0..ts.cols {
                            let sv = ts.get(r, h);
                            for o in &mut d.row_mut(r)[h * b..(h + 1) * b] {
                                *o = *o * sv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*s) {
                    let mut d = Tensor::zeros(ts.rows, ts.cols);
                    for r in 0..ts.rows {
                        for h in 0..ts.cols {
                            let mut acc = S::zero();
                            for j in 0..*b {
                                acc = acc + g.get(r, h * b + j) * tx.get(r, h * b + j);
                            }
                            d.set(r, h, acc);
                        }
                    }
                    self.accumulate(grads, *s, d);
                }
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let d = Tensor::filled(ta.rows, ta.cols, g.item());
                self.accumulate(grads, *a, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (rows, cols) = (tx.rows, tx.cols);
                let inv_n = S::one() / S::from_usize(rows);
                // Per-channel sums of g and g * xhat.
                let mut sum_g = vec![S::zero(); cols];
                let mut sum_gx = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let xhat = (tx.get(r, c) - mean.data[c]) * inv_std.data[c];
                        sum_g[c] = sum_g[c] + g.get(r, c);
                        sum_gx[c] = sum_gx[c] + g.get(r, c) * xhat;
                    }
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(1, cols, sum_g.clone()));
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(1, cols, sum_gx.clone()));
                }
                if self.needs(*x) {
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let xhat = (tx.get(r, c) - mean.data[c]) * inv_std.data[c];
                            let term =
                                g.get(r, c) - sum_g[c] * inv_n - xhat * sum_gx[c] * inv_n;
                            d.set(r, c, tg.data[c] * inv_std.data[c] * term);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::BilinearSample { map, uv, h, w } => {
                let (tm, tuv) = (self.value(*map), self.value(*uv));
                let cols = tm.cols;
                let mut d_map = if self.needs(*map) {
                    Some(Tensor::zeros(tm.rows, tm.cols))
                } else {
                    None
                };
                let mut d_uv = if self.needs(*uv) {
                    Some(Tensor::zeros(tuv.rows, 2))
                } else {
                    None
                };
                for m in 0..tuv.rows {
                    let (raw_u, raw_v) = (tuv.get(m, 0), tuv.get(m, 1));
                    let (u, v) = clamp_uv(raw_u, raw_v, *h, *w);
                    let clamped_u = u != raw_u;
                    let clamped_v = v != raw_v;
                    let (x0, y0, fu, fv) = corner_of(u, v);
                    let (x0c, x1c) = (clamp_idx(x0, *w), clamp_idx(x0 + 1, *w));
                    let (y0c, y1c) = (clamp_idx(y0, *h), clamp_idx(y0 + 1, *h));
                    let gr = g.row(m);
                    if let Some(dm) = d_map.as_mut() {
                        let w00 = (S::one() - fu) * (S::one() - fv);
                        let w10 = fu * (S::one() - fv);
                        let w01 = (S::one() - fu) * fv;
                        let w11 = fu * fv;
                        for (wt, row) in [
                            (w00, y0c * w + x0c),
                            (w10, y0c * w + x1c),
                            (w01, y1c * w + x0c),
                            (w11, y1c * w + x1c),
                        ] {
                            for (o, &gv) in dm.row_mut(row).iter_mut().zip(gr) {
                                *o = *o + wt * gv;
                            }
                        }
                    }
                    if let Some(duv) = d_uv.as_mut() {
                        let mut du = S::zero();
                        let mut dv = S::zero();
                        for c in 0..cols {
                            let f00 = tm.get(y0c * w + x0c, c);
                            let f10 = tm.get(y0c * w + x1c, c);
                            let f01 = tm.get(y1c * w + x0c, c);
                            let f11 = tm.get(y1c * w + x1c, c);
                            du = du
                                + gr[c]
                                    * ((S::one() - fv) * (f10 - f00) + fv * (f11 - f01));
                            dv = dv
                                + gr[c]
                                    * ((S::one() - fu) * (f01 - f00) + fu * (f11 - f10));
                        }
                        if clamped_u {
                            du = S::zero();
                        }
                        if clamped_v {
                            dv = S::zero();
                        }
                        duv.set(m, 0, du);
                        duv.set(m, 1, dv);
                    }
                }
                if let Some(dm) = d_map {
                    self.accumulate(grads, *map, dm);
                }
                if let Some(duv) = d_uv {
                    self.accumulate(grads, *uv, duv);
                }
            }
            Op::Conv3x3 {
                x,
                w: weights,
                h,
                wdt,
                stride,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*weights));
                let cin = tx.cols;
                let cout = tw.rows;
                let (ho, wo) = conv_out_dims(*h, *wdt, *stride);
                let mut d_x = if self.needs(*x) {
                    Some(Tensor::zeros(tx.rows, tx.cols))
                } else {
                    None
                };
                let mut d_w = if self.needs(*weights) {
                    Some(Tensor::zeros(tw.rows, tw.cols))
                } else {
                    None
                };
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g_row = g.row(oy * wo + ox);
                        for ky in 0..3usize {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= *h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= *wdt as isize {
                                    continue;
                                }
                                let in_row = iy as usize * wdt + ix as usize;
                                let k = ky * 3 + kx;
                                if let Some(dw) = d_w.as_mut() {
                                    let x_row = tx.row(in_row);
                                    for co in 0..cout {
                                        let gv = g_row[co];
                                        let dst = &mut dw.row_mut(co)[k * cin..(k + 1) * cin];
                                        for (o, &xv) in dst.iter_mut().zip(x_row) {
                                            *o = *o + gv * xv;
                                        }
                                    }
                                }
                                if let Some(dx) = d_x.as_mut() {
                                    let dst = dx.row_mut(in_row);
                                    for co in 0..cout {
                                        let gv = g_row[co];
                                        let w_row = &tw.row(co)[k * cin..(k + 1) * cin];
                                        for (o, &wv) in dst.iter_mut().zip(w_row) {
                                            *o = *o + gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = d_x {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = d_w {
                    self.accumulate(grads, *weights, dw);
                }
            }
        }
    }
}

pub fn conv_out_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

fn clamp_idx(i: isize, extent: usize) -> usize {
    i.clamp(0, extent as isize - 1) as usize
}

fn clamp_uv<S: Scalar>(u: S, v: S, h: usize, w: usize) -> (S, S) {
    let half = S::from_f64(0.5);
    let u_max = S::from_usize(w) - half;
    let v_max = S::from_usize(h) - half;
    (
        u.max(-half).min(u_max),
        v.max(-half).min(v_max),
    )
}

fn corner_of<S: Scalar>(u: S, v: S) -> (isize, isize, S, S) {
    let x0 = u.floor();
    let y0 = v.floor();
    (
        x0.as_f64() as isize,
        y0.as_f64() as isize,
        u - x0,
        v - y0,
    )
}

fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = b.row(k);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `g * b^T` without materializing the transpose.
fn matmul_bt<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(g.rows, b.rows);
    for i in 0..g.rows {
        let g_row = g.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = S::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc = acc + gv * bv;
            }
            *o = acc;
        }
    }
    out
}

/// `a^T * g` without materializing the transpose.
fn matmul_at<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(a.cols, g.cols);
    for r in 0..a.rows {
        let a_row = a.row(r);
        let g_row = g.row(r);
        for (k, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = out.row_mut(k);
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of every op: perturb each leaf entry and
    /// compare against the analytic gradient of a scalar loss.
    fn check_grads(
        leaves: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Value]) -> Value,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vals: Vec<Value> = leaves.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &vals);
        let grads = tape.backward(loss);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vals[li])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(leaf.rows, leaf.cols));
            for e in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                plus[li].data[e] += h;
                let mut minus = leaves.to_vec();
                minus[li].data[e] -= h;
                let eval = |ls: &[Tensor<f64>]| {
                    let mut t = Tape::new();
                    let vs: Vec<Value> = ls.iter().map(|x| t.variable(x.clone())).collect();
                    let l = build(&mut t, &vs);
                    t.value(l).item()
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[e];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "leaf {li} entry {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        check_grads(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let d = t.sub(m, v[1]);
            let n = t.neg(d);
            let sc = t.scale(n, 0.7);
            t.sum_all(sc)
        }, 1e-7);
    }

    #[test]
    fn nonlinearity_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let a = rand_tensor(&mut rng, 2, 5);
        check_grads(&[a], |t, v| {
            let r = t.relu(v[0]);
            let s = t.sigmoid(r);
            let e = t.exp(s);
            t.sum_all(e)
        }, 1e-6);
    }

    #[test]
    fn sqrt_gradient() {
        let a = Tensor::new(1, 3, vec![0.5, 2.0, 9.0]);
        check_grads(&[a], |t, v| {
            let s = t.sqrt(v[0]);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn trig_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let a = rand_tensor(&mut rng, 1, 3).map(|v| v * 0.5);
        let b = rand_tensor(&mut rng, 1, 3).map(|v| v * 0.5 + 1.2);
        check_grads(&[a, b], |t, v| {
            let s = t.sin(v[0]);
            let c = t.cos(v[0]);
            let asn = t.asin(s);
            let at = t.atan2(v[0], v[1]);
            let parts = t.concat_cols(&[s, c, asn, at]);
            t.sum_all(parts)
        }, 1e-6);
    }

    #[test]
    fn matmul_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let x = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 3, 5);
        let b = rand_tensor(&mut rng, 1, 5);
        check_grads(&[x, w, b], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_bias(y, v[2]);
            let y = t.mul_bias(y, v[2]);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn gather_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let x = rand_tensor(&mut rng, 5, 3);
        let idx = Rc::new(vec![0usize, 2, 2, 4, 1, 3]);
        check_grads(&[x], move |t, v| {
            let g = t.gather_rows(v[0], idx.clone());
            let mx = t.max_pool(g, 2);
            let mn = t.mean_pool(g, 3);
            let sm = t.sum_pool(g, 2);
            let a = t.sum_all(mx);
            let b = t.sum_all(mn);
            let c = t.sum_all(sm);
            let ab = t.add(a, b);
            t.add(ab, c)
        }, 1e-6);
    }

    #[test]
    fn repeat_slice_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let x = rand_tensor(&mut rng, 3, 4);
        check_grads(&[x], |t, v| {
            let r = t.repeat_rows(v[0], 2);
            let s = t.slice_cols(r, 1, 2);
            let tr = t.transpose(s);
            let rs = t.reshape(tr, 4, 3);
            t.sum_all(rs)
        }, 1e-6);
    }

    #[test]
    fn group_softmax_gradient_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let x = rand_tensor(&mut rng, 6, 2);
        let probe = rand_tensor(&mut rng, 6, 2);
        {
            let mut tape = Tape::new();
            let v = tape.variable(x.clone());
            let s = tape.group_softmax(v, 3);
            let sums = tape.sum_pool(s, 3);
            for v in &tape.value(sums).data {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        check_grads(&[x], move |t, v| {
            let s = t.group_softmax(v[0], 3);
            let p = t.constant(probe.clone());
            let weighted = t.mul(s, p);
            t.sum_all(weighted)
        }, 1e-6);
    }

    #[test]
    fn channel_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let s = rand_tensor(&mut rng, 3, 2);
        let x = rand_tensor(&mut rng, 3, 6);
        check_grads(&[s, x], |t, v| {
            let m = t.channel_block_mul(v[0], v[1], 3);
            let cs = t.channel_block_sum(m, 3);
            t.sum_all(cs)
        }, 1e-6);
    }

    #[test]
    fn mul_col_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let x = rand_tensor(&mut rng, 4, 3);
        let s = rand_tensor(&mut rng, 4, 1);
        check_grads(&[x, s], |t, v| {
            let m = t.mul_col(v[0], v[1]);
            t.sum_all(m)
        }, 1e-6);
    }

    #[test]
    fn batch_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let x = rand_tensor(&mut rng, 6, 3);
        let gamma = rand_tensor(&mut rng, 1, 3).map(|v| v + 1.5);
        let beta = rand_tensor(&mut rng, 1, 3);
        let probe = rand_tensor(&mut rng, 6, 3);
        check_grads(&[x, gamma, beta], move |t, v| {
            let y = t.batch_norm(v[0], v[1], v[2], 1e-5);
            let p = t.constant(probe.clone());
            let w = t.mul(y, p);
            t.sum_all(w)
        }, 1e-5);
    }

    #[test]
    fn bilinear_sample_values_and_gradient() {
        // 2x2 map, single channel: node-exact and midpoint cases.
        let map = Tensor::new(4, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let m = tape.variable(map.clone());
        let uv = tape.constant(Tensor::from_rows(&[[1.0f64, 0.0], [0.5, 0.0], [0.5, 0.5]]));
        let out = tape.bilinear_sample(m, uv, 2, 2);
        let got = tape.value(out);
        assert!((got.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((got.get(1, 0) - 1.5).abs() < 1e-12);
        assert!((got.get(2, 0) - 2.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let map = rand_tensor(&mut rng, 12, 2);
        let uv = Tensor::from_rows(&[[0.3, 1.7], [2.2, 0.6], [1.1, 1.4]]);
        check_grads(&[map, uv], |t, v| {
            let s = t.bilinear_sample(v[0], v[1], 3, 4);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn bilinear_sample_clamps_out_of_bounds() {
        let map = Tensor::new(4, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let m = tape.constant(map);
        let uv = tape.variable(Tensor::from_rows(&[[-7.0f64, -7.0], [100.0, 100.0]]));
        let out = tape.bilinear_sample(m, uv, 2, 2);
        assert!((tape.value(out).get(0, 0) - 1.0).abs() < 1e-12);
        assert!((tape.value(out).get(1, 0) - 4.0).abs() < 1e-12);
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        // Fully clamped coordinates receive zero gradient.
        for v in &grads.get(uv).unwrap().data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn conv3x3_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let x = rand_tensor(&mut rng, 4 * 4, 2);
        let w = rand_tensor(&mut rng, 3, 9 * 2);
        check_grads(&[x.clone(), w.clone()], |t, v| {
            let y = t.conv3x3(v[0], v[1], 4, 4, 1);
            t.sum_all(y)
        }, 1e-6);
        check_grads(&[x, w], |t, v| {
            let y = t.conv3x3(v[0], v[1], 4, 4, 2);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn conv3x3_matches_hand_computed_value() {
        // 3x3 single-channel image, identity-like kernel that picks the
        // center pixel only.
        let x = Tensor::new(9, 1, (1..=9).map(|v| v as f64).collect());
        let mut w = Tensor::zeros(1, 9);
        w.data[4] = 1.0; // center tap
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let y = tape.conv3x3(xv, wv, 3, 3, 1);
        assert_eq!(tape.value(y).data, (1..=9).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn shared_parameter_accumulates_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.trainable("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w1 = tape.param(&store, id);
        let w2 = tape.param(&store, id);
        assert_eq!(w1, w2);
        // loss = w * w -> dL/dw = 2w = 6
        let prod = tape.mul(w1, w2);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        assert!((grads.get(w1).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let v = tape.variable(Tensor::scalar(3.0));
        let prod = tape.mul(c, v);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!((grads.get(v).unwrap().item() - 2.0).abs() < 1e-12);
    }
}
