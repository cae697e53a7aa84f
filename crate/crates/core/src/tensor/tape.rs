use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;

use super::{ParamId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Below this many multiply-adds a kernel runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Dropout(usize, Vec<f64>),
    Reshape(usize),
    Sum(usize),
    SumSquares(usize),
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        pad_left: usize,
    },
    ConcatTime(Vec<usize>),
    SliceTime {
        input: usize,
        start: usize,
    },
    /// Normalisation of each row of a matrix. `per_row_affine` selects
    /// whether scale/shift are indexed by row (batch-norm over time in a
    /// channel-major layout) or by column (layer-norm over features).
    Normalize {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        per_row_affine: bool,
        batch_stats: bool,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalPool {
        input: usize,
        norms: Vec<f64>,
        argmax: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SelectRow {
        input: usize,
        row: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }
}

/// Single-owner record of executed operations.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Attention probabilities `(heads, L, L)` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Result<Option<&[f64]>> {
        Ok(match &self.nodes[self.idx(v)?].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        })
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "mul {:?} * {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        )?;
        let g = self.grad_flag(&[ia]);
        Ok(self.push(out, Op::Scale(ia, factor), g))
    }

    /// `(R, C) + (C)`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (x, b) = (self.val(ia), self.val(ib));
        let (r, c) = x.dims2()?;
        if b.len() != c {
            return Err(Error::shape(format!(
                "bias of length {} for {r}x{c} input",
                b.len()
            )));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::AddBias(ia, ib), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        let (r, k) = x.dims2()?;
        let (k2, c) = y.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {r}x{k} by {k2}x{c}")));
        }
        let out = matmul_raw(x.data(), y.data(), r, k, c);
        let out = Tensor::new(vec![r, c], out)?;
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), g))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        let g = self.grad_flag(&[ia]);
        Ok(self.push(out, Op::Relu(ia), g))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `a`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let ia = self.idx(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.val(ia).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.val(ia);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let g = self.grad_flag(&[ia]);
        Ok(self.push(out, Op::Dropout(ia, mask), g))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).clone().reshape(shape)?;
        let g = self.grad_flag(&[ia]);
        Ok(self.push(out, Op::Reshape(ia), g))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).data().iter().sum();
        let g = self.grad_flag(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), g))
    }

    /// `Σ x²`, the squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).sum_squares();
        let g = self.grad_flag(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(ia), g))
    }

    /// 'Same'-padded stride-1 temporal convolution (cross-correlation).
    /// `x`: `(C_in, T)`, `weight`: `(C_out, C_in, K)`, `bias`: `(C_out)`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (cin, t) = self.val(ix).dims2()?;
        let (cout, wcin, kw) = match self.val(iw).shape() {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::shape(format!("conv kernel must be rank 3, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.val(ib).len() != cout {
            return Err(Error::shape("conv bias length != output channels"));
        }
        let pad_left = (kw - 1) / 2;
        let xs = self.val(ix).data();
        let ws = self.val(iw).data();
        let bs = self.val(ib).data();
        let mut out = vec![0.0; cout * t];
        let kernel = |(o, row): (usize, &mut [f64])| {
            row.fill(bs[o]);
            for i in 0..cin {
                let xi = &xs[i * t..(i + 1) * t];
                for k in 0..kw {
                    let wv = ws[(o * cin + i) * kw + k];
                    let shift = k as isize - pad_left as isize;
                    let (lo, hi) = valid_range(t, shift);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xi[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (dst, s) in row[lo..hi].iter_mut().zip(src) {
                        *dst += wv * s;
                    }
                }
            }
        };
        if cout * cin * kw * t >= PAR_THRESHOLD {
            out.par_chunks_mut(t.max(1)).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(t.max(1)).enumerate().for_each(kernel);
        }
        let out = Tensor::new(vec![cout, t], out)?;
        let g = self.grad_flag(&[ix, iw, ib]);
        Ok(self.push(
            out,
            Op::Conv1d {
                input: ix,
                weight: iw,
                bias: ib,
                pad_left,
            },
            g,
        ))
    }

    /// Concatenates `(C, T_i)` matrices along time.
    pub fn concat_time(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_time of zero inputs"));
        }
        let idxs: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let (c, _) = self.val(idxs[0]).dims2()?;
        let mut total = 0;
        for &i in &idxs {
            let (ci, ti) = self.val(i).dims2()?;
            if ci != c {
                return Err(Error::shape(format!("concat_time channel mismatch {ci} vs {c}")));
            }
            total += ti;
        }
        let mut out = vec![0.0; c * total];
        let mut offset = 0;
        for &i in &idxs {
            let (_, ti) = self.val(i).dims2()?;
            let src = self.val(i).data();
            for ch in 0..c {
                out[ch * total + offset..ch * total + offset + ti]
                    .copy_from_slice(&src[ch * ti..(ch + 1) * ti]);
            }
            offset += ti;
        }
        let g = self.grad_flag(&idxs);
        Ok(self.push(Tensor::new(vec![c, total], out)?, Op::ConcatTime(idxs), g))
    }

    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, t) = self.val(ix).dims2()?;
        if start + len > t {
            return Err(Error::shape(format!("slice {start}+{len} beyond length {t}")));
        }
        let src = self.val(ix).data();
        let mut out = Vec::with_capacity(c * len);
        for ch in 0..c {
            out.extend_from_slice(&src[ch * t + start..ch * t + start + len]);
        }
        let g = self.grad_flag(&[ix]);
        Ok(self.push(
            Tensor::new(vec![c, len], out)?,
            Op::SliceTime { input: ix, start },
            g,
        ))
    }

    /// Batch normalisation of a channel-major `(C, T)` matrix using the
    /// statistics of the input itself. Returns the biased per-channel
    /// mean and variance alongside the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let ix = self.idx(x)?;
        let (c, t) = self.val(ix).dims2()?;
        let (mean, var) = row_moments(self.val(ix).data(), c, t);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv, true, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv, true, false)
    }

    /// Layer normalisation over the last axis of an `(R, C)` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let (r, c) = self.val(ix).dims2()?;
        let (mean, var) = row_moments(self.val(ix).data(), r, c);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, &mean, &inv, false, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        per_row_affine: bool,
        batch_stats: bool,
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (r, c) = self.val(ix).dims2()?;
        let affine_len = if per_row_affine { r } else { c };
        if self.val(ig).len() != affine_len || self.val(ib).len() != affine_len {
            return Err(Error::shape(format!(
                "normalisation scale/shift must have length {affine_len}"
            )));
        }
        if mean.len() != r || inv_std.len() != r {
            return Err(Error::shape("normalisation statistics length mismatch"));
        }
        let xs = self.val(ix).data();
        let gs = self.val(ig).data();
        let bs = self.val(ib).data();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            for col in 0..c {
                let j = row * c + col;
                let h = (xs[j] - mean[row]) * inv_std[row];
                xhat[j] = h;
                let a = if per_row_affine { row } else { col };
                out[j] = gs[a] * h + bs[a];
            }
        }
        let g = self.grad_flag(&[ix, ig, ib]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::Normalize {
                input: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std: inv_std.to_vec(),
                per_row_affine,
                batch_stats,
            },
            g,
        ))
    }

    /// Max-pooling along time of a `(C, T)` matrix; output length
    /// `ceil(T / size)`. Ties go to the lowest index.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        if size == 0 {
            return Err(Error::config("pool size must be positive"));
        }
        let (c, t) = self.val(ix).dims2()?;
        let to = t.div_ceil(size);
        let xs = self.val(ix).data();
        let mut out = vec![0.0; c * to];
        let mut argmax = vec![0usize; c * to];
        for ch in 0..c {
            for j in 0..to {
                let lo = j * size;
                let hi = (lo + size).min(t);
                let mut best = ch * t + lo;
                for p in ch * t + lo + 1..ch * t + hi {
                    if xs[p] > xs[best] {
                        best = p;
                    }
                }
                out[ch * to + j] = xs[best];
                argmax[ch * to + j] = best;
            }
        }
        let g = self.grad_flag(&[ix]);
        Ok(self.push(
            Tensor::new(vec![c, to], out)?,
            Op::MaxPool { input: ix, argmax },
            g,
        ))
    }

    /// Global temporal pooling of a `(C, T)` matrix into the vector
    /// `[l2_norm(C) | mean(C) | max(C)]` of length `3C`.
    pub fn global_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, t) = self.val(ix).dims2()?;
        if t == 0 {
            return Err(Error::shape("global pooling over zero frames"));
        }
        let xs = self.val(ix).data();
        let mut out = vec![0.0; 3 * c];
        let mut norms = vec![0.0; c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let row = &xs[ch * t..(ch + 1) * t];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mean = row.iter().sum::<f64>() / t as f64;
            let mut best = 0;
            for (p, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = p;
                }
            }
            norms[ch] = n;
            argmax[ch] = ch * t + best;
            out[ch] = n;
            out[c + ch] = mean;
            out[2 * c + ch] = row[best];
        }
        let g = self.grad_flag(&[ix]);
        Ok(self.push(
            Tensor::vector(out),
            Op::GlobalPool {
                input: ix,
                norms,
                argmax,
            },
            g,
        ))
    }

    /// Full (non-causal) multi-head scaled dot-product attention over
    /// `(L, d)` query/key/value matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (l, d) = self.val(iq).dims2()?;
        if self.val(ik).shape() != [l, d] || self.val(iv).shape() != [l, d] {
            return Err(Error::shape("attention q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("d_model {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.val(iq).data(), self.val(ik).data(), self.val(iv).data());
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let qi = &qs[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let g = self.grad_flag(&[iq, ik, iv]);
        Ok(self.push(
            Tensor::new(vec![l, d], out)?,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Gathers rows of a `(V, d)` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (vocab, d) = self.val(it).dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(format!("id {bad} outside table of {vocab} rows")));
        }
        let ts = self.val(it).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&ts[i * d..(i + 1) * d]);
        }
        let g = self.grad_flag(&[it]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Row `row` of an `(R, C)` matrix as a `(1, C)` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (r, c) = self.val(ix).dims2()?;
        if row >= r {
            return Err(Error::shape(format!("row {row} of {r}")));
        }
        let out = self.val(ix).row(row).to_vec();
        let g = self.grad_flag(&[ix]);
        Ok(self.push(
            Tensor::new(vec![1, c], out)?,
            Op::SelectRow { input: ix, row },
            g,
        ))
    }

    /// Summed softmax cross-entropy of `(N, K)` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let x = self.val(il);
        let (n, k) = match x.shape() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            s => return Err(Error::shape(format!("logits must be rank 1 or 2, got {s:?}"))),
        };
        if targets.len() != n {
            return Err(Error::shape(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= k) {
            return Err(Error::shape(format!("target {bad} outside {k} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let g = self.grad_flag(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`; returns the gradient of every
    /// trainable leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let lv = self.val(il);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=il).map(|_| None).collect();
        adj[il] = Some(vec![1.0]);
        let mut grads = Gradients::default();
        for i in (0..=il).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut adj, &mut grads)?;
        }
        Ok(grads)
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        let n = self.nodes[i].value.len();
        Some(adj[i].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: Vec<f64>,
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = Tensor::new(out.shape().to_vec(), g)?;
                let mut single = Gradients::default();
                single.insert(*id, t);
                grads.accumulate(&single);
            }
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if let Some(s) = self.slot(adj, i) {
                        add_into(s, &g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                if let Some(s) = self.slot(adj, *a) {
                    for ((d, gv), y) in s.iter_mut().zip(&g).zip(&xb) {
                        *d += gv * y;
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for ((d, gv), y) in s.iter_mut().zip(&g).zip(&xa) {
                        *d += gv * y;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(adj, *a) {
                    for (d, gv) in s.iter_mut().zip(&g) {
                        *d += f * gv;
                    }
                }
            }
            Op::AddBias(a, b) => {
                let c = self.val(*b).len();
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, &g);
                }
                if let Some(s) = self.slot(adj, *b) {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (r, k) = self.val(*a).dims2()?;
                let (_, c) = self.val(*b).dims2()?;
                if self.nodes[*a].needs_grad {
                    let bd = self.val(*b).data();
                    let ga = matmul_a_bt(&g, bd, r, c, k);
                    if let Some(s) = self.slot(adj, *a) {
                        add_into(s, &ga);
                    }
                }
                if self.nodes[*b].needs_grad {
                    let ad = self.val(*a).data();
                    let gb = matmul_at_b(ad, &g, r, k, c);
                    if let Some(s) = self.slot(adj, *b) {
                        add_into(s, &gb);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a).data().to_vec();
                if let Some(s) = self.slot(adj, *a) {
                    for ((d, gv), xv) in s.iter_mut().zip(&g).zip(&x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(s) = self.slot(adj, *a) {
                    for ((d, gv), m) in s.iter_mut().zip(&g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, &g);
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                if let Some(s) = self.slot(adj, *a) {
                    for d in s.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumSquares(a) => {
                let gv = g[0];
                let x = self.val(*a).data().to_vec();
                if let Some(s) = self.slot(adj, *a) {
                    for (d, xv) in s.iter_mut().zip(&x) {
                        *d += 2.0 * gv * xv;
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                pad_left,
            } => self.conv1d_backward(*input, *weight, *bias, *pad_left, &g, adj)?,
            Op::ConcatTime(parts) => {
                let (c, total) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, tp) = self.val(p).dims2()?;
                    if let Some(s) = self.slot(adj, p) {
                        for ch in 0..c {
                            add_into(
                                &mut s[ch * tp..(ch + 1) * tp],
                                &g[ch * total + offset..ch * total + offset + tp],
                            );
                        }
                    }
                    offset += tp;
                }
            }
            Op::SliceTime { input, start } => {
                let (c, t) = self.val(*input).dims2()?;
                let (_, len) = out.dims2()?;
                if let Some(s) = self.slot(adj, *input) {
                    for ch in 0..c {
                        add_into(
                            &mut s[ch * t + start..ch * t + start + len],
                            &g[ch * len..(ch + 1) * len],
                        );
                    }
                }
            }
            Op::Normalize {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                per_row_affine,
                batch_stats,
            } => {
                let (r, c) = out.dims2()?;
                let gam = self.val(*gamma).data().to_vec();
                let aff = |row: usize, col: usize| if *per_row_affine { row } else { col };
                if let Some(s) = self.slot(adj, *gamma) {
                    for row in 0..r {
                        for col in 0..c {
                            let j = row * c + col;
                            s[aff(row, col)] += g[j] * xhat[j];
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *beta) {
                    for row in 0..r {
                        for col in 0..c {
                            s[aff(row, col)] += g[row * c + col];
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *input) {
                    for row in 0..r {
                        let gh: Vec<f64> = (0..c)
                            .map(|col| g[row * c + col] * gam[aff(row, col)])
                            .collect();
                        let xh = &xhat[row * c..(row + 1) * c];
                        if *batch_stats {
                            let n = c as f64;
                            let mean_g = gh.iter().sum::<f64>() / n;
                            let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                            for col in 0..c {
                                s[row * c + col] +=
                                    inv_std[row] * (gh[col] - mean_g - xh[col] * mean_gx);
                            }
                        } else {
                            for col in 0..c {
                                s[row * c + col] += inv_std[row] * gh[col];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(s) = self.slot(adj, *input) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        s[src] += gv;
                    }
                }
            }
            Op::GlobalPool {
                input,
                norms,
                argmax,
            } => {
                let (c, t) = self.val(*input).dims2()?;
                let x = self.val(*input).data().to_vec();
                if let Some(s) = self.slot(adj, *input) {
                    for ch in 0..c {
                        let (gn, gm, gx) = (g[ch], g[c + ch], g[2 * c + ch]);
                        let n = norms[ch];
                        for p in ch * t..(ch + 1) * t {
                            if n > 0.0 {
                                s[p] += gn * x[p] / n;
                            }
                            s[p] += gm / t as f64;
                        }
                        s[argmax[ch]] += gx;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, &g, adj)?,
            Op::Embedding { table, ids } => {
                let (_, d) = self.val(*table).dims2()?;
                if let Some(s) = self.slot(adj, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::SelectRow { input, row } => {
                let (_, c) = self.val(*input).dims2()?;
                if let Some(s) = self.slot(adj, *input) {
                    add_into(&mut s[row * c..(row + 1) * c], &g);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gv = g[0];
                let k = probs.len() / targets.len();
                if let Some(s) = self.slot(adj, *logits) {
                    for (n, &y) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[n * k + j] += gv * (probs[n * k + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv1d_backward(
        &self,
        input: usize,
        weight: usize,
        bias: usize,
        pad_left: usize,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (cin, t) = self.val(input).dims2()?;
        let (cout, kw) = match self.val(weight).shape() {
            [o, _, k] => (*o, *k),
            _ => unreachable!("validated in forward"),
        };
        let xs = self.val(input).data();
        let ws = self.val(weight).data();
        let big = cout * cin * kw * t >= PAR_THRESHOLD;

        if let Some(s) = self.slot(adj, bias) {
            for o in 0..cout {
                s[o] += g[o * t..(o + 1) * t].iter().sum::<f64>();
            }
        }
        if self.nodes[weight].needs_grad {
            let mut gw = vec![0.0; cout * cin * kw];
            let kernel = |(o, chunk): (usize, &mut [f64])| {
                let go = &g[o * t..(o + 1) * t];
                for i in 0..cin {
                    let xi = &xs[i * t..(i + 1) * t];
                    for k in 0..kw {
                        let shift = k as isize - pad_left as isize;
                        let (lo, hi) = valid_range(t, shift);
                        if lo >= hi {
                            continue;
                        }
                        let src = &xi[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        chunk[i * kw + k] = go[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum();
                    }
                }
            };
            if big {
                gw.par_chunks_mut(cin * kw).enumerate().for_each(kernel);
            } else {
                gw.chunks_mut(cin * kw).enumerate().for_each(kernel);
            }
            if let Some(s) = self.slot(adj, weight) {
                add_into(s, &gw);
            }
        }
        if self.nodes[input].needs_grad {
            let mut gx = vec![0.0; cin * t];
            let kernel = |(i, row): (usize, &mut [f64])| {
                for o in 0..cout {
                    let go = &g[o * t..(o + 1) * t];
                    for k in 0..kw {
                        let wv = ws[(o * cin + i) * kw + k];
                        let shift = k as isize - pad_left as isize;
                        let (lo, hi) = valid_range(t, shift);
                        if lo >= hi {
                            continue;
                        }
                        let dst = &mut row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (d, gv) in dst.iter_mut().zip(&go[lo..hi]) {
                            *d += wv * gv;
                        }
                    }
                }
            };
            if big {
                gx.par_chunks_mut(t.max(1)).enumerate().for_each(kernel);
            } else {
                gx.chunks_mut(t.max(1)).enumerate().for_each(kernel);
            }
            if let Some(s) = self.slot(adj, input) {
                add_into(s, &gx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (l, d) = self.val(q).dims2()?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut gq = vec![0.0; l * d];
        let mut gk = vec![0.0; l * d];
        let mut gv = vec![0.0; l * d];
        let mut gp = vec![0.0; l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                let gi = &g[i * d + off..i * d + off + dh];
                for j in 0..l {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    gp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                    for (dst, gg) in gvj.iter_mut().zip(gi) {
                        *dst += p[j] * gg;
                    }
                }
                let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                let qi = &qs[i * d + off..i * d + off + dh];
                for j in 0..l {
                    let gs = p[j] * (gp[j] - dot) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let gqi = &mut gq[i * d + off..i * d + off + dh];
                    for (dst, kk) in gqi.iter_mut().zip(kj) {
                        *dst += gs * kk;
                    }
                    let gkj = &mut gk[j * d + off..j * d + off + dh];
                    for (dst, qq) in gkj.iter_mut().zip(qi) {
                        *dst += gs * qq;
                    }
                }
            }
        }
        for (idx, grad) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(s) = self.slot(adj, idx) {
                add_into(s, &grad);
            }
        }
        Ok(())
    }
}

/// Output indices `t` whose source index `t + shift` lies inside `[0, len)`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_moments(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; rows];
    let mut var = vec![0.0; rows];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().sum::<f64>() / cols as f64;
        mean[r] = m;
        var[r] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
    }
    (mean, var)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    let kernel = |(i, row): (usize, &mut [f64])| {
        let ai = &a[i * k..(i + 1) * k];
        for (kk, av) in ai.iter().enumerate() {
            let bk = &b[kk * c..(kk + 1) * c];
            for (o, bv) in row.iter_mut().zip(bk) {
                *o += av * bv;
            }
        }
    };
    if r * k * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c.max(1)).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(c.max(1)).enumerate().for_each(kernel);
    }
    out
}

/// `G · Bᵀ` for `G: (r, c)`, `B: (k, c)`.
fn matmul_a_bt(g: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    let kernel = |(i, row): (usize, &mut [f64])| {
        let gi = &g[i * c..(i + 1) * c];
        for (kk, o) in row.iter_mut().enumerate() {
            *o = gi.iter().zip(&b[kk * c..(kk + 1) * c]).map(|(x, y)| x * y).sum();
        }
    };
    if r * k * c >= PAR_THRESHOLD {
        out.par_chunks_mut(k.max(1)).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(k.max(1)).enumerate().for_each(kernel);
    }
    out
}

/// `Aᵀ · G` for `A: (r, k)`, `G: (r, c)`.
fn matmul_at_b(a: &[f64], g: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    let kernel = |(kk, row): (usize, &mut [f64])| {
        for i in 0..r {
            let av = a[i * k + kk];
            for (o, gv) in row.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                *o += av * gv;
            }
        }
    };
    if r * k * c >= PAR_THRESHOLD {
        out.par_chunks_mut(c.max(1)).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(c.max(1)).enumerate().for_each(kernel);
    }
    out
}
