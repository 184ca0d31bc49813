//! The dual-stream attention mask and the attention kernels that apply it.
//!
//! Rows `0..m` are visual tokens and see only each other (bidirectional);
//! rows `m..m+n` are causal-flow queries and see every visual token plus the
//! queries up to and including themselves:
//!
//! ```text
//! [ 1_{m×m}   0_{m×n}      ]
//! [ 1_{n×m}   LowerTri(n)  ]
//! ```

use crate::error::{Error, Result};
use crate::numerics::{kernels, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualStreamMask {
    m: usize,
    n: usize,
}

impl DualStreamMask {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Config(format!(
                "dual-stream mask needs m >= 1 and n >= 1, got m={m} n={n}"
            )));
        }
        Ok(DualStreamMask { m, n })
    }

    /// Mask with `n = ratio · m` queries (ratio 1 is equal cardinality).
    pub fn with_ratio(m: usize, ratio: usize) -> Result<Self> {
        Self::new(m, m * ratio)
    }

    pub fn visual(&self) -> usize {
        self.m
    }

    pub fn queries(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.m + self.n
    }

    pub fn allows(&self, i: usize, j: usize) -> Result<bool> {
        let size = self.size();
        if i >= size || j >= size {
            return Err(Error::IndexOutOfRange {
                row: i,
                col: j,
                size,
            });
        }
        Ok(self.allows_unchecked(i, j))
    }

    #[inline]
    fn allows_unchecked(&self, i: usize, j: usize) -> bool {
        (i < self.m && j < self.m) || (i >= self.m && (j < self.m || j <= i))
    }

    /// Row-major boolean matrix of size `(m+n)²`.
    pub fn materialize(&self) -> Vec<bool> {
        let size = self.size();
        let mut out = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                out.push(self.allows_unchecked(i, j));
            }
        }
        out
    }

    /// Rows of `0`/`1` characters, one line per row.
    pub fn to_text(&self) -> String {
        let size = self.size();
        let mut s = String::with_capacity(size * (size + 1));
        for i in 0..size {
            for j in 0..size {
                s.push(if self.allows_unchecked(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    /// Number of pairs the mask admits: `m² + n·m + n(n+1)/2`.
    pub fn allowed_pairs(&self) -> usize {
        self.m * self.m + self.n * self.m + self.n * (self.n + 1) / 2
    }
}

/// Attention visibility patterns used by the model. Every pattern lets row `i`
/// see a prefix `0..key_len(i)` of the keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPattern {
    Full,
    Causal,
    DualStream(DualStreamMask),
}

impl AttentionPattern {
    pub fn key_len(&self, row: usize, seq: usize) -> usize {
        match self {
            AttentionPattern::Full => seq,
            AttentionPattern::Causal => row + 1,
            AttentionPattern::DualStream(mask) => {
                if row < mask.m {
                    mask.m
                } else {
                    row + 1
                }
            }
        }
    }

    pub fn validate(&self, seq: usize) -> Result<()> {
        match self {
            AttentionPattern::DualStream(mask) if mask.size() != seq => Err(Error::Dimension(
                format!("dual-stream mask covers {} positions, sequence has {seq}", mask.size()),
            )),
            _ => Ok(()),
        }
    }

    pub fn allows(&self, i: usize, j: usize, seq: usize) -> bool {
        j < self.key_len(i, seq)
    }

    pub fn materialize(&self, seq: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(seq * seq);
        for i in 0..seq {
            for j in 0..seq {
                out.push(self.allows(i, j, seq));
            }
        }
        out
    }
}

/// Softmax of each row over its allowed columns. Disallowed entries are exactly zero.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if allowed.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "mask has {} entries for a {rows}x{cols} logit matrix",
            allowed.len()
        )));
    }
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        masked_softmax_row(
            &logits.data()[i * cols..(i + 1) * cols],
            &allowed[i * cols..(i + 1) * cols],
            &mut out[i * cols..(i + 1) * cols],
        )
        .map_err(|_| Error::DegenerateRow { row: i })?;
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn masked_softmax_row<T: Scalar>(
    logits: &[T],
    allowed: &[bool],
    out: &mut [T],
) -> std::result::Result<(), ()> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(())?;
    let mut sum = T::zero();
    for ((o, &v), &a) in out.iter_mut().zip(logits).zip(allowed) {
        *o = if a { (v - max).exp() } else { T::zero() };
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Dense reference path: full `q·kᵀ` score matrix, then [`masked_softmax`] with the
/// materialized mask, then the weighted sum of `v`.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &DualStreamMask,
    scale: T,
) -> Result<Tensor<T>> {
    let seq = mask.size();
    let dh = q.cols();
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rows() != seq || t.cols() != dh {
            return Err(Error::Dimension(format!(
                "{name} is {:?}, expected [{seq}, {dh}]",
                t.shape()
            )));
        }
    }
    let mut scores = vec![T::zero(); seq * seq];
    for i in 0..seq {
        for j in 0..seq {
            scores[i * seq + j] = kernels::dot(q.row(i), k.row(j)) * scale;
        }
    }
    let probs = masked_softmax(&Tensor::new(vec![seq, seq], scores)?, &mask.materialize())?;
    probs.matmul(v)
}

/// Query, key and value rows of one attention stream (`rows × d_h` each).
#[derive(Debug, Clone)]
pub struct StreamQkv<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> StreamQkv<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "q/k/v shapes differ: {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        Ok(StreamQkv { q, k, v })
    }

    pub fn rows(&self) -> usize {
        self.q.rows()
    }

    pub fn width(&self) -> usize {
        self.q.cols()
    }
}

/// Output of [`block_attention`].
#[derive(Debug, Clone)]
pub struct BlockAttentionOutput<T> {
    pub visual: Tensor<T>,
    pub queries: Tensor<T>,
    /// Number of `q·k` score evaluations performed.
    pub score_evaluations: usize,
}

/// Dual-stream attention computed block-wise without materializing the mask:
/// visual rows over visual keys, then query rows over `[visual keys ‖ query keys ≤ i]`.
pub fn block_attention<T: Scalar>(
    visual: &StreamQkv<T>,
    queries: &StreamQkv<T>,
    scale: T,
) -> Result<BlockAttentionOutput<T>> {
    let dh = visual.width();
    if queries.width() != dh {
        return Err(Error::Dimension(format!(
            "visual width {dh} differs from query width {}",
            queries.width()
        )));
    }
    let (m, n) = (visual.rows(), queries.rows());
    let mut probs = Vec::new();
    let mut vis_out = vec![T::zero(); m * dh];
    let mut q_out = vec![T::zero(); n * dh];
    let mut evaluations = 0;
    let parts = BlockParts {
        vq: visual.q.data(),
        vk: visual.k.data(),
        vv: visual.v.data(),
        qq: queries.q.data(),
        qk: queries.k.data(),
        qv: queries.v.data(),
    };
    parts.run(m, n, dh, scale, &mut vis_out, &mut q_out, &mut probs, &mut evaluations);
    Ok(BlockAttentionOutput {
        visual: Tensor::new(vec![m, dh], vis_out)?,
        queries: Tensor::new(vec![n, dh], q_out)?,
        score_evaluations: evaluations,
    })
}

/// Borrowed per-stream slices for one head of block attention.
pub(crate) struct BlockParts<'a, T> {
    pub vq: &'a [T],
    pub vk: &'a [T],
    pub vv: &'a [T],
    pub qq: &'a [T],
    pub qk: &'a [T],
    pub qv: &'a [T],
}

impl<T: Scalar> BlockParts<'_, T> {
    /// Appends each row's attention weights to `probs` (visual rows: `m` weights;
    /// query row `i`: `m + i + 1` weights).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run(
        &self,
        m: usize,
        n: usize,
        dh: usize,
        scale: T,
        vis_out: &mut [T],
        q_out: &mut [T],
        probs: &mut Vec<T>,
        evaluations: &mut usize,
    ) {
        // (a) visual rows: dense bidirectional over visual keys only.
        for i in 0..m {
            let qi = &self.vq[i * dh..(i + 1) * dh];
            let start = probs.len();
            for j in 0..m {
                probs.push(kernels::dot(qi, &self.vk[j * dh..(j + 1) * dh]) * scale);
            }
            *evaluations += m;
            let row = &mut probs[start..];
            kernels::softmax_in_place(row);
            let out = &mut vis_out[i * dh..(i + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                kernels::axpy(p, &self.vv[j * dh..(j + 1) * dh], out);
            }
        }
        // (b) query rows: all visual keys, then query keys up to the diagonal.
        for i in 0..n {
            let qi = &self.qq[i * dh..(i + 1) * dh];
            let start = probs.len();
            for j in 0..m {
                probs.push(kernels::dot(qi, &self.vk[j * dh..(j + 1) * dh]) * scale);
            }
            for j in 0..=i {
                probs.push(kernels::dot(qi, &self.qk[j * dh..(j + 1) * dh]) * scale);
            }
            *evaluations += m + i + 1;
            let row = &mut probs[start..];
            kernels::softmax_in_place(row);
            let out = &mut q_out[i * dh..(i + 1) * dh];
            for (j, &p) in row[..m].iter().enumerate() {
                kernels::axpy(p, &self.vv[j * dh..(j + 1) * dh], out);
            }
            for (j, &p) in row[m..].iter().enumerate() {
                kernels::axpy(p, &self.qv[j * dh..(j + 1) * dh], out);
            }
        }
    }
}

/// Single-head attention where row `i` sees keys `0..key_len(i)`. Row weights are
/// appended to `probs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prefix_attention_head<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    seq: usize,
    dh: usize,
    scale: T,
    key_len: impl Fn(usize) -> usize,
    out: &mut [T],
    probs: &mut Vec<T>,
) {
    for i in 0..seq {
        let qi = &q[i * dh..(i + 1) * dh];
        let len = key_len(i);
        let start = probs.len();
        for j in 0..len {
            probs.push(kernels::dot(qi, &k[j * dh..(j + 1) * dh]) * scale);
        }
        let row = &mut probs[start..];
        kernels::softmax_in_place(row);
        let o = &mut out[i * dh..(i + 1) * dh];
        for (j, &p) in row.iter().enumerate() {
            kernels::axpy(p, &v[j * dh..(j + 1) * dh], o);
        }
    }
}

/// `mask-dump` text for the given cardinalities.
pub fn mask_dump(m: usize, n: usize) -> Result<String> {
    Ok(DualStreamMask::new(m, n)?.to_text())
}
