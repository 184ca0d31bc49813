//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably while it records; parameter
//! values are read in place. [`Tape::backward`] returns a [`Gradients`] set that
//! the caller folds into the store with [`ParamStore::accumulate`]. Gradients
//! accumulate: running `backward` twice and accumulating both results doubles
//! every gradient; `ParamStore::zero_gradients` resets them.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::param::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::masking::{prefix_attention_head, AttentionPattern, BlockParts};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Gradient of a scalar loss with respect to every parameter of a store
/// (`None` where the parameter is frozen or unreachable).
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor<T>>> {
        self.grads.iter().map(Option::as_ref)
    }

    pub fn get(&self, index: usize) -> Option<&Tensor<T>> {
        self.grads.get(index).and_then(Option::as_ref)
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Silu(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape(usize),
    MaskedSoftmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: usize,
        count: usize,
    },
    Sum(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        pattern: AttentionPattern,
        scale: T,
        probs: Vec<Vec<T>>,
    },
    Rope {
        x: usize,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T> {
    id: u64,
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(
                "value was not recorded on this tape".to_string(),
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, index: usize) -> &Tensor<T> {
        let node = &self.nodes[index];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params.by_index(*p).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(self.val(self.idx(v)?))
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let p = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter `{name}`")))?;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(p),
            requires_grad: self.params.by_index(p).trainable,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn dims2(&self, i: usize) -> (usize, usize) {
        let t = self.val(i);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let ((p, q), (q2, r)) = (self.dims2(ia), self.dims2(ib));
        if q != q2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: [{p}, {q}] x [{q2}, {r}]"
            )));
        }
        let mut out = vec![T::zero(); p * r];
        kernels::matmul(self.val(ia).data(), self.val(ib).data(), &mut out, p, q, r);
        let value = Tensor::new(vec![p, r], out)?;
        Ok(self.push(value, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let ((p, r), (q, r2)) = (self.dims2(ia), self.dims2(ib));
        if r != r2 {
            return Err(Error::Dimension(format!(
                "matmul_t widths differ: [{p}, {r}] x [{q}, {r2}]ᵀ"
            )));
        }
        let mut out = vec![T::zero(); p * q];
        let (av, bv) = (self.val(ia).data(), self.val(ib).data());
        for i in 0..p {
            for j in 0..q {
                out[i * q + j] = kernels::dot(&av[i * r..(i + 1) * r], &bv[j * r..(j + 1) * r]);
            }
        }
        let value = Tensor::new(vec![p, q], out)?;
        Ok(self.push(value, Op::MatMulT(ia, ib), &[ia, ib]))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(ia).shape(),
                self.val(ib).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(ia, ib), &[ia, ib]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let cols = self.val(ia).cols();
        if self.val(ir).numel() != cols {
            return Err(Error::Dimension(format!(
                "row vector of {} values added to rows of width {cols}",
                self.val(ir).numel()
            )));
        }
        let r = self.val(ir).data();
        let data = self
            .val(ia)
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(ia, ir), &[ia, ir]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let c = T::from_f64(c);
        let data = self.val(ia).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(ia, c), &[ia]))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .map(|&x| x * kernels::sigmoid(x))
            .collect();
        let value = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Silu(ia), &[ia]))
    }

    /// Each length-`d` row divided by `sqrt(mean(x²) + eps)` and scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (ix, ig) = (self.idx(x)?, self.idx(gain)?);
        let d = self.val(ix).cols();
        if self.val(ig).numel() != d {
            return Err(Error::Dimension(format!(
                "rms_norm gain has {} values for rows of width {d}",
                self.val(ig).numel()
            )));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_usize(d);
        let g = self.val(ig).data();
        let mut inv_rms = Vec::with_capacity(self.val(ix).rows());
        let mut data = Vec::with_capacity(self.val(ix).numel());
        for row in self.val(ix).data().chunks_exact(d) {
            let ms = kernels::dot(row, row) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(g).map(|(&v, &gv)| v * inv * gv));
        }
        let value = Tensor::new(self.val(ix).shape().to_vec(), data)?;
        Ok(self.push(value, Op::RmsNorm { x: ix, gain: ig, inv_rms }, &[ix, ig]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (rows, d) = self.dims2(it);
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "embedding id {bad} out of range for a table of {rows} rows"
            )));
        }
        let tv = self.val(it).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            &[it],
        ))
    }

    /// Concatenation along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero parts".into()))?;
        let cols = self.val(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let t = self.val(i);
            if t.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows widths {cols} and {} differ",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(idx.clone()), &idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero parts".into()))?;
        let rows = self.val(first).rows();
        if idx.iter().any(|&i| self.val(i).rows() != rows) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let total: usize = idx.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(idx.clone()), &idx))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = self.dims2(ix);
        if len == 0 || start + len > rows {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of a {rows}-row value",
                start + len
            )));
        }
        let data = self.val(ix).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(value, Op::SliceRows { x: ix, start }, &[ix]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = self.dims2(ix);
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of a {cols}-column value",
                start + len
            )));
        }
        let data = self
            .val(ix)
            .data()
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { x: ix, start }, &[ix]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, cols) = self.dims2(ix);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Dimension(format!(
                "gather of rows {rows:?} from a {n}-row value"
            )));
        }
        let xv = self.val(ix);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x: ix,
                rows: rows.to_vec(),
            },
            &[ix],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.val(ix).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(ix), &[ix]))
    }

    /// Row softmax over allowed columns; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = crate::masking::masked_softmax(self.val(ix), allowed)?;
        Ok(self.push(value, Op::MaskedSoftmax(ix), &[ix]))
    }

    /// Mean negative log-likelihood of `targets` over positions not equal to `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let il = self.idx(logits)?;
        let (t, vocab) = self.dims2(il);
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y != ignore && y >= vocab) {
            return Err(Error::Dimension(format!(
                "target id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let count = targets.iter().filter(|&&y| y != ignore).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.val(il).data();
        let mut total = T::zero();
        for (row, &y) in lv.chunks_exact(vocab).zip(targets) {
            if y == ignore {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / T::from_usize(count));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            &[il],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.val(ix).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    /// Multi-head scaled dot-product attention; `q`, `k`, `v` are `seq × d` with
    /// `d = heads · d_h`. Heads loop over the single-head kernels in
    /// [`crate::masking`]; dual-stream patterns use the block-structured path.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: AttentionPattern,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        self.same_shape(iq, ik, "attention q/k")?;
        self.same_shape(iq, iv, "attention q/v")?;
        let (seq, d) = self.dims2(iq);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        pattern.validate(seq)?;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); seq * d];
        let mut all_probs = Vec::with_capacity(heads);
        let mut head_out = vec![T::zero(); seq * dh];
        for h in 0..heads {
            let qh = head_slice(self.val(iq).data(), seq, d, h, dh);
            let kh = head_slice(self.val(ik).data(), seq, d, h, dh);
            let vh = head_slice(self.val(iv).data(), seq, d, h, dh);
            head_out.fill(T::zero());
            let mut probs = Vec::new();
            match pattern {
                AttentionPattern::DualStream(mask) => {
                    let m = mask.visual();
                    let parts = BlockParts {
                        vq: &qh[..m * dh],
                        vk: &kh[..m * dh],
                        vv: &vh[..m * dh],
                        qq: &qh[m * dh..],
                        qk: &kh[m * dh..],
                        qv: &vh[m * dh..],
                    };
                    let (vis, qry) = head_out.split_at_mut(m * dh);
                    let mut evals = 0;
                    parts.run(m, mask.queries(), dh, scale, vis, qry, &mut probs, &mut evals);
                }
                _ => prefix_attention_head(
                    &qh,
                    &kh,
                    &vh,
                    seq,
                    dh,
                    scale,
                    |i| pattern.key_len(i, seq),
                    &mut head_out,
                    &mut probs,
                ),
            }
            for i in 0..seq {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
            }
            all_probs.push(probs);
        }
        let value = Tensor::new(vec![seq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                pattern,
                scale,
                probs: all_probs,
            },
            &[iq, ik, iv],
        ))
    }

    /// Rotary position embedding applied per head: within each head of width
    /// `d_h`, coordinate `c < d_h/2` is paired with `c + d_h/2` and the pair is
    /// rotated by `positions[row] · base^(-c/(d_h/2))`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let (seq, d) = self.dims2(ix);
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "rotary embedding needs an even head width; d={d}, heads={heads}"
            )));
        }
        if positions.len() != seq {
            return Err(Error::Dimension(format!(
                "{} positions for {seq} rows",
                positions.len()
            )));
        }
        let half = d / heads / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for &p in positions {
            for c in 0..half {
                let freq = base.powf(-(c as f64) / half as f64);
                let angle = p as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        let xv = self.val(ix).data();
        let mut data = xv.to_vec();
        rotate(&mut data, xv, seq, d, heads, half, &cos, &sin, false);
        let value = Tensor::new(vec![seq, d], data)?;
        Ok(self.push(
            value,
            Op::Rope {
                x: ix,
                heads,
                cos,
                sin,
            },
            &[ix],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.val(il).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => {
                let shape = self.params.by_index(*p).value.shape();
                match &mut out[*p] {
                    Some(t) => {
                        for (a, &b) in t.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(Tensor::new(shape.to_vec(), g.to_vec())?),
                }
            }
            &Op::MatMul(a, b) => {
                let ((p, q), (_, r)) = (self.dims2(a), self.dims2(b));
                if self.wants(a) {
                    let ga = acc_buf(grads, a, p * q);
                    kernels::matmul_a_bt_acc(g, self.val(b).data(), ga, p, q, r);
                }
                if self.wants(b) {
                    let gb = acc_buf(grads, b, q * r);
                    kernels::matmul_at_b_acc(self.val(a).data(), g, gb, p, q, r);
                }
            }
            &Op::MatMulT(a, b) => {
                // c[p×q] = a[p×r] · b[q×r]ᵀ
                let ((p, r), (q, _)) = (self.dims2(a), self.dims2(b));
                if self.wants(a) {
                    let ga = acc_buf(grads, a, p * r);
                    kernels::matmul_acc(g, self.val(b).data(), ga, p, q, r);
                }
                if self.wants(b) {
                    let gb = acc_buf(grads, b, q * r);
                    kernels::matmul_at_b_acc(g, self.val(a).data(), gb, p, q, r);
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(x) {
                        add_into(acc_buf(grads, x, g.len()), g);
                    }
                }
            }
            &Op::AddRow(a, r) => {
                if self.wants(a) {
                    add_into(acc_buf(grads, a, g.len()), g);
                }
                if self.wants(r) {
                    let cols = self.val(r).numel();
                    let gr = acc_buf(grads, r, cols);
                    for row in g.chunks_exact(cols) {
                        add_into(gr, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.val(b).data();
                    let ga = acc_buf(grads, a, g.len());
                    for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gv * y;
                    }
                }
                if self.wants(b) {
                    let av = self.val(a).data();
                    let gb = acc_buf(grads, b, g.len());
                    for ((x, &gv), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gv * y;
                    }
                }
            }
            &Op::Scale(a, c) => {
                let ga = acc_buf(grads, a, g.len());
                for (x, &gv) in ga.iter_mut().zip(g) {
                    *x += gv * c;
                }
            }
            &Op::Silu(a) => {
                let av = self.val(a).data();
                let ga = acc_buf(grads, a, g.len());
                for ((x, &gv), &v) in ga.iter_mut().zip(g).zip(av) {
                    let s = kernels::sigmoid(v);
                    *x += gv * s * (T::one() + v * (T::one() - s));
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.val(x).data();
                let gv = self.val(gain).data();
                let d = gv.len();
                let dn = T::from_usize(d);
                if self.wants(gain) {
                    let gg = acc_buf(grads, gain, d);
                    for ((row, grow), &inv) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                        for c in 0..d {
                            gg[c] += grow[c] * row[c] * inv;
                        }
                    }
                }
                if self.wants(x) {
                    let gx = acc_buf(grads, x, xv.len());
                    for (((row, grow), gxr), &inv) in xv
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        // y = x·inv·gain, inv = (mean(x²)+eps)^(-1/2)
                        let mut s = T::zero();
                        for c in 0..d {
                            s += grow[c] * gv[c] * row[c];
                        }
                        let coef = s * inv * inv * inv / dn;
                        for c in 0..d {
                            gxr[c] += grow[c] * gv[c] * inv - coef * row[c];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = self.dims2(*table);
                let gt = acc_buf(grads, *table, rows * d);
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    if self.wants(p) {
                        add_into(acc_buf(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
                let mut col = 0;
                for &p in parts {
                    let (rows, cols) = self.dims2(p);
                    if self.wants(p) {
                        let gp = acc_buf(grads, p, rows * cols);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * cols..(r + 1) * cols],
                                &g[r * total + col..r * total + col + cols],
                            );
                        }
                    }
                    col += cols;
                }
            }
            &Op::SliceRows { x, start } => {
                let (rows, cols) = self.dims2(x);
                let gx = acc_buf(grads, x, rows * cols);
                add_into(&mut gx[start * cols..start * cols + g.len()], g);
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = self.dims2(x);
                let len = g.len() / rows;
                let gx = acc_buf(grads, x, rows * cols);
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::GatherRows { x, rows } => {
                let (n, cols) = self.dims2(*x);
                let gx = acc_buf(grads, *x, n * cols);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                }
            }
            &Op::Reshape(x) => {
                add_into(acc_buf(grads, x, g.len()), g);
            }
            &Op::MaskedSoftmax(x) => {
                let y = self.val(i).data();
                let cols = self.val(i).cols();
                let gx = acc_buf(grads, x, y.len());
                for ((yr, gr), gxr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let s = kernels::dot(yr, gr);
                    for c in 0..cols {
                        gxr[c] += yr[c] * (gr[c] - s);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let (t, vocab) = self.dims2(*logits);
                let lv = self.val(*logits).data();
                let coef = g[0] / T::from_usize(*count);
                let gl = acc_buf(grads, *logits, t * vocab);
                let mut probs = vec![T::zero(); vocab];
                for ((row, grow), &y) in lv
                    .chunks_exact(vocab)
                    .zip(gl.chunks_exact_mut(vocab))
                    .zip(targets)
                {
                    if y == *ignore {
                        continue;
                    }
                    probs.copy_from_slice(row);
                    kernels::softmax_in_place(&mut probs);
                    for c in 0..vocab {
                        grow[c] += coef * probs[c];
                    }
                    grow[y] -= coef;
                }
            }
            &Op::Sum(x) => {
                let n = self.val(x).numel();
                let gx = acc_buf(grads, x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                scale,
                probs,
            } => self.attention_backward(
                g, *q, *k, *v, *heads, pattern, *scale, probs, grads,
            ),
            Op::Rope { x, heads, cos, sin } => {
                let (seq, d) = self.dims2(*x);
                let half = d / heads / 2;
                let gx = acc_buf(grads, *x, seq * d);
                let mut rotated = g.to_vec();
                rotate(&mut rotated, g, seq, d, *heads, half, cos, sin, true);
                add_into(gx, &rotated);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        pattern: &AttentionPattern,
        scale: T,
        probs: &[Vec<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (seq, d) = self.dims2(q);
        let dh = d / heads;
        let mut gq = vec![T::zero(); seq * d];
        let mut gk = vec![T::zero(); seq * d];
        let mut gv = vec![T::zero(); seq * d];
        let mut dp = Vec::with_capacity(seq);
        for (h, head_probs) in probs.iter().enumerate().take(heads) {
            let qh = head_slice(self.val(q).data(), seq, d, h, dh);
            let kh = head_slice(self.val(k).data(), seq, d, h, dh);
            let vh = head_slice(self.val(v).data(), seq, d, h, dh);
            let goh = head_slice(g, seq, d, h, dh);
            let mut gqh = vec![T::zero(); seq * dh];
            let mut gkh = vec![T::zero(); seq * dh];
            let mut gvh = vec![T::zero(); seq * dh];
            let mut off = 0;
            for i in 0..seq {
                let len = pattern.key_len(i, seq);
                let p = &head_probs[off..off + len];
                off += len;
                let go = &goh[i * dh..(i + 1) * dh];
                dp.clear();
                for j in 0..len {
                    dp.push(kernels::dot(go, &vh[j * dh..(j + 1) * dh]));
                    kernels::axpy(p[j], go, &mut gvh[j * dh..(j + 1) * dh]);
                }
                let s = kernels::dot(p, &dp);
                let qi = &qh[i * dh..(i + 1) * dh];
                let gqi = &mut gqh[i * dh..(i + 1) * dh];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - s) * scale;
                    kernels::axpy(ds, &kh[j * dh..(j + 1) * dh], gqi);
                    kernels::axpy(ds, qi, &mut gkh[j * dh..(j + 1) * dh]);
                }
            }
            for i in 0..seq {
                let dst = i * d + h * dh..i * d + (h + 1) * dh;
                gq[dst.clone()].copy_from_slice(&gqh[i * dh..(i + 1) * dh]);
                gk[dst.clone()].copy_from_slice(&gkh[i * dh..(i + 1) * dh]);
                gv[dst].copy_from_slice(&gvh[i * dh..(i + 1) * dh]);
            }
        }
        for (idx, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(idx) {
                add_into(acc_buf(grads, idx, seq * d), &buf);
            }
        }
    }
}

fn acc_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn head_slice<T: Scalar>(x: &[T], seq: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(seq * dh);
    for i in 0..seq {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn rotate<T: Scalar>(
    dst: &mut [T],
    src: &[T],
    seq: usize,
    d: usize,
    heads: usize,
    half: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let dh = 2 * half;
    for i in 0..seq {
        for h in 0..heads {
            let base = i * d + h * dh;
            for c in 0..half {
                let (cs, mut sn) = (cos[i * half + c], sin[i * half + c]);
                if inverse {
                    sn = -sn;
                }
                let (a, b) = (src[base + c], src[base + c + half]);
                dst[base + c] = a * cs - b * sn;
                dst[base + c + half] = a * sn + b * cs;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamGroup;

    fn store_with(name: &str, shape: &[usize], values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, ParamGroup::Encoder, Tensor::from_f64(shape, values).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn identity_and_orthogonal_matmul() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let i2 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0]);
        assert!(matches!(tape.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = store_with("p", &[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let grads = {
            let mut tape = Tape::new(&store);
            let p = tape.param("p").unwrap();
            let s = tape.sum(p).unwrap();
            tape.backward(s).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_and_accumulation_doubles() {
        let mut store = store_with("p", &[2], &[1.0, 2.0]);
        let grads = {
            let mut tape = Tape::new(&store);
            let p = tape.param("p").unwrap();
            let sq = tape.mul(p, p).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.backward(s).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[2.0, 4.0]);
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[4.0, 8.0]);
        store.zero_gradients();
        assert_eq!(store.get("p").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = store_with("p", &[2], &[1.0, 2.0]);
        store.set_trainable_groups(&[ParamGroup::Decoder]);
        let grads = {
            let mut tape = Tape::new(&store);
            let p = tape.param("p").unwrap();
            let s = tape.sum(p).unwrap();
            tape.backward(s).unwrap()
        };
        assert!(grads.get(0).is_none());
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn foreign_values_are_graph_errors() {
        let store = ParamStore::<f64>::new();
        let mut a = Tape::new(&store);
        let mut b = Tape::new(&store);
        let x = a.constant(Tensor::scalar(1.0));
        assert!(matches!(b.sum(x), Err(Error::Graph(_))));
        assert!(matches!(b.backward(x), Err(Error::Graph(_))));
        let v = a.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.backward(v), Err(Error::Graph(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let l = tape.constant(Tensor::from_rows(&[vec![50.0, 0.0, 0.0], vec![0.0, 0.0, 50.0]]));
        let ce = tape.cross_entropy(l, &[0, 2], 99).unwrap();
        assert!(tape.value(ce).unwrap().data()[0] < 1e-3);

        let u = tape.constant(Tensor::zeros(&[3, 4]));
        let ce = tape.cross_entropy(u, &[0, 1, 3], 99).unwrap();
        assert!((tape.value(ce).unwrap().data()[0] - 4f64.ln()).abs() < 1e-15);

        assert!(matches!(
            tape.cross_entropy(u, &[7, 7, 7], 7),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn rms_norm_examples() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let ones = tape.constant(Tensor::ones(&[2, 4]));
        let gain = tape.constant(Tensor::ones(&[4]));
        let y = tape.rms_norm(ones, gain, 0.0).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0; 8]);
        let zeros = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.rms_norm(zeros, gain, 1e-6).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn rope_at_position_zero_is_identity_and_preserves_norm() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.5, -1.0, 2.0, 0.0],
        ]));
        let y = tape.rope(x, 1, &[0, 3], 100.0).unwrap();
        let yv = tape.value(y).unwrap();
        assert_eq!(yv.row(0), &[1.0, 2.0, 3.0, 4.0]);
        let n_in: f64 = [0.5f64, -1.0, 2.0, 0.0].iter().map(|v| v * v).sum();
        let n_out: f64 = yv.row(1).iter().map(|v| v * v).sum();
        assert!((n_in - n_out).abs() < 1e-12);
    }
}
