//! Fused masked multi-head attention.
//!
//! The visibility mask is given as row groups: every query row in a group
//! sees the same set of key columns, expressed as sorted disjoint ranges.
//! Logits are only materialized for allowed (query, key) pairs, which is
//! exactly softmax with `-inf` on every disallowed logit.

use std::ops::Range;

use crate::error::{Error, Result};

use super::graph::{BackwardOp, Graph, Var};
use super::kernels::{self, Mat, MatMut};
use super::Tensor;

/// Inference-time pruning for one row group: among the key columns in
/// `ref_cols`, only the `k` largest logits per query and head survive.
/// Ties go to the lowest key index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopK {
    pub k: usize,
    pub ref_cols: Vec<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub rows: Range<usize>,
    pub cols: Vec<Range<usize>>,
    pub topk: Option<TopK>,
}

impl AttnGroup {
    /// Column ranges are sorted and merged, so equal visibility sets always
    /// have the same representation.
    pub fn new(rows: Range<usize>, cols: Vec<Range<usize>>) -> Self {
        AttnGroup {
            rows,
            cols: normalize(cols),
            topk: None,
        }
    }

    pub fn with_topk(mut self, topk: Option<TopK>) -> Self {
        self.topk = topk.map(|t| TopK {
            k: t.k,
            ref_cols: normalize(t.ref_cols),
        });
        self
    }

    pub fn allows(&self, col: usize) -> bool {
        self.cols.iter().any(|r| r.contains(&col))
    }

    fn n_cols(&self) -> usize {
        self.cols.iter().map(|r| r.len()).sum()
    }
}

fn normalize(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
    ranges.retain(|r| !r.is_empty());
    ranges.sort_by_key(|r| (r.start, r.end));
    let mut merged: Vec<Range<usize>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match merged.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => merged.push(r),
        }
    }
    merged
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnPattern {
    pub n_q: usize,
    pub n_k: usize,
    pub groups: Vec<AttnGroup>,
}

impl AttnPattern {
    /// Every query row sees every key.
    pub fn full(n_q: usize, n_k: usize) -> Self {
        AttnPattern {
            n_q,
            n_k,
            groups: vec![AttnGroup::new(0..n_q, vec![0..n_k])],
        }
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.groups
            .iter()
            .find(|g| g.rows.contains(&q))
            .is_some_and(|g| g.allows(k))
    }

    /// Dense boolean matrix, `n_q × n_k`.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut dense = vec![vec![false; self.n_k]; self.n_q];
        for g in &self.groups {
            for q in g.rows.clone() {
                for r in &g.cols {
                    dense[q][r.clone()].iter_mut().for_each(|v| *v = true);
                }
            }
        }
        dense
    }

    fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.n_q];
        for g in &self.groups {
            if g.rows.end > self.n_q || g.cols.iter().any(|r| r.end > self.n_k) {
                return Err(Error::Contract(format!(
                    "attention group {:?} exceeds pattern {}×{}",
                    g.rows, self.n_q, self.n_k
                )));
            }
            if let Some(t) = &g.topk {
                if t.k == 0 {
                    return Err(Error::Config("top-K requires K >= 1".into()));
                }
            }
            for q in g.rows.clone() {
                if std::mem::replace(&mut covered[q], true) {
                    return Err(Error::Contract(format!("query row {q} in two attention groups")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    /// Row-normalized weights.
    Softmax,
    /// Independent sigmoid gate per (query, key).
    Sigmoid,
}

struct GroupCache {
    /// (key range, column offset inside the compact logit buffer)
    layout: Vec<(Range<usize>, usize)>,
    n_cols: usize,
    /// Attention weights per head, `rows × n_cols`.
    probs: Vec<Vec<f64>>,
}

pub(crate) struct AttentionOp {
    inputs: [Var; 3],
    pattern: AttnPattern,
    heads: usize,
    kind: AttnKind,
    scale: f64,
    caches: Vec<GroupCache>,
}

impl AttentionOp {
    /// Dense `n_q × n_k` weights of one head; disallowed entries are 0.
    pub(crate) fn dense_probs(&self, head: usize) -> Vec<f64> {
        let n_k = self.pattern.n_k;
        let mut dense = vec![0.0; self.pattern.n_q * n_k];
        for (g, cache) in self.pattern.groups.iter().zip(&self.caches) {
            let p = &cache.probs[head];
            for (i, q) in g.rows.clone().enumerate() {
                for (range, off) in &cache.layout {
                    for (j, k) in range.clone().enumerate() {
                        dense[q * n_k + k] = p[i * cache.n_cols + off + j];
                    }
                }
            }
        }
        dense
    }

    pub(crate) fn heads(&self) -> usize {
        self.heads
    }

    pub(crate) fn shape(&self) -> (usize, usize) {
        (self.pattern.n_q, self.pattern.n_k)
    }
}

fn apply_topk(row: &mut [f64], ref_pos: &[usize], k: usize, scratch: &mut Vec<(f64, usize)>) {
    if ref_pos.len() <= k {
        return;
    }
    scratch.clear();
    scratch.extend(ref_pos.iter().map(|&p| (row[p], p)));
    scratch.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, p) in &scratch[k..] {
        row[p] = f64::NEG_INFINITY;
    }
}

impl BackwardOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (q, k, v) = (
            g.value(self.inputs[0]).data(),
            g.value(self.inputs[1]).data(),
            g.value(self.inputs[2]).data(),
        );
        let dqk = g.value(self.inputs[0]).cols();
        let dvv = g.value(self.inputs[2]).cols();
        let (hq, hv) = (dqk / self.heads, dvv / self.heads);
        let mut dq = needs[0].then(|| vec![0.0; q.len()]);
        let mut dk = needs[1].then(|| vec![0.0; k.len()]);
        let mut dv = needs[2].then(|| vec![0.0; v.len()]);
        for (grp, cache) in self.pattern.groups.iter().zip(&self.caches) {
            let nr = grp.rows.len();
            let nc = cache.n_cols;
            let r0 = grp.rows.start;
            for h in 0..self.heads {
                let p = &cache.probs[h];
                let g_rows = &grad[r0 * dvv + h * hv..];
                let mut ds = vec![0.0; nr * nc];
                for (range, off) in &cache.layout {
                    kernels::gemm(
                        nr,
                        hv,
                        range.len(),
                        1.0,
                        Mat::row_major(g_rows, dvv),
                        Mat::transposed(&v[range.start * dvv + h * hv..], dvv),
                        0.0,
                        MatMut::row_major(&mut ds[*off..], nc),
                    );
                }
                match self.kind {
                    AttnKind::Softmax => {
                        for (d, pr) in ds.chunks_exact_mut(nc).zip(p.chunks_exact(nc)) {
                            let dot: f64 = d.iter().zip(pr).map(|(a, b)| a * b).sum();
                            d.iter_mut().zip(pr).for_each(|(x, y)| *x = y * (*x - dot));
                        }
                    }
                    AttnKind::Sigmoid => {
                        ds.iter_mut().zip(p).for_each(|(x, y)| *x *= y * (1.0 - y));
                    }
                }
                for (range, off) in &cache.layout {
                    let len = range.len();
                    if let Some(dq) = dq.as_mut() {
                        kernels::gemm(
                            nr,
                            len,
                            hq,
                            self.scale,
                            Mat::row_major(&ds[*off..], nc),
                            Mat::row_major(&k[range.start * dqk + h * hq..], dqk),
                            1.0,
                            MatMut::row_major(&mut dq[r0 * dqk + h * hq..], dqk),
                        );
                    }
                    if let Some(dk) = dk.as_mut() {
                        kernels::gemm(
                            len,
                            nr,
                            hq,
                            self.scale,
                            Mat::transposed(&ds[*off..], nc),
                            Mat::row_major(&q[r0 * dqk + h * hq..], dqk),
                            1.0,
                            MatMut::row_major(&mut dk[range.start * dqk + h * hq..], dqk),
                        );
                    }
                    if let Some(dv) = dv.as_mut() {
                        kernels::gemm(
                            len,
                            nr,
                            hv,
                            1.0,
                            Mat::transposed(&p[*off..], nc),
                            Mat::row_major(g_rows, dvv),
                            1.0,
                            MatMut::row_major(&mut dv[range.start * dvv + h * hv..], dvv),
                        );
                    }
                }
            }
        }
        vec![dq, dk, dv]
    }

    fn attention(&self) -> Option<&AttentionOp> {
        Some(self)
    }
}

impl Graph {
    /// Masked multi-head attention `weights(Q·Kᵀ/√d_head)·V` with the
    /// visibility given by `pattern`. Query rows outside every group, and
    /// rows whose allowed set is empty, produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pattern: &AttnPattern,
        heads: usize,
        kind: AttnKind,
    ) -> Result<Var> {
        pattern.validate()?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.ndim() != 2 || tk.ndim() != 2 || tv.ndim() != 2 {
            return Err(Error::Contract("attention expects 2-D q, k, v".into()));
        }
        let (n_q, dqk) = (tq.rows(), tq.cols());
        let (n_k, dvv) = (tk.rows(), tv.cols());
        if tk.cols() != dqk || tv.rows() != n_k {
            return Err(Error::dim("attention", tk.shape(), tv.shape()));
        }
        if pattern.n_q != n_q || pattern.n_k != n_k {
            return Err(Error::dim("attention pattern", &[pattern.n_q, pattern.n_k], &[n_q, n_k]));
        }
        if heads == 0 || dqk % heads != 0 || dvv % heads != 0 {
            return Err(Error::Config(format!(
                "widths {dqk}/{dvv} not divisible by {heads} heads"
            )));
        }
        let (hq, hv) = (dqk / heads, dvv / heads);
        let scale = 1.0 / (hq as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; n_q * dvv];
        let mut caches = Vec::with_capacity(pattern.groups.len());
        let mut scratch = Vec::new();
        for grp in &pattern.groups {
            let nr = grp.rows.len();
            let nc = grp.n_cols();
            let r0 = grp.rows.start;
            let mut layout = Vec::with_capacity(grp.cols.len());
            let mut off = 0;
            for r in &grp.cols {
                layout.push((r.clone(), off));
                off += r.len();
            }
            let ref_pos: Vec<usize> = match &grp.topk {
                Some(t) => layout
                    .iter()
                    .flat_map(|(r, off)| {
                        r.clone()
                            .enumerate()
                            .filter(|(_, c)| t.ref_cols.iter().any(|rc| rc.contains(c)))
                            .map(move |(j, _)| off + j)
                    })
                    .collect(),
                None => Vec::new(),
            };
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let mut s = vec![0.0; nr * nc];
                if nr > 0 && nc > 0 {
                    for (range, off) in &layout {
                        kernels::gemm(
                            nr,
                            hq,
                            range.len(),
                            scale,
                            Mat::row_major(&qd[r0 * dqk + h * hq..], dqk),
                            Mat::transposed(&kd[range.start * dqk + h * hq..], dqk),
                            0.0,
                            MatMut::row_major(&mut s[*off..], nc),
                        );
                    }
                    if let Some(t) = &grp.topk {
                        for row in s.chunks_exact_mut(nc) {
                            apply_topk(row, &ref_pos, t.k, &mut scratch);
                        }
                    }
                    match kind {
                        AttnKind::Softmax => s.chunks_exact_mut(nc).for_each(kernels::softmax_in_place),
                        AttnKind::Sigmoid => s.iter_mut().for_each(|x| *x = kernels::sigmoid(*x)),
                    }
                    for (range, off) in &layout {
                        kernels::gemm(
                            nr,
                            range.len(),
                            hv,
                            1.0,
                            Mat::row_major(&s[*off..], nc),
                            Mat::row_major(&vd[range.start * dvv + h * hv..], dvv),
                            1.0,
                            MatMut::row_major(&mut out[r0 * dvv + h * hv..], dvv),
                        );
                    }
                }
                probs.push(s);
            }
            caches.push(GroupCache {
                layout,
                n_cols: nc,
                probs,
            });
        }
        let op = AttentionOp {
            inputs: [q, k, v],
            pattern: pattern.clone(),
            heads,
            kind,
            scale,
            caches,
        };
        self.push_keep(Tensor::from_parts(vec![n_q, dvv], out), Box::new(op))
    }

    /// Dense attention weights of one head recorded by an attention op.
    /// Returns `None` if `v` was not produced by [`Graph::attention`].
    pub fn attention_weights(&self, v: Var, head: usize) -> Option<Tensor> {
        let op = self.op_of(v)?.attention()?;
        if head >= op.heads() {
            return None;
        }
        let (n_q, n_k) = op.shape();
        Some(Tensor::from_parts(vec![n_q, n_k], op.dense_probs(head)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_merge_and_sort() {
        let g = AttnGroup::new(0..1, vec![4..6, 0..2, 2..3, 8..8]);
        assert_eq!(g.cols, vec![0..3, 4..6]);
    }

    #[test]
    fn topk_ties_keep_lowest_index() {
        let mut row = vec![0.5, 0.5, 0.1, 9.0];
        let mut scratch = Vec::new();
        apply_topk(&mut row, &[0, 1, 2], 2, &mut scratch);
        assert_eq!(row, vec![0.5, 0.5, f64::NEG_INFINITY, 9.0]);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let p = AttnPattern {
            n_q: 2,
            n_k: 2,
            groups: vec![AttnGroup::new(0..2, vec![0..2]), AttnGroup::new(1..2, vec![0..1])],
        };
        assert!(p.validate().is_err());
    }
}
