//! Joint feature/matching blocks over `[memory; references...; current]`.

use std::ops::Range;

use crate::config::PropagationMode;
use crate::error::{Error, Result};
use crate::params::BlockWeights;
use crate::tensor::{AttnGroup, AttnKind, AttnPattern, Graph, TopK, Var};

/// Segmentation of a concatenated token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub has_memory: bool,
    /// `(start, len)` per reference frame.
    pub ref_spans: Vec<(usize, usize)>,
    pub cur_span: (usize, usize),
    pub total: usize,
}

impl TokenLayout {
    pub fn new(has_memory: bool, ref_lens: &[usize], cur_len: usize) -> Result<Self> {
        if ref_lens.contains(&0) || cur_len == 0 {
            return Err(Error::Input("token spans must be non-empty".into()));
        }
        let mut at = usize::from(has_memory);
        let ref_spans = ref_lens
            .iter()
            .map(|&n| {
                let s = (at, n);
                at += n;
                s
            })
            .collect();
        let cur_span = (at, cur_len);
        Ok(TokenLayout {
            has_memory,
            ref_spans,
            cur_span,
            total: at + cur_len,
        })
    }

    /// All reference columns, as one contiguous range.
    pub fn refs(&self) -> Range<usize> {
        let start = usize::from(self.has_memory);
        start..self.cur_span.0
    }

    pub fn cur(&self) -> Range<usize> {
        self.cur_span.0..self.cur_span.0 + self.cur_span.1
    }

    pub fn ref_range(&self, i: usize) -> Range<usize> {
        let (s, n) = self.ref_spans[i];
        s..s + n
    }
}

/// Per-block switches on top of the propagation mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskOptions {
    /// Memory row sees the reference tokens (otherwise only itself).
    pub memory_sees_refs: bool,
    /// `false` turns the block into per-span self-attention.
    pub cross_frame: bool,
    /// Keep only the `K` strongest reference keys for current queries.
    pub topk: Option<usize>,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            memory_sees_refs: true,
            cross_frame: true,
            topk: None,
        }
    }
}

pub fn build_attention_pattern(
    layout: &TokenLayout,
    mode: PropagationMode,
    opts: &MaskOptions,
) -> Result<AttnPattern> {
    if opts.topk == Some(0) {
        return Err(Error::Config("top-K requires K >= 1".into()));
    }
    let refs = layout.refs();
    let cur = layout.cur();
    let mut groups = Vec::with_capacity(layout.ref_spans.len() + 2);
    if layout.has_memory {
        let mut cols = vec![0..1];
        if opts.memory_sees_refs && opts.cross_frame {
            cols.push(refs.clone());
        }
        groups.push(AttnGroup::new(0..1, cols));
    }
    for i in 0..layout.ref_spans.len() {
        let own = layout.ref_range(i);
        let mut cols = vec![own.clone()];
        if opts.cross_frame {
            if mode.sees_other_refs() {
                cols.push(refs.clone());
            }
            if mode.sees_current() {
                cols.push(cur.clone());
            }
        }
        groups.push(AttnGroup::new(own, cols));
    }
    let cur_group = if opts.cross_frame {
        let topk = opts.topk.filter(|_| !refs.is_empty()).map(|k| TopK {
            k,
            ref_cols: vec![refs.clone()],
        });
        AttnGroup::new(cur.clone(), vec![refs, cur.clone()]).with_topk(topk)
    } else {
        AttnGroup::new(cur.clone(), vec![cur])
    };
    groups.push(cur_group);
    Ok(AttnPattern {
        n_q: layout.total,
        n_k: layout.total,
        groups,
    })
}

/// Dense `total × total` visibility for the default options.
pub fn build_layout_mask(layout: &TokenLayout, mode: PropagationMode) -> Vec<Vec<bool>> {
    build_attention_pattern(layout, mode, &MaskOptions::default())
        .expect("default options are valid")
        .to_dense()
}

/// Pattern for folding decoder tokens into the memory token: row 0 is the
/// memory and sees everything, the `n_dec` decoder rows see each other.
pub fn update_pattern(n_dec: usize) -> AttnPattern {
    let n = n_dec + 1;
    AttnPattern {
        n_q: n,
        n_k: n,
        groups: vec![AttnGroup::new(0..1, vec![0..n]), AttnGroup::new(1..n, vec![1..n])],
    }
}

/// Masks a logit row in place: among `ref_positions`, only the `k` largest
/// survive (ties to the lower index), the rest become `-inf`.
pub fn topk_filter(row: &mut [f64], ref_positions: Range<usize>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("top-K requires K >= 1".into()));
    }
    if ref_positions.end > row.len() {
        return Err(Error::Input("reference positions exceed the row".into()));
    }
    if ref_positions.len() <= k {
        return Ok(());
    }
    let mut order: Vec<usize> = ref_positions.collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for &p in &order[k..] {
        row[p] = f64::NEG_INFINITY;
    }
    Ok(())
}

/// Pre-norm block: masked multi-head attention and a GELU MLP, each with a
/// residual connection. Returns the block output and the attention output
/// node (which records the attention weights).
pub fn block_forward_traced(
    g: &mut Graph,
    x: Var,
    pattern: &AttnPattern,
    w: &BlockWeights<Var>,
    heads: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    let h = g.layer_norm(x, w.ln1_g, w.ln1_b, eps)?;
    let q = linear(g, h, w.wq, w.bq)?;
    let k = linear(g, h, w.wk, w.bk)?;
    let v = linear(g, h, w.wv, w.bv)?;
    let a = g.attention(q, k, v, pattern, heads, AttnKind::Softmax)?;
    let o = linear(g, a, w.wo, w.bo)?;
    let x1 = g.add(x, o)?;
    let out = mlp_residual(g, x1, w, eps)?;
    Ok((out, a))
}

pub fn block_forward(
    g: &mut Graph,
    x: Var,
    pattern: &AttnPattern,
    w: &BlockWeights<Var>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    block_forward_traced(g, x, pattern, w, heads, eps).map(|(out, _)| out)
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

pub(crate) fn mlp_residual(g: &mut Graph, x: Var, w: &BlockWeights<Var>, eps: f64) -> Result<Var> {
    let h = g.layer_norm(x, w.ln2_g, w.ln2_b, eps)?;
    let h = linear(g, h, w.w1, w.b1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, w.w2, w.b2)?;
    g.add(x, h)
}
