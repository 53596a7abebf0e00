//! Per-target compressed memory token.

use crate::error::{Error, Result};
use crate::joint_block::{block_forward, linear, mlp_residual, update_pattern};
use crate::params::BlockWeights;
use crate::tensor::{AttnGroup, AttnKind, AttnPattern, Graph, Tensor, Var};

/// One `1×D` token carried across the frames of a video for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMemoryState {
    pub token: Tensor,
}

pub fn init_state(n_targets: usize, init_token: &Tensor) -> Result<Vec<CompressedMemoryState>> {
    if n_targets == 0 {
        return Err(Error::Input("at least one target is required".into()));
    }
    if init_token.ndim() != 2 || init_token.rows() != 1 {
        return Err(Error::Input(format!(
            "memory token must be 1×D, got {:?}",
            init_token.shape()
        )));
    }
    Ok(vec![
        CompressedMemoryState {
            token: init_token.clone()
        };
        n_targets
    ])
}

/// Runs the update blocks over `[M; dec]` and returns the new memory row.
pub fn update_with_decoder_tokens(
    g: &mut Graph,
    memory: Var,
    dec: Var,
    blocks: &[BlockWeights<Var>],
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let (m_shape, d_shape) = (g.shape(memory).to_vec(), g.shape(dec).to_vec());
    if m_shape.len() != 2 || m_shape[0] != 1 || d_shape.len() != 2 || d_shape[1] != m_shape[1] {
        return Err(Error::dim("memory update", &m_shape, &d_shape));
    }
    let pattern = update_pattern(d_shape[0]);
    let mut x = g.concat_rows(&[memory, dec])?;
    for w in blocks {
        x = block_forward(g, x, &pattern, w, heads, eps)?;
    }
    g.slice_rows(x, 0, 1)
}

/// Sigmoid-gated injection of the memory value into every current token.
/// Returns the enhanced tokens and the attention node holding the gates.
pub fn enhance_current_traced(
    g: &mut Graph,
    cur: Var,
    memory: Var,
    w: &BlockWeights<Var>,
    heads: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    let n = g.shape(cur)[0];
    if g.shape(memory)[0] != 1 || g.shape(memory)[1] != g.shape(cur)[1] {
        return Err(Error::dim("enhance", g.shape(cur), g.shape(memory)));
    }
    let hc = g.layer_norm(cur, w.ln1_g, w.ln1_b, eps)?;
    let hm = g.layer_norm(memory, w.ln1_g, w.ln1_b, eps)?;
    let q = linear(g, hc, w.wq, w.bq)?;
    let k = linear(g, hm, w.wk, w.bk)?;
    let v = linear(g, hm, w.wv, w.bv)?;
    let pattern = AttnPattern {
        n_q: n,
        n_k: 1,
        groups: vec![AttnGroup::new(0..n, vec![0..1])],
    };
    let a = g.attention(q, k, v, &pattern, heads, AttnKind::Sigmoid)?;
    let o = linear(g, a, w.wo, w.bo)?;
    let x1 = g.add(cur, o)?;
    Ok((mlp_residual(g, x1, w, eps)?, a))
}

pub fn enhance_current(
    g: &mut Graph,
    cur: Var,
    memory: Var,
    w: &BlockWeights<Var>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    enhance_current_traced(g, cur, memory, w, heads, eps).map(|(x, _)| x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn states_are_independent_copies() {
        let init = Tensor::from_fn([1, 4], |i| i as f64);
        let mut s = init_state(3, &init).unwrap();
        s[1].token.data_mut()[0] = 9.0;
        assert_eq!(s[0].token, init);
        assert_eq!(s[2].token, init);
        assert!(init_state(0, &init).is_err());
    }
}
