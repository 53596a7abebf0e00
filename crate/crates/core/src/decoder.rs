//! Mask decoder: fuses plain and memory-enhanced current tokens, climbs
//! back to full resolution through three skip scales and distills its
//! internals into decoder tokens.
//!
//! Feature maps are `C×h×w`. A 1×1 mixing weight is stored `C_out×C_in`.
//! With token grid `g = H/P` the scales are `⌈g/2⌉` (coarse), `g` (mid) and
//! `2g` (fine); at `P = 8` these are 1/16, 1/8 and 1/4 of the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::DecoderWeights;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct SkipFeatures {
    /// `D×⌈gh/2⌉×⌈gw/2⌉`
    pub coarse: Var,
    /// `D×gh×gw`
    pub mid: Var,
    /// `D/2×2gh×2gw`
    pub fine: Var,
}

/// Fused decoder maps at the three scales.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInternals {
    pub coarse: Var,
    pub mid: Var,
    pub fine: Var,
}

pub fn coarse_grid((gh, gw): (usize, usize)) -> (usize, usize) {
    (gh.div_ceil(2), gw.div_ceil(2))
}

pub fn fine_grid((gh, gw): (usize, usize)) -> (usize, usize) {
    (2 * gh, 2 * gw)
}

/// `N×D` tokens to a `D×gh×gw` map.
pub fn tokens_to_map(g: &mut Graph, tokens: Var, (gh, gw): (usize, usize)) -> Result<Var> {
    let s = g.shape(tokens);
    if s.len() != 2 || s[0] != gh * gw {
        return Err(Error::Contract(format!(
            "{s:?} tokens do not fill a {gh}x{gw} grid"
        )));
    }
    let d = s[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, [d, gh, gw])
}

/// `C×h×w` map to `h·w×C` tokens.
pub fn map_to_tokens(g: &mut Graph, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    let flat = g.reshape(map, [s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// 1×1 convolution `weight·x + bias` of a `C_in×h×w` map.
pub fn conv1x1(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!("conv1x1 expects C×h×w, got {s:?}")));
    }
    let cout = g.shape(weight)[0];
    let flat = g.reshape(x, [s[0], s[1] * s[2]])?;
    let y = g.matmul(weight, flat)?;
    let y = g.reshape(y, [cout, s[1], s[2]])?;
    match bias {
        Some(b) => g.add_channel_bias(y, b),
        None => Ok(y),
    }
}

fn resize_to(g: &mut Graph, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    g.resize_bilinear(x, h, w)
}

/// Skip maps built from the last backbone layer alone: a strided
/// reduction for the coarse scale, the token map itself, and a learned
/// 2× upsampling (fixed bilinear kernel, learned channel mixing that halves
/// the width) for the fine scale.
pub fn make_skips(
    g: &mut Graph,
    cur: Var,
    grid: (usize, usize),
    w: &DecoderWeights<Var>,
) -> Result<SkipFeatures> {
    let mid = tokens_to_map(g, cur, grid)?;
    let coarse = resize_to(g, mid, coarse_grid(grid))?;
    let up = resize_to(g, mid, fine_grid(grid))?;
    let fine = conv1x1(g, up, w.skip_up_w, Some(w.skip_up_b))?;
    Ok(SkipFeatures { coarse, mid, fine })
}

/// Returns `1×H×W` pre-sigmoid logits and the fused internals.
pub fn decode(
    g: &mut Graph,
    cur: Var,
    enhanced: Var,
    skips: &SkipFeatures,
    grid: (usize, usize),
    out_size: (usize, usize),
    w: &DecoderWeights<Var>,
) -> Result<(Var, DecoderInternals)> {
    if g.shape(cur) != g.shape(enhanced) {
        return Err(Error::dim("decode", g.shape(cur), g.shape(enhanced)));
    }
    let cur_map = tokens_to_map(g, cur, grid)?;
    let enh_map = tokens_to_map(g, enhanced, grid)?;
    let both = g.concat_rows(&[cur_map, enh_map])?;
    let fused = conv1x1(g, both, w.fuse_w, Some(w.fuse_b))?;

    let down = resize_to(g, fused, coarse_grid(grid))?;
    let skip = conv1x1(g, skips.coarse, w.coarse_w, Some(w.coarse_b))?;
    let coarse = g.add(down, skip)?;
    let coarse = g.gelu(coarse)?;

    let up = resize_to(g, coarse, grid)?;
    let up = conv1x1(g, up, w.up_mid_w, None)?;
    let skip = conv1x1(g, skips.mid, w.skip_mid_w, Some(w.mid_b))?;
    let mid = g.add(up, skip)?;
    let mid = g.gelu(mid)?;

    let up = resize_to(g, mid, fine_grid(grid))?;
    let up = conv1x1(g, up, w.up_fine_w, None)?;
    let skip = conv1x1(g, skips.fine, w.skip_fine_w, Some(w.fine_b))?;
    let fine = g.add(up, skip)?;
    let fine = g.gelu(fine)?;

    let logits = g.conv2d(fine, w.head_w)?;
    let logits = g.add_channel_bias(logits, w.head_b)?;
    let logits = resize_to(g, logits, out_size)?;
    Ok((logits, DecoderInternals { coarse, mid, fine }))
}

/// Per scale: append the logits resized to that scale as one more channel,
/// project to `D`, resize to the token grid; the three results are summed.
pub fn make_decoder_tokens(
    g: &mut Graph,
    internals: &DecoderInternals,
    logits: Var,
    grid: (usize, usize),
    w: &DecoderWeights<Var>,
) -> Result<Var> {
    let scales = [
        (internals.coarse, w.tok_coarse_w, w.tok_coarse_b),
        (internals.mid, w.tok_mid_w, w.tok_mid_b),
        (internals.fine, w.tok_fine_w, w.tok_fine_b),
    ];
    let mut parts = Vec::with_capacity(3);
    for (feat, pw, pb) in scales {
        let s = g.shape(feat).to_vec();
        let l = resize_to(g, logits, (s[1], s[2]))?;
        let x = g.concat_rows(&[feat, l])?;
        let x = conv1x1(g, x, pw, Some(pb))?;
        parts.push(resize_to(g, x, grid)?);
    }
    let sum = g.add_all(&parts)?;
    map_to_tokens(g, sum)
}

fn mix<R: Rng + ?Sized>(cout: usize, cin: usize, rng: &mut R) -> Tensor {
    Tensor::randn([cout, cin], 1.0 / (cin as f64).sqrt(), rng)
}

impl DecoderWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let (d, d2, d4) = (dim, dim / 2, dim / 4);
        DecoderWeights {
            skip_up_w: mix(d2, d, rng),
            skip_up_b: Tensor::zeros([d2]),
            fuse_w: mix(d, 2 * d, rng),
            fuse_b: Tensor::zeros([d]),
            coarse_w: mix(d, d, rng),
            coarse_b: Tensor::zeros([d]),
            up_mid_w: mix(d2, d, rng),
            skip_mid_w: mix(d2, d, rng),
            mid_b: Tensor::zeros([d2]),
            up_fine_w: mix(d4, d2, rng),
            skip_fine_w: mix(d4, d2, rng),
            fine_b: Tensor::zeros([d4]),
            head_w: Tensor::randn([1, d4, 3, 3], 1.0 / ((9 * d4) as f64).sqrt(), rng),
            head_b: Tensor::zeros([1]),
            tok_coarse_w: mix(d, d + 1, rng),
            tok_coarse_b: Tensor::zeros([d]),
            tok_mid_w: mix(d, d2 + 1, rng),
            tok_mid_b: Tensor::zeros([d]),
            tok_fine_w: mix(d, d4 + 1, rng),
            tok_fine_b: Tensor::zeros([d]),
        }
    }
}
