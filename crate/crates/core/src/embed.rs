//! Patch tokenization of frames and frame+mask reference pairs.
//!
//! A patch vector is flattened channel-major, then row-major inside the
//! patch: element `c·P² + dy·P + dx` holds pixel `(c, y0 + dy, x0 + dx)`.
//! Patches themselves are listed in row-major grid order.

use crate::error::{Error, Result};
use crate::params::EmbedParams;
use crate::tensor::{kernels, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    /// RGB current frame, projected with `e_x` and offset by `pos_x`.
    Current,
    /// RGB + mask reference pair, projected with `e_z` and offset by `pos_z`.
    Reference,
}

impl TokenKind {
    pub fn channels(self) -> usize {
        match self {
            TokenKind::Current => 3,
            TokenKind::Reference => 4,
        }
    }
}

fn chw(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Input(format!("expected a C×H×W image, got shape {s:?}"))),
    }
}

/// `C×H×W` image to `N×(C·P²)` patch rows.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Input(format!("image {h}x{w} is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let len = c * p * p;
    let src = img.data();
    let mut out = vec![0.0; gh * gw * len];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * len..][..len];
            for ch in 0..c {
                for dy in 0..p {
                    let s = (ch * h + gy * p + dy) * w + gx * p;
                    row[ch * p * p + dy * p..][..p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, len], out))
}

/// Inverse of [`patchify`] for a `c×h×w` image.
pub fn unpatchify(patches: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Input(format!("image {h}x{w} is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let len = c * p * p;
    if patches.shape() != [gh * gw, len] {
        return Err(Error::dim("unpatchify", patches.shape(), &[gh * gw, len]));
    }
    let src = patches.data();
    let mut out = vec![0.0; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &src[(gy * gw + gx) * len..][..len];
            for ch in 0..c {
                for dy in 0..p {
                    let d = (ch * h + gy * p + dy) * w + gx * p;
                    out[d..d + p].copy_from_slice(&row[ch * p * p + dy * p..][..p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Stacks an RGB frame and a binary mask into a `4×H×W` reference pair.
pub fn reference_pair(frame: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(frame)?;
    if c != 3 {
        return Err(Error::Input(format!("frame must have 3 channels, got {c}")));
    }
    if mask.len() != h * w {
        return Err(Error::dim("reference_pair", frame.shape(), mask.shape()));
    }
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(frame.data());
    data.extend_from_slice(mask.data());
    Ok(Tensor::from_parts(vec![4, h, w], data))
}

/// `patches·E + pos` for one frame.
pub fn embed_tokens(
    g: &mut Graph,
    patches: Var,
    params: &EmbedParams<Var>,
    kind: TokenKind,
) -> Result<Var> {
    let (proj, pos) = match kind {
        TokenKind::Current => (params.e_x, params.pos_x),
        TokenKind::Reference => (params.e_z, params.pos_z),
    };
    let (pr, pc) = (g.shape(patches)[0], g.shape(patches)[1..].iter().product::<usize>());
    let (er, ed) = (g.shape(proj)[0], g.shape(proj)[1]);
    if pc != er || er % kind.channels() != 0 {
        return Err(Error::Config(format!(
            "{kind:?} patches of length {pc} do not fit a {er}×{ed} projection"
        )));
    }
    if g.shape(pos) != [pr, ed] {
        return Err(Error::Config(format!(
            "{pr} patches do not match positional embedding {:?}",
            g.shape(pos)
        )));
    }
    let h = g.matmul(patches, proj)?;
    g.add(h, pos)
}

/// Fixed 2D sine-cosine table for a token grid, row-major over the grid.
/// The first half of the channels encodes the row, the second the column.
pub fn sincos_pos_table((gh, gw): (usize, usize), d: usize) -> Tensor {
    let quarter = d / 4;
    let mut out = vec![0.0; gh * gw * d];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * d..(y * gw + x + 1) * d];
            for (half, pos) in [(0, y), (1, x)] {
                for k in 0..quarter {
                    let omega = 10000f64.powf(-(k as f64) / quarter.max(1) as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + k] = a.sin();
                    row[half * 2 * quarter + quarter + k] = a.cos();
                }
            }
        }
    }
    Tensor::from_parts(vec![gh * gw, d], out)
}

/// Bilinear resampling of an `N×D` positional table from one token grid to
/// another. Equal grids return the input unchanged.
pub fn interpolate_pos_embed(
    pos: &Tensor,
    old_grid: (usize, usize),
    new_grid: (usize, usize),
) -> Result<Tensor> {
    let n = old_grid.0 * old_grid.1;
    if pos.ndim() != 2 || pos.rows() != n {
        return Err(Error::Input(format!(
            "positional table {:?} does not cover a {}x{} grid",
            pos.shape(),
            old_grid.0,
            old_grid.1
        )));
    }
    if old_grid == new_grid {
        return Ok(pos.clone());
    }
    let d = pos.cols();
    let chw = pos.t();
    let out = kernels::resize_bilinear(chw.data(), d, old_grid, new_grid);
    let resized = Tensor::from_parts(vec![d, new_grid.0 * new_grid.1], out);
    Ok(resized.t())
}

/// Differentiable counterpart of [`interpolate_pos_embed`].
pub fn interpolate_pos_embed_var(
    g: &mut Graph,
    pos: Var,
    old_grid: (usize, usize),
    new_grid: (usize, usize),
) -> Result<Var> {
    if g.shape(pos) != [old_grid.0 * old_grid.1, g.shape(pos)[1]] {
        return Err(Error::Input(format!(
            "positional table {:?} does not cover a {}x{} grid",
            g.shape(pos),
            old_grid.0,
            old_grid.1
        )));
    }
    if old_grid == new_grid {
        return Ok(pos);
    }
    let d = g.shape(pos)[1];
    let t = g.transpose(pos)?;
    let map = g.reshape(t, [d, old_grid.0, old_grid.1])?;
    let r = g.resize_bilinear(map, new_grid.0, new_grid.1)?;
    let flat = g.reshape(r, [d, new_grid.0 * new_grid.1])?;
    g.transpose(flat)
}
