//! Dense reference implementations shared by the integration tests.
#![allow(dead_code)]

use jointformer::params::BlockWeights;
use jointformer::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_block(d: usize, seed: u64) -> BlockWeights {
    let mut r = rng(seed);
    let mut w = BlockWeights::init(d, 4, &mut r);
    w.visit_mut("", &mut |name, t| {
        let scale = if name.starts_with("ln") { 0.3 } else { 0.5 };
        let shift = if name.ends_with("_g") { 1.0 } else { 0.0 };
        for x in t.data_mut() {
            *x = shift + scale * r.random_range(-1.0..1.0);
        }
    });
    w
}

pub fn bind(g: &mut Graph, w: &BlockWeights) -> BlockWeights<Var> {
    w.map("", &mut |_, t| g.constant(t.clone()))
}

pub fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(i, x)| (x - mean) / (var + eps).sqrt() * gamma[i] + beta[i])
        .collect()
}

pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.at2(i, j)).sum::<f64>())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense pre-norm block with an explicit boolean mask.
pub fn oracle_block(x: &[Vec<f64>], w: &BlockWeights, mask: &[Vec<bool>], heads: usize, eps: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, w.ln1_g.data(), w.ln1_b.data(), eps)).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &w.wq, &w.bq)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &w.wk, &w.bk)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &w.wv, &w.bv)).collect();
    let mut att = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if mask[i][j] {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in cols.clone() {
                att[i][c] = (0..n).map(|j| e[j] / s * v[j][c]).sum();
            }
        }
    }
    (0..n)
        .map(|i| {
            let o = affine(&att[i], &w.wo, &w.bo);
            let x1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h2 = layer_norm(&x1, w.ln2_g.data(), w.ln2_b.data(), eps);
            let m: Vec<f64> = affine(&h2, &w.w1, &w.b1).into_iter().map(gelu).collect();
            let m = affine(&m, &w.w2, &w.b2);
            x1.iter().zip(&m).map(|(a, b)| a + b).collect()
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}


/// Align-corners-false bilinear resize of one `h×w` plane.
pub fn bilinear_oracle(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}
