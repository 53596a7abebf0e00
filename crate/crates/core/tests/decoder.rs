use jointformer::decoder::{decode, make_decoder_tokens, make_skips, tokens_to_map};
use jointformer::params::DecoderWeights;
use jointformer::tensor::grad_check;
use jointformer::{Graph, Tensor, Var};
use rand::Rng;

mod common;
use common::*;

/// `C×h×w` map in plain vectors.
#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn from_tokens(t: &Tensor, (h, w): (usize, usize)) -> Map {
        let c = t.cols();
        let mut v = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                v[ch * h * w + p] = t.at2(p, ch);
            }
        }
        Map { c, h, w, v }
    }

    fn resize(&self, (oh, ow): (usize, usize)) -> Map {
        let mut v = Vec::with_capacity(self.c * oh * ow);
        for ch in 0..self.c {
            let plane = &self.v[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            v.extend(bilinear_oracle(plane, (self.h, self.w), (oh, ow)));
        }
        Map { c: self.c, h: oh, w: ow, v }
    }

    fn mix(&self, weight: &Tensor, bias: Option<&Tensor>) -> Map {
        let (cout, n) = (weight.rows(), self.h * self.w);
        let mut v = vec![0.0; cout * n];
        for o in 0..cout {
            for p in 0..n {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for i in 0..self.c {
                    acc += weight.at2(o, i) * self.v[i * n + p];
                }
                v[o * n + p] = acc;
            }
        }
        Map { c: cout, h: self.h, w: self.w, v }
    }

    fn add(&self, other: &Map) -> Map {
        let v = self.v.iter().zip(&other.v).map(|(a, b)| a + b).collect();
        Map { v, ..self.clone() }
    }

    fn gelu(&self) -> Map {
        Map { v: self.v.iter().map(|&x| gelu(x)).collect(), ..self.clone() }
    }

    fn cat(&self, other: &Map) -> Map {
        let mut v = self.v.clone();
        v.extend_from_slice(&other.v);
        Map { c: self.c + other.c, v, ..self.clone() }
    }

    /// Same-padding 3×3 cross-correlation, weight `C_out×C_in×3×3`.
    fn conv3(&self, weight: &Tensor, bias: &Tensor) -> Map {
        let cout = weight.shape()[0];
        let (h, w) = (self.h, self.w);
        let mut v = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[o];
                    for i in 0..self.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let wt = weight.data()[((o * self.c + i) * 3 + ky) * 3 + kx];
                                acc += wt * self.v[(i * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    v[(o * h + y) * w + x] = acc;
                }
            }
        }
        Map { c: cout, h, w, v }
    }
}

fn random_decoder(d: usize, seed: u64) -> DecoderWeights {
    let mut r = rng(seed);
    let mut w = DecoderWeights::init(d, &mut r);
    w.visit_mut("", &mut |_, t| {
        for x in t.data_mut() {
            *x += 0.1 * r.random_range(-1.0..1.0);
        }
    });
    w
}

fn bind_dec(g: &mut Graph, w: &DecoderWeights) -> DecoderWeights<Var> {
    w.map("", &mut |_, t| g.constant(t.clone()))
}

fn ceil_half((h, w): (usize, usize)) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

struct Oracle {
    logits: Map,
    tokens: Vec<f64>,
}

fn oracle(cur: &Tensor, enh: &Tensor, grid: (usize, usize), out: (usize, usize), w: &DecoderWeights) -> Oracle {
    let fine_g = (2 * grid.0, 2 * grid.1);
    let mid_in = Map::from_tokens(cur, grid);
    let skip_coarse = mid_in.resize(ceil_half(grid));
    let skip_fine = mid_in.resize(fine_g).mix(&w.skip_up_w, Some(&w.skip_up_b));
    let fused = mid_in.cat(&Map::from_tokens(enh, grid)).mix(&w.fuse_w, Some(&w.fuse_b));
    let coarse = fused
        .resize(ceil_half(grid))
        .add(&skip_coarse.mix(&w.coarse_w, Some(&w.coarse_b)))
        .gelu();
    let mid = coarse
        .resize(grid)
        .mix(&w.up_mid_w, None)
        .add(&mid_in.mix(&w.skip_mid_w, Some(&w.mid_b)))
        .gelu();
    let fine = mid
        .resize(fine_g)
        .mix(&w.up_fine_w, None)
        .add(&skip_fine.mix(&w.skip_fine_w, Some(&w.fine_b)))
        .gelu();
    let logits = fine.conv3(&w.head_w, &w.head_b).resize(out);
    let mut sum: Option<Map> = None;
    for (feat, pw, pb) in [
        (&coarse, &w.tok_coarse_w, &w.tok_coarse_b),
        (&mid, &w.tok_mid_w, &w.tok_mid_b),
        (&fine, &w.tok_fine_w, &w.tok_fine_b),
    ] {
        let l = logits.resize((feat.h, feat.w));
        let part = feat.cat(&l).mix(pw, Some(pb)).resize(grid);
        sum = Some(match sum {
            None => part,
            Some(s) => s.add(&part),
        });
    }
    let sum = sum.unwrap();
    let n = grid.0 * grid.1;
    let mut tokens = vec![0.0; n * sum.c];
    for p in 0..n {
        for c in 0..sum.c {
            tokens[p * sum.c + c] = sum.v[c * n + p];
        }
    }
    Oracle { logits, tokens }
}

fn run(cur: &Tensor, enh: &Tensor, grid: (usize, usize), out: (usize, usize), w: &DecoderWeights) -> (Tensor, Tensor, [Vec<usize>; 3]) {
    let mut g = Graph::new();
    let wv = bind_dec(&mut g, w);
    let (c, e) = (g.constant(cur.clone()), g.constant(enh.clone()));
    let skips = make_skips(&mut g, c, grid, &wv).unwrap();
    let shapes = [skips.coarse, skips.mid, skips.fine].map(|s| g.shape(s).to_vec());
    let (logits, internals) = decode(&mut g, c, e, &skips, grid, out, &wv).unwrap();
    let tokens = make_decoder_tokens(&mut g, &internals, logits, grid, &wv).unwrap();
    (g.value(logits).clone(), g.value(tokens).clone(), shapes)
}

#[test]
fn default_scale_shapes() {
    let d = 16;
    let w = random_decoder(d, 1);
    let cur = Tensor::randn([64, d], 1.0, &mut rng(2));
    let (logits, tokens, shapes) = run(&cur, &cur, (8, 8), (64, 64), &w);
    assert_eq!(shapes[0], vec![d, 4, 4]);
    assert_eq!(shapes[1], vec![d, 8, 8]);
    assert_eq!(shapes[2], vec![d / 2, 16, 16]);
    assert_eq!(logits.shape(), &[1, 64, 64]);
    assert_eq!(tokens.shape(), &[64, d]);
}

#[test]
fn constant_tokens_give_constant_skips() {
    let d = 8;
    let w = random_decoder(d, 3);
    let mut g = Graph::new();
    let wv = bind_dec(&mut g, &w);
    let row: Vec<f64> = (0..d).map(|i| i as f64 * 0.3 - 1.0).collect();
    let cur = g.constant(Tensor::from_fn([12, d], |i| row[i % d]));
    let skips = make_skips(&mut g, cur, (3, 4), &wv).unwrap();
    for s in [skips.coarse, skips.mid, skips.fine] {
        let t = g.value(s);
        let plane = t.shape()[1] * t.shape()[2];
        for ch in 0..t.shape()[0] {
            let p = &t.data()[ch * plane..(ch + 1) * plane];
            assert!(p.iter().all(|&x| (x - p[0]).abs() < 1e-12));
        }
    }
}

#[test]
fn grid_mismatch_is_an_error() {
    let w = random_decoder(8, 4);
    let mut g = Graph::new();
    let wv = bind_dec(&mut g, &w);
    let cur = g.constant(Tensor::zeros([10, 8]));
    assert!(make_skips(&mut g, cur, (3, 3), &wv).is_err());
    assert!(tokens_to_map(&mut g, cur, (2, 4)).is_err());
}

#[test]
fn zero_weights_give_zero_logits_and_tokens() {
    let d = 8;
    let w = random_decoder(d, 5).map("", &mut |_, t| Tensor::zeros(t.shape().to_vec()));
    let cur = Tensor::randn([16, d], 1.0, &mut rng(6));
    let (logits, tokens, _) = run(&cur, &cur, (4, 4), (16, 16), &w);
    assert!(logits.data().iter().all(|&x| x == 0.0));
    assert!(tokens.data().iter().all(|&x| x == 0.0));
}

#[test]
fn zero_internals_and_logits_give_zero_tokens() {
    let d = 8;
    let mut w = random_decoder(d, 7);
    for b in [&mut w.tok_coarse_b, &mut w.tok_mid_b, &mut w.tok_fine_b] {
        b.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new();
    let wv = bind_dec(&mut g, &w);
    let internals = jointformer::decoder::DecoderInternals {
        coarse: g.constant(Tensor::zeros([d, 2, 2])),
        mid: g.constant(Tensor::zeros([d / 2, 4, 4])),
        fine: g.constant(Tensor::zeros([d / 4, 8, 8])),
    };
    let logits = g.constant(Tensor::zeros([1, 16, 16]));
    let tokens = make_decoder_tokens(&mut g, &internals, logits, (4, 4), &wv).unwrap();
    assert_eq!(g.shape(tokens), &[16, d]);
    assert!(g.value(tokens).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matches_step_by_step_oracle() {
    let (d, grid, out) = (8, (3, 4), (12, 16));
    let w = random_decoder(d, 8);
    let cur = Tensor::randn([12, d], 1.0, &mut rng(9));
    let enh = Tensor::randn([12, d], 1.0, &mut rng(10));
    let (logits, tokens, _) = run(&cur, &enh, grid, out, &w);
    let o = oracle(&cur, &enh, grid, out, &w);
    assert_eq!(logits.shape(), &[1, out.0, out.1]);
    for (a, b) in logits.data().iter().zip(&o.logits.v) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    for (a, b) in tokens.data().iter().zip(&o.tokens) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn zero_enhanced_stream_still_decodes() {
    let d = 8;
    let w = random_decoder(d, 11);
    let cur = Tensor::randn([16, d], 1.0, &mut rng(12));
    let (logits, _, _) = run(&cur, &Tensor::zeros([16, d]), (4, 4), (32, 32), &w);
    assert_eq!(logits.shape(), &[1, 32, 32]);
    assert!(logits.is_finite());
}

#[test]
fn translation_consistency_on_interior() {
    // shift by two token cells (one coarse cell) so every resampling stage
    // stays aligned; compare away from the borders
    let (d, p, gh, gw, shift) = (8, 4, 6, 16, 2);
    let w = random_decoder(d, 13);
    let wide = Tensor::randn([gh * (gw + shift), d], 1.0, &mut rng(14));
    let crop = |x0: usize| {
        let mut v = Vec::with_capacity(gh * gw * d);
        for y in 0..gh {
            for x in x0..x0 + gw {
                v.extend_from_slice(&wide.data()[(y * (gw + shift) + x) * d..][..d]);
            }
        }
        Tensor::new([gh * gw, d], v).unwrap()
    };
    let (a, b) = (crop(0), crop(shift));
    let out = (gh * p, gw * p);
    let (la, _, _) = run(&a, &a, (gh, gw), out, &w);
    let (lb, _, _) = run(&b, &b, (gh, gw), out, &w);
    let margin = 4 * p;
    for y in 0..out.0 {
        for x in margin..out.1 - margin - shift * p {
            let va = la.data()[y * out.1 + x + shift * p];
            let vb = lb.data()[y * out.1 + x];
            assert!((va - vb).abs() < 1e-10, "({y},{x}) {va} vs {vb}");
        }
    }
}

#[test]
fn gradcheck_through_decode_and_tokens() {
    let (d, grid, out) = (8, (2, 3), (8, 12));
    let w = random_decoder(d, 15);
    let mut inputs = vec![
        Tensor::randn([6, d], 1.0, &mut rng(16)),
        Tensor::randn([6, d], 1.0, &mut rng(17)),
    ];
    w.visit("", &mut |_, t| inputs.push(t.clone()));
    let probe = Tensor::randn([6, d], 1.0, &mut rng(18));
    let err = grad_check(
        |g, v| {
            let mut it = v[2..].iter().copied();
            let wv = w.map("", &mut |_, _| it.next().unwrap());
            let skips = make_skips(g, v[0], grid, &wv)?;
            let (logits, internals) = decode(g, v[0], v[1], &skips, grid, out, &wv)?;
            let tokens = make_decoder_tokens(g, &internals, logits, grid, &wv)?;
            let pr = g.constant(probe.clone());
            let t = g.mul(tokens, pr)?;
            let a = g.sum(t)?;
            let b = g.mean(logits)?;
            g.add(a, b)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}
