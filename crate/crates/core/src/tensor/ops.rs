use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{BackwardOp, Graph, Var};
use super::kernels::{self, Mat, MatMut};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation kind `{other}`"))),
        }
    }
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Contract(format!("{op} expects a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

struct MatMulOp {
    inputs: [Var; 2],
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardOp for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = g.value(self.inputs[0]).data();
        let b = g.value(self.inputs[1]).data();
        let da = needs[0].then(|| {
            let mut da = vec![0.0; m * k];
            kernels::gemm(
                m,
                n,
                k,
                1.0,
                Mat::row_major(grad, n),
                Mat::transposed(b, n),
                0.0,
                MatMut::row_major(&mut da, k),
            );
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; k * n];
            kernels::gemm(
                k,
                m,
                n,
                1.0,
                Mat::transposed(a, k),
                Mat::row_major(grad, n),
                0.0,
                MatMut::row_major(&mut db, n),
            );
            db
        });
        vec![da, db]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    inputs: [Var; 2],
    kind: Binary,
}

impl BackwardOp for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self.kind {
            Binary::Add => vec![
                needs[0].then(|| grad.to_vec()),
                needs[1].then(|| grad.to_vec()),
            ],
            Binary::Sub => vec![
                needs[0].then(|| grad.to_vec()),
                needs[1].then(|| grad.iter().map(|v| -v).collect()),
            ],
            Binary::Mul => {
                let a = g.value(self.inputs[0]).data();
                let b = g.value(self.inputs[1]).data();
                vec![
                    needs[0].then(|| grad.iter().zip(b).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| grad.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        }
    }
}

struct ScaleOp {
    inputs: [Var; 1],
    factor: f64,
}

impl BackwardOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|v| v * self.factor).collect())]
    }
}

struct SumOp {
    inputs: [Var; 1],
    len: usize,
    factor: f64,
}

impl BackwardOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.factor; self.len])]
    }
}

/// Bias broadcast along rows (`[n×d] + [d]`) or along columns (`[c×m] + [c]`).
struct BiasOp {
    inputs: [Var; 2],
    cols: usize,
    per_row: bool,
}

impl BackwardOp for BiasOp {
    fn name(&self) -> &'static str {
        "bias"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let db = needs[1].then(|| {
            if self.per_row {
                let mut db = vec![0.0; self.cols];
                for row in grad.chunks_exact(self.cols) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                db
            } else {
                grad.chunks_exact(self.cols).map(|row| row.iter().sum()).collect()
            }
        });
        vec![needs[0].then(|| grad.to_vec()), db]
    }
}

struct LayerNormOp {
    inputs: [Var; 3],
    dim: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl BackwardOp for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = self.dim;
        let gamma = g.value(self.inputs[1]).data();
        let mut dgamma = needs[1].then(|| vec![0.0; d]);
        let mut dbeta = needs[2].then(|| vec![0.0; d]);
        let mut dx = needs[0].then(|| vec![0.0; grad.len()]);
        let inv_d = 1.0 / d as f64;
        for (r, (gr, xh)) in grad.chunks_exact(d).zip(self.xhat.chunks_exact(d)).enumerate() {
            if let Some(dg) = dgamma.as_mut() {
                dg.iter_mut().zip(gr.iter().zip(xh)).for_each(|(a, (g, x))| *a += g * x);
            }
            if let Some(db) = dbeta.as_mut() {
                db.iter_mut().zip(gr).for_each(|(a, g)| *a += g);
            }
            if let Some(dx) = dx.as_mut() {
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                }
                mean_dxh *= inv_d;
                mean_dxh_xh *= inv_d;
                let rstd = self.rstd[r];
                let out = &mut dx[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = rstd * (gr[j] * gamma[j] - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

struct ActOp {
    inputs: [Var; 1],
    kind: Activation,
    /// Derivative per element, filled for GELU.
    deriv: Vec<f64>,
}

impl BackwardOp for ActOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        }
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let dx = match self.kind {
            Activation::Sigmoid => grad
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
            Activation::Gelu => grad.iter().zip(&self.deriv).map(|(g, d)| g * d).collect(),
        };
        vec![Some(dx)]
    }
}

struct SoftmaxRowsOp {
    inputs: [Var; 1],
    cols: usize,
}

impl BackwardOp for SoftmaxRowsOp {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; grad.len()];
        for ((d, g), y) in dx
            .chunks_exact_mut(self.cols)
            .zip(grad.chunks_exact(self.cols))
            .zip(out.data().chunks_exact(self.cols))
        {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for j in 0..self.cols {
                d[j] = y[j] * (g[j] - dot);
            }
        }
        vec![Some(dx)]
    }
}

struct ResizeOp {
    inputs: [Var; 1],
    channels: usize,
    from: (usize, usize),
    to: (usize, usize),
}

impl BackwardOp for ResizeOp {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(kernels::resize_bilinear_adjoint(
            grad,
            self.channels,
            self.from,
            self.to,
        ))]
    }
}

struct Conv2dOp {
    inputs: [Var; 2],
    c_in: usize,
    c_out: usize,
    k: usize,
    hw: (usize, usize),
    cols: Vec<f64>,
}

fn im2col(x: &[f64], c_in: usize, (h, w): (usize, usize), k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c_in * k * k * hw];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[c * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c_in: usize, (h, w): (usize, usize), k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c_in * hw];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[c * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

impl BackwardOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let hw = self.hw.0 * self.hw.1;
        let kk = self.c_in * self.k * self.k;
        let w = g.value(self.inputs[1]).data();
        let dx = needs[0].then(|| {
            let mut dcols = vec![0.0; kk * hw];
            kernels::gemm(
                kk,
                self.c_out,
                hw,
                1.0,
                Mat::transposed(w, kk),
                Mat::row_major(grad, hw),
                0.0,
                MatMut::row_major(&mut dcols, hw),
            );
            col2im(&dcols, self.c_in, self.hw, self.k)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; self.c_out * kk];
            kernels::gemm(
                self.c_out,
                hw,
                kk,
                1.0,
                Mat::row_major(grad, hw),
                Mat::transposed(&self.cols, hw),
                0.0,
                MatMut::row_major(&mut dw, kk),
            );
            dw
        });
        vec![dx, dw]
    }
}

struct GatherOp {
    inputs: [Var; 1],
    index: Vec<usize>,
    src_len: usize,
}

impl BackwardOp for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.src_len];
        for (g, &i) in grad.iter().zip(&self.index) {
            dx[i] += g;
        }
        vec![Some(dx)]
    }
}

struct ConcatOp {
    inputs: Vec<Var>,
    lens: Vec<usize>,
}

impl BackwardOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut off = 0;
        self.lens
            .iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let part = need.then(|| grad[off..off + len].to_vec());
                off += len;
                part
            })
            .collect()
    }
}

struct SliceOp {
    inputs: [Var; 1],
    offset: usize,
    src_len: usize,
}

impl BackwardOp for SliceOp {
    fn name(&self) -> &'static str {
        "slice_rows"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.src_len];
        dx[self.offset..self.offset + grad.len()].copy_from_slice(grad);
        vec![Some(dx)]
    }
}

struct ReshapeOp {
    inputs: [Var; 1],
}

impl BackwardOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        self.push(
            out,
            Box::new(MatMulOp {
                inputs: [a, b],
                m,
                k,
                n,
            }),
        )
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("elementwise", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Box::new(BinaryOp { inputs: [a, b], kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect());
        self.push(out, Box::new(ScaleOp { inputs: [x], factor }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (s, len) = (t.sum(), t.len());
        self.push(
            Tensor::scalar(s),
            Box::new(SumOp {
                inputs: [x],
                len,
                factor: 1.0,
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let len = t.len();
        let s = t.sum() / len as f64;
        self.push(
            Tensor::scalar(s),
            Box::new(SumOp {
                inputs: [x],
                len,
                factor: 1.0 / len as f64,
            }),
        )
    }

    /// Sums a list of same-shaped vars left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all on an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `[n×d] + [d]`, the bias added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = two_d("add_row_bias", self.value(x))?;
        let b = self.value(bias);
        if b.len() != d {
            return Err(Error::dim("add_row_bias", self.shape(x), b.shape()));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(
            out,
            Box::new(BiasOp {
                inputs: [x, bias],
                cols: d,
                per_row: true,
            }),
        )
    }

    /// `[c×…] + [c]`, one bias per leading-axis slice (per channel).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, m) = (t.rows(), t.cols());
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::dim("add_channel_bias", t.shape(), b.shape()));
        }
        let mut data = t.data().to_vec();
        for (row, bv) in data.chunks_exact_mut(m).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(
            out,
            Box::new(BiasOp {
                inputs: [x, bias],
                cols: m,
                per_row: false,
            }),
        )
    }

    /// Row-wise layer normalization followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (n, d) = two_d("layer_norm", self.value(x))?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), tg.shape()));
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        self.push(
            out,
            Box::new(LayerNormOp {
                inputs: [x, gamma, beta],
                dim: d,
                xhat,
                rstd,
            }),
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let t = self.value(x);
        let (vals, deriv) = match kind {
            Activation::Sigmoid => (t.data().iter().map(|&v| kernels::sigmoid(v)).collect(), Vec::new()),
            Activation::Gelu if self.requires_grad(x) => {
                t.data().iter().map(|&v| kernels::gelu_with_grad(v)).unzip()
            }
            Activation::Gelu => (t.data().iter().map(|&v| kernels::gelu(v)).collect(), Vec::new()),
        };
        let out = Tensor::from_parts(t.shape().to_vec(), vals);
        self.push(out, Box::new(ActOp { inputs: [x], kind, deriv }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = two_d("softmax_rows", self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(out, Box::new(SoftmaxRowsOp { inputs: [x], cols: c }))
    }

    /// Align-corners-false bilinear resize of a `C×h×w` tensor.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::Contract(format!(
                "resize_bilinear expects C×h×w input and positive output size, got {:?} -> {out_h}×{out_w}",
                t.shape()
            )));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let data = kernels::resize_bilinear(t.data(), c, (h, w), (out_h, out_w));
        let out = Tensor::from_parts(vec![c, out_h, out_w], data);
        self.push(
            out,
            Box::new(ResizeOp {
                inputs: [x],
                channels: c,
                from: (h, w),
                to: (out_h, out_w),
            }),
        )
    }

    /// Stride-1 "same" convolution of a `C_in×h×w` map with an odd square
    /// kernel `C_out×C_in×k×k`. No bias.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        if tx.ndim() != 3 || tw.ndim() != 4 || tw.shape()[1] != tx.shape()[0] || tw.shape()[2] != tw.shape()[3] || tw.shape()[2] % 2 == 0 {
            return Err(Error::dim("conv2d", tx.shape(), tw.shape()));
        }
        let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        let cols = im2col(tx.data(), c_in, (h, w), k);
        let kk = c_in * k * k;
        let mut out = vec![0.0; c_out * h * w];
        kernels::gemm(
            c_out,
            kk,
            h * w,
            1.0,
            Mat::row_major(tw.data(), kk),
            Mat::row_major(&cols, h * w),
            0.0,
            MatMut::row_major(&mut out, h * w),
        );
        let out = Tensor::from_parts(vec![c_out, h, w], out);
        self.push(
            out,
            Box::new(Conv2dOp {
                inputs: [x, weight],
                c_in,
                c_out,
                k,
                hw: (h, w),
                cols,
            }),
        )
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`. Covers transposes, flips,
    /// tiling and pixel shuffles.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", &shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Contract(format!("gather index {bad} out of range {}", t.len())));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let src_len = t.len();
        self.push(
            Tensor::from_parts(shape, data),
            Box::new(GatherOp {
                inputs: [x],
                index,
                src_len,
            }),
        )
    }

    /// Transpose of a 2-D var.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = two_d("transpose", self.value(x))?;
        let index = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(x, index, vec![c, r])
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows on an empty list".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
            lens.push(t.len());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(
            Tensor::from_parts(shape, data),
            Box::new(ConcatOp {
                inputs: parts.to_vec(),
                lens,
            }),
        )
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.shape()[0] {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {:?}",
                start + len,
                t.shape()
            )));
        }
        let row = t.len() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let src_len = t.len();
        self.push(
            Tensor::from_parts(shape, data),
            Box::new(SliceOp {
                inputs: [x],
                offset: start * row,
                src_len,
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Box::new(ReshapeOp { inputs: [x] }))
    }
}
