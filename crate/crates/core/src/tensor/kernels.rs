//! Numeric kernels shared by the tensor API and the autodiff ops.

/// Read-only strided matrix view whose element (i, j) sits at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Mat { data, rs, cs }
    }

    pub fn row_major(data: &'a [f64], ld: usize) -> Self {
        Mat { data, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major buffer with leading dimension `ld`.
    pub fn transposed(data: &'a [f64], ld: usize) -> Self {
        Mat { data, rs: 1, cs: ld }
    }
}

pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rs: usize, cs: usize) -> Self {
        MatMut { data, rs, cs }
    }

    pub fn row_major(data: &'a mut [f64], ld: usize) -> Self {
        MatMut { data, rs: ld, cs: 1 }
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C ← alpha·A·B + beta·C` with A m×k, B k×n, C m×n.
///
/// When `beta == 0` the previous contents of C are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: MatMut) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(extent(m, k, a.rs, a.cs) <= a.data.len(), "gemm: A view out of bounds");
    assert!(extent(k, n, b.rs, b.cs) <= b.data.len(), "gemm: B view out of bounds");
    assert!(extent(m, n, c.rs, c.cs) <= c.data.len(), "gemm: C view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == 0.0 { 0.0 } else { beta * *v };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and C is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// In-place numerically stable softmax of one row. Entries equal to `-inf`
/// receive probability exactly 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `tanh` through one `exp`; absolute error stays at rounding level.
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    gelu_with_grad(x).0
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// GELU value and derivative sharing one tanh evaluation.
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// One output coordinate of a 1-D align-corners-false linear resampler:
/// `out = (1 - w)·in[i0] + w·in[i1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w: f64,
}

pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w }
        })
        .collect()
}

/// Bilinear resize of a `channels × h × w` buffer.
pub fn resize_bilinear(
    src: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (y, ry) in ty.iter().enumerate() {
            let r0 = &plane[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &plane[ry.i1 * w..(ry.i1 + 1) * w];
            for (x, rx) in tx.iter().enumerate() {
                let top = (1.0 - rx.w) * r0[rx.i0] + rx.w * r0[rx.i1];
                let bot = (1.0 - rx.w) * r1[rx.i0] + rx.w * r1[rx.i1];
                dst[y * ow + x] = (1.0 - ry.w) * top + ry.w * bot;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back.
pub fn resize_bilinear_adjoint(
    grad_out: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return grad_out.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gin = vec![0.0; channels * h * w];
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut gin[c * h * w..(c + 1) * h * w];
        for (y, ry) in ty.iter().enumerate() {
            for (x, rx) in tx.iter().enumerate() {
                let v = g[y * ow + x];
                let top = (1.0 - ry.w) * v;
                let bot = ry.w * v;
                dst[ry.i0 * w + rx.i0] += (1.0 - rx.w) * top;
                dst[ry.i0 * w + rx.i1] += rx.w * top;
                dst[ry.i1 * w + rx.i0] += (1.0 - rx.w) * bot;
                dst[ry.i1 * w + rx.i1] += rx.w * bot;
            }
        }
    }
    gin
}
