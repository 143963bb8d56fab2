//! Dense numeric kernels on channel-major buffers.

/// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
///
/// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `m x k` times row-major `k x n` into row-major `m x n`.
#[inline]
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    gemm(m, k, n, 1.0, a, (k, 1), b, (n, 1), beta, c, (n, 1));
}

/// Row-major `m x k` times the transpose of row-major `n x k`.
#[inline]
pub fn matmul_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    gemm(m, k, n, 1.0, a, (k, 1), b, (1, k), beta, c, (n, 1));
}

/// Transpose of row-major `k x m` times row-major `k x n`.
#[inline]
pub fn matmul_at(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    gemm(m, k, n, 1.0, a, (1, m), b, (n, 1), beta, c, (n, 1));
}

const LANES: usize = 8;
const BLOCK: usize = 4096;

/// Sum with independent accumulators so the loop vectorizes.
#[inline]
pub fn lane_sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] += c[i];
        }
    }
    acc.iter().sum::<f32>() + rest.iter().sum::<f32>()
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Long sums: vectorized `f32` blocks folded into an `f64` total.
pub fn wide_sum(xs: &[f32]) -> f64 {
    xs.chunks(BLOCK).map(|c| lane_sum(c) as f64).sum()
}

pub fn wide_dot(a: &[f32], b: &[f32]) -> f64 {
    a.chunks(BLOCK).zip(b.chunks(BLOCK)).map(|(x, y)| dot(x, y) as f64).sum()
}

/// `sum((x - mean)^2)` in the same blocked fashion.
pub fn wide_sq_dev(xs: &[f32], mean: f32) -> f64 {
    xs.chunks(BLOCK)
        .map(|c| {
            let mut acc = [0.0f32; LANES];
            let chunks = c.chunks_exact(LANES);
            let tail: f32 = chunks.remainder().iter().map(|v| (v - mean) * (v - mean)).sum();
            for ch in chunks {
                for i in 0..LANES {
                    let d = ch[i] - mean;
                    acc[i] += d * d;
                }
            }
            (acc.iter().sum::<f32>() + tail) as f64
        })
        .sum()
}

/// Output extent of a 3x3, padding-1 convolution.
#[inline]
pub fn conv3x3_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Reusable buffers for the depthwise kernels.
#[derive(Debug, Default)]
pub struct DwScratch {
    padded: Vec<f32>,
    acc: Vec<f32>,
    dpadded: Vec<f32>,
}

/// Copies `n` stacked `h x w` planes into the interiors of zeroed
/// `(h+2) x (w+2)` planes, followed by `tail` extra zeros.
fn pad_stack(src: &[f32], n: usize, h: usize, w: usize, tail: usize, dst: &mut Vec<f32>) {
    let (hp, pw) = (h + 2, w + 2);
    dst.clear();
    dst.resize(n * hp * pw + tail, 0.0);
    for img in 0..n {
        for y in 0..h {
            let d = img * hp * pw + (y + 1) * pw + 1;
            dst[d..d + w].copy_from_slice(&src[(img * h + y) * w..(img * h + y + 1) * w]);
        }
    }
}

#[inline]
fn axpy(k: f32, src: &[f32], dst: &mut [f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// 3x3 per-plane convolution (padding 1) of `n` stacked planes sharing one
/// kernel.
///
/// All planes are padded into one flat buffer so each tap becomes a single
/// long multiply-add over the whole stack; outputs are then gathered from
/// the strided positions. Small planes would otherwise be dominated by
/// per-plane loop overhead.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_forward(
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    kernel: &[f32],
    stride: usize,
    y: &mut [f32],
    s: &mut DwScratch,
) {
    let (ho, wo) = (conv3x3_out(h, stride), conv3x3_out(w, stride));
    let (hp, pw) = (h + 2, w + 2);
    let len = n * hp * pw;
    pad_stack(x, n, h, w, 2 * pw + 2, &mut s.padded);
    s.acc.clear();
    s.acc.resize(len, 0.0);
    for ky in 0..3 {
        for kx in 0..3 {
            let off = ky * pw + kx;
            axpy(kernel[ky * 3 + kx], &s.padded[off..off + len], &mut s.acc);
        }
    }
    for img in 0..n {
        for oy in 0..ho {
            let row = img * hp * pw + oy * stride * pw;
            let dst = &mut y[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = s.acc[row + ox * stride];
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]: accumulates into `dkernel` and, when
/// given, overwrites `dx`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    kernel: &[f32],
    stride: usize,
    dy: &[f32],
    dkernel: &mut [f32],
    dx: Option<&mut [f32]>,
    s: &mut DwScratch,
) {
    let (ho, wo) = (conv3x3_out(h, stride), conv3x3_out(w, stride));
    let (hp, pw) = (h + 2, w + 2);
    let len = n * hp * pw;
    let tail = 2 * pw + 2;
    pad_stack(x, n, h, w, tail, &mut s.padded);
    // scatter dy onto the top-left corners of the receptive fields
    s.acc.clear();
    s.acc.resize(len, 0.0);
    for img in 0..n {
        for oy in 0..ho {
            let row = img * hp * pw + oy * stride * pw;
            let src = &dy[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
            for (ox, g) in src.iter().enumerate() {
                s.acc[row + ox * stride] = *g;
            }
        }
    }
    for ky in 0..3 {
        for kx in 0..3 {
            let off = ky * pw + kx;
            dkernel[ky * 3 + kx] += wide_dot(&s.acc, &s.padded[off..off + len]) as f32;
        }
    }
    if let Some(dx) = dx {
        s.dpadded.clear();
        s.dpadded.resize(len + tail, 0.0);
        for ky in 0..3 {
            for kx in 0..3 {
                let off = ky * pw + kx;
                axpy(kernel[ky * 3 + kx], &s.acc, &mut s.dpadded[off..off + len]);
            }
        }
        for img in 0..n {
            for yy in 0..h {
                let src = img * hp * pw + (yy + 1) * pw + 1;
                dx[(img * h + yy) * w..(img * h + yy + 1) * w].copy_from_slice(&s.dpadded[src..src + w]);
            }
        }
    }
}

/// Unfolds a channel-major `cin x n x h x w` input into a
/// `(cin*9) x (n*ho*wo)` column matrix for a 3x3, padding-1 convolution.
pub fn im2col3x3(x: &[f32], cin: usize, n: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (ho, wo) = (conv3x3_out(h, stride), conv3x3_out(w, stride));
    let cols_n = n * ho * wo;
    let mut cols = vec![0.0f32; cin * 9 * cols_n];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * cols_n..((c * 9) + ky * 3 + kx + 1) * cols_n];
                for img in 0..n {
                    let plane = &x[(c * n + img) * h * w..(c * n + img + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
