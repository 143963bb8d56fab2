//! Convolution + batch normalization units of the convolutional backbone.

use rand::Rng;

use super::kernels::{
    conv3x3_out, depthwise_backward, depthwise_forward, im2col3x3, DwScratch, matmul, matmul_at, matmul_bt, wide_dot,
    wide_sq_dev, wide_sum,
};
use super::{Act, Buffer, Param, Parameters};

pub const BN_EPS: f32 = 1e-5;
/// Weight of the current batch when updating running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{prefix}.weight"), vec![channels], 1.0),
            beta: Param::zeros(format!("{prefix}.bias"), vec![channels]),
            running_mean: Buffer::new(format!("{prefix}.running_mean"), vec![channels], vec![0.0; channels]),
            running_var: Buffer::new(format!("{prefix}.running_var"), vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    /// Normalizes with batch statistics, updates the running statistics and
    /// caches what the backward pass needs. With `relu6` the activation is
    /// applied in the same pass.
    pub fn forward_train(&mut self, x: &mut Act, relu6: bool) {
        let m = x.per_channel();
        let mut xhat = Vec::with_capacity(x.data.len());
        let mut inv_std = vec![0.0f32; x.c];
        for c in 0..x.c {
            let xs = &mut x.data[c * m..(c + 1) * m];
            let mean = (wide_sum(xs) / m as f64) as f32;
            let var = (wide_sq_dev(xs, mean) / m as f64) as f32;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = istd;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            xhat.extend(xs.iter().map(|&v| (v - mean) * istd));
            let hi = if relu6 { 6.0 } else { f32::INFINITY };
            let lo = if relu6 { 0.0 } else { f32::NEG_INFINITY };
            for (v, &h) in xs.iter_mut().zip(&xhat[c * m..]) {
                *v = (g * h + b).max(lo).min(hi);
            }
            let unbiased = if m > 1 { var * m as f32 / (m - 1) as f32 } else { var };
            let rm = &mut self.running_mean.value[c];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
            let rv = &mut self.running_var.value[c];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
        }
        self.cache = Some(BnCache { xhat, inv_std });
    }

    pub fn forward_eval(&self, x: &mut Act, relu6: bool) {
        let m = x.per_channel();
        let hi = if relu6 { 6.0 } else { f32::INFINITY };
        let lo = if relu6 { 0.0 } else { f32::NEG_INFINITY };
        for c in 0..x.c {
            let istd = 1.0 / (self.running_var.value[c] + BN_EPS).sqrt();
            let scale = self.gamma.value[c] * istd;
            let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
            for v in &mut x.data[c * m..(c + 1) * m] {
                *v = (*v * scale + shift).max(lo).min(hi);
            }
        }
    }

    /// Turns `dy` into the gradient w.r.t. the normalization input, in place.
    /// With `relu6`, the activation mask is applied first.
    pub fn backward(&mut self, dy: &mut Act, relu6: bool) {
        let cache = self.cache.take().expect("batch-norm backward without forward");
        let m = dy.per_channel();
        let mf = m as f32;
        for c in 0..dy.c {
            let g = &mut dy.data[c * m..(c + 1) * m];
            let xh = &cache.xhat[c * m..(c + 1) * m];
            let (gamma, beta) = (self.gamma.value[c], self.beta.value[c]);
            if relu6 {
                for (gv, &h) in g.iter_mut().zip(xh) {
                    let y = gamma * h + beta;
                    if y <= 0.0 || y >= 6.0 {
                        *gv = 0.0;
                    }
                }
            }
            let (sum, dot) = (wide_sum(g), wide_dot(g, xh));
            self.beta.grad[c] += sum as f32;
            self.gamma.grad[c] += dot as f32;
            let k = gamma * cache.inv_std[c] / mf;
            let (sum, dot) = (sum as f32, dot as f32);
            for (gv, &h) in g.iter_mut().zip(xh) {
                *gv = k * (mf * *gv - sum - h * dot);
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Parameters for BatchNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Buffer)) {
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Dense 3x3 convolution, padding 1.
    Dense3x3,
    /// 1x1 convolution.
    Pointwise,
    /// Per-channel 3x3 convolution, padding 1.
    Depthwise3x3,
}

/// Bias-free convolution, batch normalization and optional ReLU6.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub relu6: bool,
    pub weight: Param,
    pub bn: BatchNorm,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
enum ConvCache {
    Input(Act),
    /// Unfolded input of a dense convolution plus the input geometry.
    Columns { cols: Vec<f32>, n: usize, h: usize, w: usize },
}

impl ConvBn {
    pub fn new<R: Rng + ?Sized>(
        kind: ConvKind,
        cin: usize,
        cout: usize,
        stride: usize,
        relu6: bool,
        conv_name: &str,
        bn_prefix: &str,
        rng: &mut R,
    ) -> Self {
        let shape = match kind {
            ConvKind::Dense3x3 => vec![cout, cin, 3, 3],
            ConvKind::Pointwise => vec![cout, cin, 1, 1],
            ConvKind::Depthwise3x3 => {
                assert_eq!(cin, cout, "depthwise convolution keeps the channel count");
                vec![cout, 1, 3, 3]
            }
        };
        // Kaiming-normal, fan-out mode
        let fan_out = shape[0] * shape[2] * shape[3];
        let std = (2.0 / fan_out as f32).sqrt();
        ConvBn {
            kind,
            cin,
            cout,
            stride,
            relu6,
            weight: Param::normal(format!("{conv_name}.weight"), shape, std, rng),
            bn: BatchNorm::new(bn_prefix, cout),
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Pointwise => ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1),
            _ => (conv3x3_out(h, self.stride), conv3x3_out(w, self.stride)),
        }
    }

    /// Multiply-accumulates per output frame at input size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        let per_out = match self.kind {
            ConvKind::Dense3x3 => self.cin * 9,
            ConvKind::Pointwise => self.cin,
            ConvKind::Depthwise3x3 => 9,
        };
        (ho * wo * self.cout * per_out) as u64
    }

    fn convolve(&self, x: &Act, keep_cols: bool) -> (Act, Option<Vec<f32>>) {
        assert_eq!(x.c, self.cin, "{}: channel mismatch", self.weight.name);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let mut y = Act::zeros(self.cout, x.n, ho, wo);
        match self.kind {
            ConvKind::Pointwise => {
                assert_eq!(self.stride, 1);
                let m = x.per_channel();
                matmul(self.cout, self.cin, m, &self.weight.value, &x.data, 0.0, &mut y.data);
                (y, None)
            }
            ConvKind::Dense3x3 => {
                let cols = im2col3x3(&x.data, x.c, x.n, x.h, x.w, self.stride);
                let m = y.per_channel();
                matmul(self.cout, self.cin * 9, m, &self.weight.value, &cols, 0.0, &mut y.data);
                (y, keep_cols.then_some(cols))
            }
            ConvKind::Depthwise3x3 => {
                let (cin, cout) = (x.per_channel(), y.per_channel());
                let mut scratch = DwScratch::default();
                for c in 0..x.c {
                    depthwise_forward(
                        &x.data[c * cin..(c + 1) * cin],
                        x.n,
                        x.h,
                        x.w,
                        &self.weight.value[c * 9..(c + 1) * 9],
                        self.stride,
                        &mut y.data[c * cout..(c + 1) * cout],
                        &mut scratch,
                    );
                }
                (y, None)
            }
        }
    }

    pub fn forward_eval(&self, x: &Act) -> Act {
        let (mut y, _) = self.convolve(x, false);
        self.bn.forward_eval(&mut y, self.relu6);
        y
    }

    /// Training-mode forward pass. The input is kept (not copied) for the
    /// backward pass.
    pub fn forward_train(&mut self, x: Act) -> Act {
        let (mut y, cols) = self.convolve(&x, true);
        self.cache = Some(match cols {
            Some(cols) => ConvCache::Columns {
                cols,
                n: x.n,
                h: x.h,
                w: x.w,
            },
            None => ConvCache::Input(x),
        });
        self.bn.forward_train(&mut y, self.relu6);
        y
    }

    /// Input of the last training forward pass, if it was kept whole.
    pub fn cached_input(&self) -> Option<&Act> {
        match &self.cache {
            Some(ConvCache::Input(x)) => Some(x),
            _ => None,
        }
    }

    /// Accumulates weight gradients; returns the input gradient if asked.
    pub fn backward(&mut self, mut dy: Act, need_dx: bool) -> Option<Act> {
        self.bn.backward(&mut dy, self.relu6);
        let cache = self.cache.take().expect("conv backward without forward");
        match (self.kind, cache) {
            (ConvKind::Pointwise, ConvCache::Input(x)) => {
                let m = x.per_channel();
                // dW += dY * X^T
                matmul_bt(self.cout, m, self.cin, &dy.data, &x.data, 1.0, &mut self.weight.grad);
                need_dx.then(|| {
                    let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
                    matmul_at(self.cin, self.cout, m, &self.weight.value, &dy.data, 0.0, &mut dx.data);
                    dx
                })
            }
            (ConvKind::Dense3x3, ConvCache::Columns { cols, n, h, w }) => {
                let m = dy.per_channel();
                matmul_bt(self.cout, m, self.cin * 9, &dy.data, &cols, 1.0, &mut self.weight.grad);
                need_dx.then(|| {
                    let mut dcols = vec![0.0; self.cin * 9 * m];
                    matmul_at(self.cin * 9, self.cout, m, &self.weight.value, &dy.data, 0.0, &mut dcols);
                    col2im3x3(&dcols, self.cin, n, h, w, self.stride)
                })
            }
            (ConvKind::Depthwise3x3, ConvCache::Input(x)) => {
                let mut dx = need_dx.then(|| Act::zeros(x.c, x.n, x.h, x.w));
                let (cin, cout) = (x.per_channel(), dy.per_channel());
                let mut scratch = DwScratch::default();
                for c in 0..x.c {
                    depthwise_backward(
                        &x.data[c * cin..(c + 1) * cin],
                        x.n,
                        x.h,
                        x.w,
                        &self.weight.value[c * 9..(c + 1) * 9],
                        self.stride,
                        &dy.data[c * cout..(c + 1) * cout],
                        &mut self.weight.grad[c * 9..(c + 1) * 9],
                        dx.as_mut().map(|d| &mut d.data[c * cin..(c + 1) * cin]),
                        &mut scratch,
                    );
                }
                dx
            }
            _ => unreachable!("cache kind matches convolution kind"),
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.bn.clear_cache();
    }
}

/// Adjoint of [`im2col3x3`].
fn col2im3x3(cols: &[f32], cin: usize, n: usize, h: usize, w: usize, stride: usize) -> Act {
    let (ho, wo) = (conv3x3_out(h, stride), conv3x3_out(w, stride));
    let cols_n = n * ho * wo;
    let mut dx = Act::zeros(cin, n, h, w);
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * cols_n..((c * 9) + ky * 3 + kx + 1) * cols_n];
                for img in 0..n {
                    let plane = &mut dx.data[(c * n + img) * h * w..(c * n + img + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[(img * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Parameters for ConvBn {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        self.bn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bn.visit_params_mut(f);
    }
    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Buffer)) {
        self.bn.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.bn.visit_buffers_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_act(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> Act {
        let mut a = Act::zeros(c, n, h, w);
        for v in &mut a.data {
            *v = rng.random_range(-1.0..1.0);
        }
        a
    }

    /// Loss = sum(out * probe); checks every weight, BN and input gradient
    /// against central differences in f64-accumulated form.
    fn check_unit(kind: ConvKind, cin: usize, cout: usize, stride: usize, relu6: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut unit = ConvBn::new(kind, cin, cout, stride, relu6, "c", "b", &mut rng);
        for v in unit.bn.beta.value.iter_mut() {
            *v = rng.random_range(0.5..1.0);
        }
        let x = rand_act(&mut rng, cin, 2, 5, 4);
        let probe_len = unit.forward_eval(&x).data.len();
        let probe: Vec<f32> = (0..probe_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |u: &ConvBn, x: &Act| -> f64 {
            let mut u = u.clone();
            let y = u.forward_train(x.clone());
            y.data.iter().zip(&probe).map(|(a, b)| *a as f64 * *b as f64).sum()
        };

        let mut u = unit.clone();
        let y = u.forward_train(x.clone());
        let dy = Act {
            data: probe.clone(),
            ..y
        };
        let dx = u.backward(dy, true).unwrap();

        // small enough that perturbations rarely straddle a ReLU6 kink
        let eps = 2e-3f32;
        let tol = |fd: f64, an: f32| (fd - an as f64).abs() <= 2e-2 * (1.0 + fd.abs());
        for i in (0..unit.weight.numel()).step_by(3) {
            let (mut p, mut m) = (unit.clone(), unit.clone());
            p.weight.value[i] += eps;
            m.weight.value[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps as f64);
            assert!(tol(fd, u.weight.grad[i]), "{kind:?} dW[{i}]: fd {fd} vs {}", u.weight.grad[i]);
        }
        for c in 0..cout {
            let (mut p, mut m) = (unit.clone(), unit.clone());
            p.bn.gamma.value[c] += eps;
            m.bn.gamma.value[c] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps as f64);
            assert!(tol(fd, u.bn.gamma.grad[c]), "{kind:?} dgamma[{c}]");
        }
        for i in (0..x.data.len()).step_by(5) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += eps;
            xm.data[i] -= eps;
            let fd = (loss(&unit, &xp) - loss(&unit, &xm)) / (2.0 * eps as f64);
            assert!(tol(fd, dx.data[i]), "{kind:?} dx[{i}]: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn pointwise_gradients() {
        check_unit(ConvKind::Pointwise, 3, 4, 1, false);
    }

    #[test]
    fn depthwise_gradients_with_relu6() {
        check_unit(ConvKind::Depthwise3x3, 3, 3, 2, true);
    }

    #[test]
    fn depthwise_gradients_linear() {
        check_unit(ConvKind::Depthwise3x3, 3, 3, 2, false);
    }

    #[test]
    fn depthwise_gradients_stride1() {
        check_unit(ConvKind::Depthwise3x3, 3, 3, 1, false);
    }

    #[test]
    fn dense_gradients() {
        check_unit(ConvKind::Dense3x3, 2, 3, 2, true);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::new("b", 1);
        let mut x = Act::zeros(1, 1, 1, 4);
        x.data = vec![1.0, 2.0, 3.0, 4.0];
        bn.forward_train(&mut x, false);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        let _ = rand_act(&mut rng, 1, 1, 1, 1);
    }
}
