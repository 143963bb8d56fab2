//! Multi-layer, optionally bidirectional LSTM over `B x T x I` sequences.
//!
//! Gate order and parameter names match the usual `weight_ih_l{k}` /
//! `weight_hh_l{k}` / `bias_ih_l{k}` / `bias_hh_l{k}` convention (gates
//! `i, f, g, o`; `_reverse` suffix for the backward direction).

use rand::Rng;

use super::kernels::{matmul, matmul_at, matmul_bt, sigmoid};
use super::{Param, Parameters};

#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w_ih: Param,
    pub w_hh: Param,
    pub b_ih: Param,
    pub b_hh: Param,
    pub reverse: bool,
    cache: Option<DirCache>,
}

/// Per-step state kept for back-propagation through time; rows are `(b, t)`.
#[derive(Debug, Clone)]
struct DirCache {
    /// Activated gates `i, f, g, o`, `4H` per row.
    gates: Vec<f32>,
    cell: Vec<f32>,
    tanh_cell: Vec<f32>,
    hidden: Vec<f32>,
}

impl LstmDirection {
    fn new<R: Rng + ?Sized>(prefix: &str, suffix: &str, input: usize, hidden: usize, reverse: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        LstmDirection {
            w_ih: Param::uniform(format!("{prefix}.weight_ih_{suffix}"), vec![4 * hidden, input], bound, rng),
            w_hh: Param::uniform(format!("{prefix}.weight_hh_{suffix}"), vec![4 * hidden, hidden], bound, rng),
            b_ih: Param::uniform(format!("{prefix}.bias_ih_{suffix}"), vec![4 * hidden], bound, rng),
            b_hh: Param::uniform(format!("{prefix}.bias_hh_{suffix}"), vec![4 * hidden], bound, rng),
            reverse,
            cache: None,
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.shape[1]
    }

    fn input(&self) -> usize {
        self.w_ih.shape[1]
    }

    fn step_order(&self, t_len: usize) -> impl Iterator<Item = usize> {
        let reverse = self.reverse;
        (0..t_len).map(move |s| if reverse { t_len - 1 - s } else { s })
    }

    /// Writes this direction's hidden states into columns
    /// `[offset, offset + H)` of `out` (row width `stride`).
    #[allow(clippy::too_many_arguments)]
    fn forward(&self, x: &[f32], b: usize, t_len: usize, out: &mut [f32], offset: usize, stride: usize, keep: bool) -> Option<DirCache> {
        let (h, i_dim) = (self.hidden(), self.input());
        let g4 = 4 * h;
        let rows = b * t_len;
        let mut pre = vec![0.0f32; rows * g4];
        matmul_bt(rows, i_dim, g4, x, &self.w_ih.value, 0.0, &mut pre);
        for row in pre.chunks_exact_mut(g4) {
            for ((v, bi), bh) in row.iter_mut().zip(&self.b_ih.value).zip(&self.b_hh.value) {
                *v += bi + bh;
            }
        }

        let mut cache = keep.then(|| DirCache {
            gates: vec![0.0; rows * g4],
            cell: vec![0.0; rows * h],
            tanh_cell: vec![0.0; rows * h],
            hidden: vec![0.0; rows * h],
        });
        let mut h_prev = vec![0.0f32; b * h];
        let mut c_prev = vec![0.0f32; b * h];
        let mut g = vec![0.0f32; b * g4];
        for t in self.step_order(t_len) {
            for bi in 0..b {
                let r = bi * t_len + t;
                g[bi * g4..(bi + 1) * g4].copy_from_slice(&pre[r * g4..(r + 1) * g4]);
            }
            matmul_bt(b, h, g4, &h_prev, &self.w_hh.value, 1.0, &mut g);
            for bi in 0..b {
                let r = bi * t_len + t;
                let gr = &mut g[bi * g4..(bi + 1) * g4];
                for j in 0..h {
                    let ig = sigmoid(gr[j]);
                    let fg = sigmoid(gr[h + j]);
                    let gg = gr[2 * h + j].tanh();
                    let og = sigmoid(gr[3 * h + j]);
                    let c = fg * c_prev[bi * h + j] + ig * gg;
                    let tc = c.tanh();
                    let hv = og * tc;
                    c_prev[bi * h + j] = c;
                    h_prev[bi * h + j] = hv;
                    out[r * stride + offset + j] = hv;
                    if let Some(cache) = cache.as_mut() {
                        let gates = &mut cache.gates[r * g4..(r + 1) * g4];
                        gates[j] = ig;
                        gates[h + j] = fg;
                        gates[2 * h + j] = gg;
                        gates[3 * h + j] = og;
                        cache.cell[r * h + j] = c;
                        cache.tanh_cell[r * h + j] = tc;
                        cache.hidden[r * h + j] = hv;
                    }
                }
            }
        }
        cache
    }

    /// Back-propagation through time. `dout` holds this direction's output
    /// gradient in columns `[offset, offset + H)`; the input gradient is
    /// accumulated into `dx` when given.
    #[allow(clippy::too_many_arguments)]
    fn backward(&mut self, x: &[f32], b: usize, t_len: usize, dout: &[f32], offset: usize, stride: usize, dx: Option<&mut [f32]>) {
        let cache = self.cache.take().expect("lstm backward without forward");
        let (h, i_dim) = (self.hidden(), self.input());
        let g4 = 4 * h;
        let rows = b * t_len;
        let mut dgates = vec![0.0f32; rows * g4];
        // h_{t-1} per row, in processing order
        let mut h_prev_rows = vec![0.0f32; rows * h];
        let order: Vec<usize> = self.step_order(t_len).collect();
        for (s, &t) in order.iter().enumerate().skip(1) {
            let tp = order[s - 1];
            for bi in 0..b {
                let (r, rp) = (bi * t_len + t, bi * t_len + tp);
                h_prev_rows[r * h..(r + 1) * h].copy_from_slice(&cache.hidden[rp * h..(rp + 1) * h]);
            }
        }

        let mut dh_next = vec![0.0f32; b * h];
        let mut dc_next = vec![0.0f32; b * h];
        let mut dg_step = vec![0.0f32; b * g4];
        for s in (0..t_len).rev() {
            let t = order[s];
            let prev = (s > 0).then(|| order[s - 1]);
            for bi in 0..b {
                let r = bi * t_len + t;
                let gates = &cache.gates[r * g4..(r + 1) * g4];
                let dg = &mut dg_step[bi * g4..(bi + 1) * g4];
                for j in 0..h {
                    let (ig, fg, gg, og) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let tc = cache.tanh_cell[r * h + j];
                    let c_prev = prev.map_or(0.0, |tp| cache.cell[(bi * t_len + tp) * h + j]);
                    let dh = dout[r * stride + offset + j] + dh_next[bi * h + j];
                    let d_o = dh * tc;
                    let dc = dh * og * (1.0 - tc * tc) + dc_next[bi * h + j];
                    dc_next[bi * h + j] = dc * fg;
                    dg[j] = dc * gg * ig * (1.0 - ig);
                    dg[h + j] = dc * c_prev * fg * (1.0 - fg);
                    dg[2 * h + j] = dc * ig * (1.0 - gg * gg);
                    dg[3 * h + j] = d_o * og * (1.0 - og);
                }
                dgates[r * g4..(r + 1) * g4].copy_from_slice(dg);
            }
            matmul(b, g4, h, &dg_step, &self.w_hh.value, 0.0, &mut dh_next);
        }

        matmul_at(g4, rows, i_dim, &dgates, x, 1.0, &mut self.w_ih.grad);
        matmul_at(g4, rows, h, &dgates, &h_prev_rows, 1.0, &mut self.w_hh.grad);
        for row in dgates.chunks_exact(g4) {
            for ((bi, bh), v) in self.b_ih.grad.iter_mut().zip(self.b_hh.grad.iter_mut()).zip(row) {
                *bi += v;
                *bh += v;
            }
        }
        if let Some(dx) = dx {
            matmul(rows, g4, i_dim, &dgates, &self.w_ih.value, 1.0, dx);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub directions: Vec<LstmDirection>,
    input_cache: Option<Vec<f32>>,
}

impl LstmLayer {
    pub fn input_dim(&self) -> usize {
        self.directions[0].input()
    }

    pub fn output_dim(&self) -> usize {
        self.directions.len() * self.directions[0].hidden()
    }
}

/// Stack of LSTM layers; outputs of both directions are concatenated.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, num_layers: usize, bidirectional: bool, rng: &mut R) -> Self {
        let dirs = if bidirectional { 2 } else { 1 };
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden * dirs };
                let mut directions = vec![LstmDirection::new(prefix, &format!("l{l}"), in_dim, hidden, false, rng)];
                if bidirectional {
                    directions.push(LstmDirection::new(prefix, &format!("l{l}_reverse"), in_dim, hidden, true, rng));
                }
                LstmLayer {
                    directions,
                    input_cache: None,
                }
            })
            .collect();
        Lstm { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LstmLayer::output_dim)
    }

    fn layer_forward(layer: &LstmLayer, x: &[f32], b: usize, t_len: usize, keep: bool) -> (Vec<f32>, Vec<Option<DirCache>>) {
        let width = layer.output_dim();
        let hid = layer.directions[0].hidden();
        let mut out = vec![0.0f32; b * t_len * width];
        let caches = layer
            .directions
            .iter()
            .enumerate()
            .map(|(k, dir)| dir.forward(x, b, t_len, &mut out, k * hid, width, keep))
            .collect();
        (out, caches)
    }

    pub fn forward_eval(&self, x: &[f32], b: usize, t_len: usize) -> Vec<f32> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = Self::layer_forward(layer, &h, b, t_len, false).0;
        }
        h
    }

    pub fn forward_train(&mut self, x: &[f32], b: usize, t_len: usize) -> Vec<f32> {
        let mut h = x.to_vec();
        for layer in &mut self.layers {
            let (out, caches) = Self::layer_forward(layer, &h, b, t_len, true);
            for (dir, cache) in layer.directions.iter_mut().zip(caches) {
                dir.cache = cache;
            }
            layer.input_cache = Some(std::mem::replace(&mut h, out));
        }
        h
    }

    /// Returns the gradient w.r.t. the sequence input when `need_dx`.
    pub fn backward(&mut self, dout: &[f32], b: usize, t_len: usize, need_dx: bool) -> Option<Vec<f32>> {
        let mut g = dout.to_vec();
        for (li, layer) in self.layers.iter_mut().enumerate().rev() {
            let x = layer.input_cache.take().expect("lstm backward without forward");
            let width = layer.output_dim();
            let hid = layer.directions[0].hidden();
            let want = li > 0 || need_dx;
            let mut dx = want.then(|| vec![0.0f32; x.len()]);
            for (k, dir) in layer.directions.iter_mut().enumerate() {
                dir.backward(&x, b, t_len, &g, k * hid, width, dx.as_deref_mut());
            }
            g = dx?;
        }
        Some(g)
    }

    /// Multiply-accumulates per frame.
    pub fn macs_per_frame(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| &l.directions)
            .map(|d| (4 * d.hidden() * (d.input() + d.hidden())) as u64)
            .sum()
    }

    pub fn clear_cache(&mut self) {
        for l in &mut self.layers {
            l.input_cache = None;
            for d in &mut l.directions {
                d.cache = None;
            }
        }
    }
}

impl Parameters for Lstm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for d in self.layers.iter().flat_map(|l| &l.directions) {
            f(&d.w_ih);
            f(&d.w_hh);
            f(&d.b_ih);
            f(&d.b_hh);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for d in self.layers.iter_mut().flat_map(|l| &mut l.directions) {
            f(&mut d.w_ih);
            f(&mut d.w_hh);
            f(&mut d.b_ih);
            f(&mut d.b_hh);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(bidirectional: bool, layers: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, t, i, h) = (2, 4, 3, 3);
        let lstm = Lstm::new("rnn", i, h, layers, bidirectional, &mut rng);
        let x: Vec<f32> = (0..b * t * i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f32> = (0..b * t * lstm.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |l: &Lstm, x: &[f32]| -> f64 {
            l.forward_eval(x, b, t).iter().zip(&probe).map(|(a, p)| *a as f64 * *p as f64).sum()
        };
        let mut l = lstm.clone();
        let out = l.forward_train(&x, b, t);
        assert_eq!(out, lstm.forward_eval(&x, b, t));
        let dx = l.backward(&probe, b, t, true).unwrap();

        let eps = 1e-2f32;
        let close = |fd: f64, an: f32| (fd - an as f64).abs() < 2e-3 * (1.0 + fd.abs());
        let mut grads = Vec::new();
        l.visit_params(&mut |p| grads.push(p.grad.clone()));
        let n_params = grads.len();
        for pi in 0..n_params {
            let len = grads[pi].len();
            for k in (0..len).step_by(7) {
                let perturb = |delta: f32| {
                    let mut c = lstm.clone();
                    let mut idx = 0;
                    c.visit_params_mut(&mut |p| {
                        if idx == pi {
                            p.value[k] += delta;
                        }
                        idx += 1;
                    });
                    loss(&c, &x)
                };
                let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps as f64);
                assert!(close(fd, grads[pi][k]), "param {pi}[{k}]: fd {fd} vs {}", grads[pi][k]);
            }
        }
        for k in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += eps;
            xm[k] -= eps;
            let fd = (loss(&lstm, &xp) - loss(&lstm, &xm)) / (2.0 * eps as f64);
            assert!(close(fd, dx[k]), "dx[{k}]");
        }
    }

    #[test]
    fn unidirectional_gradients() {
        check(false, 1);
    }

    #[test]
    fn bidirectional_two_layer_gradients() {
        check(true, 2);
    }

    #[test]
    fn parameter_count_formula() {
        let l = Lstm::new("rnn", 1280, 256, 1, true, &mut ChaCha8Rng::seed_from_u64(0));
        let mut n = 0;
        l.visit_params(&mut |p| n += p.numel());
        assert_eq!(n, 2 * 4 * 256 * (1280 + 256 + 2));
    }
}
