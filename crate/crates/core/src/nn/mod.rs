//! A small CPU training engine: just the layers the sequence labeller
//! needs, each with a hand-written backward pass.
//!
//! Convolutional activations are stored channel-major (`C x N x H x W`) so a
//! 1x1 convolution over a whole batch is a single matrix product and batch
//! normalization statistics are contiguous per channel.

pub mod backbone;
pub mod kernels;
pub mod layers;
pub mod linear;
pub mod lstm;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Asks the system allocator to keep freed activation buffers instead of
/// unmapping them. Every training step allocates and frees tens of
/// megabytes; without this each buffer is page-faulted in afresh, which
/// costs more than the arithmetic that fills it.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator tuning parameters.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
                libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            }
        });
    }
}

/// A trainable weight array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn normal<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(name, shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, bound: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self::new(name, shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Non-trainable state saved with the weights (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

impl Buffer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Buffer {
            name: name.into(),
            shape,
            value,
        }
    }
}

/// Convolutional activation, channel-major: `data[c][n][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel across the batch.
    pub fn per_channel(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let m = self.per_channel();
        &self.data[c * m..(c + 1) * m]
    }

    /// Converts sample-major `n x c x h x w` pixels into channel-major layout.
    pub fn from_nchw(data: &[f32], n: usize, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), n * c * h * w);
        let plane = h * w;
        let mut out = Act::zeros(c, n, h, w);
        for img in 0..n {
            for ch in 0..c {
                let src = &data[(img * c + ch) * plane..(img * c + ch + 1) * plane];
                out.data[(ch * n + img) * plane..(ch * n + img + 1) * plane].copy_from_slice(src);
            }
        }
        out
    }
}

/// Visits every parameter of a model component.
pub trait Parameters {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_buffers<'a>(&'a self, _f: &mut dyn FnMut(&'a Buffer)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer)) {}
}
