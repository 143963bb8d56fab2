use rand::Rng;

use super::kernels::{matmul, matmul_at, matmul_bt};
use super::{Param, Parameters};

/// Fully-connected layer applied independently to every row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input_cache: Option<Vec<f32>>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f32).sqrt();
        Linear {
            weight: Param::uniform(format!("{prefix}.weight"), vec![output, input], bound, rng),
            bias: Param::zeros(format!("{prefix}.bias"), vec![output]),
            input_cache: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward_eval(&self, x: &[f32]) -> Vec<f32> {
        let (i, o) = (self.input_dim(), self.output_dim());
        let rows = x.len() / i;
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        matmul_bt(rows, i, o, x, &self.weight.value, 1.0, &mut y);
        y
    }

    pub fn forward_train(&mut self, x: &[f32]) -> Vec<f32> {
        let y = self.forward_eval(x);
        self.input_cache = Some(x.to_vec());
        y
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let x = self.input_cache.take().expect("linear backward without forward");
        let (i, o) = (self.input_dim(), self.output_dim());
        let rows = x.len() / i;
        matmul_at(o, rows, i, dy, &x, 1.0, &mut self.weight.grad);
        for row in dy.chunks_exact(o) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = vec![0.0; rows * i];
        matmul(rows, o, i, dy, &self.weight.value, 0.0, &mut dx);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.input_cache = None;
    }
}

impl Parameters for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::new("fc", 3, 2, &mut rng);
        let x = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let y = lin.forward_train(&x);
        assert_eq!(y.len(), 4);
        let dy = vec![1.0, 0.0, 0.0, 1.0];
        let dx = lin.backward(&dy);
        // dW[o][i] = sum_rows dy[r][o] * x[r][i]
        assert_eq!(&lin.weight.grad[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(&lin.weight.grad[3..], &[-1.0, 0.5, 0.0]);
        assert_eq!(lin.bias.grad, vec![1.0, 1.0]);
        assert_eq!(&dx[..3], &lin.weight.value[..3]);
    }

    #[test]
    fn xavier_bound_respected() {
        let lin = Linear::new("fc", 512, 9, &mut ChaCha8Rng::seed_from_u64(0));
        let bound = (6.0f32 / 521.0).sqrt();
        assert!(lin.weight.value.iter().all(|v| v.abs() <= bound));
    }
}
