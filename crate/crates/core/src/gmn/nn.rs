//! Dense layers with explicit forward caches and hand-written backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-r..=r));
        Linear {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub(crate) fn slices(&self) -> [&[f64]; 2] {
        [
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Stack of linear layers with `tanh` between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs seen by each layer during a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Mlp {
            layers: sizes
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_dim()];
        s.extend(self.layers.iter().map(Linear::out_dim));
        s
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&cur);
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(cur);
            cur = z;
        }
        (cur, MlpCache { inputs })
    }

    pub fn backward(&self, cache: &MlpCache, dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut dz = dy;
        for k in (0..self.layers.len()).rev() {
            let x = &cache.inputs[k];
            let mut dx = self.layers[k].backward(x, &dz, &mut grad.layers[k]);
            if k > 0 {
                // x = tanh(z_{k-1}); d tanh = 1 - tanh^2
                dx.zip_mut_with(x, |d, &a| *d *= 1.0 - a * a);
            }
            dz = dx;
        }
        dz
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

/// Row-wise softmax.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        let a = softmax_rows(&s);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((a[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::init(12, 32, &mut rng);
        let r = (6.0f64 / 44.0).sqrt();
        assert!(l.w.iter().all(|v| v.abs() <= r));
        assert!(l.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::init(&[3, 5, 2], &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
        // L = sum(y * c)
        let c = Array2::from_shape_fn((4, 2), |(i, j)| 0.5 + i as f64 * 0.1 - j as f64 * 0.7);
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.clone()).0 * &c).sum();
        let (_, cache) = mlp.forward(x.clone());
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&cache, c.clone(), &mut grad);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-8);
            }
        }
        let mut m2 = mlp.clone();
        m2.layers[0].w[[1, 2]] += eps;
        let mut m3 = mlp.clone();
        m3.layers[0].w[[1, 2]] -= eps;
        let fd = (loss(&m2, &x) - loss(&m3, &x)) / (2.0 * eps);
        assert!((fd - grad.layers[0].w[[1, 2]]).abs() < 1e-8);
    }
}
