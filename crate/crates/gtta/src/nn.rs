//! Minimal dense/conv layer stack with hand-written backward passes.
//!
//! Everything runs in `f64` on CPU. Layers cache whatever their backward
//! pass needs and return parameter gradients as flat vectors so that the
//! optimizer, checkpointing and finite-difference tests can all share one
//! layout: the order in which `params_flat` emits values.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GttaError, Result};

/// Floor applied to every standard deviation before division.
pub const STD_EPS: f64 = 1e-5;

pub type Tensor4 = Array4<f64>;

/// Derives a stream-local RNG from a base seed and a few indices.
/// splitmix64 over the concatenated words, so nearby keys decorrelate.
pub fn seeded_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    for &s in stream {
        state ^= s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        state = splitmix64(state);
    }
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// im2col for 3x3 / stride 1 / pad 1 convolutions
// ---------------------------------------------------------------------------

fn im2col3(x: &Tensor4) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * 9, n * h * w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let mut out_row = cols.row_mut(row);
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = ni * h * w + y * w;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out_row[base + xx] = x[[ni, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let mut x = Tensor4::zeros((n, c, h, w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = cols.row(ci * 9 + ky * 3 + kx);
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = ni * h * w + y * w;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[[ni, ci, sy as usize, sx as usize]] += row[base + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Conv2d (3x3, stride 1, same padding)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, 3, 3)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

pub struct ConvCache {
    cols: Array2<f64>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        // He initialization for ReLU nets
        let scale = (2.0 / (in_ch as f64 * 9.0)).sqrt();
        let weight =
            Array4::from_shape_simple_fn((out_ch, in_ch, 3, 3), || normal_sample(rng) * scale);
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Tensor4) -> (Tensor4, ConvCache) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.weight.dim().1);
        let o = self.out_channels();
        let cols = im2col3(x);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((o, c * 9))
            .expect("contiguous conv weight");
        let mut y_mat = w_mat.dot(&cols); // (O, N*H*W)
        for (mut row, &b) in y_mat.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let y = y_mat
            .into_shape_with_order((o, n, h, w))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                cols,
                input_dim: (n, c, h, w),
            },
        )
    }

    /// Returns (grad_input, grad_weight_flat ++ grad_bias_flat order handled by caller).
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_y: &Tensor4,
    ) -> (Tensor4, Array4<f64>, Array1<f64>) {
        let (n, c, h, w) = cache.input_dim;
        let o = self.out_channels();
        let gy_mat = grad_y
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((o, n * h * w))
            .unwrap();
        let grad_w = gy_mat
            .dot(&cache.cols.t())
            .into_shape_with_order((o, c, 3, 3))
            .unwrap();
        let grad_b = gy_mat.sum_axis(Axis(1));
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((o, c * 9))
            .unwrap();
        let grad_cols = w_mat.t().dot(&gy_mat);
        let grad_x = col2im3(&grad_cols, n, c, h, w);
        (grad_x, grad_w, grad_b)
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids pulling in a distribution crate for one call site.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-layer channel statistics (mean and standard deviation, not variance).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LayerStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_std: Array1<f64>,
}

/// How the normalization statistics are obtained for a forward pass.
pub enum BnStats<'a> {
    /// Compute mean/std from the current batch (train-mode semantics).
    Batch,
    /// Use the layer's stored running statistics.
    Running,
    /// Use externally supplied statistics (interpolated / EMA variants).
    Fixed(&'a LayerStats),
}

pub struct BnCache {
    pub xhat: Tensor4,
    pub std_used: Array1<f64>,
    /// true when statistics were computed from the batch (full backward)
    pub batch_mode: bool,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_std: Array1::ones(ch),
        }
    }

    /// Per-channel mean/std of the input (pre-normalization activations).
    pub fn batch_moments(x: &Tensor4) -> (Array1<f64>, Array1<f64>) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut std = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let m = ch.sum() / count;
            let v = ch.iter().map(|&e| (e - m) * (e - m)).sum::<f64>() / count;
            mean[ci] = m;
            std[ci] = v.sqrt().max(STD_EPS);
        }
        (mean, std)
    }

    pub fn forward(&self, x: &Tensor4, stats: BnStats) -> (Tensor4, BnCache) {
        let (mean, std, batch_mode) = match stats {
            BnStats::Batch => {
                let (m, s) = Self::batch_moments(x);
                (m, s, true)
            }
            BnStats::Running => (self.running_mean.clone(), self.running_std.clone(), false),
            BnStats::Fixed(ls) => (
                Array1::from_vec(ls.mean.clone()),
                Array1::from_vec(ls.std.clone()).mapv(|s| s.max(STD_EPS)),
                false,
            ),
        };
        let (n, c, h, w) = x.dim();
        let mut xhat = Tensor4::zeros((n, c, h, w));
        for ci in 0..c {
            let m = mean[ci];
            let s = std[ci];
            let src = x.index_axis(Axis(1), ci);
            let mut dst = xhat.index_axis_mut(Axis(1), ci);
            dst.assign(&src.mapv(|e| (e - m) / s));
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|e| e * g + b);
        }
        (
            y,
            BnCache {
                xhat,
                std_used: std,
                batch_mode,
            },
        )
    }

    /// Returns (grad_input, grad_gamma, grad_beta).
    pub fn backward(
        &self,
        cache: &BnCache,
        grad_y: &Tensor4,
    ) -> (Tensor4, Array1<f64>, Array1<f64>) {
        let (n, c, h, w) = grad_y.dim();
        let count = (n * h * w) as f64;
        let mut grad_x = Tensor4::zeros((n, c, h, w));
        let mut grad_gamma = Array1::<f64>::zeros(c);
        let mut grad_beta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let gy = grad_y.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let g = self.gamma[ci];
            let s = cache.std_used[ci];
            grad_gamma[ci] = gy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            grad_beta[ci] = gy.sum();
            let mut gx = grad_x.index_axis_mut(Axis(1), ci);
            if cache.batch_mode {
                let mean_gy = grad_beta[ci] / count;
                let mean_gy_xh = grad_gamma[ci] / count;
                // dL/dx = gamma/std * (gy - mean(gy) - xhat * mean(gy*xhat))
                for ((d, &a), &b) in gx.iter_mut().zip(gy.iter()).zip(xh.iter()) {
                    *d = g / s * (a - mean_gy - b * mean_gy_xh);
                }
            } else {
                for (d, &a) in gx.iter_mut().zip(gy.iter()) {
                    *d = g / s * a;
                }
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }

    /// EMA update of the running statistics from batch moments.
    pub fn update_running(&mut self, mean: &Array1<f64>, std: &Array1<f64>, momentum: f64) {
        self.running_mean = &self.running_mean * (1.0 - momentum) + mean * momentum;
        self.running_std = &self.running_std * (1.0 - momentum) + std * momentum;
    }

    pub fn stats(&self) -> LayerStats {
        LayerStats {
            mean: self.running_mean.to_vec(),
            std: self.running_std.to_vec(),
        }
    }

    pub fn set_stats(&mut self, stats: &LayerStats) -> Result<()> {
        if stats.len() != self.gamma.len() {
            return Err(GttaError::Shape(format!(
                "bn stats channel count {} != {}",
                stats.len(),
                self.gamma.len()
            )));
        }
        self.running_mean = Array1::from_vec(stats.mean.clone());
        self.running_std = Array1::from_vec(stats.std.clone()).mapv(|s| s.max(STD_EPS));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ReLU / pooling / upsampling
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.mapv(|e| e.max(0.0))
}

pub fn relu_backward(x: &Tensor4, grad_y: &Tensor4) -> Tensor4 {
    let mut g = grad_y.clone();
    g.zip_mut_with(x, |d, &e| {
        if e <= 0.0 {
            *d = 0.0;
        }
    });
    g
}

/// 2x2 average pooling, stride 2. Requires even spatial dims.
pub fn avg_pool2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..oh {
                for xx in 0..ow {
                    y[[ni, ci, yy, xx]] = 0.25
                        * (x[[ni, ci, 2 * yy, 2 * xx]]
                            + x[[ni, ci, 2 * yy, 2 * xx + 1]]
                            + x[[ni, ci, 2 * yy + 1, 2 * xx]]
                            + x[[ni, ci, 2 * yy + 1, 2 * xx + 1]]);
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(grad_y: &Tensor4) -> Tensor4 {
    let (n, c, oh, ow) = grad_y.dim();
    let mut gx = Tensor4::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..oh {
                for xx in 0..ow {
                    let g = grad_y[[ni, ci, yy, xx]] * 0.25;
                    gx[[ni, ci, 2 * yy, 2 * xx]] = g;
                    gx[[ni, ci, 2 * yy, 2 * xx + 1]] = g;
                    gx[[ni, ci, 2 * yy + 1, 2 * xx]] = g;
                    gx[[ni, ci, 2 * yy + 1, 2 * xx + 1]] = g;
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    let mut y = Tensor4::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[[ni, ci, yy, xx]];
                    y[[ni, ci, 2 * yy, 2 * xx]] = v;
                    y[[ni, ci, 2 * yy, 2 * xx + 1]] = v;
                    y[[ni, ci, 2 * yy + 1, 2 * xx]] = v;
                    y[[ni, ci, 2 * yy + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(grad_y: &Tensor4) -> Tensor4 {
    let (n, c, h2, w2) = grad_y.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    gx[[ni, ci, yy, xx]] = grad_y[[ni, ci, 2 * yy, 2 * xx]]
                        + grad_y[[ni, ci, 2 * yy, 2 * xx + 1]]
                        + grad_y[[ni, ci, 2 * yy + 1, 2 * xx]]
                        + grad_y[[ni, ci, 2 * yy + 1, 2 * xx + 1]];
                }
            }
        }
    }
    gx
}

/// Mean over spatial dims: (N,C,H,W) -> (N,C).
pub fn global_avg_pool(x: &Tensor4) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let count = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[[ni, ci]] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() / count;
        }
    }
    y
}

pub fn global_avg_pool_backward(grad_y: &Array2<f64>, h: usize, w: usize) -> Tensor4 {
    let (n, c) = grad_y.dim();
    let g = 1.0 / (h * w) as f64;
    let mut gx = Tensor4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            gx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(grad_y[[ni, ci]] * g);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || normal_sample(rng) * scale);
        Linear {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(
        &self,
        x: &Array2<f64>,
        grad_y: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let grad_w = grad_y.t().dot(x);
        let grad_b = grad_y.sum_axis(Axis(0));
        let grad_x = grad_y.dot(&self.weight);
        (grad_x, grad_w, grad_b)
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - m).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    p
}

// ---------------------------------------------------------------------------
// Adam optimizer over flat parameter vectors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    /// One Adam step with bias correction. Rejects non-finite gradients
    /// without touching parameters or moments.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GttaError::NonFiniteGradient);
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
