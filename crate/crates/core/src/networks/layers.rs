//! Minimal convolutional building blocks with hand-derived backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs the f32
//! training path and the f64 finite-difference verification path. All
//! reductions are sequential, which keeps forwards and backwards bitwise
//! deterministic for a fixed input.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, NdFloat};

/// Element type of every tensor in the crate's numeric core.
pub trait Scalar: NdFloat + std::iter::Sum {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_count(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Gathers sliding windows of `x` into a `[c*k*k, gh*gw]` matrix. Position
/// `(gy, gx)` of the grid reads input pixel `(gy*stride + ki - pad, ...)`;
/// out-of-bounds reads stay zero.
fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * kernel * kernel, grid_h * grid_w));
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let mut col_row = col.row_mut(row);
                for gy in 0..grid_h {
                    let iy = (gy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for gx in 0..grid_w {
                        let ix = (gx * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[gy * grid_w + gx] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a `[c*k*k, gh*gw]` matrix back onto a
/// `[c, target_h, target_w]` tensor.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    channels: usize,
    target_h: usize,
    target_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array3<F> {
    let mut out = Array3::zeros((channels, target_h, target_w));
    for ci in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let col_row = cols.row(row);
                for gy in 0..grid_h {
                    let ty = (gy * stride + ki) as isize - pad as isize;
                    if ty < 0 || ty >= target_h as isize {
                        continue;
                    }
                    for gx in 0..grid_w {
                        let tx = (gx * stride + kj) as isize - pad as isize;
                        if tx < 0 || tx >= target_w as isize {
                            continue;
                        }
                        out[(ci, ty as usize, tx as usize)] += col_row[gy * grid_w + gx];
                    }
                }
            }
        }
    }
    out
}

/// 2D convolution; weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F: Scalar> {
    cols: Vec<Array2<F>>,
    input_hw: (usize, usize),
    output_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn output_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn zero_grads(&self) -> Conv2dGrads<F> {
        Conv2dGrads {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn weight_matrix(&self) -> Array2<F> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous weight")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (n, _ci, h, w) = x.dim();
        let (co, _, k, _) = self.weight.dim();
        let oh = conv_output_size(h, k, self.stride, self.pad);
        let ow = conv_output_size(w, k, self.stride, self.pad);
        let w_mat = self.weight_matrix();
        let mut y = Array4::zeros((n, co, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = im2col(&x.index_axis(Axis(0), i), k, self.stride, self.pad, oh, ow);
            let y_mat = w_mat.dot(&col);
            let mut yi = y.index_axis_mut(Axis(0), i);
            for c in 0..co {
                let b = self.bias[c];
                let row = y_mat.row(c);
                let mut plane = yi.index_axis_mut(Axis(0), c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        plane[(oy, ox)] = row[oy * ow + ox] + b;
                    }
                }
            }
            cols.push(col);
        }
        (
            y,
            Conv2dCache {
                cols,
                input_hw: (h, w),
                output_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        grad_out: &Array4<F>,
        cache: &Conv2dCache<F>,
        grads: &mut Conv2dGrads<F>,
    ) -> Array4<F> {
        let (n, co, oh, ow) = grad_out.dim();
        let (_, ci, k, _) = self.weight.dim();
        let (h, w) = cache.input_hw;
        debug_assert_eq!((oh, ow), cache.output_hw);
        let w_mat = self.weight_matrix();
        let mut gx = Array4::zeros((n, ci, h, w));
        let mut gw_mat = Array2::<F>::zeros((co, ci * k * k));
        let grad_std = grad_out.as_standard_layout();
        for i in 0..n {
            let gy = grad_std.index_axis(Axis(0), i);
            let gy_mat = gy
                .into_shape_with_order((co, oh * ow))
                .expect("contiguous grad")
                .to_owned();
            gw_mat = gw_mat + gy_mat.dot(&cache.cols[i].t());
            for c in 0..co {
                grads.bias[c] += gy_mat.row(c).iter().copied().sum::<F>();
            }
            let gcols = w_mat.t().dot(&gy_mat);
            let gxi = col2im(&gcols, ci, h, w, k, self.stride, self.pad, oh, ow);
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
        }
        let gw = gw_mat
            .into_shape_with_order((co, ci, k, k))
            .expect("weight grad shape");
        grads.weight = &grads.weight + &gw;
        gx
    }
}

/// Transposed 2D convolution; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTranspose2dCache<F: Scalar> {
    x_mats: Vec<Array2<F>>,
    input_hw: (usize, usize),
    output_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2dGrads<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn output_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn zero_grads(&self) -> ConvTranspose2dGrads<F> {
        ConvTranspose2dGrads {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn weight_matrix(&self) -> Array2<F> {
        let (ci, co, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((ci, co * k * k))
            .expect("contiguous weight")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<F>) -> (Array4<F>, ConvTranspose2dCache<F>) {
        let (n, ci, h, w) = x.dim();
        let (_, co, k, _) = self.weight.dim();
        let oh = conv_transpose_output_size(h, k, self.stride, self.pad);
        let ow = conv_transpose_output_size(w, k, self.stride, self.pad);
        let w_mat = self.weight_matrix();
        let mut y = Array4::zeros((n, co, oh, ow));
        let mut x_mats = Vec::with_capacity(n);
        let x_std = x.as_standard_layout();
        for i in 0..n {
            let xi = x_std.index_axis(Axis(0), i);
            let x_mat = xi
                .into_shape_with_order((ci, h * w))
                .expect("contiguous input")
                .to_owned();
            let cols = w_mat.t().dot(&x_mat);
            let yi = col2im(&cols, co, oh, ow, k, self.stride, self.pad, h, w);
            let mut y_slot = y.index_axis_mut(Axis(0), i);
            y_slot.assign(&yi);
            for c in 0..co {
                let b = self.bias[c];
                y_slot.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + b);
            }
            x_mats.push(x_mat);
        }
        (
            y,
            ConvTranspose2dCache {
                x_mats,
                input_hw: (h, w),
                output_hw: (oh, ow),
            },
        )
    }

    pub fn backward(
        &self,
        grad_out: &Array4<F>,
        cache: &ConvTranspose2dCache<F>,
        grads: &mut ConvTranspose2dGrads<F>,
    ) -> Array4<F> {
        let (n, co, oh, ow) = grad_out.dim();
        let (ci, _, k, _) = self.weight.dim();
        let (h, w) = cache.input_hw;
        debug_assert_eq!((oh, ow), cache.output_hw);
        let w_mat = self.weight_matrix();
        let mut gx = Array4::zeros((n, ci, h, w));
        let mut gw_mat = Array2::<F>::zeros((ci, co * k * k));
        for i in 0..n {
            let gy = grad_out.index_axis(Axis(0), i);
            for c in 0..co {
                grads.bias[c] += gy.index_axis(Axis(0), c).iter().copied().sum::<F>();
            }
            // Input positions of the transposed conv play the grid role.
            let gcols = im2col(&gy, k, self.stride, self.pad, h, w);
            let gx_mat = w_mat.dot(&gcols);
            let gxi = gx_mat
                .into_shape_with_order((ci, h, w))
                .expect("input grad shape");
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
            gw_mat = gw_mat + cache.x_mats[i].dot(&gcols.t());
        }
        let gw = gw_mat
            .into_shape_with_order((ci, co, k, k))
            .expect("weight grad shape");
        grads.weight = &grads.weight + &gw;
        gx
    }
}

/// Per-channel batch normalization over the batch and spatial axes.
///
/// Inference normalizes with the statistics of the batch at hand rather than
/// the running averages; with batch size 1 this matches the behaviour the
/// network was trained with. Running averages are still tracked and stored so
/// checkpoints round-trip the full state.
#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

pub struct BatchNormCache<F: Scalar> {
    x_hat: Array4<F>,
    inv_std: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::from_f64(0.1),
            eps: F::from_f64(1e-5),
        }
    }

    pub fn zero_grads(&self) -> BatchNormGrads<F> {
        BatchNormGrads {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    fn batch_stats(&self, x: &Array4<F>) -> (Array1<F>, Array1<F>) {
        let (n, c, h, w) = x.dim();
        let m = F::from_count(n * h * w);
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let mut acc = F::zero();
            for ni in 0..n {
                acc += x
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .iter()
                    .copied()
                    .sum::<F>();
            }
            let mu = acc / m;
            let mut vacc = F::zero();
            for ni in 0..n {
                for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    let d = *v - mu;
                    vacc += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = vacc / m;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Array4<F>, mean: &Array1<F>, var: &Array1<F>) -> Array4<F> {
        let (n, c, _, _) = x.dim();
        let mut y = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let inv = (var[ci] + self.eps).sqrt().recip();
                let mu = mean[ci];
                let g = self.gamma[ci];
                let b = self.beta[ci];
                y.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| (v - mu) * inv * g + b);
            }
        }
        y
    }

    /// Inference-mode forward: batch statistics, no state update.
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (mean, var) = self.batch_stats(x);
        self.normalize(x, &mean, &var)
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BatchNormCache<F>) {
        let (n, c, h, w) = x.dim();
        let m = n * h * w;
        let (mean, var) = self.batch_stats(x);

        let mf = F::from_count(m);
        let unbias = if m > 1 {
            mf / F::from_count(m - 1)
        } else {
            F::one()
        };
        for ci in 0..c {
            self.running_mean[ci] =
                (F::one() - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
            self.running_var[ci] = (F::one() - self.momentum) * self.running_var[ci]
                + self.momentum * var[ci] * unbias;
        }

        let mut centered = x.clone();
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            inv_std[ci] = (var[ci] + self.eps).sqrt().recip();
            let mu = mean[ci];
            for ni in 0..n {
                centered
                    .index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v - mu);
            }
        }
        let mut x_hat = centered.clone();
        for ci in 0..c {
            let inv = inv_std[ci];
            for ni in 0..n {
                x_hat
                    .index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * inv);
            }
        }
        let mut y = x_hat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            for ni in 0..n {
                y.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * g + b);
            }
        }
        (y, BatchNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        grad_out: &Array4<F>,
        cache: &BatchNormCache<F>,
        grads: &mut BatchNormGrads<F>,
    ) -> Array4<F> {
        let (n, c, h, w) = grad_out.dim();
        let m = F::from_count(n * h * w);
        let mut gx = Array4::zeros(grad_out.raw_dim());
        for ci in 0..c {
            let mut sum_gy = F::zero();
            let mut sum_gy_xhat = F::zero();
            for ni in 0..n {
                let gy = grad_out.index_axis(Axis(0), ni);
                let gy = gy.index_axis(Axis(0), ci);
                let xh = cache.x_hat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                for (g, x) in gy.iter().zip(xh.iter()) {
                    sum_gy += *g;
                    sum_gy_xhat += *g * *x;
                }
            }
            grads.beta[ci] += sum_gy;
            grads.gamma[ci] += sum_gy_xhat;

            // gx = gamma*inv_std/m * (m*gy - sum(gy) - x_hat*sum(gy*x_hat))
            let scale = self.gamma[ci] * cache.inv_std[ci] / m;
            for ni in 0..n {
                let gy = grad_out.index_axis(Axis(0), ni);
                let gy = gy.index_axis(Axis(0), ci);
                let xh = cache.x_hat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                let mut gxi = gx.index_axis_mut(Axis(0), ni);
                let mut gxi = gxi.index_axis_mut(Axis(0), ci);
                for ((slot, g), x) in gxi.iter_mut().zip(gy.iter()).zip(xh.iter()) {
                    *slot = scale * (m * *g - sum_gy - *x * sum_gy_xhat);
                }
            }
        }
        gx
    }
}

/// Fully connected layer; weight layout `[out, in]`, inputs `[n, in]`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

pub struct LinearCache<F: Scalar> {
    input: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<F: Scalar> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zero_grads(&self) -> LinearGrads<F> {
        LinearGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        grad_out: &Array2<F>,
        cache: &LinearCache<F>,
        grads: &mut LinearGrads<F>,
    ) -> Array2<F> {
        grads.weight = &grads.weight + &grad_out.t().dot(&cache.input);
        grads.bias = &grads.bias + &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }
}

pub fn leaky_relu<F: Scalar>(x: &Array4<F>, slope: F) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<F: Scalar>(
    grad_out: &Array4<F>,
    input: &Array4<F>,
    slope: F,
) -> Array4<F> {
    let mut gx = grad_out.clone();
    gx.zip_mut_with(input, |g, x| {
        if *x <= F::zero() {
            *g *= slope;
        }
    });
    gx
}

pub fn tanh_forward<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.tanh())
}

/// Backward through tanh given the forward *output*.
pub fn tanh_backward<F: Scalar>(grad_out: &Array4<F>, output: &Array4<F>) -> Array4<F> {
    let mut gx = grad_out.clone();
    gx.zip_mut_with(output, |g, y| {
        *g *= F::one() - *y * *y;
    });
    gx
}

/// 2x2 max pooling with stride 2; returns the pooled tensor and the winning
/// offset (0..4) per output cell for the backward scatter.
pub fn max_pool2<F: Scalar>(x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane[(2 * oy, 2 * ox)];
                    let mut best_k = 0u8;
                    for k in 1..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = plane[(2 * oy + dy, 2 * ox + dx)];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    y[(ni, ci, oy, ox)] = best;
                    idx[(ni, ci, oy, ox)] = best_k;
                }
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<F: Scalar>(
    grad_out: &Array4<F>,
    idx: &Array4<u8>,
    input_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, oh, ow) = grad_out.dim();
    let mut gx = Array4::zeros((n, c, input_hw.0, input_hw.1));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = idx[(ni, ci, oy, ox)];
                    let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                    gx[(ni, ci, 2 * oy + dy, 2 * ox + dx)] += grad_out[(ni, ci, oy, ox)];
                }
            }
        }
    }
    gx
}
