//! Compact CNN for the downstream normal/abnormal decision: three
//! conv+ReLU+maxpool blocks, then two fully connected layers producing two
//! logits.

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, Conv2d, Conv2dCache,
    Conv2dGrads, Linear, LinearCache, LinearGrads, Scalar,
};
use super::{init_bound, sample_uniform};
use crate::config::InitSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub hidden: usize,
    pub image_size: usize,
}

impl ClassifierConfig {
    fn flat_len(&self) -> usize {
        let side = self.image_size / 8;
        self.channels[2] * side * side
    }
}

#[derive(Clone)]
struct ConvBlock<F: Scalar> {
    conv: Conv2d<F>,
}

#[derive(Clone)]
pub struct Classifier<F: Scalar> {
    pub cfg: ClassifierConfig,
    blocks: Vec<ConvBlock<F>>,
    fc1: Linear<F>,
    fc2: Linear<F>,
}

/// Per-block cache: conv cache, pre-activation, pool argmax, input size.
type ConvStageCache<F> = (Conv2dCache<F>, Array4<F>, Array4<u8>, (usize, usize));

pub struct ClassifierCache<F: Scalar> {
    convs: Vec<ConvStageCache<F>>,
    fc1: LinearCache<F>,
    fc1_pre: Array2<F>,
    fc2: LinearCache<F>,
    pooled_dim: (usize, usize, usize),
}

pub struct ClassifierGrads<F: Scalar> {
    convs: Vec<Conv2dGrads<F>>,
    fc1: LinearGrads<F>,
    fc2: LinearGrads<F>,
}

impl<F: Scalar> ClassifierGrads<F> {
    pub fn flat(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.weight.view().into_dyn());
            out.push(c.bias.view().into_dyn());
        }
        out.push(self.fc1.weight.view().into_dyn());
        out.push(self.fc1.bias.view().into_dyn());
        out.push(self.fc2.weight.view().into_dyn());
        out.push(self.fc2.bias.view().into_dyn());
        out
    }
}

impl<F: Scalar> Classifier<F> {
    pub fn new(cfg: ClassifierConfig, init: &InitSpec, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            cfg.image_size.is_multiple_of(8) && cfg.image_size >= 8,
            "classifier input must be divisible by 8"
        );
        let mut blocks = Vec::with_capacity(3);
        let mut cin = cfg.in_channels;
        for &cout in &cfg.channels {
            let bound = init_bound(init, cin * 9);
            blocks.push(ConvBlock {
                conv: Conv2d {
                    weight: sample_uniform(rng, &[cout, cin, 3, 3], bound)
                        .into_dimensionality()
                        .expect("conv weight rank"),
                    bias: sample_uniform(rng, &[cout], bound)
                        .into_dimensionality()
                        .expect("conv bias rank"),
                    stride: 1,
                    pad: 1,
                },
            });
            cin = cout;
        }
        let flat_len = cfg.flat_len();
        let b1 = init_bound(init, flat_len);
        let fc1 = Linear {
            weight: sample_uniform(rng, &[cfg.hidden, flat_len], b1)
                .into_dimensionality()
                .expect("fc rank"),
            bias: sample_uniform(rng, &[cfg.hidden], b1)
                .into_dimensionality()
                .expect("fc rank"),
        };
        let b2 = init_bound(init, cfg.hidden);
        let fc2 = Linear {
            weight: sample_uniform(rng, &[2, cfg.hidden], b2)
                .into_dimensionality()
                .expect("fc rank"),
            bias: sample_uniform(rng, &[2], b2)
                .into_dimensionality()
                .expect("fc rank"),
        };
        Self {
            cfg,
            blocks,
            fc1,
            fc2,
        }
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels || h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::Shape(format!(
                "classifier expects {}x{}x{} input, got {}x{}x{}",
                self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size, c, h, w
            )));
        }
        Ok(())
    }

    /// Logits `[n, 2]` for a batch.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array4<F>) -> Result<(Array2<F>, ClassifierCache<F>)> {
        self.check_input(x)?;
        let n = x.dim().0;
        let mut cur = x.clone();
        let mut convs = Vec::with_capacity(3);
        for block in &self.blocks {
            let (y, conv_cache) = block.conv.forward_cached(&cur);
            let act = leaky_relu(&y, F::zero());
            let input_hw = (act.dim().2, act.dim().3);
            let (pooled, idx) = max_pool2(&act);
            convs.push((conv_cache, y, idx, input_hw));
            cur = pooled;
        }
        let pooled_dim = (cur.dim().1, cur.dim().2, cur.dim().3);
        let flat = cur
            .into_shape_with_order((n, self.cfg.flat_len()))
            .expect("flatten")
            .to_owned();
        let (h1, fc1_cache) = self.fc1.forward_cached(&flat);
        let h1_act = h1.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let (logits, fc2_cache) = self.fc2.forward_cached(&h1_act);
        Ok((
            logits,
            ClassifierCache {
                convs,
                fc1: fc1_cache,
                fc1_pre: h1,
                fc2: fc2_cache,
                pooled_dim,
            },
        ))
    }

    pub fn zero_grads(&self) -> ClassifierGrads<F> {
        ClassifierGrads {
            convs: self.blocks.iter().map(|b| b.conv.zero_grads()).collect(),
            fc1: self.fc1.zero_grads(),
            fc2: self.fc2.zero_grads(),
        }
    }

    pub fn backward(
        &self,
        grad_logits: &Array2<F>,
        cache: &ClassifierCache<F>,
        grads: &mut ClassifierGrads<F>,
    ) -> Array4<F> {
        let g_h1_act = self.fc2.backward(grad_logits, &cache.fc2, &mut grads.fc2);
        let mut g_h1 = g_h1_act;
        g_h1.zip_mut_with(&cache.fc1_pre, |g, pre| {
            if *pre <= F::zero() {
                *g = F::zero();
            }
        });
        let g_flat = self.fc1.backward(&g_h1, &cache.fc1, &mut grads.fc1);
        let n = g_flat.dim().0;
        let (c, h, w) = cache.pooled_dim;
        let mut g = g_flat
            .into_shape_with_order((n, c, h, w))
            .expect("unflatten");
        for i in (0..self.blocks.len()).rev() {
            let (conv_cache, pre_act, idx, input_hw) = &cache.convs[i];
            let g_act = max_pool2_backward(&g, idx, *input_hw);
            let g_pre = leaky_relu_backward(&g_act, pre_act, F::zero());
            g = self.blocks[i]
                .conv
                .backward(&g_pre, conv_cache, &mut grads.convs[i]);
        }
        g
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), b.conv.weight.view().into_dyn()));
            out.push((format!("conv{i}.bias"), b.conv.bias.view().into_dyn()));
        }
        out.push(("fc1.weight".into(), self.fc1.weight.view().into_dyn()));
        out.push(("fc1.bias".into(), self.fc1.bias.view().into_dyn()));
        out.push(("fc2.weight".into(), self.fc2.weight.view().into_dyn()));
        out.push(("fc2.bias".into(), self.fc2.bias.view().into_dyn()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                b.conv.weight.view_mut().into_dyn(),
            ));
            out.push((format!("conv{i}.bias"), b.conv.bias.view_mut().into_dyn()));
        }
        out.push(("fc1.weight".into(), self.fc1.weight.view_mut().into_dyn()));
        out.push(("fc1.bias".into(), self.fc1.bias.view_mut().into_dyn()));
        out.push(("fc2.weight".into(), self.fc2.weight.view_mut().into_dyn()));
        out.push(("fc2.bias".into(), self.fc2.bias.view_mut().into_dyn()));
        out
    }

    pub fn trainable(&self) -> Vec<ArrayViewD<'_, F>> {
        self.named_tensors().into_iter().map(|(_, v)| v).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.named_tensors_mut()
            .into_iter()
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

/// Row-wise softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<F>();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy of logits against class indices, with the gradient
/// w.r.t. the logits.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, targets: &[usize]) -> (F, Array2<F>) {
    let n = logits.dim().0;
    assert_eq!(n, targets.len());
    let probs = softmax(logits);
    let nf = F::from_count(n);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        let p = probs[(i, t)].max(F::from_f64(1e-12));
        loss -= p.ln();
        grad[(i, t)] -= F::one();
    }
    grad.mapv_inplace(|v| v / nf);
    (loss / nf, grad)
}

/// Index of the larger logit per row.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (i, v) in row.iter().enumerate().skip(1) {
                if *v > best_v {
                    best_v = *v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff;
    use rand_chacha::rand_core::SeedableRng;

    fn clf(size: usize) -> Classifier<f64> {
        Classifier::new(
            ClassifierConfig {
                in_channels: 3,
                channels: [2, 3, 4],
                hidden: 8,
                image_size: size,
            },
            &InitSpec::FanIn,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
    }

    #[test]
    fn emits_two_logits_per_image_and_softmax_normalizes() {
        let c = clf(16);
        let x = Array4::from_shape_fn((8, 3, 16, 16), |(n, c, y, x)| {
            ((n * 7 + c * 3 + y + x) as f64 * 0.04).sin()
        });
        let logits = c.forward(&x).unwrap();
        assert_eq!(logits.dim(), (8, 2));
        let probs = softmax(&logits);
        for row in probs.rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_input_size_errors() {
        let c = clf(16);
        let x = Array4::<f64>::zeros((1, 3, 24, 24));
        assert!(c.forward(&x).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let c = clf(16);
        let x = Array4::from_shape_fn((2, 3, 16, 16), |(n, ch, y, x)| {
            ((n * 11 + ch * 5 + y * 2 + x) as f64 * 0.03).cos()
        });
        let targets = vec![0usize, 1usize];
        let (logits, cache) = c.forward_cached(&x).unwrap();
        let (_, grad_logits) = cross_entropy(&logits, &targets);
        let mut grads = c.zero_grads();
        c.backward(&grad_logits, &cache, &mut grads);

        // Check one conv weight tensor and fc2 against finite differences.
        let w0 = c.blocks[0].conv.weight.clone();
        let num = central_diff(&w0.clone().into_dyn(), 1e-6, |w| {
            let mut c2 = clf(16);
            c2.blocks[0].conv.weight = w.clone().into_dimensionality().unwrap();
            let logits = c2.forward(&x).unwrap();
            cross_entropy(&logits, &targets).0
        });
        for (a, b) in grads.convs[0].weight.iter().zip(num.iter()) {
            assert!(
                (a - b).abs() / a.abs().max(b.abs()).max(1e-8) < 1e-3,
                "{a} vs {b}"
            );
        }
    }
}
