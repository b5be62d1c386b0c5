//! PatchGAN discriminator: five kernel-4 convolutions with stride pattern
//! [2,2,2,1,1], batch norm on the middle three layers, LeakyReLU(0.2) between
//! layers, and a raw single-channel patch grid out (least-squares objectives
//! want unsquashed scores).

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv_output_size, leaky_relu, leaky_relu_backward, BatchNorm, BatchNormCache, BatchNormGrads,
    Conv2d, Conv2dCache, Conv2dGrads, Scalar,
};
use super::unet::{push_bn_views, push_bn_views_mut};
use super::{init_bound, sample_uniform};
use crate::config::InitSpec;
use crate::error::{Error, Result};

const KERNEL: usize = 4;
const PAD: usize = 1;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const LEAKY_SLOPE: f64 = 0.2;
const MIN_INPUT: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    fn widths(&self) -> [usize; 5] {
        let d = self.base_channels;
        [d, 2 * d, 4 * d, 8 * d, 1]
    }

    /// Patch-grid side length for a square input, or a shape error when some
    /// layer's output would vanish.
    pub fn grid_size(&self, input: usize) -> Result<usize> {
        if input < MIN_INPUT {
            return Err(Error::Shape(format!(
                "discriminator input {input} below minimum {MIN_INPUT}"
            )));
        }
        let mut size = input;
        for (i, stride) in STRIDES.iter().enumerate() {
            if size + 2 * PAD < KERNEL {
                return Err(Error::Shape(format!(
                    "discriminator layer {i} input {size} too small for kernel {KERNEL}"
                )));
            }
            size = conv_output_size(size, KERNEL, *stride, PAD);
            if size == 0 {
                return Err(Error::Shape(format!(
                    "discriminator layer {i} output collapsed to zero"
                )));
            }
        }
        Ok(size)
    }
}

#[derive(Clone)]
struct DiscLayer<F: Scalar> {
    conv: Conv2d<F>,
    bn: Option<BatchNorm<F>>,
    activated: bool,
}

pub struct DiscLayerCache<F: Scalar> {
    conv: Conv2dCache<F>,
    bn: Option<BatchNormCache<F>>,
    pre_act: Option<Array4<F>>,
}

pub struct DiscriminatorCache<F: Scalar> {
    layers: Vec<DiscLayerCache<F>>,
}

pub struct DiscriminatorGrads<F: Scalar> {
    layers: Vec<(Conv2dGrads<F>, Option<BatchNormGrads<F>>)>,
}

impl<F: Scalar> DiscriminatorGrads<F> {
    pub fn flat(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        for (conv, bn) in &self.layers {
            out.push(conv.weight.view().into_dyn());
            out.push(conv.bias.view().into_dyn());
            if let Some(bn) = bn {
                out.push(bn.gamma.view().into_dyn());
                out.push(bn.beta.view().into_dyn());
            }
        }
        out
    }
}

#[derive(Clone)]
pub struct Discriminator<F: Scalar> {
    pub cfg: DiscriminatorConfig,
    layers: Vec<DiscLayer<F>>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(cfg: DiscriminatorConfig, init: &InitSpec, rng: &mut ChaCha8Rng) -> Self {
        let widths = cfg.widths();
        let mut layers = Vec::with_capacity(5);
        let mut cin = cfg.in_channels;
        for (i, (&cout, &stride)) in widths.iter().zip(STRIDES.iter()).enumerate() {
            let bound = init_bound(init, cin * KERNEL * KERNEL);
            let conv = Conv2d {
                weight: sample_uniform(rng, &[cout, cin, KERNEL, KERNEL], bound)
                    .into_dimensionality()
                    .expect("conv weight rank"),
                bias: sample_uniform(rng, &[cout], bound)
                    .into_dimensionality()
                    .expect("conv bias rank"),
                stride,
                pad: PAD,
            };
            let use_bn = (1..=3).contains(&i);
            layers.push(DiscLayer {
                conv,
                bn: use_bn.then(|| BatchNorm::new(cout)),
                activated: i < 4,
            });
            cin = cout;
        }
        Self { cfg, layers }
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.grid_size(h)?;
        self.cfg.grid_size(w)?;
        Ok(())
    }

    /// Evaluation-mode forward returning the patch score grid `[n, 1, gh, gw]`.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut y = layer.conv.forward(&cur);
            if let Some(bn) = &layer.bn {
                y = bn.forward(&y);
            }
            cur = if layer.activated {
                leaky_relu(&y, F::from_f64(LEAKY_SLOPE))
            } else {
                y
            };
        }
        Ok(cur)
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<(Array4<F>, DiscriminatorCache<F>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, conv_cache) = layer.conv.forward_cached(&cur);
            let (z, bn_cache) = match &mut layer.bn {
                Some(bn) => {
                    let (z, c) = bn.forward_train(&y);
                    (z, Some(c))
                }
                None => (y, None),
            };
            let (out, pre_act) = if layer.activated {
                (leaky_relu(&z, F::from_f64(LEAKY_SLOPE)), Some(z))
            } else {
                (z, None)
            };
            caches.push(DiscLayerCache {
                conv: conv_cache,
                bn: bn_cache,
                pre_act,
            });
            cur = out;
        }
        Ok((cur, DiscriminatorCache { layers: caches }))
    }

    pub fn zero_grads(&self) -> DiscriminatorGrads<F> {
        DiscriminatorGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (l.conv.zero_grads(), l.bn.as_ref().map(|bn| bn.zero_grads())))
                .collect(),
        }
    }

    pub fn backward(
        &self,
        grad_out: &Array4<F>,
        cache: &DiscriminatorCache<F>,
        grads: &mut DiscriminatorGrads<F>,
    ) -> Array4<F> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let lcache = &cache.layers[i];
            if let Some(pre_act) = &lcache.pre_act {
                g = leaky_relu_backward(&g, pre_act, F::from_f64(LEAKY_SLOPE));
            }
            if let (Some(bn), Some(bn_cache)) = (&layer.bn, &lcache.bn) {
                let slot = &mut grads.layers[i].1;
                g = bn.backward(&g, bn_cache, slot.as_mut().expect("bn grads"));
            }
            g = layer
                .conv
                .backward(&g, &lcache.conv, &mut grads.layers[i].0);
        }
        g
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.conv.weight"),
                l.conv.weight.view().into_dyn(),
            ));
            out.push((format!("layer{i}.conv.bias"), l.conv.bias.view().into_dyn()));
            if let Some(bn) = &l.bn {
                push_bn_views(&mut out, &format!("layer{i}"), bn);
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layer{i}.conv.weight"),
                l.conv.weight.view_mut().into_dyn(),
            ));
            out.push((
                format!("layer{i}.conv.bias"),
                l.conv.bias.view_mut().into_dyn(),
            ));
            if let Some(bn) = &mut l.bn {
                push_bn_views_mut(&mut out, &format!("layer{i}"), bn);
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<ArrayViewD<'_, F>> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}
