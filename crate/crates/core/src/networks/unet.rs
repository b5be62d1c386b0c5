//! U-Net generator: `depth` stride-2 down-sampling convolutions, `depth`
//! stride-2 transposed convolutions back up, with skip connections joining
//! down block k to up block `depth+1-k`. Tanh output head keeps values in
//! [-1, 1].

use ndarray::{concatenate, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    leaky_relu, leaky_relu_backward, tanh_backward, tanh_forward, BatchNorm, BatchNormCache,
    BatchNormGrads, Conv2d, Conv2dCache, Conv2dGrads, ConvTranspose2d, ConvTranspose2dCache,
    ConvTranspose2dGrads, Scalar,
};
use super::{init_bound, sample_uniform};
use crate::config::InitSpec;
use crate::error::{Error, Result};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Resolution the BN layout is built for (the innermost block drops its
    /// norm when its output collapses to 1x1, where per-channel statistics
    /// degenerate at batch size 1).
    pub image_size: usize,
}

impl GeneratorConfig {
    /// Channel widths of the down path: base * min(2^k, 8).
    pub fn down_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|k| self.base_channels * (1usize << k.min(3)))
            .collect()
    }
}

#[derive(Clone)]
struct DownBlock<F: Scalar> {
    conv: Conv2d<F>,
    bn: Option<BatchNorm<F>>,
}

#[derive(Clone)]
struct UpBlock<F: Scalar> {
    conv: ConvTranspose2d<F>,
    bn: Option<BatchNorm<F>>,
    /// Tanh head on the last block, ReLU elsewhere.
    tanh: bool,
}

pub struct DownCache<F: Scalar> {
    conv: Conv2dCache<F>,
    bn: Option<BatchNormCache<F>>,
    pre_act: Array4<F>,
}

pub struct UpCache<F: Scalar> {
    conv: ConvTranspose2dCache<F>,
    bn: Option<BatchNormCache<F>>,
    /// Pre-activation for ReLU blocks, the output itself for the tanh head.
    act_ref: Array4<F>,
}

pub struct GeneratorCache<F: Scalar> {
    down: Vec<DownCache<F>>,
    up: Vec<UpCache<F>>,
    /// Channel count of the non-skip half of each up block's input.
    up_in_split: Vec<usize>,
}

pub struct GeneratorGrads<F: Scalar> {
    down: Vec<(Conv2dGrads<F>, Option<BatchNormGrads<F>>)>,
    up: Vec<(ConvTranspose2dGrads<F>, Option<BatchNormGrads<F>>)>,
}

impl<F: Scalar> GeneratorGrads<F> {
    pub fn flat(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        for (conv, bn) in &self.down {
            out.push(conv.weight.view().into_dyn());
            out.push(conv.bias.view().into_dyn());
            if let Some(bn) = bn {
                out.push(bn.gamma.view().into_dyn());
                out.push(bn.beta.view().into_dyn());
            }
        }
        for (conv, bn) in &self.up {
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
pub struct Generator<F: Scalar> {
    pub cfg: GeneratorConfig,
    down: Vec<DownBlock<F>>,
    up: Vec<UpBlock<F>>,
}

impl<F: Scalar> Generator<F> {
    pub fn new(cfg: GeneratorConfig, init: &InitSpec, rng: &mut ChaCha8Rng) -> Self {
        let chans = cfg.down_channels();
        let depth = cfg.depth;
        let mut down = Vec::with_capacity(depth);
        let mut size = cfg.image_size;
        for k in 0..depth {
            let cin = if k == 0 {
                cfg.in_channels
            } else {
                chans[k - 1]
            };
            let cout = chans[k];
            size /= 2;
            let use_bn = k > 0 && size > 1;
            down.push(DownBlock {
                conv: new_conv(cout, cin, init, rng),
                bn: use_bn.then(|| BatchNorm::new(cout)),
            });
        }
        let mut up = Vec::with_capacity(depth);
        for j in 0..depth {
            let cin = if j == 0 {
                chans[depth - 1]
            } else {
                2 * chans[depth - 1 - j]
            };
            let last = j == depth - 1;
            let cout = if last {
                cfg.in_channels
            } else {
                chans[depth - 2 - j]
            };
            up.push(UpBlock {
                conv: new_conv_t(cin, cout, init, rng),
                bn: (!last).then(|| BatchNorm::new(cout)),
                tanh: last,
            });
        }
        Self { cfg, down, up }
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "generator input {h}x{w} must be divisible by 2^{} = {div}",
                self.cfg.depth
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward: pure function of (params, input).
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut acts: Vec<Array4<F>> = Vec::with_capacity(self.down.len());
        let mut cur = x.clone();
        for block in &self.down {
            let mut y = block.conv.forward(&cur);
            if let Some(bn) = &block.bn {
                y = bn.forward(&y);
            }
            cur = leaky_relu(&y, F::from_f64(LEAKY_SLOPE));
            acts.push(cur.clone());
        }

        let depth = self.down.len();
        let mut u = acts[depth - 1].clone();
        for (j, block) in self.up.iter().enumerate() {
            let input = if j == 0 {
                u
            } else {
                concatenate(Axis(1), &[u.view(), acts[depth - 1 - j].view()])
                    .expect("skip shapes agree")
            };
            let mut y = block.conv.forward(&input);
            if let Some(bn) = &block.bn {
                y = bn.forward(&y);
            }
            u = if block.tanh {
                tanh_forward(&y)
            } else {
                leaky_relu(&y, F::zero())
            };
        }
        Ok(u)
    }

    /// Training-mode forward; updates BN running statistics and returns the
    /// cache the backward pass consumes.
    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<(Array4<F>, GeneratorCache<F>)> {
        self.check_input(x)?;
        let depth = self.down.len();
        let mut down_caches = Vec::with_capacity(depth);
        let mut acts: Vec<Array4<F>> = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in &mut self.down {
            let (y, conv_cache) = block.conv.forward_cached(&cur);
            let (pre_act, bn_cache) = match &mut block.bn {
                Some(bn) => {
                    let (z, c) = bn.forward_train(&y);
                    (z, Some(c))
                }
                None => (y, None),
            };
            cur = leaky_relu(&pre_act, F::from_f64(LEAKY_SLOPE));
            down_caches.push(DownCache {
                conv: conv_cache,
                bn: bn_cache,
                pre_act,
            });
            acts.push(cur.clone());
        }

        let mut up_caches = Vec::with_capacity(depth);
        let mut up_in_split = Vec::with_capacity(depth);
        let mut u = acts[depth - 1].clone();
        for (j, block) in self.up.iter_mut().enumerate() {
            let input = if j == 0 {
                up_in_split.push(u.dim().1);
                u
            } else {
                up_in_split.push(u.dim().1);
                concatenate(Axis(1), &[u.view(), acts[depth - 1 - j].view()])
                    .expect("skip shapes agree")
            };
            let (y, conv_cache) = block.conv.forward_cached(&input);
            let (pre_act, bn_cache) = match &mut block.bn {
                Some(bn) => {
                    let (z, c) = bn.forward_train(&y);
                    (z, Some(c))
                }
                None => (y, None),
            };
            let (out, act_ref) = if block.tanh {
                let t = tanh_forward(&pre_act);
                (t.clone(), t)
            } else {
                (leaky_relu(&pre_act, F::zero()), pre_act)
            };
            up_caches.push(UpCache {
                conv: conv_cache,
                bn: bn_cache,
                act_ref,
            });
            u = out;
        }
        Ok((
            u,
            GeneratorCache {
                down: down_caches,
                up: up_caches,
                up_in_split,
            },
        ))
    }

    pub fn zero_grads(&self) -> GeneratorGrads<F> {
        GeneratorGrads {
            down: self
                .down
                .iter()
                .map(|b| (b.conv.zero_grads(), b.bn.as_ref().map(|bn| bn.zero_grads())))
                .collect(),
            up: self
                .up
                .iter()
                .map(|b| (b.conv.zero_grads(), b.bn.as_ref().map(|bn| bn.zero_grads())))
                .collect(),
        }
    }

    /// Backpropagate `grad_out` through the cached forward, accumulating
    /// parameter gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        grad_out: &Array4<F>,
        cache: &GeneratorCache<F>,
        grads: &mut GeneratorGrads<F>,
    ) -> Array4<F> {
        let depth = self.down.len();
        let mut act_grads: Vec<Option<Array4<F>>> = (0..depth).map(|_| None).collect();

        let mut g = grad_out.clone();
        for j in (0..depth).rev() {
            let block = &self.up[j];
            let ucache = &cache.up[j];
            let g_pre = if block.tanh {
                tanh_backward(&g, &ucache.act_ref)
            } else {
                leaky_relu_backward(&g, &ucache.act_ref, F::zero())
            };
            let g_bn = match (&block.bn, &ucache.bn) {
                (Some(bn), Some(bn_cache)) => {
                    let slot = &mut grads.up[j].1;
                    bn.backward(&g_pre, bn_cache, slot.as_mut().expect("bn grads"))
                }
                _ => g_pre,
            };
            let g_in = block.conv.backward(&g_bn, &ucache.conv, &mut grads.up[j].0);
            if j == 0 {
                accumulate(&mut act_grads[depth - 1], &g_in);
            } else {
                let split = cache.up_in_split[j];
                let g_prev = g_in.slice(ndarray::s![.., ..split, .., ..]).to_owned();
                let g_skip = g_in.slice(ndarray::s![.., split.., .., ..]).to_owned();
                accumulate(&mut act_grads[depth - 1 - j], &g_skip);
                g = g_prev;
            }
        }

        let mut g_down: Option<Array4<F>> = None;
        for k in (0..depth).rev() {
            let block = &self.down[k];
            let dcache = &cache.down[k];
            let mut g_total = act_grads[k]
                .take()
                .unwrap_or_else(|| Array4::zeros(dcache.pre_act.raw_dim()));
            if let Some(extra) = g_down.take() {
                g_total = g_total + extra;
            }
            let g_pre = leaky_relu_backward(&g_total, &dcache.pre_act, F::from_f64(LEAKY_SLOPE));
            let g_bn = match (&block.bn, &dcache.bn) {
                (Some(bn), Some(bn_cache)) => {
                    let slot = &mut grads.down[k].1;
                    bn.backward(&g_pre, bn_cache, slot.as_mut().expect("bn grads"))
                }
                _ => g_pre,
            };
            g_down = Some(
                block
                    .conv
                    .backward(&g_bn, &dcache.conv, &mut grads.down[k].0),
            );
        }
        g_down.expect("at least one down block")
    }

    /// Down-path activations, for probing skip connections in tests.
    pub fn forward_probe(&self, x: &Array4<F>) -> Result<(Array4<F>, Vec<Array4<F>>)> {
        self.check_input(x)?;
        let mut acts: Vec<Array4<F>> = Vec::with_capacity(self.down.len());
        let mut cur = x.clone();
        for block in &self.down {
            let mut y = block.conv.forward(&cur);
            if let Some(bn) = &block.bn {
                y = bn.forward(&y);
            }
            cur = leaky_relu(&y, F::from_f64(LEAKY_SLOPE));
            acts.push(cur.clone());
        }
        let out = self.forward(x)?;
        Ok((out, acts))
    }

    /// Zero the up-block weight columns that read the non-skip half of the
    /// concatenated input. Test instrumentation for skip integrity.
    pub fn zero_up_non_skip_weights(&mut self, up_index: usize) {
        assert!(up_index >= 1, "up block 0 has no skip half");
        let split = self.up[up_index].conv.weight.dim().0 / 2;
        self.up[up_index]
            .conv
            .weight
            .slice_mut(ndarray::s![..split, .., .., ..])
            .fill(F::zero());
    }

    pub fn trainable(&self) -> Vec<ArrayViewD<'_, F>> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (k, b) in self.down.iter().enumerate() {
            out.push((
                format!("down{k}.conv.weight"),
                b.conv.weight.view().into_dyn(),
            ));
            out.push((format!("down{k}.conv.bias"), b.conv.bias.view().into_dyn()));
            if let Some(bn) = &b.bn {
                push_bn_views(&mut out, &format!("down{k}"), bn);
            }
        }
        for (j, b) in self.up.iter().enumerate() {
            out.push((
                format!("up{j}.conv.weight"),
                b.conv.weight.view().into_dyn(),
            ));
            out.push((format!("up{j}.conv.bias"), b.conv.bias.view().into_dyn()));
            if let Some(bn) = &b.bn {
                push_bn_views(&mut out, &format!("up{j}"), bn);
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (k, b) in self.down.iter_mut().enumerate() {
            out.push((
                format!("down{k}.conv.weight"),
                b.conv.weight.view_mut().into_dyn(),
            ));
            out.push((
                format!("down{k}.conv.bias"),
                b.conv.bias.view_mut().into_dyn(),
            ));
            if let Some(bn) = &mut b.bn {
                push_bn_views_mut(&mut out, &format!("down{k}"), bn);
            }
        }
        for (j, b) in self.up.iter_mut().enumerate() {
            out.push((
                format!("up{j}.conv.weight"),
                b.conv.weight.view_mut().into_dyn(),
            ));
            out.push((
                format!("up{j}.conv.bias"),
                b.conv.bias.view_mut().into_dyn(),
            ));
            if let Some(bn) = &mut b.bn {
                push_bn_views_mut(&mut out, &format!("up{j}"), bn);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(_, v)| v)
            .collect()
    }
}

pub(crate) fn push_bn_views<'a, F: Scalar>(
    out: &mut Vec<(String, ArrayViewD<'a, F>)>,
    prefix: &str,
    bn: &'a BatchNorm<F>,
) {
    out.push((format!("{prefix}.bn.gamma"), bn.gamma.view().into_dyn()));
    out.push((format!("{prefix}.bn.beta"), bn.beta.view().into_dyn()));
    out.push((
        format!("{prefix}.bn.running_mean"),
        bn.running_mean.view().into_dyn(),
    ));
    out.push((
        format!("{prefix}.bn.running_var"),
        bn.running_var.view().into_dyn(),
    ));
}

pub(crate) fn push_bn_views_mut<'a, F: Scalar>(
    out: &mut Vec<(String, ArrayViewMutD<'a, F>)>,
    prefix: &str,
    bn: &'a mut BatchNorm<F>,
) {
    out.push((format!("{prefix}.bn.gamma"), bn.gamma.view_mut().into_dyn()));
    out.push((format!("{prefix}.bn.beta"), bn.beta.view_mut().into_dyn()));
    out.push((
        format!("{prefix}.bn.running_mean"),
        bn.running_mean.view_mut().into_dyn(),
    ));
    out.push((
        format!("{prefix}.bn.running_var"),
        bn.running_var.view_mut().into_dyn(),
    ));
}

fn accumulate<F: Scalar>(slot: &mut Option<Array4<F>>, grad: &Array4<F>) {
    match slot {
        Some(existing) => *existing = &*existing + grad,
        None => *slot = Some(grad.clone()),
    }
}

fn new_conv<F: Scalar>(
    cout: usize,
    cin: usize,
    init: &InitSpec,
    rng: &mut ChaCha8Rng,
) -> Conv2d<F> {
    let bound = init_bound(init, cin * KERNEL * KERNEL);
    Conv2d {
        weight: sample_uniform(rng, &[cout, cin, KERNEL, KERNEL], bound)
            .into_dimensionality()
            .expect("conv weight rank"),
        bias: sample_uniform(rng, &[cout], bound)
            .into_dimensionality()
            .expect("conv bias rank"),
        stride: STRIDE,
        pad: PAD,
    }
}

fn new_conv_t<F: Scalar>(
    cin: usize,
    cout: usize,
    init: &InitSpec,
    rng: &mut ChaCha8Rng,
) -> ConvTranspose2d<F> {
    let bound = init_bound(init, cin * KERNEL * KERNEL);
    ConvTranspose2d {
        weight: sample_uniform(rng, &[cin, cout, KERNEL, KERNEL], bound)
            .into_dimensionality()
            .expect("conv_t weight rank"),
        bias: sample_uniform(rng, &[cout], bound)
            .into_dimensionality()
            .expect("conv_t bias rank"),
        stride: STRIDE,
        pad: PAD,
    }
}
