//! The three parameterized networks: U-Net generator, PatchGAN
//! discriminator, and the compact CNN classifier, plus weight
//! initialization, parameter counting, and checkpoint persistence.

pub mod adam;
pub mod checkpoint;
pub mod classifier;
pub mod layers;
pub mod patchgan;
pub mod unet;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use checkpoint::{CheckpointMeta, CycleGanCheckpoint};
pub use classifier::{Classifier, ClassifierConfig};
pub use layers::Scalar;
pub use patchgan::{Discriminator, DiscriminatorConfig};
pub use unet::{Generator, GeneratorConfig};

use crate::config::{InitSpec, NetworkConfig};
use crate::error::{Error, Result};

impl NetworkConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: self.in_channels,
            base_channels: self.gen_base_channels,
            depth: self.gen_depth,
            image_size: self.image_size,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: self.in_channels,
            base_channels: self.disc_base_channels,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: self.in_channels,
            channels: self.classifier_channels,
            hidden: self.classifier_hidden,
            image_size: self.image_size,
        }
    }
}

/// Draw parameter arrays for the given shapes, every element independent and
/// uniform on [-epsilon, epsilon].
pub fn init_weights<F: Scalar>(
    shapes: &[Vec<usize>],
    epsilon: f64,
    seed: u64,
) -> Result<Vec<ArrayD<F>>> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "init epsilon must be > 0, got {epsilon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(shapes
        .iter()
        .map(|shape| sample_uniform(&mut rng, shape, epsilon))
        .collect())
}

pub(crate) fn sample_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    epsilon: f64,
) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        F::from_f64(rng.random_range(-epsilon..=epsilon))
    })
}

/// Uniform bound for one tensor under the given init spec.
pub(crate) fn init_bound(init: &InitSpec, fan_in: usize) -> f64 {
    match init {
        InitSpec::Uniform { epsilon } => *epsilon,
        InitSpec::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
    }
}

/// Exact number of scalar parameters across the given tensors.
pub fn count_parameters<'a, F: Scalar + 'a>(
    tensors: impl IntoIterator<Item = ArrayViewD<'a, F>>,
) -> usize {
    tensors.into_iter().map(|t| t.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_weights_respects_support_bound() {
        let arrays = init_weights::<f32>(&[vec![8, 3, 4, 4], vec![8]], 0.07, 42).unwrap();
        for a in &arrays {
            assert!(a.iter().all(|v| v.abs() <= 0.07));
        }
    }

    #[test]
    fn init_weights_is_deterministic() {
        let a = init_weights::<f32>(&[vec![16, 16]], 0.05, 9).unwrap();
        let b = init_weights::<f32>(&[vec![16, 16]], 0.05, 9).unwrap();
        assert_eq!(a[0], b[0]);
        let c = init_weights::<f32>(&[vec![16, 16]], 0.05, 10).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn init_weights_sample_mean_matches_uniform_moment() {
        // Uniform on [-e, e] has variance e^2/3; the mean of n draws stays
        // within 3*e/sqrt(3n) of zero except with ~0.3% probability.
        let n = 200_000usize;
        let eps = 0.2;
        let arrays = init_weights::<f64>(&[vec![n]], eps, 1234).unwrap();
        let mean = arrays[0].iter().sum::<f64>() / n as f64;
        let bound = 3.0 * eps / (3.0 * n as f64).sqrt();
        assert!(
            mean.abs() < bound,
            "sample mean {mean} exceeds 3-sigma bound {bound}"
        );
    }

    #[test]
    fn init_weights_rejects_bad_epsilon() {
        assert!(init_weights::<f32>(&[vec![4]], 0.0, 0).is_err());
        assert!(init_weights::<f32>(&[vec![4]], -1.0, 0).is_err());
    }

    #[test]
    fn count_parameters_handles_empty_and_conv_example() {
        let empty: Vec<ArrayViewD<'_, f32>> = Vec::new();
        assert_eq!(count_parameters(empty), 0);

        // A 3->64 conv with kernel 4 and bias: 3*64*4*4 + 64 = 3136.
        let w = ArrayD::<f32>::zeros(IxDyn(&[64, 3, 4, 4]));
        let b = ArrayD::<f32>::zeros(IxDyn(&[64]));
        assert_eq!(count_parameters([w.view(), b.view()]), 3136);
    }
}
