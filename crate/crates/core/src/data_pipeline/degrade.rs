//! Controlled synthetic degradations for desk-scale verification: Gaussian
//! blur, global contrast/brightness changes, soft-edged dark patches, and
//! highlight clipping. These mirror the defect classes seen in low-quality
//! fundus photographs without claiming to match any benchmark's statistics.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_ops::{scale_contrast, ImageTensor};

/// A circular occlusion. Center and radius are relative to the image side
/// (radius 0.2 on a 64px image spans ~13px); attenuation is the fraction of
/// intensity removed at the patch core, fading to zero over the outer 30% of
/// the radius so the boundary stays inside `radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarkPatch {
    pub center: (f64, f64),
    pub radius: f64,
    pub attenuation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub dark_patches: Vec<DarkPatch>,
    pub contrast_scale: f64,
    pub brightness_shift: f64,
    /// Intensities above this level (in [0, 1] units) are clipped.
    pub saturation_clip: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn neutral() -> Self {
        Self {
            blur_sigma: 0.0,
            dark_patches: Vec::new(),
            contrast_scale: 1.0,
            brightness_shift: 0.0,
            saturation_clip: 1.0,
            seed: 0,
        }
    }

    /// Apply the stages in order: blur, contrast, brightness, dark patches,
    /// saturation clip. Every stage is skipped at its neutral value, so the
    /// all-neutral spec is an exact identity.
    pub fn apply(&self, clean: &ImageTensor) -> ImageTensor {
        let mut img = clean.clone();
        if self.blur_sigma > 0.0 {
            img = gaussian_blur(&img, self.blur_sigma as f32);
        }
        if self.contrast_scale != 1.0 {
            img = scale_contrast(&img, self.contrast_scale as f32);
        }
        if self.brightness_shift != 0.0 {
            let shift = self.brightness_shift as f32;
            img.mapv_inplace(|v| v + shift);
        }
        for patch in &self.dark_patches {
            apply_dark_patch(&mut img, patch);
        }
        if self.saturation_clip < 1.0 {
            let cap = (2.0 * self.saturation_clip - 1.0) as f32;
            img.mapv_inplace(|v| v.min(cap));
        }
        img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        img
    }
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(t: &ImageTensor, sigma: f32) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f32) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (c, h, w) = t.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horizontal = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius, w);
                    acc += kv * t[(ci, y, sx)];
                }
                horizontal[(ci, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius, h);
                    acc += kv * horizontal[(ci, sy, x)];
                }
                out[(ci, y, x)] = acc;
            }
        }
    }
    out
}

fn apply_dark_patch(img: &mut ImageTensor, patch: &DarkPatch) {
    let (c, h, w) = img.dim();
    let side = h.min(w) as f64;
    let cy = patch.center.1 * h as f64;
    let cx = patch.center.0 * w as f64;
    let radius = patch.radius * side;
    if radius <= 0.0 || patch.attenuation <= 0.0 {
        return;
    }
    let edge_start = 0.7 * radius;
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d >= radius {
                continue;
            }
            let fade = if d <= edge_start {
                1.0
            } else {
                (radius - d) / (radius - edge_start)
            };
            let weight = (patch.attenuation * fade) as f32;
            for ci in 0..c {
                // Attenuate in [0, 1] intensity units so black stays black.
                let intensity = (img[(ci, y, x)] + 1.0) * 0.5;
                img[(ci, y, x)] = 2.0 * intensity * (1.0 - weight) - 1.0;
            }
        }
    }
}

/// Ranges a per-image [`DegradationSpec`] is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationProfile {
    pub blur_sigma: (f64, f64),
    pub contrast_scale: (f64, f64),
    pub brightness_shift: (f64, f64),
    pub n_patches: (usize, usize),
    pub patch_radius: (f64, f64),
    pub attenuation: (f64, f64),
    pub saturation_clip: (f64, f64),
}

impl DegradationProfile {
    pub fn neutral() -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            contrast_scale: (1.0, 1.0),
            brightness_shift: (0.0, 0.0),
            n_patches: (0, 0),
            patch_radius: (0.0, 0.0),
            attenuation: (0.0, 0.0),
            saturation_clip: (1.0, 1.0),
        }
    }

    /// Gentle blur, mild global dimming, occasionally one patch.
    pub fn mild() -> Self {
        Self {
            blur_sigma: (0.3, 0.7),
            contrast_scale: (0.8, 0.95),
            brightness_shift: (-0.1, -0.02),
            n_patches: (0, 1),
            patch_radius: (0.08, 0.14),
            attenuation: (0.2, 0.35),
            saturation_clip: (0.95, 1.0),
        }
    }

    /// Pronounced contrast loss and dimming with one or two patches; the
    /// dominant defect is the global intensity transform, which a restoration
    /// model can plausibly invert at desk scale.
    pub fn moderate() -> Self {
        Self {
            blur_sigma: (0.5, 1.0),
            contrast_scale: (0.55, 0.7),
            brightness_shift: (-0.22, -0.12),
            n_patches: (1, 2),
            patch_radius: (0.1, 0.18),
            attenuation: (0.3, 0.5),
            saturation_clip: (0.92, 1.0),
        }
    }

    pub fn heavy() -> Self {
        Self {
            blur_sigma: (1.0, 2.0),
            contrast_scale: (0.4, 0.6),
            brightness_shift: (-0.35, -0.2),
            n_patches: (2, 4),
            patch_radius: (0.12, 0.22),
            attenuation: (0.4, 0.7),
            saturation_clip: (0.85, 0.95),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "neutral" => Some(Self::neutral()),
            "mild" => Some(Self::mild()),
            "moderate" => Some(Self::moderate()),
            "heavy" => Some(Self::heavy()),
            _ => None,
        }
    }

    /// Draw one concrete spec; the seed is recorded in the spec.
    pub fn sample(&self, seed: u64) -> DegradationSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |range: (f64, f64)| {
            if range.0 == range.1 {
                range.0
            } else {
                rng.random_range(range.0..=range.1)
            }
        };
        let blur_sigma = uniform(self.blur_sigma);
        let contrast_scale = uniform(self.contrast_scale);
        let brightness_shift = uniform(self.brightness_shift);
        let saturation_clip = uniform(self.saturation_clip);
        let n = if self.n_patches.0 == self.n_patches.1 {
            self.n_patches.0
        } else {
            rng.random_range(self.n_patches.0..=self.n_patches.1)
        };
        let mut dark_patches = Vec::with_capacity(n);
        for _ in 0..n {
            let center = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
            let radius = rng.random_range(
                self.patch_radius.0..=self.patch_radius.1.max(self.patch_radius.0 + 1e-9),
            );
            let attenuation = rng.random_range(
                self.attenuation.0..=self.attenuation.1.max(self.attenuation.0 + 1e-9),
            );
            dark_patches.push(DarkPatch {
                center,
                radius,
                attenuation,
            });
        }
        DegradationSpec {
            blur_sigma,
            dark_patches,
            contrast_scale,
            brightness_shift,
            saturation_clip,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn test_image() -> ImageTensor {
        Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            (0.3 + 0.1 * c as f32 + 0.01 * (y as f32 - 16.0) + 0.005 * x as f32).clamp(-0.9, 0.9)
        })
    }

    #[test]
    fn neutral_spec_is_exact_identity() {
        let img = test_image();
        let out = DegradationSpec::neutral().apply(&img);
        assert_eq!(out, img);
    }

    #[test]
    fn dark_patch_darkens_inside_only() {
        let img = test_image();
        let patch = DarkPatch {
            center: (0.5, 0.5),
            radius: 0.25,
            attenuation: 0.5,
        };
        let spec = DegradationSpec {
            dark_patches: vec![patch],
            ..DegradationSpec::neutral()
        };
        let out = spec.apply(&img);

        let (_, h, w) = img.dim();
        let r = 0.25 * h.min(w) as f64;
        let mut inside_clean = 0.0;
        let mut inside_out = 0.0;
        let mut n_inside = 0usize;
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - 16.0).powi(2) + (x as f64 - 16.0).powi(2)).sqrt();
                if d < r {
                    inside_clean += img[(0, y, x)];
                    inside_out += out[(0, y, x)];
                    n_inside += 1;
                } else {
                    for c in 0..3 {
                        assert_eq!(out[(c, y, x)], img[(c, y, x)], "outside changed at {y},{x}");
                    }
                }
            }
        }
        assert!(n_inside > 0);
        assert!(
            inside_out / n_inside as f32 / 1.0 < inside_clean / n_inside as f32,
            "patch did not darken"
        );
    }

    #[test]
    fn stronger_attenuation_darkens_at_least_as_much() {
        let img = test_image();
        let mean_inside = |attenuation: f64| {
            let spec = DegradationSpec {
                dark_patches: vec![DarkPatch {
                    center: (0.5, 0.5),
                    radius: 0.3,
                    attenuation,
                }],
                ..DegradationSpec::neutral()
            };
            let out = spec.apply(&img);
            let mut acc = 0.0;
            let mut n = 0;
            for y in 8..24 {
                for x in 8..24 {
                    acc += out[(1, y, x)];
                    n += 1;
                }
            }
            acc / n as f32
        };
        let mut prev = mean_inside(0.1);
        for a in [0.3, 0.5, 0.7, 0.9] {
            let cur = mean_inside(a);
            assert!(cur <= prev + 1e-6, "attenuation {a} brightened the patch");
            prev = cur;
        }
    }

    #[test]
    fn same_spec_is_bitwise_deterministic() {
        let img = test_image();
        let spec = DegradationProfile::moderate().sample(99);
        let a = spec.apply(&img);
        let b = spec.apply(&img);
        assert_eq!(a, b);
    }

    #[test]
    fn profile_sampling_is_seeded() {
        let p = DegradationProfile::moderate();
        assert_eq!(p.sample(5), p.sample(5));
        assert_ne!(p.sample(5), p.sample(6));
    }

    #[test]
    fn output_stays_in_range_under_heavy_degradation() {
        let img = test_image();
        for seed in 0..8 {
            let spec = DegradationProfile::heavy().sample(seed);
            let out = spec.apply(&img);
            assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let flat = Array3::from_elem((3, 16, 16), 0.25f32);
        let out = gaussian_blur(&flat, 1.5);
        for v in out.iter() {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }
}
