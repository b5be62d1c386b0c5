//! The four training objectives of the restoration core, plus the
//! discriminator-side least-squares objective.
//!
//! Conventions: per-image L1 norms are means over all elements (not sums), so
//! magnitudes are resolution independent; patch-grid scores are averaged over
//! batch and patch positions; the discriminator objective carries a factor of
//! 1/2 so generator and discriminator gradient magnitudes stay comparable.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::networks::Scalar;

/// Per-batch loss components. `total = adv1 + adv2 + lambda*cyc + beta*ide`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv1: f64,
    pub adv2: f64,
    pub cyc: f64,
    pub ide: f64,
    pub total: f64,
    pub m: usize,
}

impl LossReport {
    pub fn zero() -> Self {
        Self {
            adv1: 0.0,
            adv2: 0.0,
            cyc: 0.0,
            ide: 0.0,
            total: 0.0,
            m: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.adv1.is_finite()
            && self.adv2.is_finite()
            && self.cyc.is_finite()
            && self.ide.is_finite()
            && self.total.is_finite()
    }
}

fn check_same_shape<F: Scalar>(a: &Array4<F>, b: &Array4<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn mean_abs_diff<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> F {
    let n = F::from_count(a.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs())
        .sum::<F>()
        / n
}

/// Cycle-consistency loss: mean L1 of both round trips, summed over the two
/// directions.
pub fn cycle_loss<F: Scalar>(
    xl: &Array4<F>,
    xh: &Array4<F>,
    roundtrip_l: &Array4<F>,
    roundtrip_h: &Array4<F>,
) -> Result<F> {
    check_same_shape(xl, roundtrip_l, "cycle_loss low direction")?;
    check_same_shape(xh, roundtrip_h, "cycle_loss high direction")?;
    Ok(mean_abs_diff(roundtrip_l, xl) + mean_abs_diff(roundtrip_h, xh))
}

/// Least-squares generator objective: mean of (1 - score)^2 over every batch
/// element and patch position. Serves both translation directions.
pub fn adversarial_generator_loss<F: Scalar>(scores_on_generated: &Array4<F>) -> Result<F> {
    if scores_on_generated.is_empty() {
        return Err(Error::Invalid(
            "adversarial loss of an empty batch is undefined".into(),
        ));
    }
    let n = F::from_count(scores_on_generated.len());
    Ok(scores_on_generated
        .iter()
        .map(|s| {
            let d = F::one() - *s;
            d * d
        })
        .sum::<F>()
        / n)
}

/// Identity loss: mean L1 change a generator applies to images already in its
/// target domain, summed over the two directions.
pub fn identity_loss<F: Scalar>(
    xl: &Array4<F>,
    xh: &Array4<F>,
    gen_l2h_on_xh: &Array4<F>,
    gen_h2l_on_xl: &Array4<F>,
) -> Result<F> {
    check_same_shape(xh, gen_l2h_on_xh, "identity_loss high direction")?;
    check_same_shape(xl, gen_h2l_on_xl, "identity_loss low direction")?;
    Ok(mean_abs_diff(gen_l2h_on_xh, xh) + mean_abs_diff(gen_h2l_on_xl, xl))
}

/// Combine the component losses into the total generator objective.
pub fn total_generator_loss(
    adv1: f64,
    adv2: f64,
    cyc: f64,
    ide: f64,
    weights: &LossWeights,
    m: usize,
) -> Result<LossReport> {
    let total = adv1 + adv2 + weights.lambda_cyc * cyc + weights.beta_ide * ide;
    let report = LossReport {
        adv1,
        adv2,
        cyc,
        ide,
        total,
        m,
    };
    if !report.is_finite() {
        return Err(Error::Invalid(format!(
            "non-finite loss component: {report:?}"
        )));
    }
    Ok(report)
}

/// Least-squares discriminator objective:
/// `0.5 * [mean (score_real - 1)^2 + mean score_generated^2]`.
pub fn discriminator_loss<F: Scalar>(
    scores_on_real: &Array4<F>,
    scores_on_generated: &Array4<F>,
) -> Result<F> {
    if scores_on_real.is_empty() || scores_on_generated.is_empty() {
        return Err(Error::Invalid(
            "discriminator loss of an empty batch is undefined".into(),
        ));
    }
    let nr = F::from_count(scores_on_real.len());
    let ng = F::from_count(scores_on_generated.len());
    let real_term = scores_on_real
        .iter()
        .map(|s| {
            let d = *s - F::one();
            d * d
        })
        .sum::<F>()
        / nr;
    let gen_term = scores_on_generated.iter().map(|s| *s * *s).sum::<F>() / ng;
    Ok(F::from_f64(0.5) * (real_term + gen_term))
}

// Gradient helpers for the training loop; each is the exact derivative of the
// loss above with respect to its tensor argument.

/// d/d(score) of [`adversarial_generator_loss`].
pub fn adversarial_generator_loss_grad<F: Scalar>(scores: &Array4<F>) -> Array4<F> {
    let n = F::from_count(scores.len());
    scores.mapv(|s| F::from_f64(2.0) * (s - F::one()) / n)
}

/// d/d(candidate) of the mean absolute difference to `reference`, scaled by
/// `weight`. The subgradient at exact zero residual is taken as zero.
pub fn mean_abs_diff_grad<F: Scalar>(
    candidate: &Array4<F>,
    reference: &Array4<F>,
    weight: F,
) -> Array4<F> {
    let n = F::from_count(candidate.len());
    let mut g = candidate.clone();
    g.zip_mut_with(reference, |c, r| {
        *c = if *c > *r {
            weight / n
        } else if *c < *r {
            -weight / n
        } else {
            F::zero()
        };
    });
    g
}

/// d/d(score_real) and d/d(score_generated) of [`discriminator_loss`].
pub fn discriminator_loss_grads<F: Scalar>(
    scores_on_real: &Array4<F>,
    scores_on_generated: &Array4<F>,
) -> (Array4<F>, Array4<F>) {
    let nr = F::from_count(scores_on_real.len());
    let ng = F::from_count(scores_on_generated.len());
    (
        scores_on_real.mapv(|s| (s - F::one()) / nr),
        scores_on_generated.mapv(|s| s / ng),
    )
}
