//! Adaptive moment estimation with the (0.5, 0.999) decay rates conventional
//! for adversarial training. State is per-tensor and never transfers between
//! passes; each pass starts a fresh optimizer.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::layers::Scalar;

pub struct Adam<F: Scalar> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    step_count: i32,
    beta1: F,
    beta2: F,
    eps: F,
}

pub const GAN_BETAS: (f64, f64) = (0.5, 0.999);

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[ArrayViewD<'_, F>], betas: (f64, f64)) -> Self {
        Self {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step_count: 0,
            beta1: F::from_f64(betas.0),
            beta2: F::from_f64(betas.1),
            eps: F::from_f64(1e-8),
        }
    }

    pub fn step(
        &mut self,
        lr: f64,
        mut params: Vec<ArrayViewMutD<'_, F>>,
        grads: &[ArrayViewD<'_, F>],
    ) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step_count += 1;
        let lr = F::from_f64(lr);
        let t = self.step_count;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            ndarray::Zip::from(m).and(g).for_each(|m, g| {
                *m = self.beta1 * *m + (F::one() - self.beta1) * *g;
            });
            ndarray::Zip::from(v).and(g).for_each(|v, g| {
                *v = self.beta2 * *v + (F::one() - self.beta2) * *g * *g;
            });
        }
        for ((p, _g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter().zip(self.v.iter()))
        {
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (x - 3)^2 elementwise.
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[4]));
        let views = vec![x.view()];
        let mut opt = Adam::new(&views, GAN_BETAS);
        drop(views);
        for _ in 0..2000 {
            let grad = x.mapv(|v| 2.0 * (v - 3.0));
            opt.step(0.05, vec![x.view_mut()], &[grad.view()]);
        }
        assert!(x.iter().all(|v| (v - 3.0).abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn first_step_moves_by_lr_regardless_of_gradient_scale() {
        // Bias correction makes the first update approximately lr * sign(g).
        for scale in [1e-3, 1.0, 1e3] {
            let mut x = ArrayD::<f64>::zeros(IxDyn(&[1]));
            let views = vec![x.view()];
            let mut opt = Adam::new(&views, GAN_BETAS);
            drop(views);
            let grad = ArrayD::from_elem(IxDyn(&[1]), scale);
            opt.step(0.01, vec![x.view_mut()], &[grad.view()]);
            assert!((x[[0]] + 0.01).abs() < 1e-5, "scale {scale}: {}", x[[0]]);
        }
    }
}
