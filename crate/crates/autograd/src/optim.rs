use crate::float::Float;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Decoupled weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |p: &ParamSet<T>| p.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { beta1, beta2, eps, weight_decay, step: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// True when no update has been applied and both moment buffers are zero.
    pub fn is_fresh(&self) -> bool {
        self.step == 0
            && self.m.iter().chain(&self.v).all(|t| t.data().iter().all(|x| *x == T::zero()))
    }

    /// One update with learning rate `lr`. Missing gradients leave the
    /// corresponding parameter untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match parameter count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (ob1, ob2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let step_size = T::c(lr / bc1);
        let bc2_sqrt = T::c(bc2.sqrt());
        let eps = T::c(self.eps);
        let decay = T::c(1.0 - lr * self.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(crate::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p = *p * decay - step_size * *m / denom;
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::c(max_norm / total);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Init, ParamId};
    use rand::SeedableRng;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::<f32>::new();
        p.init("w", &[3, 4], Init::Normal(1.0), &mut rng);
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.01);
        let g = vec![Some(Tensor::full(&[3, 4], 0.5f32))];
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p.get(ParamId(0)), before.get(ParamId(0)));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-12, 0.0);
        opt.step(&mut p, &[Some(Tensor::from_vec(&[2], vec![3.0, -0.2]))], 0.1);
        let w = p.get(ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 0.9).abs() < 1e-9);
    }
}
