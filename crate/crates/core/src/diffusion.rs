//! Linear-β schedule, forward noising, ε-prediction loss and DDIM sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use synweather_autograd::{Float, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Betas linear from `beta_start` to `beta_end` inclusive; `ᾱ_t = ∏_{s≤t} (1 − β_s)`.
pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if timesteps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid schedule: T={timesteps}, β ∈ [{beta_start}, {beta_end}]")));
    }
    let step = (beta_end - beta_start) / (timesteps - 1) as f64;
    let mut beta: Vec<f64> = (0..timesteps).map(|i| beta_start + step * i as f64).collect();
    beta[timesteps - 1] = beta_end;
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule { beta, alpha, alpha_bar })
}

impl DiffusionSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    /// β_t for `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t for `t ∈ [1, T]`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.timesteps())));
        }
        Ok(())
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn add_noise<T: Float>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Per-sample timesteps over a `[B, ...]` batch.
pub fn add_noise_batch<T: Float>(z0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
        return Err(Error::Shape(format!("z0 {:?}, eps {:?}, {} timesteps", z0.shape(), eps.shape(), t.len())));
    }
    let per = z0.numel() / t.len().max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &ti) in t.iter().enumerate() {
        sched.check(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
        let r = i * per..(i + 1) * per;
        out.extend(z0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&z, &e)| a * z + b * e));
    }
    Ok(Tensor::from_vec(z0.shape(), out))
}

/// `(z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0<T: Float>(z_t: &Tensor<T>, eps_hat: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    let (s, r) = (T::c((1.0 - alpha_bar).sqrt()), T::c(1.0 / alpha_bar.sqrt()));
    z_t.zip_map(eps_hat, |z, e| (z - s * e) * r)
}

/// Noise predictor with its conditioning already bound.
pub trait NoisePredictor<T: Float> {
    /// `z_t: [B, C, H, W]` at a shared timestep `t` → ε̂ with the same shape.
    fn predict(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Float, F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>>> NoisePredictor<T> for F {
    fn predict(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(z_t, t)
    }
}

/// `mean((ε_θ(z_t, t) − ε)²)` with `z_t` built from `(z0, t, eps)`.
pub fn diffusion_loss<T: Float>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, predictor: &dyn NoisePredictor<T>, sched: &DiffusionSchedule) -> Result<f64> {
    let z_t = add_noise(z0, t, eps, sched)?;
    let pred = predictor.predict(&z_t, t)?;
    if pred.shape() != eps.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs eps {:?}", pred.shape(), eps.shape())));
    }
    let mse = pred.data().iter().zip(eps.data()).map(|(&p, &e)| (p - e).f64().powi(2)).sum::<f64>() / eps.numel().max(1) as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    Ok(mse)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdimSettings {
    pub steps: usize,
    pub eta: f64,
}

impl Default for DdimSettings {
    fn default() -> Self {
        Self { steps: 20, eta: 0.0 }
    }
}

/// Descending timesteps: `steps` values uniformly strided over `[1, T]`, including `T`.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > timesteps {
        return Err(Error::InvalidArgument(format!("DDIM steps {steps} must lie in [1, {timesteps}]")));
    }
    if steps == 1 {
        return Ok(vec![timesteps]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| 1 + ((i as f64) * (timesteps - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

fn normal_tensor<T: Float, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::c(StandardNormal.sample(rng))).collect())
}

/// DDIM from `z_T ~ N(0, I)` drawn with `init_rng`; `step_rng` is consumed only when `eta > 0`.
pub fn ddim_sample<T: Float, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    predictor: &dyn NoisePredictor<T>,
    shape: &[usize],
    sched: &DiffusionSchedule,
    settings: &DdimSettings,
    init_rng: &mut R1,
    step_rng: &mut R2,
) -> Result<Tensor<T>> {
    let z_t = normal_tensor(shape, init_rng);
    ddim_from(predictor, z_t, sched, settings, step_rng)
}

/// DDIM starting from a given `z_T`.
pub fn ddim_from<T: Float, R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor<T>,
    mut z: Tensor<T>,
    sched: &DiffusionSchedule,
    settings: &DdimSettings,
    step_rng: &mut R,
) -> Result<Tensor<T>> {
    let ts = ddim_timesteps(sched.timesteps(), settings.steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_next = ts.get(i + 1).copied().unwrap_or(0);
        let (ab, ab_next) = (sched.alpha_bar(t), sched.alpha_bar(t_next));
        let eps = predictor.predict(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::Shape(format!("predictor returned {:?} for {:?}", eps.shape(), z.shape())));
        }
        let x0 = predict_x0(&z, &eps, ab);
        let sigma = settings.eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt();
        let (a, b) = (T::c(ab_next.sqrt()), T::c((1.0 - ab_next - sigma * sigma).max(0.0).sqrt()));
        z = x0.zip_map(&eps, |x, e| a * x + b * e);
        if sigma > 0.0 {
            let noise = normal_tensor::<T, R>(z.shape(), step_rng);
            let s = T::c(sigma);
            z = z.zip_map(&noise, |v, n| v + s * n);
        }
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("DDIM state at t={t}")));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_endpoints() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 0.0001);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.0001);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(build_schedule(1000, 0.02, 1e-4).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let one = Tensor::<f64>::full(&[1], 1.0);
        let z = add_noise(&one, 1, &one, &s).unwrap().item();
        assert!((z - (0.9999f64.sqrt() + 0.0001f64.sqrt())).abs() < 1e-12);
        assert!((z - 1.00995).abs() < 1e-4);
        let zero = Tensor::<f64>::zeros(&[1]);
        assert_eq!(add_noise(&one, 7, &zero, &s).unwrap().item(), s.alpha_bar(7).sqrt());
        assert!(add_noise(&one, 0, &zero, &s).is_err());
        assert!(add_noise(&one, 1001, &zero, &s).is_err());
    }

    #[test]
    fn ddim_timestep_grid() {
        let ts = ddim_timesteps(1000, 20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_timesteps(1000, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn loss_of_offset_predictor() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = Tensor::<f64>::full(&[1, 4, 2, 2], 0.3);
        let eps = Tensor::<f64>::full(&[1, 4, 2, 2], -0.7);
        let exact = |_: &Tensor<f64>, _: usize| Ok(eps.clone());
        assert_eq!(diffusion_loss(&z0, 10, &eps, &exact, &s).unwrap(), 0.0);
        let off = |_: &Tensor<f64>, _: usize| Ok(eps.map(|e| e + 0.1));
        assert!((diffusion_loss(&z0, 10, &eps, &off, &s).unwrap() - 0.01).abs() < 1e-12);
    }
}
