//! Cosine noise schedule and the closed-form forward diffusion process.

use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Cumulative signal-retention schedule ᾱ over discrete timesteps 1..=T,
/// with ᾱ(0) = 1 kept as the clean-data anchor.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    timesteps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule: ᾱ(t) tracks cos²(π/2 · (t/T + s)/(1 + s))
    /// normalized to 1 at t = 0, with per-step retention floored so no
    /// single step destroys more than 99.9% of the signal.
    pub fn cosine(timesteps: usize, s: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if s <= 0.0 {
            return Err(Error::Config(format!("cosine offset must be positive, got {s}")));
        }
        let f = |t: f64| {
            let arg = (t / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut raw_prev = 1.0;
        for t in 1..=timesteps {
            let raw = f(t as f64) / f0;
            let beta = (1.0 - raw / raw_prev).min(0.999);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
            raw_prev = raw;
        }
        Ok(NoiseSchedule { timesteps, alpha_bar })
    }

    /// Builds a schedule from explicit ᾱ values for t = 1..=T. Values must
    /// lie in [0, 1] and be nonincreasing.
    pub fn from_alpha_bar(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        let mut prev = 1.0;
        for (i, &a) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha_bar[{}] = {a} outside [0, 1]", i + 1)));
            }
            if a > prev {
                return Err(Error::Config(format!("alpha_bar must be nonincreasing at t = {}", i + 1)));
            }
            prev = a;
        }
        let mut alpha_bar = Vec::with_capacity(values.len() + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend_from_slice(values);
        Ok(NoiseSchedule { timesteps: values.len(), alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// ᾱ(t) for t in 0..=T; t = 0 returns exactly 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// Forward process z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε.
    pub fn add_noise<S: Scalar>(
        &self,
        z0: &Tensor<S>,
        t: usize,
        eps: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "noise shape {:?} does not match latent shape {:?}",
                eps.shape(),
                z0.shape()
            )));
        }
        let a = self.alpha_bar[t];
        let (sa, sn) = (S::from_f64(a.sqrt()), S::from_f64((1.0 - a).sqrt()));
        let data = z0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&z, &e)| sa * z + sn * e)
            .collect();
        Tensor::new(z0.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_is_strictly_decreasing_with_expected_endpoints() {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1) > 0.99, "alpha_bar(1) = {}", s.alpha_bar(1));
        assert!(s.alpha_bar(1000) < 1e-3, "alpha_bar(T) = {}", s.alpha_bar(1000));
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not decreasing at t = {t}");
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn add_noise_boundaries_return_signal_or_noise() {
        let s = NoiseSchedule::from_alpha_bar(&[1.0, 0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::<f64>::randn(vec![2, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(vec![2, 3], 1.0, &mut rng);
        let z1 = s.add_noise(&z0, 1, &eps).unwrap();
        assert_eq!(z1.data(), z0.data());
        let z3 = s.add_noise(&z0, 3, &eps).unwrap();
        assert_eq!(z3.data(), eps.data());
    }

    #[test]
    fn add_noise_rejects_bad_timestep_and_shape() {
        let s = NoiseSchedule::cosine(10, 0.008).unwrap();
        let z0 = Tensor::<f64>::zeros(vec![2, 2]);
        let eps = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(matches!(s.add_noise(&z0, 0, &eps), Err(Error::Contract(_))));
        assert!(matches!(s.add_noise(&z0, 11, &eps), Err(Error::Contract(_))));
        let bad = Tensor::<f64>::zeros(vec![4]);
        assert!(matches!(s.add_noise(&z0, 5, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn noised_variance_stays_near_one_for_unit_variance_inputs() {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &t in &[100, 500, 900] {
            let n = 100_000;
            let z0 = Tensor::<f64>::randn(vec![n], 1.0, &mut rng);
            let eps = Tensor::<f64>::randn(vec![n], 1.0, &mut rng);
            let zt = s.add_noise(&z0, t, &eps).unwrap();
            let mean: f64 = zt.data().iter().sum::<f64>() / n as f64;
            let var: f64 =
                zt.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t = {t}: var = {var}");
        }
    }

    #[test]
    fn from_alpha_bar_validates_range_and_order() {
        assert!(NoiseSchedule::from_alpha_bar(&[]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(&[1.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(&[0.2, 0.4]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(&[0.9, 0.4, 0.1]).is_ok());
    }
}
