use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{LatentState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Deterministic DDIM update (η = 0).
    #[default]
    Ddim,
    /// Ancestral DDPM update with variance β_t.
    Ddpm,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerMode::Ddim),
            "ddpm" => Ok(SamplerMode::Ddpm),
            other => Err(Error::config("sampler", format!("`{other}` is not ddim|ddpm"))),
        }
    }
}

/// One reverse step `z_t → z_{t-1}` given the final noise estimate.
///
/// The DDPM branch draws from `rng` only when `t > 1`; the last step returns
/// the posterior mean, which equals `x̂0`.
pub fn sampler_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    z: &LatentState,
    epsilon: &Mat,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<LatentState> {
    let t = z.timestep;
    if t == 0 {
        return Err(Error::Precondition(
            "sampler step needs timestep >= 1".into(),
        ));
    }
    if epsilon.shape() != z.data.shape() {
        return Err(Error::Argument(format!(
            "noise estimate shape {:?} != latent shape {:?}",
            epsilon.shape(),
            z.data.shape()
        )));
    }
    let ab_t = schedule.alpha_bar_at(t)?;
    let ab_prev = schedule.alpha_bar_at(t - 1)?;
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let x0 = z.data.zip_map(epsilon, |zt, e| (zt - sb * e) / sa);

    let data = match mode {
        SamplerMode::Ddim => {
            let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            x0.zip_map(epsilon, |x, e| pa * x + pb * e)
        }
        SamplerMode::Ddpm => {
            let alpha_t = ab_t / ab_prev;
            let beta_t = 1.0 - alpha_t;
            let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
            let ct = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let mut mean = x0.zip_map(&z.data, |x, zt| c0 * x + ct * zt);
            if t > 1 {
                let sigma = beta_t.sqrt();
                for v in mean.data_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += sigma * n;
                }
            }
            mean
        }
    };
    Ok(LatentState {
        data,
        height: z.height,
        width: z.width,
        timestep: t - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(t: usize) -> LatentState {
        let data = Mat::from_fn(4, 3, |r, c| (r as f64 - 1.5) * 0.3 + c as f64 * 0.1);
        LatentState::new(data, 2, 2, t).unwrap()
    }

    #[test]
    fn ddim_with_zero_noise_rescales() {
        let s = NoiseSchedule::linear(5, 0.05, 0.2).unwrap();
        let z = latent(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sampler_step(&s, &z, &Mat::zeros(4, 3), SamplerMode::Ddim, &mut rng).unwrap();
        let ratio = (s.alpha_bars()[2] / s.alpha_bars()[3]).sqrt();
        for (o, i) in out.data.data().iter().zip(z.data.data()) {
            assert!((o - ratio * i).abs() < 1e-14);
        }
        assert_eq!(out.timestep, 3);
    }

    #[test]
    fn final_ddim_step_returns_x0() {
        let s = NoiseSchedule::linear(5, 0.05, 0.2).unwrap();
        let z = latent(1);
        let eps = Mat::filled(4, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sampler_step(&s, &z, &eps, SamplerMode::Ddim, &mut rng).unwrap();
        let ab = s.alpha_bars()[0];
        let x0 = z.data.map(|v| (v - (1.0 - ab).sqrt() * 0.5) / ab.sqrt());
        assert!(out.data.zip_map(&x0, |a, b| (a - b).abs()).max_abs() < 1e-14);
        assert_eq!(out.timestep, 0);
    }

    #[test]
    fn ddim_is_deterministic() {
        let s = NoiseSchedule::linear(5, 0.05, 0.2).unwrap();
        let eps = Mat::filled(4, 3, 0.1);
        let a = sampler_step(&s, &latent(3), &eps, SamplerMode::Ddim, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sampler_step(&s, &latent(3), &eps, SamplerMode::Ddim, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddpm_approaches_ddim_as_beta_vanishes() {
        let s = NoiseSchedule::linear(3, 1e-8, 1e-8).unwrap();
        let eps = Mat::from_fn(4, 3, |r, c| 0.2 * r as f64 - 0.1 * c as f64);
        let z = latent(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ddim = sampler_step(&s, &z, &eps, SamplerMode::Ddim, &mut rng).unwrap();
        let ddpm = sampler_step(&s, &z, &eps, SamplerMode::Ddpm, &mut rng).unwrap();
        let gap = ddim.data.zip_map(&ddpm.data, |a, b| (a - b).abs()).max_abs();
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn timestep_zero_is_rejected() {
        let s = NoiseSchedule::linear(5, 0.05, 0.2).unwrap();
        let err = sampler_step(&s, &latent(0), &Mat::zeros(4, 3), SamplerMode::Ddim, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Precondition(_))));
    }
}
