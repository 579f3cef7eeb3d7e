use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Parameters of a linear β schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// The 1e-4..0.02 thousand-step endpoints rescaled by `1000 / steps`, so a
    /// short chain still ends close to pure noise.
    pub fn for_steps(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        ScheduleParams {
            steps,
            beta_start: (1e-4 * scale).min(0.5),
            beta_end: (0.02 * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::for_steps(50)
    }
}

/// Per-step noise variances and their cumulative signal retention.
///
/// Index `i` in `betas`/`alpha_bars` is the `i+1`-th noising step. A latent
/// with [`LatentState::timestep`] `t ≥ 1` sits at noise level
/// `alpha_bars[t - 1]`; `t = 0` is the clean sample (ᾱ = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config(
                "beta_start",
                format!("{beta_start} not in (0, 1)"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (total_steps - 1) as f64;
            (0..total_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || acc <= 0.0 {
            return Err(Error::config(
                "beta_end",
                "cumulative products underflow or stall",
            ));
        }
        Ok(NoiseSchedule {
            params: ScheduleParams {
                steps: total_steps,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ for a latent at `timestep` (1-based; 0 is clean and returns 1).
    pub fn alpha_bar_at(&self, timestep: usize) -> Result<f64> {
        match timestep {
            0 => Ok(1.0),
            t if t <= self.total_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::Index {
                what: "timestep",
                index: t,
                len: self.total_steps() + 1,
            }),
        }
    }
}

/// A pixel-space latent `z_t`: `(height·width) × channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub data: Mat,
    pub height: usize,
    pub width: usize,
    pub timestep: usize,
}

impl LatentState {
    pub fn new(data: Mat, height: usize, width: usize, timestep: usize) -> Result<Self> {
        if data.rows() != height * width {
            return Err(Error::Argument(format!(
                "latent has {} rows, expected {height}x{width}",
                data.rows()
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numerical("latent contains non-finite values".into()));
        }
        Ok(LatentState {
            data,
            height,
            width,
            timestep,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Forward diffusion to schedule index `t_index` (the result has timestep
/// `t_index + 1`).
pub fn q_sample(
    schedule: &NoiseSchedule,
    clean: &LatentState,
    t_index: usize,
    noise: &Mat,
) -> Result<LatentState> {
    let Some(&ab) = schedule.alpha_bars.get(t_index) else {
        return Err(Error::Index {
            what: "schedule step",
            index: t_index,
            len: schedule.total_steps(),
        });
    };
    if noise.shape() != clean.data.shape() {
        return Err(Error::Argument(format!(
            "noise shape {:?} != latent shape {:?}",
            noise.shape(),
            clean.data.shape()
        )));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(LatentState {
        data: clean.data.zip_map(noise, |x, e| a * x + b * e),
        height: clean.height,
        width: clean.width,
        timestep: t_index + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_constant_steps() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn standard_schedule_is_monotone() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let last = *s.alpha_bars().last().unwrap();
        assert!(last > 0.0 && last < 1.0);
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[49] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = ScheduleParams::default().build().unwrap();
        assert_eq!(s.total_steps(), 50);
        assert!(*s.alpha_bars().last().unwrap() < 1e-3);
        assert!(s.alpha_bars()[0] > 0.99);
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let field = |r: Result<NoiseSchedule>| match r.unwrap_err() {
            Error::Config { field, .. } => field,
            e => panic!("unexpected {e:?}"),
        };
        assert_eq!(field(NoiseSchedule::linear(0, 0.1, 0.2)), "total_steps");
        assert_eq!(field(NoiseSchedule::linear(5, 0.0, 0.2)), "beta_start");
        assert_eq!(field(NoiseSchedule::linear(5, 0.3, 0.2)), "beta_end");
        assert_eq!(field(NoiseSchedule::linear(5, 0.1, 1.0)), "beta_end");
    }

    fn ones(n: usize) -> LatentState {
        LatentState::new(Mat::filled(n, 3, 1.0), n, 1, 0).unwrap()
    }

    #[test]
    fn q_sample_closed_form() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        let z = q_sample(&s, &ones(4), 1, &Mat::zeros(4, 3)).unwrap();
        assert_eq!(z.timestep, 2);
        assert!(z.data.data().iter().all(|&v| (v - 0.9).abs() < 1e-15));
    }

    #[test]
    fn q_sample_limits() {
        let noise = Mat::filled(4, 3, -0.25);
        let nearly_clean = NoiseSchedule::linear(1, 1e-300, 1e-300).unwrap();
        let z = q_sample(&nearly_clean, &ones(4), 0, &noise).unwrap();
        assert_eq!(z.data, ones(4).data);

        let nearly_noise = NoiseSchedule::linear(1, 1.0 - 1e-16, 1.0 - 1e-16).unwrap();
        let z = q_sample(&nearly_noise, &ones(4), 0, &noise).unwrap();
        assert!(z.data.zip_map(&noise, |a, b| (a - b).abs()).max_abs() < 1e-7);
    }

    #[test]
    fn q_sample_rejects_bad_index_and_shape() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!(matches!(
            q_sample(&s, &ones(4), 2, &Mat::zeros(4, 3)),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            q_sample(&s, &ones(4), 0, &Mat::zeros(3, 3)),
            Err(Error::Argument(_))
        ));
    }
}
