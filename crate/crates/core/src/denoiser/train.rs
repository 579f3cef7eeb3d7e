//! Noise-prediction training with Adam.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::Denoiser;
use super::prompt::{TokenId, NULL_TOKEN};
use super::schedule::{q_sample, LatentState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tape::Tape;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Probability of replacing a caption with the null prompt.
    pub null_prob: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            null_prob: 0.1,
        }
    }
}

/// A clean image with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    pub image: LatentState,
    pub caption: Vec<TokenId>,
}

/// Everything random about one item's loss, drawn up front so the parallel
/// and sequential paths consume the RNG identically.
struct Draw<'a> {
    item: &'a TrainingItem,
    caption: Vec<TokenId>,
    t_index: usize,
    noise: Mat,
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub exec: Exec,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Trainer {
    pub fn new(model: &Denoiser, config: TrainerConfig, exec: Exec) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .map(|p| Mat::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Trainer {
            config,
            exec,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update on the mean noise MSE over `batch`. Returns the loss
    /// before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        model: &mut Denoiser,
        batch: &[TrainingItem],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let draws: Vec<Draw> = batch
            .iter()
            .map(|item| {
                let caption = if rng.random::<f64>() < self.config.null_prob {
                    vec![NULL_TOKEN]
                } else {
                    item.caption.clone()
                };
                let t_index = rng.random_range(0..schedule.total_steps());
                let (r, c) = item.image.data.shape();
                let noise = Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal));
                Draw {
                    item,
                    caption,
                    t_index,
                    noise,
                }
            })
            .collect();

        let shared: &Denoiser = model;
        let results = self
            .exec
            .try_map(&draws, |d| item_gradient(shared, schedule, d))?;

        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Mat> = model
            .params()
            .iter()
            .map(|p| Mat::zeros(p.rows(), p.cols()))
            .collect();
        for (l, g) in results {
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(&gi.scale(scale));
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is {loss}")));
        }
        if let Some(clip) = self.config.clip_norm {
            let norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                for g in &mut grads {
                    *g = g.scale(s);
                }
            }
        }
        self.apply(model, &grads);
        Ok(loss)
    }

    fn apply(&mut self, model: &mut Denoiser, grads: &[Mat]) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= c.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

fn item_gradient(model: &Denoiser, schedule: &NoiseSchedule, d: &Draw) -> Result<(f64, Vec<Mat>)> {
    let cond = model.embed(&d.caption)?;
    let noisy = q_sample(schedule, &d.item.image, d.t_index, &d.noise)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let z = tape.constant(noisy.data);
    let out = model.forward_taped(&mut tape, &p, z, &cond, d.t_index)?;
    let target = tape.constant(d.noise.clone());
    let diff = tape.sub(out.epsilon, target);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / d.noise.len() as f64);
    let grads = tape.backward(loss);
    let g = p
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
        .collect();
    Ok((tape.scalar_value(loss), g))
}

/// Mean squared noise-prediction error over `items`, one draw per item. With
/// `t_index = None` each item's schedule index is drawn uniformly.
pub fn noise_mse<R: Rng + ?Sized>(
    model: &Denoiser,
    items: &[TrainingItem],
    schedule: &NoiseSchedule,
    t_index: Option<usize>,
    rng: &mut R,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Argument("no evaluation items".into()));
    }
    let mut total = 0.0;
    for item in items {
        let t = match t_index {
            Some(t) => t,
            None => rng.random_range(0..schedule.total_steps()),
        };
        let (r, c) = item.image.data.shape();
        let noise = Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal));
        let noisy = q_sample(schedule, &item.image, t, &noise)?;
        let out = model.forward(&noisy, &model.embed(&item.caption)?, schedule)?;
        let e = out.epsilon_hat.zip_map(&noise, |a, b| (a - b).powi(2)).sum();
        total += e / noise.len() as f64;
    }
    Ok(total / items.len() as f64)
}
