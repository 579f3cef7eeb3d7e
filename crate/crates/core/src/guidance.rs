//! Energy-guided classifier-free sampling.
//!
//! At every reverse step the conditional pass also yields the current-step
//! attribution maps of two concept tokens. Their soft top-k masks give a
//! SoftIoU energy whose latent gradient is added to the guided noise estimate
//! as `λ·√(1−ᾱ_t)·∇E`, pushing the two concepts apart spatially.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, BlockScope, GenerationTrace, Resizers, StepScope};
use crate::denoiser::network::{collect_output, network_index, AttentionBlockRecord, Denoiser, TapedOutput};
use crate::denoiser::prompt::{token_name, PromptEmbedding, TokenId, NULL_TOKEN, START_TOKEN};
use crate::denoiser::sampler::{sampler_step, SamplerMode};
use crate::denoiser::schedule::{LatentState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::softselect::{selection_size, soft_iou_energy_taped, Stopping};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub q: f64,
    pub tau: f64,
    pub sampler: SamplerMode,
    pub seed: u64,
    /// Concept whose spread is penalised (the colour token in the toy set).
    pub concept_a: TokenId,
    /// Concept it is disentangled from (the shape token).
    pub concept_b: TokenId,
    pub prompt: Vec<TokenId>,
    pub attribution_prompt: Vec<TokenId>,
    pub sinkhorn: Stopping,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        // circle / red
        GuidanceConfig {
            gamma: 7.5,
            lambda: 100.0,
            q: 0.7,
            tau: 0.1,
            sampler: SamplerMode::Ddim,
            seed: 0,
            concept_a: TokenId(5),
            concept_b: TokenId(2),
            prompt: vec![START_TOKEN, TokenId(2)],
            attribution_prompt: vec![START_TOKEN, TokenId(2), TokenId(5)],
            sinkhorn: Stopping::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be finite and >= 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config("q", "must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be positive"));
        }
        if self.concept_a == self.concept_b {
            return Err(Error::config("concept_b", "must differ from concept_a"));
        }
        self.token_positions()?;
        Ok(())
    }

    /// Positions of `(a, b)` in the attribution prompt.
    pub fn token_positions(&self) -> Result<[usize; 2]> {
        let find = |t: TokenId, field: &'static str| {
            self.attribution_prompt
                .iter()
                .position(|&x| x == t)
                .ok_or_else(|| {
                    Error::config(field, format!("`{}` is not in the attribution prompt", token_name(t)))
                })
        };
        Ok([find(self.concept_a, "concept_a")?, find(self.concept_b, "concept_b")?])
    }
}

/// `(1−γ)·ε_un + γ·ε_con`, which equals `ε_un + γ(ε_con − ε_un)` and is
/// exact at γ ∈ {0, 1}.
pub fn cfg_combine(eps_un: &Mat, eps_con: &Mat, gamma: f64) -> Result<Mat> {
    if eps_un.shape() != eps_con.shape() {
        return Err(Error::Argument(format!(
            "noise estimates differ in shape: {:?} vs {:?}",
            eps_un.shape(),
            eps_con.shape()
        )));
    }
    Ok(eps_un.zip_map(eps_con, |u, c| (1.0 - gamma) * u + gamma * c))
}

/// `ε_cfg + λ·√(1−ᾱ_t)·∇E`. Returns `ε_cfg` untouched when the factor is 0.
pub fn energy_correct(eps_cfg: &Mat, grad: &Mat, lambda: f64, alpha_bar_t: f64) -> Result<Mat> {
    if eps_cfg.shape() != grad.shape() {
        return Err(Error::Argument(format!(
            "gradient shape {:?} != noise shape {:?}",
            grad.shape(),
            eps_cfg.shape()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", "must be >= 0"));
    }
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::Argument(format!("alpha_bar {alpha_bar_t} not in (0, 1]")));
    }
    let factor = lambda * (1.0 - alpha_bar_t).sqrt();
    if factor == 0.0 {
        return Ok(eps_cfg.clone());
    }
    Ok(eps_cfg.zip_map(grad, |e, g| e + factor * g))
}

/// Head- and block-summed, resized attention of the attribution tokens at
/// the current step, built on `tape` from the pass's queries.
fn taped_maps(
    model: &Denoiser,
    tape: &mut Tape,
    out: &TapedOutput,
    attr: &PromptEmbedding,
    tokens: &[usize],
) -> Result<Vec<Var>> {
    let cfg = model.config();
    let (heads, d) = (cfg.heads, cfg.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let mut resizers = Resizers::new((cfg.resolution, cfg.resolution));
    let mut maps: Vec<Option<Var>> = vec![None; tokens.len()];
    for block in &out.blocks {
        let keys = model.block_keys(block.block, attr)?;
        let mut summed: Vec<Option<Var>> = vec![None; tokens.len()];
        for l in 0..heads {
            let q = tape.col_slice(block.queries, l * d, d);
            let k = tape.constant(keys.col_slice(l * d, d));
            let logits = tape.matmul_nt(q, k);
            let logits = tape.scale(logits, scale);
            let probs = tape.softmax_rows(logits);
            for (s, &tok) in summed.iter_mut().zip(tokens) {
                let col = tape.col_slice(probs, tok, 1);
                *s = Some(match *s {
                    None => col,
                    Some(prev) => tape.add(prev, col),
                });
            }
        }
        let resize = resizers.get((block.side, block.side))?;
        for (m, s) in maps.iter_mut().zip(summed) {
            let s = s.expect("at least one head");
            let r = match &resize {
                None => s,
                Some(map) => tape.sparse(s, Arc::clone(map)),
            };
            *m = Some(match *m {
                None => r,
                Some(prev) => tape.add(prev, r),
            });
        }
    }
    maps.into_iter()
        .map(|m| m.ok_or_else(|| Error::Precondition("denoiser has no attention blocks".into())))
        .collect()
}

fn to_map(tape: &Tape, v: Var, side: usize, concept: TokenId, t_index: usize) -> AttributionMap {
    AttributionMap {
        values: tape.value(v).data().to_vec(),
        height: side,
        width: side,
        concept,
        scope: BlockScope::All,
        steps: StepScope::Step(t_index),
    }
}

/// Current-step attribution maps of `tokens` from the conditional pass on
/// `(z, cond)`, with keys from `attr`.
pub fn per_step_maps(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z: &LatentState,
    cond: &PromptEmbedding,
    attr: &PromptEmbedding,
    tokens: [TokenId; 2],
) -> Result<[AttributionMap; 2]> {
    let idx = tokens.map(|t| attr.position(t));
    let [Some(ia), Some(ib)] = idx else {
        return Err(Error::config("tokens", "concept tokens must appear in the attribution prompt"));
    };
    let t_index = network_index(z, schedule)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let zv = tape.constant(z.data.clone());
    let out = model.forward_taped(&mut tape, &p, zv, cond, t_index)?;
    let maps = taped_maps(model, &mut tape, &out, attr, &[ia, ib])?;
    let side = model.config().resolution;
    Ok([
        to_map(&tape, maps[0], side, tokens[0], t_index),
        to_map(&tape, maps[1], side, tokens[1], t_index),
    ])
}

/// Everything the conditional pass of one step produces.
#[derive(Clone, Debug)]
pub struct ConditionalPass {
    pub epsilon: Mat,
    pub records: Vec<AttentionBlockRecord>,
    pub energy: f64,
    /// `∇_z E`, zero when not requested or flagged.
    pub grad: Mat,
    pub iterations: [usize; 2],
    pub converged: bool,
    /// A constant map or vanishing masks; the gradient is zero.
    pub degenerate: bool,
    /// The raw gradient was not finite and has been zeroed.
    pub nonfinite: bool,
}

#[allow(clippy::too_many_arguments)]
fn conditional_pass(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z: &LatentState,
    cond: &PromptEmbedding,
    attr: &PromptEmbedding,
    tokens: [usize; 2],
    config: &GuidanceConfig,
    stopping: [Stopping; 2],
    want_grad: bool,
) -> Result<ConditionalPass> {
    let t_index = network_index(z, schedule)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let zv = if want_grad {
        tape.param(z.data.clone())
    } else {
        tape.constant(z.data.clone())
    };
    let out = model.forward_taped(&mut tape, &p, zv, cond, t_index)?;
    let maps = taped_maps(model, &mut tape, &out, attr, &tokens)?;
    let n = z.data.rows();
    let k = selection_size(n, config.q);
    let e = soft_iou_energy_taped(&mut tape, maps[0], maps[1], k, config.tau, stopping)?;
    let energy = tape.scalar_value(e.energy);
    if !energy.is_finite() {
        return Err(Error::Numerical(format!("energy is {energy}")));
    }
    let (r, c) = z.data.shape();
    let mut grad = Mat::zeros(r, c);
    let mut nonfinite = false;
    if want_grad && !e.degenerate {
        let g = tape.backward(e.energy).get_or_zeros(zv, (r, c));
        if g.is_finite() {
            grad = g;
        } else {
            nonfinite = true;
        }
    }
    let collected = collect_output(&tape, &out, t_index);
    Ok(ConditionalPass {
        epsilon: collected.epsilon_hat,
        records: collected.attention_records,
        energy,
        grad,
        iterations: e.iterations,
        converged: e.converged,
        degenerate: e.degenerate,
        nonfinite,
    })
}

/// Energy value and latent gradient at `z`.
pub fn energy(model: &Denoiser, schedule: &NoiseSchedule, z: &LatentState, config: &GuidanceConfig) -> Result<ConditionalPass> {
    let (cond, attr, tokens) = embed_config(model, config)?;
    conditional_pass(model, schedule, z, &cond, &attr, tokens, config, [config.sinkhorn; 2], true)
}

/// Energy value only, with explicit Sinkhorn stopping per side; used to
/// replay the iteration counts of a gradient evaluation.
pub fn energy_value(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z: &LatentState,
    config: &GuidanceConfig,
    stopping: [Stopping; 2],
) -> Result<f64> {
    let (cond, attr, tokens) = embed_config(model, config)?;
    Ok(conditional_pass(model, schedule, z, &cond, &attr, tokens, config, stopping, false)?.energy)
}

fn embed_config(model: &Denoiser, config: &GuidanceConfig) -> Result<(PromptEmbedding, PromptEmbedding, [usize; 2])> {
    config.validate()?;
    let cond = model.embed(&config.prompt)?;
    let attr = model.embed(&config.attribution_prompt)?;
    Ok((cond, attr, config.token_positions()?))
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every entry of `x`.
pub fn finite_difference<F>(x: &Mat, h: f64, mut f: F) -> Result<Mat>
where
    F: FnMut(&Mat) -> Result<f64>,
{
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Largest entrywise relative error of `grad` against `reference`. Each
/// entry is scaled by `max(|g|, |r|, floor · ‖r‖∞)` so entries far below the
/// gradient's own magnitude are judged on an absolute scale.
pub fn max_relative_error(grad: &Mat, reference: &Mat, floor: f64) -> f64 {
    let scale = reference.max_abs().max(grad.max_abs());
    grad.data()
        .iter()
        .zip(reference.data())
        .map(|(&g, &r)| {
            let denom = g.abs().max(r.abs()).max(floor * scale).max(f64::MIN_POSITIVE);
            (g - r).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyStep {
    /// Latent timestep the step started from (`T..=1`).
    pub t: usize,
    pub energy: f64,
    /// Norm of `∇_z E`; 0 when λ = 0 and the gradient is skipped.
    pub grad_norm: f64,
    /// Wall time of the step; the only non-reproducible column.
    pub ms: f64,
    pub converged: bool,
    pub degenerate: bool,
    pub nonfinite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub steps: Vec<EnergyStep>,
    pub final_energy: f64,
    pub config: GuidanceConfig,
}

impl EnergyTrace {
    pub fn energies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.energy).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm).collect()
    }

    /// CSV with columns `t, energy, grad_norm, ms`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let fail = |e: csv::Error| Error::Format {
            what: "energy trace",
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "energy", "grad_norm", "ms"]).map_err(fail)?;
        for s in &self.steps {
            w.write_record([
                s.t.to_string(),
                s.energy.to_string(),
                s.grad_norm.to_string(),
                s.ms.to_string(),
            ])
            .map_err(fail)?;
        }
        w.into_inner().map_err(|e| Error::Format {
            what: "energy trace",
            reason: e.to_string(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_bytes(path, &self.to_csv()?)
    }
}

#[derive(Clone, Debug)]
pub struct GuidedRun {
    pub final_latent: LatentState,
    pub trace: GenerationTrace,
    pub energy: EnergyTrace,
}

/// `z_T` for `seed`, then the generator the run continues with.
pub fn initial_latent(model: &Denoiser, schedule: &NoiseSchedule, seed: u64) -> Result<(LatentState, ChaCha8Rng)> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Mat::from_fn(cfg.pixels(), cfg.channels, |_, _| StandardNormal.sample(&mut rng));
    let z = LatentState::new(data, cfg.resolution, cfg.resolution, schedule.total_steps())?;
    Ok((z, rng))
}

fn step_err(step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Step {
        step,
        source: Box::new(e),
    }
}

/// Classifier-free guided sampling without the energy term. Records the
/// conditional pass's attention at every step.
pub fn run_cfg_sampling(model: &Denoiser, schedule: &NoiseSchedule, config: &GuidanceConfig) -> Result<(LatentState, GenerationTrace)> {
    let cond = model.embed(&config.prompt)?;
    let null = model.embed(&[NULL_TOKEN])?;
    let (mut z, mut rng) = initial_latent(model, schedule, config.seed)?;
    let mut records = Vec::with_capacity(schedule.total_steps() * 5);
    while z.timestep > 0 {
        let step = z.timestep;
        let err = step_err(step);
        let un = model.forward(&z, &null, schedule).map_err(&err)?;
        let con = model.forward(&z, &cond, schedule).map_err(&err)?;
        let eps = cfg_combine(&un.epsilon_hat, &con.epsilon_hat, config.gamma).map_err(&err)?;
        records.extend(con.attention_records);
        z = sampler_step(schedule, &z, &eps, config.sampler, &mut rng).map_err(&err)?;
    }
    let trace = GenerationTrace {
        records,
        prompt: config.prompt.clone(),
        attribution_prompt: config.attribution_prompt.clone(),
        final_latent: z.clone(),
        seed: config.seed,
    };
    Ok((z, trace))
}

/// Energy-guided sampling from `z_T(seed)` down to `z_0`.
pub fn run_guided_sampling(model: &Denoiser, schedule: &NoiseSchedule, config: &GuidanceConfig) -> Result<GuidedRun> {
    let (cond, attr, tokens) = embed_config(model, config)?;
    let null = model.embed(&[NULL_TOKEN])?;
    let (mut z, mut rng) = initial_latent(model, schedule, config.seed)?;
    let want_grad = config.lambda > 0.0;
    let mut records = Vec::with_capacity(schedule.total_steps() * 5);
    let mut steps = Vec::with_capacity(schedule.total_steps());
    while z.timestep > 0 {
        let started = Instant::now();
        let step = z.timestep;
        let err = step_err(step);
        let un = model.forward(&z, &null, schedule).map_err(&err)?;
        let con = conditional_pass(model, schedule, &z, &cond, &attr, tokens, config, [config.sinkhorn; 2], want_grad)
            .map_err(&err)?;
        let eps_cfg = cfg_combine(&un.epsilon_hat, &con.epsilon, config.gamma).map_err(&err)?;
        let eps = if want_grad {
            let ab = schedule.alpha_bar_at(step).map_err(&err)?;
            energy_correct(&eps_cfg, &con.grad, config.lambda, ab).map_err(&err)?
        } else {
            eps_cfg
        };
        z = sampler_step(schedule, &z, &eps, config.sampler, &mut rng).map_err(&err)?;
        steps.push(EnergyStep {
            t: step,
            energy: con.energy,
            grad_norm: con.grad.norm(),
            ms: started.elapsed().as_secs_f64() * 1e3,
            converged: con.converged,
            degenerate: con.degenerate,
            nonfinite: con.nonfinite,
        });
        records.extend(con.records);
    }
    let final_energy = steps.last().map_or(0.0, |s| s.energy);
    Ok(GuidedRun {
        trace: GenerationTrace {
            records,
            prompt: config.prompt.clone(),
            attribution_prompt: config.attribution_prompt.clone(),
            final_latent: z.clone(),
            seed: config.seed,
        },
        final_latent: z,
        energy: EnergyTrace {
            steps,
            final_energy,
            config: config.clone(),
        },
    })
}

/// One guided run per seed, sharing the model.
pub fn run_guided_batch(
    exec: Exec,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    seeds: &[u64],
) -> Result<Vec<GuidedRun>> {
    exec.try_map(seeds, |&seed| {
        let c = GuidanceConfig {
            seed,
            ..config.clone()
        };
        run_guided_sampling(model, schedule, &c)
    })
}
