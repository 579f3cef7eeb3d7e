//! Training, audit, mitigation, gradient-check and report drivers.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{generate_dataset, toy_group_classifier, Dataset};
use super::stats::{mean, sign_test_lower, SignTest};
use crate::attribution::{attribution_set, encode_image_ppm, encode_overlay_ppm, encode_pgm, GenerationTrace};
use crate::denoiser::checkpoint;
use crate::denoiser::network::{BlockId, Denoiser, DenoiserConfig};
use crate::denoiser::prompt::{token, token_name, COLORS, START_TOKEN};
use crate::denoiser::schedule::{q_sample, LatentState, NoiseSchedule, ScheduleParams};
use crate::denoiser::train::{noise_mse, Trainer, TrainingItem};
use crate::error::{Error, Result};
use crate::fsutil::write_bytes;
use crate::guidance::{
    energy, energy_value, finite_difference, max_relative_error, run_cfg_sampling, run_guided_sampling,
    EnergyTrace, GuidanceConfig,
};
use crate::metrics::{biou, encode_csv, iou, quantile_threshold, BinaryMask, ImageMetrics, MetricsReport, RunMetadata};
use crate::tensor::Mat;
use crate::softselect::Stopping;

/// Seed offset separating the held-out set from the training set.
const HELDOUT_SEED_OFFSET: u64 = 0x5eed_0ff5e7;

pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(&config.dataset, config.model.resolution, config.seed)
}

fn heldout_items(config: &ExperimentConfig) -> Result<Vec<TrainingItem>> {
    let mut d = config.dataset.clone();
    d.size = config.training.heldout.max(1);
    let set = generate_dataset(&d, config.model.resolution, config.seed.wrapping_add(HELDOUT_SEED_OFFSET))?;
    Ok(set.items.iter().map(|i| i.training_item()).collect())
}

/// Held-out noise MSE with draws fixed by `config.seed`.
pub fn heldout_mse(model: &Denoiser, schedule: &NoiseSchedule, items: &[TrainingItem], config: &ExperimentConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(HELDOUT_SEED_OFFSET) ^ 1);
    noise_mse(model, items, schedule, None, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
    /// `1 − final / initial`.
    pub reduction: f64,
    pub dataset_hash: String,
}

/// Trains a fresh model on the synthetic dataset. `log` receives progress
/// lines.
pub fn train(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<(Denoiser, TrainingSummary)> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    let data = build_dataset(config)?;
    let items: Vec<TrainingItem> = data.items.iter().map(|i| i.training_item()).collect();
    let heldout = heldout_items(config)?;
    let mut model = Denoiser::new(config.model.clone(), config.seed)?;
    let initial = heldout_mse(&model, &schedule, &heldout, config)?;
    log(&format!("held-out mse at init {initial:.4}"));
    let mut trainer = Trainer::new(&model, config.training.optimizer.clone(), config.exec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(config.training.steps);
    for step in 0..config.training.steps {
        let batch: Vec<TrainingItem> = (0..config.training.batch_size)
            .map(|_| items[rng.random_range(0..items.len())].clone())
            .collect();
        let loss = trainer.train_step(&mut model, &batch, &schedule, &mut rng)?;
        losses.push(loss);
        let every = config.training.log_every;
        if every > 0 && (step + 1) % every == 0 {
            let window = &losses[losses.len().saturating_sub(every)..];
            log(&format!("step {:>5}  loss {:.4}", step + 1, mean(window)));
        }
    }
    let fin = heldout_mse(&model, &schedule, &heldout, config)?;
    log(&format!("held-out mse after training {fin:.4}"));
    Ok((
        model,
        TrainingSummary {
            steps: config.training.steps,
            losses,
            heldout_initial: initial,
            heldout_final: fin,
            reduction: 1.0 - fin / initial,
            dataset_hash: data.manifest.hash,
        },
    ))
}

/// Per-image metrics of a finished run.
pub fn image_metrics(model: &Denoiser, trace: &GenerationTrace, gcfg: &GuidanceConfig, run_id: &str) -> Result<ImageMetrics> {
    let attr = model.embed(&gcfg.attribution_prompt)?;
    let [ia, ib] = gcfg.token_positions()?;
    let a = attribution_set(model, trace, &attr, ia)?;
    let b = attribution_set(model, trace, &attr, ib)?;
    let agg = iou(&quantile_threshold(&a.aggregate, gcfg.q)?, &quantile_threshold(&b.aggregate, gcfg.q)?)?;
    let pairs = a
        .blockwise
        .iter()
        .zip(&b.blockwise)
        .map(|(ma, mb)| Ok((quantile_threshold(ma, gcfg.q)?, quantile_threshold(mb, gcfg.q)?)))
        .collect::<Result<Vec<_>>>()?;
    let block = biou(&pairs)?;
    Ok(ImageMetrics {
        run_id: run_id.to_string(),
        seed: trace.seed,
        profession_token: token_name(gcfg.concept_b).to_string(),
        concept_a: token_name(gcfg.concept_a).to_string(),
        concept_b: token_name(gcfg.concept_b).to_string(),
        iou: agg,
        biou_avg: block.average,
        biou_blocks: block.per_block,
        group: toy_group_classifier(&trace.final_latent).name().to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Plain classifier-free guidance.
    Audit,
    /// Energy-guided sampling with the configured λ.
    Mitigate,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Audit => "audit",
            RunMode::Mitigate => "mitigate",
        }
    }
}

/// One generated image with what the outputs need from it.
#[derive(Clone, Debug)]
pub struct ImageRun {
    pub metrics: ImageMetrics,
    pub energy: Option<EnergyTrace>,
    /// `(file name, bytes)` heatmap exports.
    pub heatmaps: Vec<(String, Vec<u8>)>,
    pub final_latent: LatentState,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub mode: RunMode,
    pub reports: Vec<MetricsReport>,
    pub images: Vec<Vec<ImageRun>>,
}

pub fn run_id(shape: &str, seed: u64) -> String {
    format!("{shape}-s{seed}")
}

fn one_image(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    mode: RunMode,
    id: &str,
    heatmaps: bool,
) -> Result<ImageRun> {
    let (trace, energy) = match mode {
        RunMode::Audit => (run_cfg_sampling(model, schedule, gcfg)?.1, None),
        RunMode::Mitigate => {
            let run = run_guided_sampling(model, schedule, gcfg)?;
            (run.trace, Some(run.energy))
        }
    };
    let metrics = image_metrics(model, &trace, gcfg, id)?;
    let mut maps = Vec::new();
    if heatmaps {
        let attr = model.embed(&gcfg.attribution_prompt)?;
        maps.push((format!("{id}.ppm"), encode_image_ppm(&trace.final_latent)));
        for (i, &tok) in gcfg.attribution_prompt.iter().enumerate().skip(1) {
            let set = attribution_set(model, &trace, &attr, i)?;
            let name = token_name(tok);
            maps.push((format!("{id}_{name}.pgm"), encode_pgm(&set.aggregate)));
            maps.push((format!("{id}_{name}_overlay.ppm"), encode_overlay_ppm(&set.aggregate, &trace.final_latent)?));
        }
    }
    Ok(ImageRun {
        metrics,
        energy,
        heatmaps: maps,
        final_latent: trace.final_latent,
    })
}

/// Samples `n_images` per prompt and scores them. `lambda` overrides the
/// configured energy scale for [`RunMode::Mitigate`]; audits always run at
/// λ = 0.
pub fn evaluate(model: &Denoiser, config: &ExperimentConfig, mode: RunMode) -> Result<RunOutput> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    let seeds = config.seeds();
    let mut reports = Vec::new();
    let mut images = Vec::new();
    for shape in &config.audit.prompts {
        let base = config.guidance_for(shape, 0)?;
        let lambda = match mode {
            RunMode::Audit => 0.0,
            RunMode::Mitigate => base.lambda,
        };
        let runs = config.exec.try_map(&seeds, |&seed| {
            let gcfg = GuidanceConfig {
                seed,
                lambda,
                ..base.clone()
            };
            one_image(model, &schedule, &gcfg, mode, &run_id(shape, seed), config.audit.heatmaps)
        })?;
        let metadata = RunMetadata {
            prompt: base.prompt.iter().map(|&t| token_name(t).to_string()).collect(),
            attribution_prompt: base.attribution_prompt.iter().map(|&t| token_name(t).to_string()).collect(),
            seeds: seeds.clone(),
            lambda,
            gamma: base.gamma,
            q: base.q,
            tau: base.tau,
            sampler: format!("{:?}", base.sampler).to_lowercase(),
        };
        let report = MetricsReport::assemble(metadata, runs.iter().map(|r| r.metrics.clone()).collect(), &COLORS)?;
        reports.push(report);
        images.push(runs);
    }
    Ok(RunOutput { mode, reports, images })
}

#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub mode: String,
    pub config: ExperimentConfig,
    pub reports: Vec<MetricsReport>,
}

pub fn summary_json(output: &RunOutput, config: &ExperimentConfig) -> String {
    let s = Summary {
        version: 1,
        mode: output.mode.name().to_string(),
        config: config.clone(),
        reports: output.reports.clone(),
    };
    serde_json::to_string_pretty(&s).expect("summary serialises")
}

/// Writes `metrics.csv`, `summary.json` and, when present, energy traces and
/// heatmaps under `dir`.
pub fn write_outputs(dir: &Path, output: &RunOutput, config: &ExperimentConfig) -> Result<()> {
    write_bytes(&dir.join("metrics.csv"), &encode_csv(&output.reports)?)?;
    write_bytes(&dir.join("summary.json"), summary_json(output, config).as_bytes())?;
    for run in output.images.iter().flatten() {
        if let Some(trace) = &run.energy {
            trace.write_csv(&dir.join("energy").join(format!("{}.csv", run.metrics.run_id)))?;
        }
        for (name, bytes) in &run.heatmaps {
            write_bytes(&dir.join("heatmaps").join(name), bytes)?;
        }
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Denoiser, ScheduleParams)> {
    checkpoint::load(path)
}

/// Mean IoU between the shape token's q-mask and the rendered object mask,
/// with attention traced along forward-noised copies of `n` fresh scenes.
pub fn attribution_sanity(model: &Denoiser, config: &ExperimentConfig, n: usize, seed: u64) -> Result<f64> {
    let schedule = config.schedule.build()?;
    let mut d = config.dataset.clone();
    d.size = n.max(1);
    let scenes = generate_dataset(&d, model.config().resolution, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77);
    let mut total = 0.0;
    for item in &scenes.items {
        let shape = token(&item.shape)?;
        let color = token(&item.color)?;
        let prompt = vec![START_TOKEN, shape];
        let attribution_prompt = vec![START_TOKEN, shape, color];
        let cond = model.embed(&prompt)?;
        let x0 = &item.scene.image;
        let mut records = Vec::new();
        for t in 0..schedule.total_steps() {
            let noise = Mat::from_fn(x0.data.rows(), x0.data.cols(), |_, _| StandardNormal.sample(&mut rng));
            let z = q_sample(&schedule, x0, t, &noise)?;
            records.extend(model.forward(&z, &cond, &schedule)?.attention_records);
        }
        let trace = GenerationTrace {
            records,
            prompt,
            attribution_prompt,
            final_latent: x0.clone(),
            seed,
        };
        let attr = model.embed(&trace.attribution_prompt)?;
        let set = attribution_set(model, &trace, &attr, 1)?;
        let mask = quantile_threshold(&set.aggregate, config.guidance.q)?;
        let truth = BinaryMask {
            values: item.scene.masks[0].1.clone(),
            ..mask.clone()
        };
        total += iou(&mask, &truth)?;
    }
    Ok(total / scenes.items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub seed: u64,
    pub timestep: usize,
    pub energy: f64,
    pub iterations: [usize; 2],
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub entries: Vec<GradcheckEntry>,
    pub worst: f64,
    pub passed: bool,
}

pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Compares the taped energy gradient with central differences on
/// `n_latents` random latents of the reduced 8×8 model.
pub fn gradcheck(n_latents: usize, seed: u64, step: f64, tolerance: f64, gcfg: &GuidanceConfig) -> Result<GradcheckReport> {
    let model = Denoiser::new(DenoiserConfig::reduced(), seed)?;
    let schedule = ScheduleParams::default().build()?;
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let mut entries = Vec::with_capacity(n_latents);
    for i in 0..n_latents {
        let data = Mat::from_fn(cfg.pixels(), cfg.channels, |_, _| StandardNormal.sample(&mut rng));
        let timestep = rng.random_range(1..=schedule.total_steps());
        let z = LatentState::new(data.clone(), cfg.resolution, cfg.resolution, timestep)?;
        let e = energy(&model, &schedule, &z, gcfg)?;
        let stop = e.iterations.map(Stopping::Fixed);
        let fd = finite_difference(&data, step, |x| {
            let zi = LatentState::new(x.clone(), cfg.resolution, cfg.resolution, timestep)?;
            energy_value(&model, &schedule, &zi, gcfg, stop)
        })?;
        entries.push(GradcheckEntry {
            seed: seed.wrapping_add(i as u64),
            timestep,
            energy: e.energy,
            iterations: e.iterations,
            max_relative_error: max_relative_error(&e.grad, &fd, GRADCHECK_FLOOR),
        });
    }
    let worst = entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        step,
        tolerance,
        floor: GRADCHECK_FLOOR,
        entries,
        worst,
        passed: worst.is_finite() && worst <= tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptComparison {
    pub prompt: String,
    pub miou_audit: f64,
    pub miou_mitigate: f64,
    pub mbiou_audit: f64,
    pub mbiou_mitigate: f64,
    /// `100 · (audit − mitigate) / audit`.
    pub reduction_pct: f64,
    pub sign_test: SignTest,
}

/// Pairs audit and mitigation reports by prompt and seed.
pub fn compare(audit: &[MetricsReport], mitigate: &[MetricsReport]) -> Result<Vec<PromptComparison>> {
    let mut out = Vec::new();
    for a in audit {
        let Some(m) = mitigate.iter().find(|m| m.metadata.prompt == a.metadata.prompt) else {
            continue;
        };
        let mut xa = Vec::new();
        let mut xm = Vec::new();
        for ia in &a.images {
            if let Some(im) = m.images.iter().find(|im| im.seed == ia.seed) {
                xa.push(ia.iou);
                xm.push(im.iou);
            }
        }
        if xa.is_empty() {
            continue;
        }
        out.push(PromptComparison {
            prompt: prompt_label(&a.metadata.prompt),
            miou_audit: a.miou,
            miou_mitigate: m.miou,
            mbiou_audit: a.mbiou,
            mbiou_mitigate: m.mbiou,
            reduction_pct: if a.miou > 0.0 { 100.0 * (a.miou - m.miou) / a.miou } else { 0.0 },
            sign_test: sign_test_lower(&xm, &xa)?,
        });
    }
    Ok(out)
}

/// Prompt tokens without the start marker.
fn prompt_label(tokens: &[String]) -> String {
    let start = token_name(START_TOKEN);
    tokens.iter().filter(|t| *t != start).cloned().collect::<Vec<_>>().join(" ")
}

fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "summary",
        reason: e.to_string(),
    })
}

/// Markdown report over `dir/audit` and, if present, `dir/mitigate`.
pub fn report(dir: &Path) -> Result<String> {
    let audit = read_summary(&dir.join("audit").join("summary.json"))?;
    let mitigate_path: PathBuf = dir.join("mitigate").join("summary.json");
    let mitigate = if mitigate_path.exists() {
        Some(read_summary(&mitigate_path)?)
    } else {
        None
    };
    let mut md = String::from("# Entanglement report\n\n## Audit\n\n");
    md.push_str("| prompt | concept | mIoU | mBIoU |");
    for b in BlockId::ALL {
        md.push_str(&format!(" {b} |"));
    }
    md.push_str(" RD |\n|---|---|---|---|");
    md.push_str(&"---|".repeat(BlockId::ALL.len() + 1));
    md.push('\n');
    for r in &audit.reports {
        let rd = r
            .risk_differences
            .iter()
            .map(|d| format!("{}/{} {:.2}", d.g1, d.g2, d.value))
            .collect::<Vec<_>>()
            .join(", ");
        md.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} |",
            prompt_label(&r.metadata.prompt),
            r.metadata.attribution_prompt.last().cloned().unwrap_or_default(),
            r.miou,
            r.mbiou
        ));
        for v in &r.mbiou_per_block {
            md.push_str(&format!(" {v:.3} |"));
        }
        md.push_str(&format!(" {rd} |\n"));
    }
    if let Some(m) = mitigate {
        let lambda = m.reports.first().map_or(0.0, |r| r.metadata.lambda);
        md.push_str(&format!("\n## Mitigation (λ = {lambda})\n\n"));
        md.push_str("| prompt | mIoU audit | mIoU guided | reduction | mBIoU audit | mBIoU guided | lower/higher/ties | p (sign) |\n");
        md.push_str("|---|---|---|---|---|---|---|---|\n");
        for c in compare(&audit.reports, &m.reports)? {
            md.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.1}% | {:.3} | {:.3} | {}/{}/{} | {:.3e} |\n",
                c.prompt,
                c.miou_audit,
                c.miou_mitigate,
                c.reduction_pct,
                c.mbiou_audit,
                c.mbiou_mitigate,
                c.sign_test.lower,
                c.sign_test.higher,
                c.sign_test.ties,
                c.sign_test.p_value
            ));
        }
    }
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_ids_are_stable() {
        assert_eq!(run_id("circle", 1003), "circle-s1003");
    }
}
