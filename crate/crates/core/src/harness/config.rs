//! Versioned experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::network::DenoiserConfig;
use crate::denoiser::prompt::{token, COLORS, SHAPES, START_TOKEN};
use crate::denoiser::sampler::SamplerMode;
use crate::denoiser::schedule::ScheduleParams;
use crate::denoiser::train::TrainerConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guidance::GuidanceConfig;
use crate::softselect::Stopping;

pub const CONFIG_VERSION: u32 = 1;

/// Colour distribution for one shape, in [`COLORS`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewRow {
    pub shape: String,
    pub colors: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub skew: Vec<SkewRow>,
    /// Probability that a caption names the colour as well as the shape.
    pub caption_color_prob: f64,
    /// Maximum placement offset in pixels.
    pub jitter: usize,
    pub intensity: [f64; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 2048,
            skew: vec![
                SkewRow {
                    shape: "circle".into(),
                    colors: [0.9, 0.05, 0.05],
                },
                SkewRow {
                    shape: "square".into(),
                    colors: [0.05, 0.9, 0.05],
                },
                SkewRow {
                    shape: "bar".into(),
                    colors: [0.05, 0.05, 0.9],
                },
            ],
            caption_color_prob: 0.5,
            jitter: 1,
            intensity: [0.7, 1.0],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("dataset.size", "must be positive"));
        }
        if self.skew.is_empty() {
            return Err(Error::config("dataset.skew", "needs at least one shape"));
        }
        for row in &self.skew {
            if !SHAPES.contains(&row.shape.as_str()) {
                return Err(Error::config("dataset.skew", format!("unknown shape `{}`", row.shape)));
            }
            if self.skew.iter().filter(|r| r.shape == row.shape).count() > 1 {
                return Err(Error::config("dataset.skew", format!("shape `{}` listed twice", row.shape)));
            }
            let sum: f64 = row.colors.iter().sum();
            if row.colors.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    "dataset.skew",
                    format!("row `{}` must be nonnegative and sum to 1 (sums to {sum})", row.shape),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.caption_color_prob) {
            return Err(Error::config("dataset.caption_color_prob", "must lie in [0, 1]"));
        }
        let [lo, hi] = self.intensity;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("dataset.intensity", "need 0 < lo <= hi <= 1"));
        }
        Ok(())
    }

    pub fn row(&self, shape: &str) -> Result<&SkewRow> {
        self.skew.iter().find(|r| r.shape == shape).ok_or_else(|| Error::Lookup {
            kind: "skew row",
            name: shape.to_string(),
        })
    }

    /// The most likely colour for `shape` (first wins on ties).
    pub fn majority_color(&self, shape: &str) -> Result<&'static str> {
        let row = self.row(shape)?;
        let mut best = 0;
        for c in 1..3 {
            if row.colors[c] > row.colors[best] {
                best = c;
            }
        }
        Ok(COLORS[best])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub heldout: usize,
    pub optimizer: TrainerConfig,
    /// Print a progress line every this many steps; 0 disables.
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 2000,
            batch_size: 32,
            heldout: 64,
            optimizer: TrainerConfig::default(),
            log_every: 200,
        }
    }
}

/// Sampling and guidance settings shared by every prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSettings {
    pub gamma: f64,
    pub lambda: f64,
    pub q: f64,
    pub tau: f64,
    pub sampler: SamplerMode,
    pub sinkhorn: Stopping,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        GuidanceSettings {
            gamma: g.gamma,
            lambda: g.lambda,
            q: g.q,
            tau: g.tau,
            sampler: g.sampler,
            sinkhorn: g.sinkhorn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Shape tokens to generate; each becomes the prompt `<start> shape`.
    pub prompts: Vec<String>,
    pub n_images: usize,
    /// Image `i` uses seed `seed_base + i`.
    pub seed_base: u64,
    /// Colour concept attributed for every prompt; `None` uses the prompt's
    /// majority colour under the skew table.
    pub concept_a: Option<String>,
    pub heatmaps: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            prompts: SHAPES.iter().map(|s| s.to_string()).collect(),
            n_images: 50,
            seed_base: 1000,
            concept_a: None,
            heatmaps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub exec: Exec,
    pub dataset: DatasetConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub training: TrainingConfig,
    pub guidance: GuidanceSettings,
    pub audit: AuditConfig,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            exec: Exec::default(),
            dataset: DatasetConfig::default(),
            model: DenoiserConfig::default(),
            schedule: ScheduleParams::default(),
            training: TrainingConfig::default(),
            guidance: GuidanceSettings::default(),
            audit: AuditConfig::default(),
            out_dir: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/model.json"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => return Err(Error::config("version", format!("unsupported version {v}"))),
            None => return Err(Error::config("version", "missing top-level \"version\"")),
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        if self.training.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if self.audit.n_images == 0 {
            return Err(Error::config("audit.n_images", "must be positive"));
        }
        for p in &self.audit.prompts {
            self.dataset.row(p)?;
        }
        if let Some(c) = &self.audit.concept_a {
            if !COLORS.contains(&c.as_str()) {
                return Err(Error::config("audit.concept_a", format!("`{c}` is not a colour")));
            }
        }
        self.guidance_for(&self.dataset.skew[0].shape, 0)?;
        Ok(())
    }

    /// Colour concept attributed against `shape`.
    pub fn concept_a(&self, shape: &str) -> Result<String> {
        match &self.audit.concept_a {
            Some(c) => Ok(c.clone()),
            None => Ok(self.dataset.majority_color(shape)?.to_string()),
        }
    }

    /// Full guidance configuration for one prompt and seed.
    pub fn guidance_for(&self, shape: &str, seed: u64) -> Result<GuidanceConfig> {
        let s = &self.guidance;
        let shape_tok = token(shape)?;
        let color_tok = token(&self.concept_a(shape)?)?;
        let cfg = GuidanceConfig {
            gamma: s.gamma,
            lambda: s.lambda,
            q: s.q,
            tau: s.tau,
            sampler: s.sampler,
            seed,
            concept_a: color_tok,
            concept_b: shape_tok,
            prompt: vec![START_TOKEN, shape_tok],
            attribution_prompt: vec![START_TOKEN, shape_tok, color_tok],
            sinkhorn: s.sinkhorn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.audit.n_images as u64).map(|i| self.audit.seed_base + i).collect()
    }
}
