//! Synthetic coloured-shape scenes with a skewed colour/shape co-occurrence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::DatasetConfig;
use crate::denoiser::prompt::{token, token_name, TokenId, COLORS, START_TOKEN};
use crate::denoiser::schedule::LatentState;
use crate::denoiser::train::TrainingItem;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MANIFEST_VERSION: u32 = 1;

/// What to draw; placement follows from the shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: String,
    pub color: String,
    pub resolution: usize,
    pub jitter: usize,
    pub intensity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: LatentState,
    /// Ground truth per concept token: the object's pixels for both the
    /// shape and the colour token.
    pub masks: Vec<(TokenId, Vec<u8>)>,
}

fn rgb(color: &str) -> Result<[f64; 3]> {
    match color {
        "red" => Ok([1.0, -1.0, -1.0]),
        "green" => Ok([-1.0, 1.0, -1.0]),
        "blue" => Ok([-1.0, -1.0, 1.0]),
        other => Err(Error::Lookup {
            kind: "colour",
            name: other.to_string(),
        }),
    }
}

/// Object membership at the centre of pixel `(y, x)`, in units of a 16-pixel
/// canvas shifted by `(dy, dx)`.
fn inside(shape: &str, u: f64, v: f64) -> bool {
    match shape {
        "circle" => (u - 4.5).powi(2) + (v - 4.5).powi(2) <= 3.6 * 3.6,
        "square" => (1.0..8.0).contains(&u) && (8.0..15.0).contains(&v),
        "bar" => (11.0..15.0).contains(&u) && (2.0..14.0).contains(&v),
        _ => false,
    }
}

pub fn render(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let shape_tok = token(&spec.shape)?;
    let color_tok = token(&spec.color)?;
    let base = rgb(&spec.color)?;
    if !matches!(spec.shape.as_str(), "circle" | "square" | "bar") {
        return Err(Error::Lookup {
            kind: "shape",
            name: spec.shape.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = spec.jitter as i64;
    let dy = rng.random_range(-j..=j) as f64;
    let dx = rng.random_range(-j..=j) as f64;
    let [lo, hi] = spec.intensity;
    let level = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let r = spec.resolution;
    let f = r as f64 / 16.0;
    let mut mask = vec![0u8; r * r];
    let mut data = Mat::zeros(r * r, 3);
    for y in 0..r {
        for x in 0..r {
            let u = (y as f64 + 0.5) / f - dy;
            let v = (x as f64 + 0.5) / f - dx;
            if inside(&spec.shape, u, v) {
                let p = y * r + x;
                mask[p] = 1;
                for (c, b) in base.iter().enumerate() {
                    data.set(p, c, b * level);
                }
            }
        }
    }
    Ok(Scene {
        image: LatentState::new(data, r, r, 0)?,
        masks: vec![(shape_tok, mask.clone()), (color_tok, mask)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub shape: String,
    pub color: String,
    pub caption: Vec<String>,
    pub render_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub resolution: usize,
    /// SHA-256 over every item's labels, caption and image bytes.
    pub hash: String,
    /// `counts[shape][color]`, shapes in skew-table order.
    pub counts: Vec<(String, [usize; 3])>,
    pub items: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub scene: Scene,
    pub shape: String,
    pub color: String,
    pub caption: Vec<TokenId>,
}

impl DatasetItem {
    pub fn training_item(&self) -> TrainingItem {
        TrainingItem {
            image: self.scene.image.clone(),
            caption: self.caption.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub manifest: Manifest,
}

fn pick(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn generate_dataset(config: &DatasetConfig, resolution: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(config.size);
    let mut entries = Vec::with_capacity(config.size);
    let mut counts: Vec<(String, [usize; 3])> = config.skew.iter().map(|r| (r.shape.clone(), [0; 3])).collect();
    let mut hasher = Sha256::new();
    for index in 0..config.size {
        let s = rng.random_range(0..config.skew.len());
        let row = &config.skew[s];
        let c = pick(&mut rng, &row.colors);
        let with_color = rng.random::<f64>() < config.caption_color_prob;
        let render_seed: u64 = rng.random();
        let spec = SceneSpec {
            shape: row.shape.clone(),
            color: COLORS[c].to_string(),
            resolution,
            jitter: config.jitter,
            intensity: config.intensity,
        };
        let scene = render(&spec, render_seed)?;
        let mut caption = vec![START_TOKEN, token(&row.shape)?];
        if with_color {
            caption.push(token(COLORS[c])?);
        }
        counts[s].1[c] += 1;
        hasher.update((s as u32).to_le_bytes());
        hasher.update((c as u32).to_le_bytes());
        for t in &caption {
            hasher.update((t.0 as u32).to_le_bytes());
        }
        for v in scene.image.data.data() {
            hasher.update(v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            index,
            shape: spec.shape.clone(),
            color: spec.color.clone(),
            caption: caption.iter().map(|&t| token_name(t).to_string()).collect(),
            render_seed,
        });
        items.push(DatasetItem {
            scene,
            shape: spec.shape,
            color: spec.color,
            caption,
        });
    }
    Ok(Dataset {
        items,
        manifest: Manifest {
            version: MANIFEST_VERSION,
            seed,
            size: config.size,
            resolution,
            hash: hex::encode(hasher.finalize()),
            counts,
            items: entries,
        },
    })
}

/// Group label assigned by [`toy_group_classifier`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLabel {
    Red,
    Green,
    Blue,
    None,
}

impl GroupLabel {
    pub fn name(self) -> &'static str {
        match self {
            GroupLabel::Red => "red",
            GroupLabel::Green => "green",
            GroupLabel::Blue => "blue",
            GroupLabel::None => "none",
        }
    }
}

/// Pixels whose largest channel deviation from gray exceeds this are
/// foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;

/// Dominant channel of the mean foreground colour; ties go to the earlier of
/// red, green, blue.
pub fn toy_group_classifier(image: &LatentState) -> GroupLabel {
    let d = &image.data;
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for p in 0..d.rows() {
        let row = d.row(p);
        if row.iter().take(3).any(|v| v.abs() > FOREGROUND_THRESHOLD) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 || d.cols() < 3 {
        return GroupLabel::None;
    }
    let mut best = 0;
    for c in 1..3 {
        if sums[c] > sums[best] {
            best = c;
        }
    }
    [GroupLabel::Red, GroupLabel::Green, GroupLabel::Blue][best]
}
