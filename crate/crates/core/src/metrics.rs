//! Quantile masks, IoU/BIoU entanglement scores, batch means and risk
//! difference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::denoiser::network::BlockId;
use crate::denoiser::prompt::TokenId;
use crate::error::{Error, Result};
use crate::softselect::ceil_rank;

pub const DEFAULT_Q: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    /// Row-major entries in `{0, 1}`.
    pub values: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub q: f64,
    pub concept: TokenId,
}

impl BinaryMask {
    pub fn ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Argument(format!("quantile {q} not in (0, 1)")));
    }
    Ok(())
}

/// The `⌈q·n⌉`-th smallest value (nearest rank).
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    check_q(q)?;
    if values.is_empty() {
        return Err(Error::Argument("empty map".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("map contains non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ceil_rank(q, values.len()).clamp(1, values.len());
    Ok(sorted[rank - 1])
}

/// `1` where the value is at least the nearest-rank `q` quantile.
pub fn quantile_threshold(map: &AttributionMap, q: f64) -> Result<BinaryMask> {
    let v = nearest_rank(&map.values, q)?;
    Ok(BinaryMask {
        values: map.values.iter().map(|&m| (m >= v) as u8).collect(),
        height: map.height,
        width: map.width,
        q,
        concept: map.concept,
    })
}

/// `|a ∧ b| / |a ∨ b|`, and 0 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) || a.values.len() != b.values.len() {
        return Err(Error::Argument(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Biou {
    pub per_block: Vec<f64>,
    pub average: f64,
}

pub fn biou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<Biou> {
    if pairs.is_empty() {
        return Err(Error::Argument("no block mask pairs".into()));
    }
    let per_block = pairs
        .iter()
        .map(|(a, b)| iou(a, b))
        .collect::<Result<Vec<_>>>()?;
    let average = mean(&per_block);
    Ok(Biou { per_block, average })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `|Pr(g1) − Pr(g2)|` over the empirical label distribution.
pub fn risk_difference<L: PartialEq>(labels: &[L], g1: &L, g2: &L) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Argument("no group labels".into()));
    }
    let n = labels.len() as f64;
    let p1 = labels.iter().filter(|l| *l == g1).count() as f64 / n;
    let p2 = labels.iter().filter(|l| *l == g2).count() as f64 / n;
    Ok((p1 - p2).abs())
}

/// Per-image scores for one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub run_id: String,
    pub seed: u64,
    /// The generation prompt's subject token (the semantics-side concept).
    pub profession_token: String,
    pub concept_a: String,
    pub concept_b: String,
    pub iou: f64,
    pub biou_avg: f64,
    /// Per-block IoU in [`BlockId::ALL`] order.
    pub biou_blocks: Vec<f64>,
    /// Toy classifier label of the image, `none` without foreground.
    pub group: String,
}

/// `(mIoU, mBIoU)`.
pub fn batch_means(images: &[ImageMetrics]) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::Argument("no images".into()));
    }
    let n = images.len() as f64;
    let miou = images.iter().map(|m| m.iou).sum::<f64>() / n;
    let mbiou = images.iter().map(|m| m.biou_avg).sum::<f64>() / n;
    Ok((miou, mbiou))
}

/// Mean over images of each block's IoU.
pub fn per_block_means(images: &[ImageMetrics]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Argument("no images".into()));
    }
    let blocks = images[0].biou_blocks.len();
    let n = images.len() as f64;
    Ok((0..blocks)
        .map(|b| images.iter().map(|m| m.biou_blocks[b]).sum::<f64>() / n)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskDifference {
    pub g1: String,
    pub g2: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub prompt: Vec<String>,
    pub attribution_prompt: Vec<String>,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub gamma: f64,
    pub q: f64,
    pub tau: f64,
    pub sampler: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: RunMetadata,
    pub images: Vec<ImageMetrics>,
    pub miou: f64,
    pub mbiou: f64,
    /// Block names matching `mbiou_per_block`.
    pub blocks: Vec<String>,
    pub mbiou_per_block: Vec<f64>,
    pub risk_differences: Vec<RiskDifference>,
    /// Labels counted for the risk differences (`none` excluded).
    pub labelled: usize,
}

impl MetricsReport {
    /// Assembles batch statistics over `images`. `groups` lists the group
    /// names in pair order; labels outside it are excluded from RD.
    pub fn assemble(metadata: RunMetadata, images: Vec<ImageMetrics>, groups: &[&str]) -> Result<Self> {
        let (miou, mbiou) = batch_means(&images)?;
        let mbiou_per_block = per_block_means(&images)?;
        let labels: Vec<String> = images
            .iter()
            .map(|m| m.group.clone())
            .filter(|g| groups.contains(&g.as_str()))
            .collect();
        let labelled = labels.len();
        let mut risk_differences = Vec::new();
        if !labels.is_empty() {
            for (i, g1) in groups.iter().enumerate() {
                for g2 in &groups[i + 1..] {
                    risk_differences.push(RiskDifference {
                        g1: g1.to_string(),
                        g2: g2.to_string(),
                        value: risk_difference(&labels, &g1.to_string(), &g2.to_string())?,
                    });
                }
            }
        }
        Ok(MetricsReport {
            metadata,
            images,
            miou,
            mbiou,
            blocks: BlockId::ALL.iter().map(|b| b.name().to_string()).collect(),
            mbiou_per_block,
            risk_differences,
            labelled,
        })
    }
}

pub const CSV_COLUMNS: [&str; 12] = [
    "run_id",
    "seed",
    "profession_token",
    "concept_a",
    "concept_b",
    "iou",
    "biou_avg",
    "biou_down16",
    "biou_down8",
    "biou_mid4",
    "biou_up8",
    "biou_up16",
];

/// One CSV row per image across `reports`.
pub fn encode_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let fail = |e: csv::Error| Error::Format {
        what: "metrics csv",
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(fail)?;
    for r in reports {
        for m in &r.images {
            let mut row = vec![
                m.run_id.clone(),
                m.seed.to_string(),
                m.profession_token.clone(),
                m.concept_a.clone(),
                m.concept_b.clone(),
                m.iou.to_string(),
                m.biou_avg.to_string(),
            ];
            row.extend(m.biou_blocks.iter().map(f64::to_string));
            w.write_record(&row).map_err(fail)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format {
        what: "metrics csv",
        reason: e.to_string(),
    })
}

/// Parsed CSV row: `(run_id, seed, iou, biou_avg, per-block)`.
pub type CsvRow = (String, u64, f64, f64, Vec<f64>);

pub fn decode_csv(bytes: &[u8]) -> Result<Vec<CsvRow>> {
    let bad = |reason: String| Error::Format {
        what: "metrics csv",
        reason,
    };
    let mut r = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != CSV_COLUMNS.len() {
            return Err(bad(format!("row has {} fields", rec.len())));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("bad number `{}`", &rec[i]))) };
        let seed = rec[1].parse().map_err(|_| bad(format!("bad seed `{}`", &rec[1])))?;
        let blocks = (7..12).map(num).collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].to_string(), seed, num(5)?, num(6)?, blocks));
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    crate::fsutil::write_bytes(path, &encode_csv(reports)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{BlockScope, StepScope};

    fn map(values: Vec<f64>, h: usize, w: usize) -> AttributionMap {
        AttributionMap {
            values,
            height: h,
            width: w,
            concept: TokenId(2),
            scope: BlockScope::All,
            steps: StepScope::All,
        }
    }

    fn mask(values: Vec<u8>, h: usize, w: usize) -> BinaryMask {
        BinaryMask {
            values,
            height: h,
            width: w,
            q: 0.7,
            concept: TokenId(2),
        }
    }

    #[test]
    fn quantile_examples() {
        let m = quantile_threshold(&map(vec![0.1, 0.2, 0.3, 0.4], 2, 2), 0.7).unwrap();
        assert_eq!(m.values, vec![0, 0, 1, 1]);
        let c = quantile_threshold(&map(vec![2.0; 6], 2, 3), 0.7).unwrap();
        assert_eq!(c.ones(), 6);
        assert!(quantile_threshold(&map(vec![1.0], 1, 1), 1.0).is_err());
        assert!(quantile_threshold(&map(vec![1.0], 1, 1), 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = mask(vec![1, 1, 0, 0], 2, 2);
        let b = mask(vec![1, 0, 1, 0], 2, 2);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(vec![0, 0, 1, 1], 2, 2)).unwrap(), 0.0);
        assert_eq!(iou(&mask(vec![0; 4], 2, 2), &mask(vec![0; 4], 2, 2)).unwrap(), 0.0);
        assert!(iou(&a, &mask(vec![1, 0, 1, 0], 4, 1)).is_err());
    }

    #[test]
    fn biou_and_means() {
        let a = mask(vec![1, 0], 1, 2);
        let b = mask(vec![0, 1], 1, 2);
        let r = biou(&[(a.clone(), a.clone()), (a.clone(), b)]).unwrap();
        assert_eq!(r.per_block, vec![1.0, 0.0]);
        assert_eq!(r.average, 0.5);
        assert_eq!(biou(&[(a.clone(), a)]).unwrap().average, 1.0);
        assert!(biou(&[]).is_err());
    }

    #[test]
    fn risk_difference_examples() {
        assert_eq!(risk_difference(&["r", "r"], &"r", &"g").unwrap(), 1.0);
        assert_eq!(risk_difference(&["r", "g"], &"r", &"g").unwrap(), 0.0);
        let l = ["r", "r", "r", "r", "g"];
        assert!((risk_difference(&l, &"r", &"g").unwrap() - 0.6).abs() < 1e-15);
        assert!(risk_difference::<&str>(&[], &"r", &"g").is_err());
    }
}
