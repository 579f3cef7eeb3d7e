//! Open-vocabulary cross-attention attribution from a recorded generation.
//!
//! Maps are recomputed from the stored block queries and keys of an arbitrary
//! attribution prompt, so tokens absent from the generation prompt can be
//! attributed. A map is the unnormalised sum, over blocks, timesteps and
//! heads, of the token's attention column resized to the output resolution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::network::{attention_probs, AttentionBlockRecord, BlockId, Denoiser};
use crate::denoiser::prompt::{PromptEmbedding, TokenId};
use crate::denoiser::schedule::LatentState;
use crate::error::{Error, Result};
use crate::tensor::{Mat, SparseMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockScope {
    All,
    Block(BlockId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepScope {
    All,
    /// A single schedule index.
    Step(usize),
}

/// A nonnegative `height × width` attention-mass map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub concept: TokenId,
    pub scope: BlockScope,
    pub steps: StepScope,
}

impl AttributionMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.values.len(), 1, self.values.clone())
    }
}

/// The attention recorded while sampling one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    /// Conditional-pass records, grouped by step (descending schedule index)
    /// and in block order within a step.
    pub records: Vec<AttentionBlockRecord>,
    pub prompt: Vec<TokenId>,
    pub attribution_prompt: Vec<TokenId>,
    pub final_latent: LatentState,
    pub seed: u64,
}

impl GenerationTrace {
    pub fn record(&self, block: BlockId, t_index: usize) -> Result<&AttentionBlockRecord> {
        self.records
            .iter()
            .find(|r| r.block == block && r.timestep == t_index)
            .ok_or_else(|| {
                Error::TraceIncomplete(format!("no record for block {block} at step {t_index}"))
            })
    }

    /// Distinct blocks present, in declared order.
    pub fn blocks(&self) -> Vec<BlockId> {
        BlockId::ALL
            .into_iter()
            .filter(|b| self.records.iter().any(|r| r.block == *b))
            .collect()
    }

    /// Distinct schedule indices present, in recording order.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.timestep) {
                out.push(r.timestep);
            }
        }
        out
    }

    /// Every present block has a record at every present step.
    pub fn check_complete(&self) -> Result<()> {
        let steps = self.timesteps();
        for b in self.blocks() {
            for &t in &steps {
                self.record(b, t)?;
            }
        }
        Ok(())
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.final_latent.height, self.final_latent.width)
    }
}

/// `K'_i = X' · W_K(i)` for the attribution prompt.
pub fn attribution_keys(model: &Denoiser, attr_prompt: &PromptEmbedding, block: BlockId) -> Result<Mat> {
    if attr_prompt.is_empty() {
        return Err(Error::Argument("attribution prompt is empty".into()));
    }
    model.block_keys(block, attr_prompt)
}

/// Sum over heads of column `token` of each `(h·w) × tokens` matrix.
pub fn head_sum(attention: &[Mat], token: usize) -> Vec<f64> {
    let rows = attention.first().map_or(0, Mat::rows);
    let mut out = vec![0.0; rows];
    for a in attention {
        for (r, o) in out.iter_mut().enumerate() {
            *o += a.get(r, token);
        }
    }
    out
}

fn check_token(attr_prompt: &PromptEmbedding, token_index: usize) -> Result<()> {
    if token_index >= attr_prompt.len() {
        return Err(Error::Index {
            what: "attribution token",
            index: token_index,
            len: attr_prompt.len(),
        });
    }
    Ok(())
}

/// Head-summed attention of `token_index` in block `block` at step `t_index`,
/// at the block's own resolution.
pub fn attention_for_token(
    model: &Denoiser,
    trace: &GenerationTrace,
    attr_prompt: &PromptEmbedding,
    token_index: usize,
    block: BlockId,
    t_index: usize,
) -> Result<Vec<f64>> {
    check_token(attr_prompt, token_index)?;
    let record = trace.record(block, t_index)?;
    let keys = attribution_keys(model, attr_prompt, block)?;
    Ok(block_attention(model, record, &keys, token_index))
}

fn block_attention(model: &Denoiser, record: &AttentionBlockRecord, keys: &Mat, token: usize) -> Vec<f64> {
    let cfg = model.config();
    let probs = attention_probs(&record.queries, keys, cfg.heads, cfg.head_dim);
    head_sum(&probs, token)
}

/// Pixel-centre bilinear interpolation weights from an `sh × sw` grid to
/// `dh × dw`, as a sparse linear map on flattened row-major maps.
pub fn bilinear_map(sh: usize, sw: usize, dh: usize, dw: usize) -> Result<SparseMap> {
    if sh == 0 || sw == 0 || dh == 0 || dw == 0 {
        return Err(Error::Argument(format!(
            "resize {sh}x{sw} -> {dh}x{dw} needs positive sizes"
        )));
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(src - 1);
                (x0, x1, x - x0 as f64)
            })
            .collect()
    };
    let ys = axis(sh, dh);
    let xs = axis(sw, dw);
    let mut entries = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut row = Vec::with_capacity(4);
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        row.push((y * sw + x, w));
                    }
                }
            }
            entries.push(row);
        }
    }
    Ok(SparseMap::new(sh * sw, entries))
}

/// Resizes a row-major `sh × sw` map. Equal sizes return the input unchanged.
pub fn bilinear_resize(map: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Result<Vec<f64>> {
    if map.len() != sh * sw {
        return Err(Error::Argument(format!(
            "map has {} values, expected {sh}x{sw}",
            map.len()
        )));
    }
    if (sh, sw) == (dh, dw) {
        return Ok(map.to_vec());
    }
    let m = bilinear_map(sh, sw, dh, dw)?;
    Ok(m.apply(&Mat::from_vec(map.len(), 1, map.to_vec())).into_vec())
}

/// Cache of resize operators keyed by source side.
pub(crate) struct Resizers {
    target: (usize, usize),
    maps: Vec<((usize, usize), Arc<SparseMap>)>,
}

impl Resizers {
    pub(crate) fn new(target: (usize, usize)) -> Self {
        Resizers {
            target,
            maps: Vec::new(),
        }
    }

    /// `None` means identity.
    pub(crate) fn get(&mut self, src: (usize, usize)) -> Result<Option<Arc<SparseMap>>> {
        if src == self.target {
            return Ok(None);
        }
        if let Some((_, m)) = self.maps.iter().find(|(s, _)| *s == src) {
            return Ok(Some(m.clone()));
        }
        let m = Arc::new(bilinear_map(src.0, src.1, self.target.0, self.target.1)?);
        self.maps.push((src, m.clone()));
        Ok(Some(m))
    }

    fn resize(&mut self, values: Vec<f64>, src: (usize, usize)) -> Result<Vec<f64>> {
        Ok(match self.get(src)? {
            None => values,
            Some(m) => m.apply(&Mat::from_vec(values.len(), 1, values)).into_vec(),
        })
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Per-block maps plus their sum, for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionSet {
    pub aggregate: AttributionMap,
    pub blockwise: Vec<AttributionMap>,
}

/// Aggregates `per_record` (a head-summed block-resolution map for each
/// record) over every step, block by block.
fn aggregate_with<F>(trace: &GenerationTrace, concept: TokenId, mut per_record: F) -> Result<AttributionSet>
where
    F: FnMut(&AttentionBlockRecord) -> Result<Vec<f64>>,
{
    trace.check_complete()?;
    let (h, w) = trace.resolution();
    let mut resizers = Resizers::new((h, w));
    let steps = trace.timesteps();
    let mut aggregate = vec![0.0; h * w];
    let mut blockwise = Vec::new();
    for block in trace.blocks() {
        let mut acc = vec![0.0; h * w];
        for &t in &steps {
            let record = trace.record(block, t)?;
            let local = per_record(record)?;
            let resized = resizers.resize(local, (record.height, record.width))?;
            add_into(&mut acc, &resized);
        }
        add_into(&mut aggregate, &acc);
        blockwise.push(AttributionMap {
            values: acc,
            height: h,
            width: w,
            concept,
            scope: BlockScope::Block(block),
            steps: StepScope::All,
        });
    }
    Ok(AttributionSet {
        aggregate: AttributionMap {
            values: aggregate,
            height: h,
            width: w,
            concept,
            scope: BlockScope::All,
            steps: StepScope::All,
        },
        blockwise,
    })
}

/// Aggregate and block-wise maps for one attribution token.
pub fn attribution_set(
    model: &Denoiser,
    trace: &GenerationTrace,
    attr_prompt: &PromptEmbedding,
    token_index: usize,
) -> Result<AttributionSet> {
    check_token(attr_prompt, token_index)?;
    let concept = attr_prompt.token_ids()[token_index];
    let mut keys: Vec<(BlockId, Mat)> = Vec::new();
    for b in trace.blocks() {
        keys.push((b, attribution_keys(model, attr_prompt, b)?));
    }
    aggregate_with(trace, concept, |record| {
        let k = &keys.iter().find(|(b, _)| *b == record.block).expect("keys per block").1;
        Ok(block_attention(model, record, k, token_index))
    })
}

pub fn aggregate_map(
    model: &Denoiser,
    trace: &GenerationTrace,
    attr_prompt: &PromptEmbedding,
    token_index: usize,
) -> Result<AttributionMap> {
    Ok(attribution_set(model, trace, attr_prompt, token_index)?.aggregate)
}

pub fn blockwise_map(
    model: &Denoiser,
    trace: &GenerationTrace,
    attr_prompt: &PromptEmbedding,
    token_index: usize,
    block: BlockId,
) -> Result<AttributionMap> {
    let set = attribution_set(model, trace, attr_prompt, token_index)?;
    set.blockwise
        .into_iter()
        .find(|m| m.scope == BlockScope::Block(block))
        .ok_or_else(|| Error::Lookup {
            kind: "block",
            name: block.name().to_string(),
        })
}

/// Aggregation of the attention stored in the trace itself, for the token at
/// `token_index` of the generation prompt.
pub fn recorded_aggregate(trace: &GenerationTrace, token_index: usize) -> Result<AttributionSet> {
    let Some(&concept) = trace.prompt.get(token_index) else {
        return Err(Error::Index {
            what: "prompt token",
            index: token_index,
            len: trace.prompt.len(),
        });
    };
    aggregate_with(trace, concept, |record| Ok(head_sum(&record.attention, token_index)))
}

/// Per-map min-max to bytes; a constant map becomes mid-gray.
fn to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            let u = if range > 0.0 { (v - lo) / range } else { 0.5 };
            (u * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Binary 8-bit grayscale PGM (`P5`).
pub fn encode_pgm(map: &AttributionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(to_bytes(&map.values));
    out
}

/// Binary PPM (`P6`) of the heatmap blended at alpha 0.5 over `image`
/// (values in `[-1, 1]`, first three channels used as RGB).
pub fn encode_overlay_ppm(map: &AttributionMap, image: &LatentState) -> Result<Vec<u8>> {
    if (image.height, image.width) != (map.height, map.width) {
        return Err(Error::Argument("overlay image and map differ in size".into()));
    }
    let heat = to_bytes(&map.values);
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for (p, &h) in heat.iter().enumerate() {
        let h = h as f64 / 255.0;
        let tint = [h, 0.0, 1.0 - h];
        for (c, tc) in tint.iter().enumerate() {
            let px = if c < image.channels() {
                (image.data.get(p, c).clamp(-1.0, 1.0) + 1.0) / 2.0
            } else {
                0.0
            };
            let v = 0.5 * px + 0.5 * tc;
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Binary PPM of an image with values in `[-1, 1]`; missing channels are 0.
pub fn encode_image_ppm(image: &LatentState) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for p in 0..image.height * image.width {
        for c in 0..3 {
            let v = if c < image.channels() {
                (image.data.get(p, c).clamp(-1.0, 1.0) + 1.0) / 2.0
            } else {
                0.0
            };
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let m = vec![0.3, 0.1, 0.7, 0.2];
        assert_eq!(bilinear_resize(&m, 2, 2, 2, 2).unwrap(), m);
        let c = bilinear_resize(&[0.4], 1, 1, 5, 3).unwrap();
        assert!(c.iter().all(|&v| v == 0.4));
        assert!(bilinear_resize(&m, 2, 2, 0, 2).is_err());
    }

    #[test]
    fn resize_midpoints() {
        let m = [0.0, 1.0, 1.0, 0.0];
        let r3 = bilinear_resize(&m, 2, 2, 3, 3).unwrap();
        assert!((r3[4] - 0.5).abs() < 1e-15);
        let r4 = bilinear_resize(&m, 2, 2, 4, 4).unwrap();
        let centre = [r4[5], r4[6], r4[9], r4[10]];
        assert!((centre[0] - 0.375).abs() < 1e-15 && (centre[1] - 0.625).abs() < 1e-15);
        assert!((centre.iter().sum::<f64>() / 4.0 - 0.5).abs() < 1e-15);
        assert_eq!(r4[0], 0.0);
        assert_eq!(r4[3], 1.0);
    }

    #[test]
    fn head_sum_of_uniform_attention() {
        let a = vec![Mat::filled(3, 4, 0.25), Mat::filled(3, 4, 0.25)];
        assert_eq!(head_sum(&a, 2), vec![0.5; 3]);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let map = AttributionMap {
            values: vec![1.0, 3.0],
            height: 1,
            width: 2,
            concept: TokenId(2),
            scope: BlockScope::All,
            steps: StepScope::All,
        };
        let b = encode_pgm(&map);
        assert_eq!(&b[..11], b"P5\n2 1\n255\n");
        assert_eq!(&b[11..], &[0, 255]);
    }
}
