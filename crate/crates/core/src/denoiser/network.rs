//! The toy noise-prediction U-Net.
//!
//! Three resolution levels (full, half, quarter) with a cross-attention block
//! at each level on the way down, at the bottleneck and on the way up:
//! `down16 → down8 → mid4 → up8 → up16` at the default 16×16 resolution.
//! Every activation is a `(h·w) × channels` matrix evaluated on a [`Tape`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::prompt::{PromptEmbedding, TokenId};
use super::schedule::{LatentState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockId {
    Down16,
    Down8,
    Mid4,
    Up8,
    Up16,
}

impl BlockId {
    pub const ALL: [BlockId; 5] = [
        BlockId::Down16,
        BlockId::Down8,
        BlockId::Mid4,
        BlockId::Up8,
        BlockId::Up16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::Down16 => "down16",
            BlockId::Down8 => "down8",
            BlockId::Mid4 => "mid4",
            BlockId::Up8 => "up8",
            BlockId::Up16 => "up16",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        BlockId::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Lookup {
                kind: "block",
                name: name.to_string(),
            })
    }

    /// Resolution level: 0 full, 1 half, 2 quarter.
    pub fn level(self) -> usize {
        match self {
            BlockId::Down16 | BlockId::Up16 => 0,
            BlockId::Down8 | BlockId::Up8 => 1,
            BlockId::Mid4 => 2,
        }
    }

    /// Side length of this block's feature map for a given input side.
    pub fn side(self, resolution: usize) -> usize {
        resolution >> self.level()
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Side length of the square latent.
    pub resolution: usize,
    pub channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            resolution: 16,
            channels: 3,
            widths: [16, 32, 64],
            heads: 2,
            head_dim: 8,
            embed_dim: 32,
            vocab_size: super::prompt::VOCABULARY.len(),
            time_dim: 32,
            time_hidden: 64,
        }
    }
}

impl DenoiserConfig {
    /// 8×8 variant used for gradient checks.
    pub fn reduced() -> Self {
        DenoiserConfig {
            resolution: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || !self.resolution.is_multiple_of(4) {
            return Err(Error::config(
                "resolution",
                "must be a positive multiple of 4",
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "must be positive"));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("heads", "heads and head_dim must be positive"));
        }
        if self.embed_dim == 0 || self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "need an embedding and a null token"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) || self.time_hidden == 0 {
            return Err(Error::config("time_dim", "must be even and positive"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Shape and initialisation of one weight array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bias: bool,
}

/// Every array in declared (checkpoint) order, excluding the token table.
pub fn param_specs(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let [c1, c2, c3] = cfg.widths;
    let (th, inner, e) = (cfg.time_hidden, cfg.inner(), cfg.embed_dim);
    let mut specs = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, bias: bool| {
        specs.push(ParamSpec {
            name,
            rows,
            cols,
            bias,
        })
    };
    push("time.w".into(), cfg.time_dim, th, false);
    push("time.b".into(), 1, th, true);
    let convs = [
        ("conv_in", 9 * (cfg.channels + 2), c1, true),
        ("conv_down8", 9 * c1, c2, true),
        ("conv_mid4", 9 * c2, c3, true),
        ("merge_up8", c3 + c2, c2, true),
        ("merge_up16", c2 + c1, c1, true),
        ("conv_out1", 9 * c1, c1, false),
        ("conv_out2", 9 * c1, cfg.channels, false),
    ];
    for (name, rows, cols, temb) in convs {
        push(format!("{name}.w"), rows, cols, false);
        push(format!("{name}.b"), 1, cols, true);
        if temb {
            push(format!("{name}.t"), th, cols, false);
        }
    }
    for block in BlockId::ALL {
        let c = cfg.widths[block.level()];
        let n = block.name();
        push(format!("attn_{n}.q"), c, inner, false);
        push(format!("attn_{n}.k"), e, inner, false);
        push(format!("attn_{n}.v"), e, inner, false);
        push(format!("attn_{n}.o"), inner, c, false);
        push(format!("attn_{n}.ob"), 1, c, true);
    }
    specs
}

/// Per-head `softmax(Q_l K_lᵀ / √d)` over the token axis. Shared by the
/// in-network attention and post-hoc attribution so both produce identical
/// bits from identical queries and keys.
pub fn attention_probs(queries: &Mat, keys: &Mat, heads: usize, head_dim: usize) -> Vec<Mat> {
    let scale = attention_scale(head_dim);
    (0..heads)
        .map(|l| {
            let q = queries.col_slice(l * head_dim, head_dim);
            let k = keys.col_slice(l * head_dim, head_dim);
            q.matmul_nt(&k).scale(scale).softmax_rows()
        })
        .collect()
}

fn attention_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Sinusoidal embedding of a schedule index, `1 × dim`.
pub fn timestep_embedding(t_index: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let t = t_index as f64;
    let mut data = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        data[k] = (t * freq).sin();
        data[half + k] = (t * freq).cos();
    }
    Mat::from_vec(1, dim, data)
}

/// The `(h·w) × 2` normalised pixel-centre coordinates fed alongside the
/// latent.
fn coordinate_channels(side: usize) -> Mat {
    Mat::from_fn(side * side, 2, |r, c| {
        let v = if c == 0 { r / side } else { r % side };
        (v as f64 + 0.5) / side as f64 * 2.0 - 1.0
    })
}

/// Cross-attention probabilities recorded for one block at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockRecord {
    pub block: BlockId,
    pub height: usize,
    pub width: usize,
    /// Schedule index the pass ran at.
    pub timestep: usize,
    /// `(h·w) × (heads·head_dim)` query projections.
    pub queries: Mat,
    /// One `(h·w) × tokens` matrix per head.
    pub attention: Vec<Mat>,
}

impl AttentionBlockRecord {
    pub fn heads(&self) -> usize {
        self.attention.len()
    }

    pub fn tokens(&self) -> usize {
        self.attention.first().map_or(0, Mat::cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub epsilon_hat: Mat,
    pub attention_records: Vec<AttentionBlockRecord>,
}

/// Tape handles for one block of a taped forward pass.
#[derive(Clone, Debug)]
pub struct TapedBlock {
    pub block: BlockId,
    pub side: usize,
    pub queries: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TapedOutput {
    pub epsilon: Var,
    pub blocks: Vec<TapedBlock>,
}

/// Weight arrays placed on a tape, either as constants or trainable leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    embedding: Mat,
    specs: Vec<ParamSpec>,
    params: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl Denoiser {
    /// Seeded initialisation: the token table is standard normal, weights are
    /// uniform in `±1/√fan_in`, biases zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Mat::from_fn(config.vocab_size, config.embed_dim, |_, _| {
            rng.sample(StandardNormal)
        });
        let specs = param_specs(&config);
        let params = specs
            .iter()
            .map(|s| {
                if s.bias {
                    Mat::zeros(s.rows, s.cols)
                } else {
                    let bound = 1.0 / (s.rows as f64).sqrt();
                    Mat::from_fn(s.rows, s.cols, |_, _| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Self::from_parts(config, embedding, params)
    }

    pub fn from_parts(config: DenoiserConfig, embedding: Mat, params: Vec<Mat>) -> Result<Self> {
        config.validate()?;
        if embedding.shape() != (config.vocab_size, config.embed_dim) {
            return Err(Error::config("token_embedding", "shape mismatch"));
        }
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::config(
                "params",
                format!("expected {} arrays, got {}", specs.len(), params.len()),
            ));
        }
        for (s, p) in specs.iter().zip(&params) {
            if p.shape() != (s.rows, s.cols) {
                return Err(Error::config(s.name.clone(), "shape mismatch"));
            }
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(Denoiser {
            config,
            embedding,
            specs,
            params,
            index,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn embedding_table(&self) -> &Mat {
        &self.embedding
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Mat> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                name: name.to_string(),
            })
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Mat> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Lookup {
                kind: "parameter",
                name: name.to_string(),
            }),
        }
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<PromptEmbedding> {
        PromptEmbedding::new(tokens, &self.embedding)
    }

    /// Attribution keys `K'_i = X' · W_K(i)`.
    pub fn block_keys(&self, block: BlockId, prompt: &PromptEmbedding) -> Result<Mat> {
        let wk = self.param(&format!("attn_{}.k", block.name()))?;
        Ok(prompt.embeddings().matmul(wk))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn conv3(&self, tape: &mut Tape, p: &BoundParams, x: Var, side: usize, name: &str) -> Var {
        let patches = tape.im2col3(x, side, side);
        let y = tape.matmul(patches, self.var(p, &format!("{name}.w")));
        tape.add_row(y, self.var(p, &format!("{name}.b")))
    }

    fn time_shift(&self, tape: &mut Tape, p: &BoundParams, temb: Var, name: &str) -> Var {
        tape.matmul(temb, self.var(p, &format!("{name}.t")))
    }

    fn cross_attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        h: Var,
        context: Var,
        block: BlockId,
        side: usize,
    ) -> (Var, TapedBlock) {
        let n = block.name();
        let (heads, d) = (self.config.heads, self.config.head_dim);
        let q = tape.matmul(h, self.var(p, &format!("attn_{n}.q")));
        let k = tape.matmul(context, self.var(p, &format!("attn_{n}.k")));
        let v = tape.matmul(context, self.var(p, &format!("attn_{n}.v")));
        let scale = attention_scale(d);
        let mut probs = Vec::with_capacity(heads);
        let mut mixed = Vec::with_capacity(heads);
        for l in 0..heads {
            let ql = tape.col_slice(q, l * d, d);
            let kl = tape.col_slice(k, l * d, d);
            let logits = tape.matmul_nt(ql, kl);
            let logits = tape.scale(logits, scale);
            let a = tape.softmax_rows(logits);
            let vl = tape.col_slice(v, l * d, d);
            mixed.push(tape.matmul(a, vl));
            probs.push(a);
        }
        let o = tape.concat_cols(&mixed);
        let o = tape.matmul(o, self.var(p, &format!("attn_{n}.o")));
        let o = tape.add_row(o, self.var(p, &format!("attn_{n}.ob")));
        let out = tape.add(h, o);
        (
            out,
            TapedBlock {
                block,
                side,
                queries: q,
                attention: probs,
            },
        )
    }

    /// Forward pass on `tape` for latent `z` (a `(R·R) × C` node) at schedule
    /// index `t_index`.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        z: Var,
        cond: &PromptEmbedding,
        t_index: usize,
    ) -> Result<TapedOutput> {
        let cfg = &self.config;
        let r = cfg.resolution;
        if tape.value(z).shape() != (cfg.pixels(), cfg.channels) {
            return Err(Error::config(
                "latent",
                format!(
                    "shape {:?} does not match architecture {}x{}x{}",
                    tape.value(z).shape(),
                    r,
                    r,
                    cfg.channels
                ),
            ));
        }
        if cond.embeddings().cols() != cfg.embed_dim {
            return Err(Error::config("prompt", "embedding width mismatch"));
        }
        let context = tape.constant(cond.embeddings().clone());
        let temb = tape.constant(timestep_embedding(t_index, cfg.time_dim));
        let temb = tape.matmul(temb, self.var(p, "time.w"));
        let temb = tape.add_row(temb, self.var(p, "time.b"));
        let temb = tape.silu(temb);

        let mut blocks = Vec::with_capacity(5);
        let coords = tape.constant(coordinate_channels(r));
        let x = tape.concat_cols(&[z, coords]);

        // full resolution
        let h = self.conv3(tape, p, x, r, "conv_in");
        let shift = self.time_shift(tape, p, temb, "conv_in");
        let h = tape.add_row(h, shift);
        let h = tape.silu(h);
        let (skip_full, rec) = self.cross_attention(tape, p, h, context, BlockId::Down16, r);
        blocks.push(rec);

        // half
        let r2 = r / 2;
        let h = tape.avg_pool2(skip_full, r, r);
        let h = self.conv3(tape, p, h, r2, "conv_down8");
        let shift = self.time_shift(tape, p, temb, "conv_down8");
        let h = tape.add_row(h, shift);
        let h = tape.silu(h);
        let (skip_half, rec) = self.cross_attention(tape, p, h, context, BlockId::Down8, r2);
        blocks.push(rec);

        // quarter
        let r4 = r / 4;
        let h = tape.avg_pool2(skip_half, r2, r2);
        let h = self.conv3(tape, p, h, r4, "conv_mid4");
        let shift = self.time_shift(tape, p, temb, "conv_mid4");
        let h = tape.add_row(h, shift);
        let h = tape.silu(h);
        let (h, rec) = self.cross_attention(tape, p, h, context, BlockId::Mid4, r4);
        blocks.push(rec);

        // back up to half
        let h = tape.upsample2(h, r4, r4);
        let h = tape.concat_cols(&[h, skip_half]);
        let h = tape.matmul(h, self.var(p, "merge_up8.w"));
        let h = tape.add_row(h, self.var(p, "merge_up8.b"));
        let shift = self.time_shift(tape, p, temb, "merge_up8");
        let h = tape.add_row(h, shift);
        let h = tape.silu(h);
        let (h, rec) = self.cross_attention(tape, p, h, context, BlockId::Up8, r2);
        blocks.push(rec);

        // back up to full
        let h = tape.upsample2(h, r2, r2);
        let h = tape.concat_cols(&[h, skip_full]);
        let h = tape.matmul(h, self.var(p, "merge_up16.w"));
        let h = tape.add_row(h, self.var(p, "merge_up16.b"));
        let shift = self.time_shift(tape, p, temb, "merge_up16");
        let h = tape.add_row(h, shift);
        let h = tape.silu(h);
        let (h, rec) = self.cross_attention(tape, p, h, context, BlockId::Up16, r);
        blocks.push(rec);

        let h = self.conv3(tape, p, h, r, "conv_out1");
        let h = tape.silu(h);
        let epsilon = self.conv3(tape, p, h, r, "conv_out2");
        Ok(TapedOutput { epsilon, blocks })
    }

    /// Noise prediction and recorded cross-attention for `z` under `cond`.
    ///
    /// `z.timestep` must be in `1..=T`; the network sees schedule index
    /// `z.timestep - 1`.
    pub fn forward(
        &self,
        z: &LatentState,
        cond: &PromptEmbedding,
        schedule: &NoiseSchedule,
    ) -> Result<DenoiserOutput> {
        let t_index = network_index(z, schedule)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z.data.clone());
        let out = self.forward_taped(&mut tape, &p, zv, cond, t_index)?;
        Ok(collect_output(&tape, &out, t_index))
    }
}

/// Schedule index the network is evaluated at for latent `z`.
pub fn network_index(z: &LatentState, schedule: &NoiseSchedule) -> Result<usize> {
    if z.timestep == 0 || z.timestep > schedule.total_steps() {
        return Err(Error::Index {
            what: "timestep",
            index: z.timestep,
            len: schedule.total_steps() + 1,
        });
    }
    Ok(z.timestep - 1)
}

/// Reads values of a taped pass into plain records.
pub fn collect_output(tape: &Tape, out: &TapedOutput, t_index: usize) -> DenoiserOutput {
    let attention_records = out
        .blocks
        .iter()
        .map(|b| AttentionBlockRecord {
            block: b.block,
            height: b.side,
            width: b.side,
            timestep: t_index,
            queries: tape.value(b.queries).clone(),
            attention: b.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        })
        .collect();
    DenoiserOutput {
        epsilon_hat: tape.value(out.epsilon).clone(),
        attention_records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::prompt::{token, START_TOKEN};
    use crate::denoiser::schedule::ScheduleParams;

    fn setup() -> (Denoiser, NoiseSchedule, LatentState, PromptEmbedding) {
        let model = Denoiser::new(DenoiserConfig::default(), 7).unwrap();
        let schedule = ScheduleParams::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Mat::from_fn(256, 3, |_, _| rng.sample(StandardNormal));
        let z = LatentState::new(data, 16, 16, 30).unwrap();
        let prompt = model
            .embed(&[START_TOKEN, token("circle").unwrap()])
            .unwrap();
        (model, schedule, z, prompt)
    }

    #[test]
    fn output_shapes_and_records() {
        let (model, schedule, z, prompt) = setup();
        let out = model.forward(&z, &prompt, &schedule).unwrap();
        assert_eq!(out.epsilon_hat.shape(), z.data.shape());
        assert_eq!(out.attention_records.len(), 5);
        for (rec, id) in out.attention_records.iter().zip(BlockId::ALL) {
            assert_eq!(rec.block, id);
            assert_eq!(rec.height, id.side(16));
            assert_eq!(rec.heads(), 2);
            assert_eq!(rec.tokens(), 2);
            for a in &rec.attention {
                assert_eq!(a.rows(), rec.height * rec.width);
                for r in 0..a.rows() {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, schedule, z, prompt) = setup();
        let a = model.forward(&z, &prompt, &schedule).unwrap();
        let b = model.forward(&z, &prompt, &schedule).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let (mut model, schedule, z, _) = setup();
        for b in BlockId::ALL {
            let q = model.param_mut(&format!("attn_{}.q", b.name())).unwrap();
            *q = Mat::zeros(q.rows(), q.cols());
        }
        let prompt = model
            .embed(&[START_TOKEN, token("circle").unwrap(), token("red").unwrap()])
            .unwrap();
        let out = model.forward(&z, &prompt, &schedule).unwrap();
        for rec in &out.attention_records {
            for a in &rec.attention {
                assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn rejects_mismatched_latent_and_timestep() {
        let (model, schedule, z, prompt) = setup();
        let small = LatentState::new(Mat::zeros(64, 3), 8, 8, 3).unwrap();
        assert!(matches!(
            model.forward(&small, &prompt, &schedule),
            Err(Error::Config { .. })
        ));
        let clean = LatentState { timestep: 0, ..z.clone() };
        assert!(model.forward(&clean, &prompt, &schedule).is_err());
        let late = LatentState { timestep: 51, ..z };
        assert!(model.forward(&late, &prompt, &schedule).is_err());
    }

    #[test]
    fn param_specs_cover_every_block() {
        let specs = param_specs(&DenoiserConfig::default());
        for b in BlockId::ALL {
            for suffix in ["q", "k", "v", "o", "ob"] {
                let name = format!("attn_{}.{suffix}", b.name());
                assert!(specs.iter().any(|s| s.name == name), "{name}");
            }
        }
        assert_eq!(BlockId::parse("mid4").unwrap(), BlockId::Mid4);
        assert!(BlockId::parse("mid8").is_err());
    }
}
