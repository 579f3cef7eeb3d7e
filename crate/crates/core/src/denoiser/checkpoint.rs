//! Model checkpoint container.
//!
//! A checkpoint is a UTF-8 JSON document:
//!
//! ```text
//! {
//!   "format": "entangle-denoiser",
//!   "version": 1,
//!   "vocab_size": 16,
//!   "config": { ...DenoiserConfig... },
//!   "schedule": { "steps": 50, "beta_start": 0.002, "beta_end": 0.4 },
//!   "arrays": [ { "name": "token_embedding", "rows": 16, "cols": 32, "data": [...] },
//!               { "name": "time.w", ... }, ... ]
//! }
//! ```
//!
//! `arrays[0]` is always the token table; the rest follow
//! [`param_specs`](super::network::param_specs) order. Floats are written in
//! shortest round-trip form, so save/load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{param_specs, Denoiser, DenoiserConfig};
use super::schedule::ScheduleParams;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_FORMAT: &str = "entangle-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    vocab_size: usize,
    config: DenoiserConfig,
    schedule: ScheduleParams,
    arrays: Vec<NamedArray>,
}

pub fn to_json(model: &Denoiser, schedule: &ScheduleParams) -> Result<String> {
    let mut arrays = vec![NamedArray {
        name: "token_embedding".into(),
        rows: model.embedding_table().rows(),
        cols: model.embedding_table().cols(),
        data: model.embedding_table().data().to_vec(),
    }];
    for (spec, p) in model.specs().iter().zip(model.params()) {
        arrays.push(NamedArray {
            name: spec.name.clone(),
            rows: p.rows(),
            cols: p.cols(),
            data: p.data().to_vec(),
        });
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        vocab_size: model.config().vocab_size,
        config: model.config().clone(),
        schedule: *schedule,
        arrays,
    };
    serde_json::to_string(&file).map_err(|e| Error::Format {
        what: "checkpoint",
        reason: e.to_string(),
    })
}

pub fn from_json(text: &str) -> Result<(Denoiser, ScheduleParams)> {
    let bad = |reason: String| Error::Format {
        what: "checkpoint",
        reason,
    };
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unexpected format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", file.version)));
    }
    if file.vocab_size != file.config.vocab_size {
        return Err(bad("vocab_size disagrees with config".into()));
    }
    let specs = param_specs(&file.config);
    if file.arrays.len() != specs.len() + 1 {
        return Err(bad(format!(
            "expected {} arrays, found {}",
            specs.len() + 1,
            file.arrays.len()
        )));
    }
    let mut arrays = file.arrays.into_iter();
    let to_mat = |a: NamedArray| -> Result<Mat> {
        if a.data.len() != a.rows * a.cols {
            return Err(bad(format!("array `{}` has wrong length", a.name)));
        }
        Ok(Mat::from_vec(a.rows, a.cols, a.data))
    };
    let table = arrays.next().expect("length checked");
    if table.name != "token_embedding" {
        return Err(bad("first array must be token_embedding".into()));
    }
    let embedding = to_mat(table)?;
    let mut params = Vec::with_capacity(specs.len());
    for (spec, a) in specs.iter().zip(arrays) {
        if a.name != spec.name {
            return Err(bad(format!("expected `{}`, found `{}`", spec.name, a.name)));
        }
        params.push(to_mat(a)?);
    }
    let model = Denoiser::from_parts(file.config, embedding, params)?;
    Ok((model, file.schedule))
}

pub fn save(path: &Path, model: &Denoiser, schedule: &ScheduleParams) -> Result<()> {
    let text = to_json(model, schedule)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Denoiser, ScheduleParams)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let model = Denoiser::new(DenoiserConfig::reduced(), 3).unwrap();
        let sched = ScheduleParams::default();
        let (back, s2) = from_json(&to_json(&model, &sched).unwrap()).unwrap();
        assert_eq!(s2, sched);
        assert_eq!(back.params(), model.params());
        assert_eq!(back.embedding_table(), model.embedding_table());
    }

    #[test]
    fn rejects_wrong_version_and_order() {
        let model = Denoiser::new(DenoiserConfig::reduced(), 3).unwrap();
        let json = to_json(&model, &ScheduleParams::default()).unwrap();
        let bumped = json.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(from_json(&bumped), Err(Error::Format { .. })));
        let renamed = json.replacen("\"time.w\"", "\"time.x\"", 1);
        assert!(matches!(from_json(&renamed), Err(Error::Format { .. })));
    }
}
