//! Model checkpoints.
//!
//! Layout (UTF-8 text):
//!
//! ```text
//! MIDPG-CHECKPOINT
//! version 1
//! { "model": <ModelConfig>, "schema": <Schema>, "vocab": <Vocab>,
//!   "tensors": [ { "name": .., "shape": [..], "values": [..] }, .. ] }
//! ```
//!
//! The JSON body sits on the third line. Floats are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::{Schema, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &str = "MIDPG-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Body {
    model: ModelConfig,
    schema: Schema,
    vocab: Vocab,
    tensors: Vec<NamedTensor>,
}

pub fn save(model: &Model, vocab: &Vocab, path: &Path) -> Result<()> {
    let body = Body {
        model: model.config().clone(),
        schema: model.schema().clone(),
        vocab: vocab.clone(),
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{MAGIC}\nversion {VERSION}\n{json}").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Vocab)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated before {what}", path.display())))
    };
    if next("magic")?.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = next("version")?;
    if version.trim_end() != format!("version {VERSION}") {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported `{}`",
            path.display(),
            version.trim_end()
        )));
    }
    let body: Body = serde_json::from_str(&next("body")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = ParamStore::new();
    for t in body.tensors {
        params.insert(t.name, Tensor::new(t.shape, t.values)?);
    }
    let model = Model::from_parts(body.model, &body.schema, params)?;
    let mut vocab = body.vocab;
    vocab.rebuild_index();
    Ok((model, vocab))
}
