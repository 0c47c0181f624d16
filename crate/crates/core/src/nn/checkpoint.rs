//! JSON checkpoints for dense models.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::mlp::MlpModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub seed: Option<u64>,
    pub payload: T,
}

impl<T: Serialize + for<'de> Deserialize<'de>> Checkpoint<T> {
    pub fn new(seed: Option<u64>, payload: T) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            seed,
            payload,
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_reader(input)?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Config("checkpoint has no format_version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Unsupported(format!(
                "checkpoint format version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        Ok(serde_json::from_value(raw)?)
    }
}

/// Re-validates layer shapes after deserialisation.
pub fn validated(model: MlpModel) -> Result<MlpModel> {
    MlpModel::new(model.layers().to_vec())
}
