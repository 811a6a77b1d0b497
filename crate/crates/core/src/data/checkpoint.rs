//! Versioned, checksummed appearance-model checkpoints.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AppearanceModel, Hyperparams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    factor_names: Vec<String>,
    k_supervised: usize,
    hyperparams: Hyperparams,
    mean: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    version: u32,
    checksum: String,
    #[serde(flatten)]
    payload: Payload,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "checkpoint {what}: row of length {} (expected {ncols})",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn digest(payload: &Payload) -> Result<String> {
    let bytes = serde_json::to_vec(payload)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Serializes a model to checkpoint JSON.
pub fn encode_model(model: &AppearanceModel) -> Result<String> {
    model.check()?;
    let payload = Payload {
        factor_names: model.factor_names.clone(),
        k_supervised: model.hyperparams.k_supervised,
        hyperparams: model.hyperparams,
        mean: rows(&model.mean),
        covariance: rows(&model.covariance),
    };
    let checksum = digest(&payload)?;
    Ok(serde_json::to_string(&Envelope {
        version: CHECKPOINT_VERSION,
        checksum,
        payload,
    })?)
}

/// Parses checkpoint JSON. Unparseable or tampered content is reported as a
/// checksum failure.
pub fn decode_model(text: &str) -> Result<AppearanceModel> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checksum(format!("unreadable checkpoint: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: CHECKPOINT_VERSION,
            })
        }
        None => return Err(Error::Checksum("checkpoint has no version".into())),
    }
    let env: Envelope =
        serde_json::from_value(value).map_err(|e| Error::Checksum(format!("malformed checkpoint: {e}")))?;
    let actual = digest(&env.payload)?;
    if actual != env.checksum {
        return Err(Error::Checksum(format!("stored {}, computed {actual}", env.checksum)));
    }
    let p = env.payload;
    let k = p.factor_names.len();
    let dim = p.mean.first().map_or(0, Vec::len);
    let mut hyperparams = p.hyperparams;
    hyperparams.k_supervised = p.k_supervised;
    let model = AppearanceModel {
        mean: matrix(&p.mean, dim, "mean")?,
        covariance: matrix(&p.covariance, k, "covariance")?,
        factor_names: p.factor_names,
        hyperparams,
        draw: None,
    };
    model.check()?;
    Ok(model)
}

pub fn save_model(model: &AppearanceModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AppearanceModel> {
    decode_model(&fs::read_to_string(path)?)
}
