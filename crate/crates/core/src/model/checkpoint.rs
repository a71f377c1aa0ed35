//! Checkpoint directory: `params.bin` (little-endian parameter blob in layout
//! order) and `manifest.json` (config, step, seed, digest).

use super::{ModelConfig, Params, Scalar};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Word position of the training RNG stream, if one was running.
    #[serde(default)]
    pub rng_word_pos: Option<String>,
    pub n_params: usize,
    pub sha256: String,
}

fn to_bytes<F: Scalar>(data: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * F::BYTES);
    for &x in data {
        x.write_le(&mut out);
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn params_digest<F: Scalar>(params: &Params<F>) -> String {
    hex(&Sha256::digest(to_bytes(&params.data)))
}

pub fn save_checkpoint<F: Scalar>(
    params: &Params<F>,
    dir: &Path,
    step: u64,
    seed: u64,
    rng_word_pos: Option<u128>,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = to_bytes(&params.data);
    let manifest = CheckpointManifest {
        format: 1,
        dtype: F::DTYPE.to_string(),
        config: params.config().clone(),
        step,
        seed,
        rng_word_pos: rng_word_pos.map(|w| w.to_string()),
        n_params: params.len(),
        sha256: hex(&Sha256::digest(&blob)),
    };
    let ppath = dir.join(PARAMS_FILE);
    std::fs::write(&ppath, &blob).map_err(|e| Error::io(&ppath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint, converting the stored dtype to `F` when they differ.
/// With `expected` set, any config difference is rejected.
pub fn load_checkpoint<F: Scalar>(
    dir: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Params<F>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(exp) = expected {
        if exp != &manifest.config {
            return Err(Error::ConfigMismatch {
                expected: exp.summary(),
                found: manifest.config.summary(),
            });
        }
    }
    let ppath = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if hex(&Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its digest", ppath.display())));
    }
    let data: Vec<F> = match manifest.dtype.as_str() {
        "f32" => decode::<f32, F>(&blob)?,
        "f64" => decode::<f64, F>(&blob)?,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    if data.len() != manifest.n_params {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, blob holds {}",
            manifest.n_params,
            data.len()
        )));
    }
    let params = Params::from_data(manifest.config.clone(), data)?;
    Ok((params, manifest))
}

fn decode<S: Scalar, F: Scalar>(blob: &[u8]) -> Result<Vec<F>> {
    if blob.len() % S::BYTES != 0 {
        return Err(Error::Checkpoint("truncated parameter blob".into()));
    }
    Ok(blob
        .chunks_exact(S::BYTES)
        .map(|c| F::from_f64_lossy(S::read_le(c).as_f64()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 12,
            vocab_size: 5,
            dropout_rate: 0.0,
            parameter_init_seed: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = Params::<f32>::init(tiny()).unwrap();
        save_checkpoint(&p, dir.path(), 42, 7, Some(1234)).unwrap();
        let (q, m) = load_checkpoint::<f32>(dir.path(), Some(&tiny())).unwrap();
        assert_eq!(p.data, q.data);
        assert_eq!(m.step, 42);
        assert_eq!(m.rng_word_pos.as_deref(), Some("1234"));
        let x = [0, 1, 2, 3, 4, 0];
        assert_eq!(forward(&p, &x).unwrap(), forward(&q, &x).unwrap());
        assert_eq!(params_digest(&p), m.sha256);
    }

    #[test]
    fn wrong_vocab_is_rejected_with_both_configs() {
        let dir = tempfile::tempdir().unwrap();
        let p = Params::<f32>::init(tiny()).unwrap();
        save_checkpoint(&p, dir.path(), 0, 0, None).unwrap();
        let mut other = tiny();
        other.vocab_size = 6;
        let err = load_checkpoint::<f32>(dir.path(), Some(&other)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"vocab_size\":6") && msg.contains("\"vocab_size\":5"), "{msg}");
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = Params::<f32>::init(tiny()).unwrap();
        save_checkpoint(&p, dir.path(), 0, 0, None).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob[0] ^= 1;
        std::fs::write(&path, blob).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path(), None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loads_into_wider_type() {
        let dir = tempfile::tempdir().unwrap();
        let p = Params::<f32>::init(tiny()).unwrap();
        save_checkpoint(&p, dir.path(), 0, 0, None).unwrap();
        let (q, _) = load_checkpoint::<f64>(dir.path(), None).unwrap();
        assert!(p.data.iter().zip(&q.data).all(|(&a, &b)| a as f64 == b));
    }
}
