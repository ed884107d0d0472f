//! Checkpoint file format.
//!
//! Byte layout: an 8-byte little-endian manifest length, the JSON manifest,
//! then a flat little-endian `f32` parameter blob. The manifest records the
//! model config (plus a SHA-256 hash of its canonical JSON encoding), the
//! ordered parameter table (name, shape, element offset into the blob),
//! batchnorm running statistics, the fitted scaler, the class-label map, and
//! training metadata. `save(load(path))` is byte-identical to the original
//! file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::ingest::ClassLabel;
use crate::preprocess::Scaler;
use crate::tensor::Tensor;

const FORMAT: &str = "canguard.checkpoint";
const VERSION: u32 = 1;

/// Training bookkeeping carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    config_hash: String,
    params: Vec<ParamEntry>,
    bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
    scaler: Option<Scaler>,
    class_map: BTreeMap<String, usize>,
    metadata: Option<TrainMeta>,
}

fn config_hash(config: &ModelConfig) -> Result<String> {
    let canonical = serde_json::to_vec(config)?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    Ok(hex_encode(&hasher.finalize()))
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a checkpoint for the model, its scaler, and training metadata.
pub fn save(
    model: &Model,
    scaler: Option<&Scaler>,
    metadata: Option<&TrainMeta>,
    path: &Path,
) -> Result<()> {
    let mut params = Vec::new();
    let mut offset = 0usize;
    let mut blob: Vec<u8> = Vec::new();
    for p in model.params().iter() {
        let len = p.tensor.numel();
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
            len,
        });
        for v in p.tensor.to_f32_vec() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }

    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        config_hash: config_hash(&model.config)?,
        params,
        bn_stats: model.bn_running_stats(),
        scaler: scaler.cloned(),
        class_map: ClassLabel::ALL
            .iter()
            .map(|c| (c.as_str().to_string(), c.index()))
            .collect(),
        metadata: metadata.cloned(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    file.write_all(&blob)?;
    Ok(())
}

/// Loads a checkpoint, rebuilding the model and verifying the manifest:
/// format version, config hash, parameter table consistency against the
/// rebuilt architecture, and exact blob coverage.
pub fn load(path: &Path) -> Result<(Model, Option<Scaler>, Option<TrainMeta>)> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for length prefix".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() < manifest_len {
        return Err(Error::Checkpoint("file truncated inside manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..manifest_len])
        .map_err(|e| Error::Checkpoint(format!("manifest parse failure: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}/{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.config_hash != config_hash(&manifest.config)? {
        return Err(Error::Checkpoint(
            "config hash mismatch: checkpoint does not match its declared configuration".into(),
        ));
    }

    let blob = &rest[manifest_len..];
    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    if blob.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "parameter blob is {} bytes, manifest expects {}",
            blob.len(),
            total * 4
        )));
    }
    let mut expect_offset = 0usize;
    for entry in &manifest.params {
        if entry.offset != expect_offset || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Checkpoint(format!(
                "parameter table corrupt at {}",
                entry.name
            )));
        }
        expect_offset += entry.len;
    }

    let mut model = Model::build(manifest.config.clone(), 0)?;
    {
        let params = model.params_mut();
        if params.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameters, checkpoint has {}",
                params.len(),
                manifest.params.len()
            )));
        }
        for (param, entry) in params.iter_mut().zip(&manifest.params) {
            if param.name != entry.name || param.tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: built {} {:?}, checkpoint {} {:?}",
                    param.name,
                    param.tensor.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let bytes = &blob[entry.offset * 4..(entry.offset + entry.len) * 4];
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            param.tensor =
                Tensor::from_f32(entry.shape.clone(), &values)?.with_requires_grad();
        }
    }
    model.set_bn_running_stats(&manifest.bn_stats)?;
    Ok((model, manifest.scaler, manifest.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model {
        let config = ModelConfig {
            conv_filters: vec![3, 4],
            gru_units: vec![3],
            dense_units: vec![5],
            t: 8,
            f: 8,
            ..Default::default()
        };
        Model::build(config, 21).unwrap()
    }

    fn sample_input() -> Tensor {
        Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|i| (i as f64 * 0.29).cos()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_predictions_within_f32_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        let scaler = Scaler {
            mu: vec![0.0; 8],
            sigma: vec![1.0; 8],
        };
        let meta = TrainMeta {
            epoch: 3,
            best_val_loss: 0.125,
        };
        save(&model, Some(&scaler), Some(&meta), &path).unwrap();
        let (loaded, loaded_scaler, loaded_meta) = load(&path).unwrap();
        assert_eq!(loaded_scaler.unwrap(), scaler);
        assert_eq!(loaded_meta.unwrap(), meta);

        let x = sample_input();
        let a = model.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        for (u, v) in a.probs.data().iter().zip(b.probs.data()) {
            assert!((u - v).abs() < 1e-6, "{u} vs {v}");
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let model = small_model();
        save(&model, None, None, &p1).unwrap();
        let (loaded, _, _) = load(&p1).unwrap();
        save(&loaded, None, None, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&small_model(), None, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
    }

    #[test]
    fn tampered_config_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&small_model(), None, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Flip the ablation flags inside the manifest JSON without updating
        // the recorded hash.
        let text = String::from_utf8_lossy(&bytes[8..]).into_owned();
        let patched = text.replacen("\"use_attention\":true", "\"use_attention\":false", 1);
        assert_ne!(text, patched, "patch must apply");
        let mut out = Vec::new();
        // The manifest length changes by the patch delta.
        let old_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let delta = patched.len() as i64 - text.len() as i64;
        out.extend_from_slice(&((old_len as i64 + delta) as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        std::fs::write(&path, out).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn bn_running_stats_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = small_model();
        let stats: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![1.0, 2.0, 3.0], vec![0.5, 0.25, 4.0]),
            (vec![-1.0, 0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0, 4.0]),
        ];
        model.set_bn_running_stats(&stats).unwrap();
        save(&model, None, None, &path).unwrap();
        let (loaded, _, _) = load(&path).unwrap();
        assert_eq!(loaded.bn_running_stats(), stats);
    }
}
