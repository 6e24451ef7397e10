//! Checkpoint files: a JSON document holding the format version, model
//! shape, vocabulary and every parameter tensor. Floats are written in
//! shortest round-trip form, so save followed by load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::tape::Mat;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

pub fn to_bytes(model: &Model, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    use super::model::SequenceScorer;
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        vocab: model.vocab().clone(),
        metadata: metadata.clone(),
        tensors: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| TensorRecord {
                name: name.clone(),
                rows: p.nrows(),
                cols: p.ncols(),
                data: p.iter().copied().collect(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, BTreeMap<String, String>)> {
    #[derive(Deserialize)]
    struct Version {
        format_version: u32,
    }
    let version: Version = serde_json::from_slice(bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if version.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            version.format_version
        )));
    }
    let file: CheckpointFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tensors = file
        .tensors
        .into_iter()
        .map(|t| {
            let mat = Mat::from_shape_vec((t.rows, t.cols), t.data)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", t.name)))?;
            Ok((t.name, mat))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_parts(file.config, file.vocab, tensors)?;
    Ok((model, file.metadata))
}

pub fn save_checkpoint(
    model: &Model,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<String> {
    let bytes = to_bytes(model, metadata)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_id(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, BTreeMap<String, String>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, metadata) = from_bytes(&bytes)?;
    Ok((model, metadata, checkpoint_id(&bytes)))
}

/// Short content hash identifying a checkpoint in reports.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq_model::model::SequenceScorer;

    fn model() -> Model {
        let vocab = Vocabulary::new(["a", "b", "c"].map(String::from), 2);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            max_source_len: 6,
            max_target_len: 6,
            ..ModelConfig::default()
        };
        Model::new(config, vocab, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let meta = BTreeMap::from([("mode".to_string(), "flipped".to_string())]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let id = save_checkpoint(&m, &meta, &path).unwrap();
        let (back, meta_back, id_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        assert_eq!(id, id_back);
        let probe = (vec![5, 6, 1], vec![7, 1]);
        assert_eq!(
            back.sequence_logprob(&probe.0, &probe.1).unwrap().to_bits(),
            m.sequence_logprob(&probe.0, &probe.1).unwrap().to_bits()
        );
    }

    #[test]
    fn version_is_checked() {
        let m = model();
        let bytes = to_bytes(&m, &BTreeMap::new()).unwrap();
        let text = String::from_utf8(bytes).unwrap().replacen(
            "\"format_version\":1",
            "\"format_version\":99",
            1,
        );
        assert!(
            matches!(from_bytes(text.as_bytes()), Err(Error::Checkpoint(msg)) if msg.contains("99"))
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = model();
        let bytes = to_bytes(&m, &BTreeMap::new()).unwrap();
        let text = String::from_utf8(bytes)
            .unwrap()
            .replacen("\"d_ff\":8", "\"d_ff\":9", 1);
        assert!(from_bytes(text.as_bytes()).is_err());
    }
}
