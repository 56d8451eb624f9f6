//! Single-file checkpoints: `u64` LE header length, JSON header, raw LE payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::evaluator::ApReport;
use crate::matching_losses::LossReport;
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub loss: Option<LossReport>,
    pub eval: Option<ApReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub metrics: CheckpointMetrics,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Byte length.
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    metrics: CheckpointMetrics,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let groups = [
            (PARAM, &self.params),
            (ADAM_M, &self.adam.m),
            (ADAM_V, &self.adam.v),
        ];
        for (prefix, store) in groups {
            for (name, t) in store.iter() {
                let offset = payload.len();
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes: payload.len() - offset,
                });
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
            adam_t: self.adam.t,
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("header_length: file shorter than 8 bytes".into()))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::Checkpoint("header_length: does not fit in memory".into()))?;
        let header_bytes = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| {
                Error::Checkpoint(format!("header: truncated, expected {header_len} bytes"))
            })?;
        let raw: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "format_version: unsupported value {v} (expected {CHECKPOINT_FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("format_version: missing".into())),
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[8 + header_len..];
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for entry in &header.tensors {
            if entry.dtype != "f64" {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            if entry.nbytes != count * 8 {
                return Err(Error::Checkpoint(format!(
                    "{}: byte length does not match shape",
                    entry.name
                )));
            }
            let data = payload
                .get(entry.offset..entry.offset.saturating_add(entry.nbytes))
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", entry.name)))?;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(&entry.shape, values);
            let (store, name) = if let Some(n) = entry.name.strip_prefix(PARAM) {
                (&mut params, n)
            } else if let Some(n) = entry.name.strip_prefix(ADAM_M) {
                (&mut m, n)
            } else if let Some(n) = entry.name.strip_prefix(ADAM_V) {
                (&mut v, n)
            } else {
                return Err(Error::Checkpoint(format!(
                    "{}: unknown tensor group",
                    entry.name
                )));
            };
            if store.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "{}: duplicate tensor",
                    entry.name
                )));
            }
            store.insert(name, tensor);
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            metrics: header.metrics,
            params,
            adam: AdamState {
                t: header.adam_t,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Number of parameter tensors recorded in a serialized header.
    pub fn header_param_count(bytes: &[u8]) -> Result<usize> {
        let header_len = u64::from_le_bytes(
            bytes
                .get(..8)
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| {
                    Error::Checkpoint("header_length: file shorter than 8 bytes".into())
                })?,
        ) as usize;
        let header: Header = serde_json::from_slice(
            bytes
                .get(8..8 + header_len)
                .ok_or_else(|| Error::Checkpoint("header: truncated".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        Ok(header
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(PARAM))
            .count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MapFmModel;

    fn sample_checkpoint() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model.decoder.num_instances = 4;
        let model = MapFmModel::new(config.model.clone(), 5).unwrap();
        let mut adam = AdamState::new(&model.params, &model.trainable_set());
        adam.t = 3;
        for (_, t) in adam.m.iter_mut() {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = (i as f64).sin() * 1e-3);
        }
        Checkpoint {
            config,
            step: 3,
            metrics: CheckpointMetrics {
                loss: Some(LossReport::from_components(
                    [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                    &Default::default(),
                )),
                eval: None,
            },
            params: model.params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(
            Checkpoint::header_param_count(&bytes).unwrap(),
            ck.params.len()
        );
    }

    #[test]
    fn unknown_version_is_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        header["format_version"] = serde_json::json!(99);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = (new_header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[8 + header_len..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4])
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("adam_v/") && err.contains("truncated"),
            "{err}"
        );
        assert!(Checkpoint::from_bytes(&bytes[..5]).is_err());
    }
}
