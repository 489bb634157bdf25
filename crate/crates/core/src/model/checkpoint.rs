//! Binary checkpoint archive.
//!
//! Layout: the 8 magic bytes `IRNCKPT1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then raw little-endian `f32` payloads in directory
//! order. Directory offsets are relative to the start of the payload section.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::exec::Network;
use super::graph::{build_network, NetworkConfig};
use super::ModelError;

pub const MAGIC: &[u8; 8] = b"IRNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    #[default]
    Parameter,
    Velocity,
    /// Any other named tensor, e.g. cached preprocessed images.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub role: TensorRole,
    pub offset: u64,
    pub length: u64,
}

/// Training bookkeeping stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub phase: u32,
    /// Names of the trainable parameterized layers when saved.
    pub trainable_layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<NetworkConfig>,
    #[serde(default)]
    label_map: Vec<String>,
    #[serde(default)]
    metadata: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub data: Vec<f32>,
}

/// Decoded archive contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: Option<NetworkConfig>,
    pub label_map: Vec<String>,
    pub metadata: TrainingMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, label_map: Vec<String>, metadata: TrainingMeta) -> Self {
        let tensors = net
            .graph
            .params
            .iter()
            .zip(&net.params)
            .map(|(spec, data)| NamedTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                role: TensorRole::Parameter,
                data: data.clone(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: Some(net.graph.config.clone()),
            label_map,
            metadata,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str, role: TensorRole) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name && t.role == role)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let length = (t.data.len() * 4) as u64;
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    role: t.role,
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let header = Header {
            format_version: self.format_version,
            config: self.config.clone(),
            label_map: self.label_map.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptFile(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing IRNCKPT1 magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).unwrap_or_default();
        if len > body.len() {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| ModelError::CorruptFile(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.length as usize != numel * 4 {
                return Err(ModelError::CorruptFile(format!("{}: length does not match shape", e.name)));
            }
            let start = e.offset as usize;
            let raw = start
                .checked_add(e.length as usize)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| ModelError::CorruptFile(format!("{}: payload out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                role: e.role,
                data,
            });
        }
        Ok(Self {
            format_version: header.format_version,
            config: header.config,
            label_map: header.label_map,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// leaves a truncated archive behind.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the network from the stored config and fills every
    /// parameter, checking shapes. Restores the trainable-layer mask when one
    /// was saved.
    pub fn to_network(&self) -> Result<Network<f32>, ModelError> {
        let cfg = self
            .config
            .as_ref()
            .ok_or_else(|| ModelError::CorruptFile("checkpoint carries no network config".into()))?;
        let mut graph = build_network(cfg)?;
        if !self.metadata.trainable_layers.is_empty() {
            graph.set_trainable_layers(&self.metadata.trainable_layers)?;
        }
        let mut net = super::exec::init_parameters(graph, cfg.seed);
        load_into(&mut net, self)?;
        Ok(net)
    }
}

/// Copies every parameter of `net` from the checkpoint; any missing tensor
/// or differing shape is an error.
pub fn load_into(net: &mut Network<f32>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    for spec in &net.graph.params {
        let t = ckpt
            .tensor(&spec.name, TensorRole::Parameter)
            .ok_or_else(|| ModelError::ShapeMismatch(format!("{} missing from checkpoint", spec.name)))?;
        if t.shape != spec.shape {
            return Err(ModelError::ShapeMismatch(format!(
                "{}: checkpoint {:?}, network {:?}",
                spec.name, t.shape, spec.shape
            )));
        }
    }
    for (i, spec) in net.graph.params.iter().enumerate() {
        let t = ckpt.tensor(&spec.name, TensorRole::Parameter).expect("checked above");
        net.params[i].copy_from_slice(&t.data);
    }
    Ok(())
}

/// Outcome of a lenient load.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Tensors left at their fresh initialization (absent or shape differs).
    pub fresh: Vec<String>,
}

/// Copies every tensor whose name and shape match; leaves the rest as
/// initialized.
pub fn load_matching(net: &mut Network<f32>, ckpt: &Checkpoint) -> LoadReport {
    let mut report = LoadReport::default();
    for (i, spec) in net.graph.params.iter().enumerate() {
        match ckpt.tensor(&spec.name, TensorRole::Parameter) {
            Some(t) if t.shape == spec.shape => {
                net.params[i].copy_from_slice(&t.data);
                report.loaded.push(spec.name.clone());
            }
            _ => report.fresh.push(spec.name.clone()),
        }
    }
    report
}

pub fn save_checkpoint(
    net: &Network<f32>,
    meta: TrainingMeta,
    path: &Path,
) -> Result<(), ModelError> {
    Checkpoint::from_network(net, crate::classes::label_map(), meta).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Network<f32>), ModelError> {
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.to_network()?;
    Ok((ckpt, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, init_parameters, Mode};

    fn toy(num_classes: usize, seed: u64) -> Network<f32> {
        let cfg = NetworkConfig {
            num_classes,
            seed,
            ..NetworkConfig::toy()
        };
        init_parameters(build_network(&cfg).unwrap(), seed)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut net = toy(7, 3);
        net.params[1][0] = f32::from_bits(0x0000_0001); // subnormal survives
        let meta = TrainingMeta {
            epoch: 4,
            best_val_accuracy: 0.75,
            phase: 1,
            trainable_layers: net.graph.trainable_layer_names(),
        };
        save_checkpoint(&net, meta.clone(), &path).unwrap();
        let (ckpt, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.metadata, meta);
        assert_eq!(ckpt.label_map, crate::classes::label_map());
        for (a, b) in net.params.iter().zip(&loaded.params) {
            let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(fs::read(&path).unwrap(), ckpt.to_bytes());

        let x = vec![0.5f32; 2 * net.graph.input_shape().len()];
        let before = net.forward(&x, 2, Mode::Inference).unwrap();
        let after = loaded.forward(&x, 2, Mode::Inference).unwrap();
        assert_eq!(before.probabilities(), after.probabilities());
    }

    #[test]
    fn head_shape_mismatch_is_reported() {
        let ckpt = Checkpoint::from_network(&toy(7, 1), crate::classes::label_map(), TrainingMeta::default());
        let mut other = toy(5, 1);
        match load_into(&mut other, &ckpt) {
            Err(ModelError::ShapeMismatch(m)) => assert!(m.starts_with("head/logits/kernel"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_load_keeps_fresh_head() {
        let source = toy(7, 1);
        let ckpt = Checkpoint::from_network(&source, vec![], TrainingMeta::default());
        let mut target = toy(5, 2);
        let fresh_head = target.param("head/logits/kernel").unwrap().to_vec();
        let report = load_matching(&mut target, &ckpt);
        assert_eq!(report.fresh, ["head/logits/kernel", "head/logits/bias"]);
        assert_eq!(report.loaded.len(), target.graph.params.len() - 2);
        assert_eq!(target.param("head/logits/kernel").unwrap(), &fresh_head[..]);
        assert_eq!(target.param("head/fc1/kernel"), source.param("head/fc1/kernel"));
    }

    #[test]
    fn corrupt_and_version_errors() {
        let net = toy(7, 1);
        let bytes = Checkpoint::from_network(&net, vec![], TrainingMeta::default()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(ModelError::CorruptFile(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(ModelError::CorruptFile(_))));

        let mut ckpt = Checkpoint::from_network(&net, vec![], TrainingMeta::default());
        ckpt.format_version = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&ckpt.to_bytes()),
            Err(ModelError::VersionMismatch { found: 2, .. })
        ));
    }
}
