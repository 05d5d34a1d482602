//! Checkpoint directories: one tensor file per parameter plus `manifest.json`.

use std::fs;
use std::path::Path;

use cfn_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Model, NetworkConfig};
use crate::config::{network_from_kv, network_to_kv};
use crate::dataio::tensor_file::{read_tensor, write_tensor};
use crate::error::{CfnError, Result};
use crate::params::ParamStore;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "cfn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: String,
    config_hash: String,
    epoch: usize,
    params: Vec<Entry>,
    momentum: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub config_hash: String,
    /// Completed training epochs.
    pub epoch: usize,
    pub params: ParamStore,
    /// Optimizer velocity, in parameter order; empty if not saved.
    pub momentum: Vec<Tensor>,
}

/// Hex SHA-256 of the canonical network text.
pub fn config_hash(net: &NetworkConfig) -> String {
    Sha256::digest(network_to_kv(net).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_name(name: &str) -> String {
    format!("{name}.cfnt")
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-')
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CfnError::Data(format!("parameter name {name:?} is not a safe file name")))
    }
}

pub fn save_checkpoint(dir: &Path, model: &Model, epoch: usize, momentum: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir.join("momentum")).map_err(|e| CfnError::io(dir.display().to_string(), e))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        check_name(name)?;
        let file = file_name(name);
        write_tensor(&dir.join(&file), t)?;
        params.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let mut mom = Vec::with_capacity(momentum.len());
    for (name, t) in model.params.names().iter().zip(momentum) {
        let file = format!("momentum/{}", file_name(name));
        write_tensor(&dir.join(&file), t)?;
        mom.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: network_to_kv(&model.config),
        config_hash: config_hash(&model.config),
        epoch,
        params,
        momentum: mom,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CfnError::Data(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| CfnError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CfnError::io(path.display().to_string(), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CfnError::Data(format!("{}: {e}", path.display())))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(CfnError::Data(format!("{} is not a checkpoint manifest", path.display())));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CfnError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| CfnError::Data(format!("{}: {e}", path.display())))?;
    let network = network_from_kv(&manifest.config)?;
    if config_hash(&network) != manifest.config_hash {
        return Err(CfnError::Data("checkpoint config hash does not match its config".into()));
    }
    let read = |entries: &[Entry]| -> Result<Vec<(String, Tensor)>> {
        entries
            .iter()
            .map(|e| {
                check_name(&e.name)?;
                let t = read_tensor(&dir.join(&e.file))?;
                if t.shape() != e.shape.as_slice() {
                    return Err(CfnError::Data(format!(
                        "{} has shape {:?} but the manifest says {:?}",
                        e.file,
                        t.shape(),
                        e.shape
                    )));
                }
                Ok((e.name.clone(), t))
            })
            .collect()
    };
    let params = ParamStore::from_pairs(read(&manifest.params)?)?;
    let momentum: Vec<Tensor> = read(&manifest.momentum)?.into_iter().map(|(_, t)| t).collect();
    if !momentum.is_empty() && momentum.len() != params.len() {
        return Err(CfnError::Data("momentum buffers do not cover every parameter".into()));
    }
    Ok(Checkpoint {
        network,
        config_hash: manifest.config_hash,
        epoch: manifest.epoch,
        params,
        momentum,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters left at their current values.
    pub kept: Vec<String>,
    /// Checkpoint parameters the model does not have.
    pub skipped: Vec<String>,
}

/// Copies checkpoint parameters into `model`.
///
/// A full load requires identical name sets. A partial load tolerates model
/// parameters missing from the checkpoint only when they are fusion
/// parameters or belong to a stream the checkpoint was not trained with.
pub fn load_into(model: &mut Model, ckpt: &Checkpoint, partial: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut offenders = Vec::new();
    let stream_absent = |name: &str| {
        (name.starts_with("coarse.") && !ckpt.network.has_coarse())
            || (name.starts_with("fine.") && !ckpt.network.has_fine())
    };
    for name in model.params.names() {
        match ckpt.params.get(name) {
            Some(t) => {
                let mine = model.params.get(name).expect("own parameter");
                if mine.shape() != t.shape() {
                    offenders.push(format!("{name}: shape {:?} vs {:?}", mine.shape(), t.shape()));
                } else {
                    report.loaded.push(name.clone());
                }
            }
            None if partial && (crate::backbone::is_fusion_param(name) || stream_absent(name)) => {
                report.kept.push(name.clone())
            }
            None => offenders.push(format!("{name}: missing from checkpoint")),
        }
    }
    for name in ckpt.params.names() {
        if model.params.get(name).is_none() {
            if partial {
                report.skipped.push(name.clone());
            } else {
                offenders.push(format!("{name}: not in model"));
            }
        }
    }
    if !offenders.is_empty() {
        return Err(CfnError::ParamMismatch { offenders });
    }
    for name in &report.loaded {
        let t = ckpt.params.get(name).expect("checked above").clone();
        model.params.set(name, t)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_hex_sha256() {
        let h = config_hash(&NetworkConfig::default());
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        let other = NetworkConfig { mask: false, ..Default::default() };
        assert_ne!(config_hash(&other), h);
    }

    #[test]
    fn unsafe_names_rejected() {
        assert!(check_name("coarse.stem.spatial.weight").is_ok());
        assert!(check_name("../etc").is_err());
        assert!(check_name("a/b").is_err());
    }
}
