//! Checkpoint archive: one safetensors file holding every parameter keyed
//! `<partition>/<name>`, with the model configs in its metadata, plus a JSON
//! sidecar manifest listing tensor shapes and the archive's SHA-256.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, NegativeMode, Networks, Partition, Precision};
use crate::error::{Error, Result};

const HEADER_KEY: &str = "negcut.model";

/// Model description stored inside the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub model: ModelConfig,
    pub negatives: NegativeMode,
    pub n_free: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

/// Sidecar manifest written next to each archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub file: String,
    pub sha256: String,
    pub header: ModelHeader,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut name = archive.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    archive.with_file_name(name)
}

pub fn param_key(p: Partition, name: &str) -> String {
    format!("{}/{name}", p.name())
}

/// Writes `nets` plus caller-provided tensors and metadata strings.
pub fn save_checkpoint(
    path: &Path,
    nets: &Networks,
    extra_tensors: &BTreeMap<String, Tensor>,
    extra_meta: &BTreeMap<String, String>,
) -> Result<Manifest> {
    let header = ModelHeader {
        model: nets.config().clone(),
        negatives: nets.negatives.mode(),
        n_free: nets.n_free(),
        precision: nets.precision(),
    };
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for set in nets.params.sets() {
        for (name, var) in set.iter() {
            tensors.insert(param_key(set.partition(), name), var.as_tensor().clone());
        }
    }
    for (k, t) in extra_tensors {
        if tensors.insert(k.clone(), t.clone()).is_some() {
            return Err(Error::Invariant(format!("checkpoint key {k} used twice")));
        }
    }
    let mut meta: HashMap<String, String> = extra_meta.clone().into_iter().collect();
    meta.insert(HEADER_KEY.to_string(), serde_json::to_string(&header)?);

    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let manifest = Manifest {
        format: "safetensors".into(),
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        header,
        tensors: tensors
            .iter()
            .map(|(k, t)| TensorEntry {
                key: k.clone(),
                dtype: format!("{:?}", t.dtype()).to_lowercase(),
                shape: t.dims().to_vec(),
            })
            .collect(),
    };
    let mpath = manifest_path(path);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Archive contents after loading.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub header: ModelHeader,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl LoadedCheckpoint {
    /// Tensors of one partition with the partition prefix stripped.
    pub fn partition(&self, p: Partition) -> BTreeMap<String, Tensor> {
        let prefix = format!("{}/", p.name());
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    /// Rebuilds the networks and loads every parameter.
    pub fn networks(&self) -> Result<Networks> {
        let nets = Networks::new(
            &self.header.model,
            self.header.negatives,
            self.header.n_free,
            0,
            self.header.precision,
        )?;
        for p in Partition::ALL {
            nets.params.get(p).load(&self.partition(p))?;
        }
        Ok(nets)
    }
}

/// Loads an archive, checking it against its manifest when one exists.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != manifest.sha256 {
            return Err(Error::InvalidInput(format!(
                "{}: content hash {digest} does not match manifest {}",
                path.display(),
                manifest.sha256
            )));
        }
    }
    let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let mut meta: BTreeMap<String, String> = metadata
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let header_json = meta.remove(HEADER_KEY).ok_or_else(|| {
        Error::InvalidInput(format!("{}: not a model checkpoint", path.display()))
    })?;
    let header: ModelHeader = serde_json::from_str(&header_json)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(LoadedCheckpoint {
        header,
        tensors,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let nets = Networks::new(
            &ModelConfig::toy(),
            NegativeMode::Generator,
            0,
            5,
            Precision::F32,
        )
        .unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "3".to_string());
        let manifest = save_checkpoint(&path, &nets, &BTreeMap::new(), &meta).unwrap();
        assert_eq!(manifest.sha256.len(), 64);
        assert!(manifest_path(&path).exists());

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.get("epoch").map(String::as_str), Some("3"));
        let restored = loaded.networks().unwrap();
        for p in Partition::ALL {
            let snap = nets.params.get(p).snapshot().unwrap();
            assert!(restored.params.get(p).bitwise_eq(&snap).unwrap(), "{p}");
        }
    }

    #[test]
    fn tampered_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let nets =
            Networks::new(&ModelConfig::toy(), NegativeMode::InImage, 0, 1, Precision::F32).unwrap();
        save_checkpoint(&path, &nets, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
