//! On-disk checkpoints: a directory with `manifest.json` and `tensors.bin`.
//!
//! `tensors.bin` is the concatenation of raw little-endian `f32` tensors in
//! row-major order (conv weights are `(O, I, H, W)`). The manifest lists each
//! tensor's name, shape, byte offset and byte length, the network topology,
//! the per-channel `(b, e)` arrays, and the starting weight count and widths.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{param_key, Network, NetworkGraph, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const DTYPE: &str = "f32le";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFormats {
    pub bits: Vec<f32>,
    pub exponent: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub initial_weight_count: usize,
    pub initial_widths: BTreeMap<String, usize>,
    pub topology: NetworkGraph,
    pub formats: BTreeMap<String, ChannelFormats>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write `net` to directory `dir`, creating it if needed.
pub fn save(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut formats = BTreeMap::new();
    for (key, t) in net.params.iter() {
        if matches!(ParamRole::parse_key(key), Some((_, ParamRole::Bits | ParamRole::Exponent))) {
            continue;
        }
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: key.clone(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    for (_, layer) in net.graph.weighted() {
        if let (Some(b), Some(e)) = (
            net.params.role(&layer.name, ParamRole::Bits),
            net.params.role(&layer.name, ParamRole::Exponent),
        ) {
            formats.insert(
                layer.name.clone(),
                ChannelFormats {
                    bits: b.data().to_vec(),
                    exponent: e.data().to_vec(),
                },
            );
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        initial_weight_count: net.initial_weight_count(),
        initial_widths: net.initial_widths().clone(),
        topology: net.graph.clone(),
        formats,
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, blob).map_err(|e| Error::io(&tpath, e))?;
    Ok(())
}

/// Read a checkpoint directory written by [`save`].
pub fn load(dir: &Path) -> Result<Network> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| bad(&mpath, e.to_string()))?;
    if manifest.dtype != DTYPE {
        return Err(bad(&mpath, format!("unsupported dtype `{}`", manifest.dtype)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(bad(&mpath, format!("unsupported format version {}", manifest.version)));
    }
    let tpath = dir.join(TENSORS_FILE);
    let blob = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut params = ParamStore::default();
    let mut end = 0u64;
    for entry in &manifest.tensors {
        let elems: usize = entry.shape.iter().product();
        if entry.length != 4 * elems as u64 {
            return Err(bad(
                &tpath,
                format!("`{}` declares {} bytes for shape {:?}", entry.name, entry.length, entry.shape),
            ));
        }
        let stop = entry.offset.checked_add(entry.length).filter(|&s| s <= blob.len() as u64);
        let Some(stop) = stop else {
            return Err(bad(
                &tpath,
                format!("`{}` extends past the end of the tensor file ({} bytes)", entry.name, blob.len()),
            ));
        };
        let bytes = &blob[entry.offset as usize..stop as usize];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        end = end.max(stop);
    }
    if end != blob.len() as u64 {
        return Err(bad(&tpath, format!("{} trailing bytes after the last tensor", blob.len() as u64 - end)));
    }
    for (layer, f) in &manifest.formats {
        if f.bits.len() != f.exponent.len() {
            return Err(bad(&mpath, format!("`{layer}` has mismatched bit and exponent arrays")));
        }
        params.insert(param_key(layer, ParamRole::Bits), Tensor::from_vec(f.bits.clone()));
        params.insert(param_key(layer, ParamRole::Exponent), Tensor::from_vec(f.exponent.clone()));
    }
    Network::with_history(manifest.topology, params, manifest.initial_weight_count, manifest.initial_widths)
        .map_err(|e| bad(dir, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_cifar_net, BuildOptions, WidthConfig};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_cifar_net(&WidthConfig::default().scaled(0.125), &BuildOptions::default()).unwrap();
        save(&net, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.graph, net.graph);
        assert_eq!(back.params, net.params);
        assert_eq!(back.initial_weight_count(), net.initial_weight_count());
    }

    #[test]
    fn truncated_tensor_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_cifar_net(&WidthConfig::default().scaled(0.125), &BuildOptions::default()).unwrap();
        save(&net, dir.path()).unwrap();
        let t = dir.path().join(TENSORS_FILE);
        let bytes = fs::read(&t).unwrap();
        fs::write(&t, &bytes[..bytes.len() - 8]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    }
}
