//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `ODGCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! the raw little-endian `f64` data of every tensor in manifest order.
//! Tensor names are `encoder.*`, `head.fc.*`, `ssnet.fc{1,2}.*` and
//! `fanet.{fc1,bn,fc2}.*`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ODGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub embed_dim: usize,
    pub feat_channels: usize,
    /// Training configuration (bands, noise, seed) when saved by the trainer.
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

pub fn encode(model: &Model, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        embed_dim: model.encoder.embed_dim(),
        feat_channels: model.encoder.feat_channels(),
        train: train.cloned(),
        tensors: model
            .params
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(json.len() as u64)?;
    out.extend_from_slice(&json);
    for e in model.params.entries() {
        for &v in e.value.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckpt_err("file too short"))?;
    if &magic != MAGIC {
        return Err(ckpt_err("not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| ckpt_err("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| ckpt_err("truncated header"))? as usize;
    let start = r.position() as usize;
    let json = bytes
        .get(start..start + len)
        .ok_or_else(|| ckpt_err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    r.set_position((start + len) as u64);
    let mut model = Model::new(manifest.model.clone())?;
    if manifest.tensors.len() != model.params.len() {
        return Err(ckpt_err(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for t in &manifest.tensors {
        let id = model
            .params
            .find(&t.name)
            .ok_or_else(|| ckpt_err(format!("unknown tensor {}", t.name)))?;
        let dst = model.params.get_mut(id);
        if dst.shape() != t.shape.as_slice() {
            return Err(ckpt_err(format!("{}: shape {:?}, expected {:?}", t.name, t.shape, dst.shape())));
        }
        for v in dst.data_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|_| ckpt_err(format!("truncated data in {}", t.name)))?;
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(ckpt_err("trailing bytes after tensor data"));
    }
    Ok((model, manifest))
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save(model: &Model, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let bytes = encode(model, train)?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| ckpt_err(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.partial", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Copies every `encoder.*` tensor of a checkpoint with matching name and
/// shape into `model`; returns the number copied. Hook for pretrained
/// backbones.
pub fn load_encoder_weights(model: &mut Model, path: &Path) -> Result<usize> {
    let (src, _) = load(path)?;
    let mut copied = 0;
    for e in src.params.entries().iter().filter(|e| e.name.starts_with("encoder.")) {
        if let Some(id) = model.params.find(&e.name) {
            if model.params.get(id).shape() == e.value.shape() {
                *model.params.get_mut(id) = e.value.clone();
                copied += 1;
            }
        }
    }
    if copied == 0 {
        return Err(ckpt_err("no encoder tensors matched"));
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Model::new(ModelConfig::toy(4, 16, 9)).unwrap();
        let cfg = TrainConfig::default();
        let bytes = encode(&m, Some(&cfg)).unwrap();
        let (back, manifest) = decode(&bytes).unwrap();
        assert_eq!(manifest.train.as_ref(), Some(&cfg));
        assert_eq!(manifest.embed_dim, 64);
        for (a, b) in m.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&back, Some(&cfg)).unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_rejected() {
        let m = Model::new(ModelConfig::toy(4, 16, 9)).unwrap();
        let bytes = encode(&m, None).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn encoder_hook_copies_weights() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pre.ckpt");
        let src = Model::new(ModelConfig::toy(3, 16, 1)).unwrap();
        save(&src, None, &p).unwrap();
        let mut dst = Model::new(ModelConfig::toy(5, 16, 2)).unwrap();
        assert_eq!(load_encoder_weights(&mut dst, &p).unwrap(), 20);
        let id = dst.params.find("encoder.block1.conv.weight").unwrap();
        assert_eq!(dst.params.get(id), src.params.get(src.params.find("encoder.block1.conv.weight").unwrap()));
    }
}
