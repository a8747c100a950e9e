//! Tensor container: a JSON manifest plus a little-endian `f32` sidecar.
//!
//! `<stem>.json` lists `(name, shape, dtype)` per tensor and carries a free
//! `meta` object; `<stem>.bin` holds the raw values concatenated in manifest
//! order. Loading reproduces every value bit for bit.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::Module;
use crate::tensor::{Tensor, TensorError};

pub const FORMAT: &str = "mpt-tensors/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(PathBuf, io::Error),
    Json(PathBuf, serde_json::Error),
    Format(String),
    Tensor(TensorError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CheckpointError::Json(p, e) => write!(f, "{}: {e}", p.display()),
            CheckpointError::Format(msg) => write!(f, "bad container: {msg}"),
            CheckpointError::Tensor(e) => write!(f, "bad container: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn data_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save(stem: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        });
        for &x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        meta,
        tensors: entries,
    };
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CheckpointError::Io(dir.to_path_buf(), e))?;
        }
    }
    let mp = manifest_path(stem);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Json(mp.clone(), e))?;
    fs::write(&mp, json + "\n").map_err(|e| CheckpointError::Io(mp, e))?;
    let dp = data_path(stem);
    fs::write(&dp, bytes).map_err(|e| CheckpointError::Io(dp, e))
}

pub fn read_manifest(stem: &Path) -> Result<Manifest, CheckpointError> {
    let mp = manifest_path(stem);
    let text = fs::read_to_string(&mp).map_err(|e| CheckpointError::Io(mp.clone(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Json(mp, e))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format(format!("unknown format `{}`", manifest.format)));
    }
    Ok(manifest)
}

pub fn load(stem: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>), CheckpointError> {
    let manifest = read_manifest(stem)?;
    let dp = data_path(stem);
    let bytes = fs::read(&dp).map_err(|e| CheckpointError::Io(dp, e))?;
    if bytes.len() % 4 != 0 {
        return Err(CheckpointError::Format("sidecar length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::Format(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if offset + n > floats.len() {
            return Err(CheckpointError::Format(format!("sidecar truncated at tensor `{}`", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), floats[offset..offset + n].to_vec()).map_err(CheckpointError::Tensor)?;
        out.push((e.name.clone(), t));
        offset += n;
    }
    if offset != floats.len() {
        return Err(CheckpointError::Format(format!(
            "sidecar holds {} values, manifest describes {offset}",
            floats.len()
        )));
    }
    Ok((manifest.meta, out))
}

/// Saves every parameter of `module` in visiting order.
pub fn save_module(stem: &Path, meta: serde_json::Value, module: &dyn Module) -> Result<(), CheckpointError> {
    let mut named: Vec<(String, Tensor)> = Vec::new();
    module.visit(&mut |name, t| named.push((name.to_string(), t.clone())));
    let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
    save(stem, meta, &refs)
}

/// Overwrites the parameters of `module` from a container with matching
/// names and shapes. Returns the container's `meta` object.
pub fn load_into(stem: &Path, module: &mut dyn Module) -> Result<serde_json::Value, CheckpointError> {
    let (meta, tensors) = load(stem)?;
    let mut expected = Vec::new();
    module.visit(&mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
    if expected.len() != tensors.len() {
        return Err(CheckpointError::Format(format!(
            "expected {} tensors, container has {}",
            expected.len(),
            tensors.len()
        )));
    }
    for ((name, shape), (cname, ct)) in expected.iter().zip(&tensors) {
        if name != cname || shape.as_slice() != ct.shape() {
            return Err(CheckpointError::Format(format!(
                "tensor mismatch: expected `{name}` {shape:?}, found `{cname}` {:?}",
                ct.shape()
            )));
        }
    }
    let mut it = tensors.into_iter();
    let mut err = None;
    module.visit_mut(&mut |_, t| {
        let (_, src) = it.next().expect("counted above");
        if let Err(e) = t.assign(src.data()) {
            err.get_or_insert(e);
        }
    });
    match err {
        Some(e) => Err(CheckpointError::Tensor(e)),
        None => Ok(meta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let mut b = Tensor::randn(vec![7], 1e-3, &mut rng);
        b.data_mut()[0] = f32::MIN_POSITIVE / 4.0;
        b.data_mut()[1] = -0.0;
        save(&stem, serde_json::json!({"k": 1}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (meta, back) = load(&stem).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].1.shape(), &[7]);
        for (orig, (_, got)) in [&a, &b].into_iter().zip(&back) {
            let ob: Vec<u32> = orig.data().iter().map(|x| x.to_bits()).collect();
            let gb: Vec<u32> = got.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ob, gb);
        }
        let raw = fs::read(data_path(&stem)).unwrap();
        assert_eq!(raw.len(), 4 * (15 + 7));
        assert_eq!(&raw[0..4], &a.data()[0].to_le_bytes());
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let a = Tensor::zeros(vec![4]);
        save(&stem, serde_json::Value::Null, &[("a".into(), &a)]).unwrap();
        fs::write(data_path(&stem), [0u8; 8]).unwrap();
        assert!(matches!(load(&stem), Err(CheckpointError::Format(_))));
    }
}
