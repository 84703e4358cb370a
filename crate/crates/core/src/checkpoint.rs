//! Checkpoint directories: `manifest.json` plus one little-endian f32 blob
//! per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::nn::{device, AdamW, AdamWConfig, ParamStore};

pub const FORMAT: &str = "vtg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// `denoiser`, `adapter`, `projector`, ...
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
    pub params: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizers: BTreeMap<String, OptimizerEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            rank: None,
            scale: None,
            config: serde_json::Value::Null,
            params: Vec::new(),
            optimizers: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }
}

fn err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn file_name(prefix: &str, name: &str) -> String {
    format!("{prefix}{name}.f32")
}

fn write_tensor(dir: &Path, file: &str, name: &str, t: &Tensor) -> Result<TensorEntry> {
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let path = dir.join(file);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(&path, bytes)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: t.dims().to_vec(),
        dtype: "f32".into(),
        file: file.to_string(),
    })
}

fn read_tensor(dir: &Path, e: &TensorEntry) -> Result<Tensor> {
    let path = dir.join(&e.file);
    if e.dtype != "f32" {
        return Err(err(&path, format!("unsupported dtype {}", e.dtype)));
    }
    let bytes = fs::read(&path).map_err(|x| err(&path, x.to_string()))?;
    let n: usize = e.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(err(&path, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
    }
    let v: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(v, e.shape.clone(), &device())?)
}

/// Write `store` (and optional optimizers) under `dir` with `manifest`'s
/// metadata. Parameter and optimizer entries of `manifest` are filled in.
pub fn save(dir: &Path, mut manifest: Manifest, store: &ParamStore, optimizers: &[(&str, &AdamW)]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    manifest.params = store
        .iter()
        .map(|(name, var)| write_tensor(dir, &file_name("params/", name), name, var.as_tensor()))
        .collect::<Result<_>>()?;
    manifest.optimizers.clear();
    for (key, opt) in optimizers {
        let mut moments = Vec::new();
        for (name, (m, v)) in opt.moments() {
            moments.push(write_tensor(dir, &file_name(&format!("opt/{key}/m/"), name), name, m)?);
            moments.push(write_tensor(dir, &file_name(&format!("opt/{key}/v/"), name), name, v)?);
        }
        manifest.optimizers.insert(
            key.to_string(),
            OptimizerEntry {
                config: opt.config,
                step: opt.steps_taken(),
                moments,
            },
        );
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| err(&path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| err(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(err(&path, format!("not a checkpoint (format `{}`)", m.format)));
    }
    if m.version != VERSION {
        return Err(err(&path, format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

/// Load the parameter store (f32) and manifest.
pub fn load(dir: &Path) -> Result<(Manifest, ParamStore)> {
    let m = read_manifest(dir)?;
    let mut store = ParamStore::new(DType::F32);
    for e in &m.params {
        store.insert(&e.name, read_tensor(dir, e)?)?;
    }
    Ok((m, store))
}

/// Rebuild a named optimizer recorded in the manifest, if present.
pub fn load_optimizer(dir: &Path, manifest: &Manifest, key: &str) -> Result<Option<AdamW>> {
    let Some(o) = manifest.optimizers.get(key) else {
        return Ok(None);
    };
    let mut moments = BTreeMap::new();
    for pair in o.moments.chunks(2) {
        let [m, v] = pair else {
            return Err(err(dir, "optimizer moments are not paired"));
        };
        moments.insert(m.name.clone(), (read_tensor(dir, m)?, read_tensor(dir, v)?));
    }
    Ok(Some(AdamW::restore(o.config, o.step, moments)))
}

pub fn save_denoiser(dir: &Path, model: &Denoiser, extra: serde_json::Value) -> Result<Manifest> {
    let mut m = Manifest::new("denoiser");
    m.config = serde_json::to_value(&model.config)?;
    m.extra = extra;
    save(dir, m, &model.params, &[])
}

pub fn load_denoiser(dir: &Path) -> Result<Denoiser> {
    let (m, store) = load(dir)?;
    if m.kind != "denoiser" {
        return Err(err(dir, format!("expected a denoiser checkpoint, found `{}`", m.kind)));
    }
    let config: DenoiserConfig = serde_json::from_value(m.config).map_err(|e| err(dir, e.to_string()))?;
    Denoiser::from_params(config, store)
}

pub fn save_adapter(dir: &Path, adapter: &LoraAdapter, extra: serde_json::Value) -> Result<Manifest> {
    let mut m = Manifest::new("adapter");
    m.rank = Some(adapter.rank);
    m.scale = Some(adapter.scale);
    m.extra = extra;
    save(dir, m, &adapter.params, &[])
}

pub fn load_adapter(dir: &Path) -> Result<LoraAdapter> {
    let (m, store) = load(dir)?;
    if m.kind != "adapter" {
        return Err(err(dir, format!("expected an adapter checkpoint, found `{}`", m.kind)));
    }
    let rank = m.rank.ok_or_else(|| err(dir, "adapter manifest lacks a rank"))?;
    LoraAdapter::from_params(rank, m.scale.unwrap_or(1.0), store)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and contents, in path order.
pub fn dir_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = fs::read(&f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{View, AdamWConfig};

    #[test]
    fn denoiser_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::new(DenoiserConfig::miniature(), DType::F32, 11).unwrap();
        save_denoiser(dir.path(), &m, serde_json::json!({"step": 3})).unwrap();
        let back = load_denoiser(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        for name in m.params.names() {
            let a: Vec<u32> = m.params.values_f32(name).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.params.values_f32(name).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
        let h1 = dir_hash(dir.path()).unwrap();
        assert_eq!(h1, dir_hash(dir.path()).unwrap());
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn adapter_manifest_records_rank() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::new(DenoiserConfig::miniature(), DType::F32, 1).unwrap();
        let a = LoraAdapter::new(&m, 3, 1.0, 2).unwrap();
        let man = save_adapter(dir.path(), &a, serde_json::Value::Null).unwrap();
        assert_eq!(man.rank, Some(3));
        let back = load_adapter(dir.path()).unwrap();
        assert_eq!(back.rank, 3);
        assert!(load_denoiser(dir.path()).is_err());
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new(DType::F32);
        s.insert("x", Tensor::new(&[1.0f32, -2.0], &device()).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1));
        let g = View::trainable(&s).get("x").unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&s, &g, ["x"]).unwrap();
        let man = save(dir.path(), Manifest::new("test"), &s, &[("main", &opt)]).unwrap();
        let restored = load_optimizer(dir.path(), &man, "main").unwrap().unwrap();
        assert_eq!(restored.steps_taken(), 1);
        let (m0, v0) = &opt.moments()["x"];
        let (m1, v1) = &restored.moments()["x"];
        assert_eq!(m0.to_vec1::<f32>().unwrap(), m1.to_vec1::<f32>().unwrap());
        assert_eq!(v0.to_vec1::<f32>().unwrap(), v1.to_vec1::<f32>().unwrap());
        assert!(load_optimizer(dir.path(), &man, "other").unwrap().is_none());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::new(DenoiserConfig::miniature(), DType::F32, 1).unwrap();
        let man = save_denoiser(dir.path(), &m, serde_json::Value::Null).unwrap();
        fs::write(dir.path().join(&man.params[0].file), [0u8; 3]).unwrap();
        assert!(matches!(load_denoiser(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
