//! Named-tensor checkpoints: a JSON manifest next to one little-endian
//! `f32` blob. Round trips are bit-exact and include batch-norm buffers.

use std::fs;
use std::path::{Path, PathBuf};

use mmfuse_autograd::ParamStore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const FORMAT: &str = "mmfuse-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// A model that can be rebuilt from its checkpoint metadata.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    fn meta(&self) -> Value;
    /// Builds an architecture matching `meta`; values are overwritten on load.
    fn from_meta(meta: &Value) -> Result<Self>;
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_store(store: &ParamStore<f32>, meta: Value, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for entry in store.entries() {
        let offset = bytes.len() as u64;
        for v in entry.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            byte_length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        meta,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&blob, &bytes).map_err(|e| Error::io(format!("writing {}", blob.display()), e))?;
    fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{} is not a {FORMAT} v{VERSION} manifest",
            path.display()
        )));
    }
    Ok(manifest)
}

/// Loads values into an existing store. Every store entry must be present
/// with the same shape and the manifest must hold nothing else; shapes are
/// checked before any value is written.
pub fn load_store(store: &mut ParamStore<f32>, path: &Path) -> Result<Value> {
    let manifest = read_manifest(path)?;
    let blob_file = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(format!("reading {}", blob_file.display()), e))?;

    let mut plan = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let id = store
            .find(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} is not part of the target model", t.name)))?;
        let expected = store.value(id).shape();
        if expected != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                t.name, t.shape, expected
            )));
        }
        let n: usize = t.shape.iter().product();
        let end = t.offset.checked_add(t.byte_length).filter(|&e| e <= bytes.len() as u64);
        if t.dtype != "f32" || t.byte_length != 4 * n as u64 || end.is_none() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: bad dtype or byte range",
                t.name
            )));
        }
        plan.push((id, t));
    }
    if let Some(missing) = store
        .entries()
        .iter()
        .find(|e| !manifest.tensors.iter().any(|t| t.name == e.name))
    {
        return Err(Error::Checkpoint(format!(
            "parameter {} missing from checkpoint",
            missing.name
        )));
    }
    for (id, t) in plan {
        let raw = &bytes[t.offset as usize..(t.offset + t.byte_length) as usize];
        let dst = store.value_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    store.zero_grads();
    Ok(manifest.meta)
}

pub fn save<M: Checkpointable>(model: &M, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "kind": M::KIND, "model": model.meta() });
    save_store(model.params(), meta, path)
}

pub fn load<M: Checkpointable>(path: &Path) -> Result<M> {
    let manifest = read_manifest(path)?;
    let kind = manifest.meta.get("kind").and_then(Value::as_str).unwrap_or("");
    if kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "{} holds a {kind:?} model, expected {:?}",
            path.display(),
            M::KIND
        )));
    }
    let mut model = M::from_meta(&manifest.meta["model"])?;
    load_store(model.params_mut(), path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmfuse_autograd::Tensor;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add_param("a", Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]));
        s.add_buffer("b.running_var", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.json");
        let p2 = dir.path().join("two.json");
        let original = store();
        save_store(&original, Value::Null, &p1).unwrap();
        let mut loaded = store();
        for id in loaded.ids().collect::<Vec<_>>() {
            loaded.value_mut(id).data_mut().fill(9.0);
        }
        load_store(&mut loaded, &p1).unwrap();
        assert_eq!(loaded.value_bytes(), original.value_bytes());
        save_store(&loaded, Value::Null, &p2).unwrap();
        assert_eq!(
            fs::read(dir.path().join("one.bin")).unwrap(),
            fs::read(dir.path().join("two.bin")).unwrap()
        );
        let m1 = fs::read_to_string(&p1).unwrap().replace("one.bin", "");
        let m2 = fs::read_to_string(&p2).unwrap().replace("two.bin", "");
        assert_eq!(m1, m2);
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_store(&store(), Value::Null, &p).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add_param("a", Tensor::zeros(&[4]));
        other.add_buffer("b.running_var", Tensor::zeros(&[3]));
        let err = load_store(&mut other, &p).unwrap_err().to_string();
        assert!(err.contains("parameter a"), "{err}");
        assert!(other.value(other.find("a").unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_and_extra_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_store(&store(), Value::Null, &p).unwrap();
        let mut fewer = ParamStore::<f32>::new();
        fewer.add_param("a", Tensor::zeros(&[2, 2]));
        assert!(load_store(&mut fewer, &p)
            .unwrap_err()
            .to_string()
            .contains("b.running_var"));
        let mut more = store();
        more.add_param("extra", Tensor::zeros(&[1]));
        assert!(load_store(&mut more, &p).unwrap_err().to_string().contains("extra"));
    }
}
