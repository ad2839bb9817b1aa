//! Checkpoint container: a safetensors file whose tensors are the model's named
//! parameters (stored as `f32`) and whose header metadata holds three JSON strings:
//!
//! * `kind`: which network the file belongs to (`video2roll`, `roll2midi`, `synth`);
//! * `config`: the model configuration needed to rebuild the architecture;
//! * `history`: the training log (per-epoch losses and validation metrics).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::ParamStore;
use super::to_f32_vec;
use crate::error::{Error, Result};

pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub history: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }

    /// Parameters whose names start with `prefix.`, with the prefix removed.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }
}

/// Writes every parameter of `stores`, each under its own name prefix.
pub fn save_checkpoint<C: Serialize, H: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    history: &H,
    stores: &[(&str, &ParamStore)],
) -> Result<()> {
    let mut bytes: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, store) in stores {
        for (name, var) in store.named() {
            let data: Vec<u8> = to_f32_vec(var.as_tensor())?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            bytes.push((format!("{prefix}.{name}"), var.dims().to_vec(), data));
        }
    }
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("kind".to_string(), kind.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("history".to_string(), serde_json::to_string(history)?);
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buffer = std::fs::read(path)?;
    let err = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, metadata) = SafeTensors::read_metadata(&buffer).map_err(err)?;
    let info = metadata.metadata().clone().unwrap_or_default();
    let field = |key: &str| {
        info.get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: metadata lacks `{key}`", path.display())))
    };
    let kind = field("kind")?;
    let config = serde_json::from_str(&field("config")?)?;
    let history = serde_json::from_str(&field("history")?)?;
    let st = SafeTensors::deserialize(&buffer).map_err(err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {:?}, expected F32",
                view.dtype()
            )));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, (view.shape().to_vec(), values));
    }
    Ok(Checkpoint {
        kind,
        config,
        history,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use candle_core::DType;

    use super::*;

    #[test]
    fn roundtrip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut s = ParamStore::new(DType::F32, 5);
        s.normal("a.w", &[2, 3], 1.0).unwrap();
        s.constant("a.b", &[3], 0.25).unwrap();
        save_checkpoint(
            &path,
            "toy",
            &serde_json::json!({"width": 3}),
            &vec![1.5, 1.0],
            &[("net", &s)],
        )
        .unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "toy");
        assert_eq!(ck.config["width"], 3);
        assert_eq!(ck.history, serde_json::json!([1.5, 1.0]));
        ck.expect_kind("toy").unwrap();
        assert!(ck.expect_kind("other").is_err());

        let mut fresh = ParamStore::new(DType::F32, 99);
        fresh.normal("a.w", &[2, 3], 1.0).unwrap();
        fresh.constant("a.b", &[3], 0.0).unwrap();
        fresh.load_values(&ck.subset("net")).unwrap();
        let before = to_f32_vec(s.get("a.w").unwrap().as_tensor()).unwrap();
        let after = to_f32_vec(fresh.get("a.w").unwrap().as_tensor()).unwrap();
        assert_eq!(before, after);
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
