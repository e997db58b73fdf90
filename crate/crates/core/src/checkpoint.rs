//! Safetensors checkpoints: parameters and buffers under `param/<name>`,
//! optimiser moments under `adam_m/<name>` and `adam_v/<name>`, and the full
//! configuration (TOML), completed epochs and optimiser step count as metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;

use crate::config::Config;
use crate::error::{io, Error, Result};
use crate::model::decode_floats;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const PARAM_PREFIX: &str = "param/";
pub const ADAM_M_PREFIX: &str = "adam_m/";
pub const ADAM_V_PREFIX: &str = "adam_v/";

/// Everything needed to continue or reproduce a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Values in store order, keyed by parameter name.
    pub params: BTreeMap<String, Tensor<T>>,
    pub adam_m: BTreeMap<String, Tensor<T>>,
    pub adam_v: BTreeMap<String, Tensor<T>>,
}

fn le_bytes<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Rewrites the JSON header with sorted keys so equal checkpoints are equal bytes.
fn sorted_header(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| e.to_string())?;
    let mut text = serde_json::to_string(&header).map_err(|e| e.to_string())?.into_bytes();
    text.resize(text.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(bytes.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

impl<T: Float> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut owned: Vec<(String, [usize; 4], Vec<u8>)> = Vec::new();
        for (prefix, map) in [
            (PARAM_PREFIX, &self.params),
            (ADAM_M_PREFIX, &self.adam_m),
            (ADAM_V_PREFIX, &self.adam_v),
        ] {
            for (name, t) in map {
                owned.push((format!("{prefix}{name}"), t.shape(), le_bytes(t)));
            }
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(T::DTYPE, shape.to_vec(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| fail(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("config".to_string(), self.config.to_toml());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| fail(e.to_string()))?;
        let bytes = sorted_header(&bytes).map_err(fail)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| fail(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| fail("missing metadata".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| fail(format!("missing metadata {k}")));
        let config = Config::from_toml(&field("config")?)?;
        let epoch = field("epoch")?.parse().map_err(|e| fail(format!("epoch: {e}")))?;
        let step = field("step")?.parse().map_err(|e| fail(format!("step: {e}")))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| fail(e.to_string()))?;
        let mut ck = Self {
            config,
            epoch,
            step,
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for (name, view) in st.tensors() {
            let s = view.shape();
            if s.len() != 4 {
                return Err(fail(format!("{name}: expected rank 4, got {s:?}")));
            }
            let shape = [s[0], s[1], s[2], s[3]];
            let values = decode_floats::<T>(view.dtype(), view.data()).map_err(fail)?;
            let t = Tensor::from_vec(shape, values)?;
            let (map, key) = if let Some(k) = name.strip_prefix(PARAM_PREFIX) {
                (&mut ck.params, k)
            } else if let Some(k) = name.strip_prefix(ADAM_M_PREFIX) {
                (&mut ck.adam_m, k)
            } else if let Some(k) = name.strip_prefix(ADAM_V_PREFIX) {
                (&mut ck.adam_v, k)
            } else {
                return Err(fail(format!("unexpected tensor {name}")));
            };
            map.insert(key.to_string(), t);
        }
        Ok(ck)
    }

    /// Copies every stored parameter into `store`, which must hold exactly the same names.
    pub fn restore_params(&self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if self.params.len() != store.len() {
            return Err(fail(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| fail(format!("unknown parameter {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

pub fn snapshot<T: Float>(store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
    store
        .entries()
        .map(|(_, e)| (e.name.clone(), (*e.value).clone()))
        .collect()
}
