//! Checkpoints: one safetensors archive holding every parameter and buffer,
//! with the architecture and training state as string metadata.
//!
//! Metadata keys: `format` (= [`FORMAT`]), `kind`, `dtype`, `model_config`
//! (JSON), `train_state` (JSON).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::baselines::build_model;
use crate::model::{FusionModel, ModelConfig, ModelKind};
use crate::{Error, Result};

pub const FORMAT: &str = "fvlab-checkpoint/1";

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub run: usize,
    pub seed: u64,
    pub dataset: String,
    pub skipped_batches: u64,
    pub kl_ema: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub dtype: DType,
    pub config: ModelConfig,
    pub state: TrainState,
}

fn st_dtype(d: DType) -> Result<StDtype> {
    match d {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn dtype_name(d: DType) -> &'static str {
    if d == DType::F64 {
        "f64"
    } else {
        "f32"
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
    })
}

pub fn save(model: &dyn FusionModel, state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let store = model.store();
    let dtype = store.dtype();
    let named = store.named_tensors();
    let bytes: BTreeMap<String, (Vec<usize>, Vec<u8>)> =
        named.iter().map(|(k, t)| Ok((k.clone(), (t.dims().to_vec(), tensor_bytes(t)?)))).collect::<Result<_>>()?;
    let views = bytes
        .iter()
        .map(|(k, (shape, data))| Ok((k.as_str(), TensorView::new(st_dtype(dtype)?, shape.clone(), data)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("kind".to_string(), model.kind().name().to_string()),
        ("dtype".to_string(), dtype_name(dtype).to_string()),
        ("model_config".to_string(), serde_json::to_string(model.model_config())?),
        ("train_state".to_string(), serde_json::to_string(state)?),
    ]);
    safetensors::serialize_to_file(views, Some(meta), path)?;
    Ok(())
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes)?;
    let meta = header.metadata().as_ref().ok_or_else(|| Error::Checkpoint("no metadata".into()))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("metadata key {k} missing")));
    if get("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", get("format")?)));
    }
    let dtype = match get("dtype")?.as_str() {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    };
    Ok(CheckpointMeta {
        kind: get("kind")?.parse()?,
        dtype,
        config: serde_json::from_str(get("model_config")?)?,
        state: serde_json::from_str(get("train_state")?)?,
    })
}

fn view_to_tensor(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    Ok(match view.dtype() {
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    })
}

/// Rebuilds the model recorded in the checkpoint and loads its tensors.
pub fn load(path: &Path, device: &Device) -> Result<(Box<dyn FusionModel>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = read_meta(&bytes)?;
    let st = SafeTensors::deserialize(&bytes)?;
    let tensors = st.tensors().iter().map(|(k, v)| Ok((k.clone(), view_to_tensor(v, device)?))).collect::<Result<BTreeMap<_, _>>>()?;
    let model = build_model(meta.kind, meta.config.clone(), device, meta.dtype, 0)?;
    model.store().load_named(&tensors)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        for dtype in [DType::F32, DType::F64] {
            let m = build_model(ModelKind::FusionVae, ModelConfig::toy(2), &Device::Cpu, dtype, 3).unwrap();
            m.store().randomize(0.7, 4).unwrap();
            let state = TrainState { step: 12, epoch: 1, run: 2, seed: 9, dataset: "fmnist".into(), skipped_batches: 0, kl_ema: vec![0.5, 0.25] };
            save(m.as_ref(), &state, &path).unwrap();
            let (back, meta) = load(&path, &Device::Cpu).unwrap();
            assert_eq!(meta.state, state);
            assert_eq!(meta.kind, ModelKind::FusionVae);
            assert_eq!(meta.dtype, dtype);
            assert_eq!(&meta.config, m.model_config());
            assert_eq!(back.store().flat_values().unwrap(), m.store().flat_values().unwrap());
        }
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path, &Device::Cpu).is_err());
    }
}
