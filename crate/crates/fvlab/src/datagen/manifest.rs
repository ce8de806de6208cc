//! On-disk dataset layout: PNG trees plus a JSON manifest carrying per-sample
//! seeds and generation parameters.
//!
//! ```text
//! <out>/<split>/manifest.json
//! <out>/<split>/<id>/target.png
//! <out>/<split>/<id>/context_<k>.png
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetId, FusionGenerator, FusionSample, ImageTensor, SampleMeta, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub target_path: String,
    pub context_paths: Vec<String>,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetId,
    pub master_seed: u64,
    pub split: Split,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks beyond what serde enforces.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
            if s.context_paths.len() > super::K_MAX {
                return Err(Error::invalid(format!("sample {} has too many contexts", s.id)));
            }
            if s.target_path.is_empty() || s.context_paths.iter().any(|p| p.is_empty()) {
                return Err(Error::invalid(format!("sample {} has an empty path", s.id)));
            }
            if !s.params.is_object() {
                return Err(Error::invalid(format!("sample {} params must be an object", s.id)));
            }
        }
        Ok(())
    }
}

/// Materializes the first `limit` samples of a split under `out/<split>`.
pub fn write_split(gen: &FusionGenerator, out: &Path, limit: Option<usize>) -> Result<Manifest> {
    let split_name = match gen.split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    let dir = out.join(split_name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = limit.unwrap_or(gen.len()).min(gen.len());
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let s = gen.sample(index, 0)?;
        let id = format!("{index:06}");
        let target_path = format!("{id}/target.png");
        s.target.save_png(&dir.join(&target_path))?;
        let mut context_paths = Vec::new();
        for (k, c) in s.contexts.iter().enumerate() {
            let p = format!("{id}/context_{k}.png");
            c.save_png(&dir.join(&p))?;
            context_paths.push(p);
        }
        let params = serde_json::json!({
            "index": index,
            "transform": s.meta.transform,
            "contexts": s.meta.context_params,
        });
        samples.push(ManifestEntry { id, seed: s.meta.seed, target_path, context_paths, params });
    }
    let manifest = Manifest { dataset: gen.dataset, master_seed: gen.master_seed, split: gen.split, samples };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads every sample listed by `<dir>/manifest.json`.
pub fn load_split(dir: &Path) -> Result<(Manifest, Vec<FusionSample>)> {
    let manifest = Manifest::read(&dir.join("manifest.json"))?;
    manifest.validate()?;
    let channels = manifest.dataset.image_shape().0;
    let load = |p: &str| ImageTensor::load(&resolve(dir, p), channels);
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let target = load(&e.target_path)?;
            let contexts = e.context_paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let index = e.params.get("index").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            FusionSample::new(target, contexts, SampleMeta { seed: e.seed, index, dataset: Some(manifest.dataset), ..Default::default() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() { p.to_path_buf() } else { dir.join(p) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatagenConfig;

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatagenConfig::new(DatasetId::FusionMnist, 5);
        cfg.procedural_eval = 4;
        let gen = FusionGenerator::build(&cfg, Split::Eval).unwrap();
        let m = write_split(&gen, dir.path(), Some(3)).unwrap();
        assert_eq!(m.samples.len(), 3);
        let (m2, samples) = load_split(&dir.path().join("eval")).unwrap();
        assert_eq!(m, m2);
        assert_eq!(samples[1].target, gen.sample(1, 0).unwrap().target.quantized());
        assert_eq!(samples[1].contexts.len(), 3);
    }

    #[test]
    fn validation_catches_duplicates() {
        let e = ManifestEntry { id: "a".into(), seed: 0, target_path: "t.png".into(), context_paths: vec![], params: serde_json::json!({}) };
        let m = Manifest { dataset: DatasetId::FusionMnist, master_seed: 0, split: Split::Eval, samples: vec![e.clone(), e] };
        assert!(m.validate().is_err());
    }
}
