//! On-disk checkpoints: a JSON manifest plus one flat little-endian f64
//! file per tensor, all inside one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::DTensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::router::RouterParams;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "elastic-attention-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    /// Optimizer that produced the newest weights.
    pub optimizer: String,
    pub step: usize,
    pub has_router: bool,
    pub lambdas: BTreeMap<String, LambdaEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// A frozen backbone, optionally with a trained router.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub backbone: Backbone,
    pub router: Option<RouterParams>,
    pub optimizer: String,
    pub step: usize,
    pub lambdas: BTreeMap<String, LambdaEntry>,
}

fn router_names(router: &RouterParams) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..router.layers.len() {
        for part in ["task0", "task1", "route0", "route1", "route2"] {
            for p in ["w", "b"] {
                out.push(format!("router{l}.{part}.{p}"));
            }
        }
    }
    out
}

fn write_f64(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::checkpoint(path, e.to_string()))
}

fn read_f64(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    if bytes.len() != expect * 8 {
        return Err(Error::checkpoint(
            path,
            format!("expected {} bytes, found {}", expect * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn new(config: RunConfig, backbone: Backbone, optimizer: &str, step: usize) -> Self {
        Self {
            config,
            backbone,
            router: None,
            optimizer: optimizer.to_string(),
            step,
            lambdas: BTreeMap::new(),
        }
    }

    fn tensors(&self) -> Vec<(String, &DTensor)> {
        let mut out = self.backbone.named_tensors();
        if let Some(r) = &self.router {
            out.extend(router_names(r).into_iter().zip(r.tensors()));
        }
        out
    }

    /// Writes the directory, replacing any earlier checkpoint files there.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::checkpoint(dir, e.to_string()))?;
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            let file = format!("{name}.f64");
            write_f64(&dir.join(&file), t.data())?;
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            has_router: self.router.is_some(),
            lambdas: self.lambdas.clone(),
            tensors: entries,
        };
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        Ok(path)
    }

    /// Accepts the checkpoint directory or its manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::checkpoint(&manifest_path, e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::checkpoint(&manifest_path, e.to_string()))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::checkpoint(
                &manifest_path,
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        manifest
            .config
            .validate()
            .map_err(|e| Error::checkpoint(&manifest_path, e.to_string()))?;
        let cfg = &manifest.config;
        let mut backbone = Backbone::init(&cfg.model, 0);
        let mut router = manifest
            .has_router
            .then(|| RouterParams::init(0, cfg.model.layers, cfg.model.d_head, cfg.router_hidden()));

        let mut names: Vec<String> = backbone.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut slots: Vec<&mut DTensor> = backbone.tensors_mut();
        if let Some(r) = router.as_mut() {
            names.extend(router_names(r));
            slots.extend(r.tensors_mut());
        }
        if manifest.tensors.len() != names.len() {
            return Err(Error::checkpoint(
                &manifest_path,
                format!("expected {} tensors, manifest lists {}", names.len(), manifest.tensors.len()),
            ));
        }
        let by_name: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        for (name, slot) in names.iter().zip(slots) {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::checkpoint(&manifest_path, format!("missing tensor {name}")))?;
            if entry.shape != slot.shape() {
                return Err(Error::checkpoint(
                    &manifest_path,
                    format!("tensor {name} has shape {:?}, expected {:?}", entry.shape, slot.shape()),
                ));
            }
            if entry.file.contains(['/', '\\']) || entry.file.starts_with("..") {
                return Err(Error::checkpoint(&manifest_path, format!("tensor file {} escapes the directory", entry.file)));
            }
            let data = read_f64(&dir.join(&entry.file), slot.numel())?;
            *slot = DTensor::new(entry.shape.clone(), data).map_err(|e| Error::checkpoint(&manifest_path, e.to_string()))?;
        }
        Ok(Self {
            config: manifest.config,
            backbone,
            router,
            optimizer: manifest.optimizer,
            step: manifest.step,
            lambdas: manifest.lambdas,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ea-ckpt-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn small() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                layers: 1,
                heads: 2,
                d_head: 4,
                vocab: 64,
                seq_len: 64,
                mlp_hidden: 8,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small();
        let mut ck = Checkpoint::new(cfg.clone(), Backbone::init(&cfg.model, 3), "adamw", 7);
        ck.router = Some(RouterParams::init(4, 1, 4, 16));
        ck.lambdas.insert(
            "needle".into(),
            LambdaEntry {
                target: 0.7,
                lambda1: -0.1,
                lambda2: 0.2,
            },
        );
        let dir = tmp("rt");
        ck.save(&dir).unwrap();
        assert_eq!(Checkpoint::load(&dir).unwrap(), ck);
        assert_eq!(Checkpoint::load(&dir.join(MANIFEST)).unwrap(), ck);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_tensor_rejected() {
        let cfg = small();
        let ck = Checkpoint::new(cfg.clone(), Backbone::init(&cfg.model, 3), "adam", 1);
        let dir = tmp("trunc");
        ck.save(&dir).unwrap();
        fs::write(dir.join("unembed.f64"), [0u8; 12]).unwrap();
        assert!(matches!(Checkpoint::load(&dir), Err(Error::Checkpoint { .. })));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_directory_is_checkpoint_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ea-ckpt")).unwrap_err();
        assert_eq!(err.category().exit_code(), 4);
    }
}
