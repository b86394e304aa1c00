use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shelfmatch_core::embedding::EmbeddingBackend;
use shelfmatch_core::pipeline::PipelineConfig;
use shelfmatch_core::segmentation::SegmenterConfig;
use shelfmatch_core::{Error, Result};

/// Everything a command needs: pipeline settings plus file locations.
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub pipeline: PipelineConfig,
    pub paths: RunPaths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub manifest: Option<PathBuf>,
    /// Precomputed gallery embeddings.
    pub store: Option<PathBuf>,
    /// Prepared gallery features written by `ingest`.
    pub feature_cache: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfigFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.manifest, &mut p.store, &mut p.feature_cache, &mut p.queries, &mut p.report] {
            if let Some(x) = slot {
                resolve(base, x);
            }
        }
        if let SegmenterConfig::Threshold { plate, .. } = &mut self.pipeline.segmenter {
            resolve(base, plate);
        }
        if let EmbeddingBackend::Store { path: Some(x) } = &mut self.pipeline.embedder {
            resolve(base, x);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}
