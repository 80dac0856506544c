//! Run configuration, layered config files and per-stage manifests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::classifier::{default_grid, ClassifierConfig, GridPoint, ProtocolConfig};
use crate::cpc::ModelConfig;
use crate::datapipe::{SynthConfig, WindowConfig};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, EMBEDDING_VERSION};
use crate::pretrainer::TrainConfig;
use crate::sax::{KMeansConfig, SaxConfig};

/// Every module configuration plus the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub sax: SaxConfig,
    pub sax_repeat: KMeansConfig,
    pub classifier: ClassifierConfig,
    pub protocol: ProtocolConfig,
    pub grid: Vec<GridPoint>,
    pub lm: LmConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale settings: narrow encoder, short schedules, tiny LM.
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            model: ModelConfig::desk(),
            pretrain: TrainConfig {
                lr: 1e-3,
                batch: 32,
                max_epochs: 10,
                ..TrainConfig::default()
            },
            sax: SaxConfig::default(),
            sax_repeat: KMeansConfig::default(),
            classifier: ClassifierConfig::desk(),
            protocol: ProtocolConfig::default(),
            grid: default_grid(),
            lm: LmConfig::tiny(),
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with a TOML or JSON file (by extension; TOML otherwise).
    /// Tables merge key by key; arrays and scalars replace. Unknown keys are errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::missing(path, "config file (TOML or JSON)"))?;
        let overlay: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            let t: toml::Table =
                toml::from_str(&text).map_err(|e| Error::format("config", e.to_string()))?;
            serde_json::to_value(t)?
        };
        Self::default().overlay(&overlay)
    }

    pub fn overlay(&self, overlay: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overlay, "")?;
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the run seed into every module and the window geometry into the
    /// model, then validates.
    pub fn resolved(mut self) -> Result<Self> {
        let s = self.seed;
        self.synth.seed = s;
        self.pretrain.seed = s;
        self.sax_repeat.seed = s;
        self.classifier.seed = s;
        self.protocol.seed = s;
        self.lm.seed = s;
        self.model.window_len = self.window.len;
        self.model.input_rate_hz = self.window.rate_hz;
        self.window.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.sax.validate()?;
        self.classifier.validate()?;
        self.lm.validate()?;
        if self.grid.is_empty() {
            return Err(Error::Config("empty hyperparameter grid".into()));
        }
        Ok(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn merge(base: &mut Value, overlay: &Value, at: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digest of a file, or of every file under a directory (sorted relative
/// paths and contents).
pub fn path_sha256(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path)?));
    }
    if !path.is_dir() {
        return Err(Error::missing(path, "artifact listed in a manifest"));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in &files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(path.join(rel))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub motif: String,
    pub manifest: u32,
    pub checkpoint: u32,
    pub embeddings: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            motif: env!("CARGO_PKG_VERSION").to_string(),
            manifest: MANIFEST_VERSION,
            checkpoint: checkpoint::VERSION,
            embeddings: EMBEDDING_VERSION,
        }
    }
}

/// A file or directory with its digest. Outputs carrying wall-clock timings
/// have no digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: Option<String>,
}

/// Provenance record written next to every stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub versions: Versions,
    pub config: PipelineConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &PipelineConfig) -> Self {
        Self {
            stage: stage.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            versions: Versions::default(),
            config: cfg.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(artifact(path, true)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(artifact(path, true)?);
        Ok(())
    }

    pub fn timed_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(artifact(path, false)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::missing(path, "stage manifest"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.versions.manifest != MANIFEST_VERSION {
            return Err(Error::SchemaVersion {
                what: "manifest",
                found: m.versions.manifest,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

fn artifact(path: &Path, digest: bool) -> Result<Artifact> {
    Ok(Artifact {
        path: path.to_string_lossy().into_owned(),
        sha256: if digest {
            Some(path_sha256(path)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_merges_and_rejects_unknown_keys() {
        let base = PipelineConfig::default();
        let over = serde_json::json!({"seed": 9, "pretrain": {"lr": 0.5}, "grid": [{"lr": 0.1, "l2": 0.0}]});
        let cfg = base.overlay(&over).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pretrain.lr, 0.5);
        assert_eq!(cfg.pretrain.batch, base.pretrain.batch);
        assert_eq!(cfg.grid.len(), 1);
        let bad = serde_json::json!({"pretrain": {"learning_rate": 0.5}});
        assert!(
            matches!(base.overlay(&bad), Err(Error::Config(m)) if m.contains("pretrain.learning_rate"))
        );
    }

    #[test]
    fn toml_and_json_files_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        fs::write(&t, "seed = 3\n[classifier]\nepochs = 4\n").unwrap();
        fs::write(&j, r#"{"seed": 3, "classifier": {"epochs": 4}}"#).unwrap();
        let a = PipelineConfig::load(&t).unwrap();
        assert_eq!(a, PipelineConfig::load(&j).unwrap());
        assert_eq!(a.classifier.epochs, 4);
        let r = a.resolved().unwrap();
        assert_eq!(r.lm.seed, 3);
        assert_eq!(r.hash(), r.clone().hash());
        assert_ne!(r.hash(), PipelineConfig::default().hash());
    }
}
