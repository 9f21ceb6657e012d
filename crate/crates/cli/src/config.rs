use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpnet::trainer::{config_hash, TrainConfig};
use tpnet::{BackboneConfig, Error, ModelConfig, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV with `image_path,mos[,group_id,method,scale,split]`.
    pub manifest: Option<PathBuf>,
    /// Seed for the 60/20/20 split; defaults to the run seed.
    pub split_seed: Option<u64>,
    /// Keep every group (source image) inside one split.
    pub group_aware: bool,
}

/// One JSON document configuring a run.
///
/// Precedence, lowest first: built-in defaults, the config file, then
/// command-line flags. `seed` overrides `train.seed` when present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub seed: Option<u64>,
    /// Excluded from the snapshot and its hash.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Named-tensor archive with published backbone weights.
    pub backbone_weights: Option<PathBuf>,
}

impl RunConfig {
    /// Read a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.data.manifest);
        rebase(&mut cfg.out);
        rebase(&mut cfg.backbone_weights);
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }

    /// Apply flag overrides and settle the seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<&Path>, manifest: Option<&Path>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(o) = out {
            self.out = Some(o.to_path_buf());
        }
        if let Some(m) = manifest {
            self.data.manifest = Some(m.to_path_buf());
        }
        let seed = self.seed.unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.model.validate()?;
        self.backbone.validate()?;
        self.train.validate(&self.model)?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory (pass --out or set \"out\")".into()))
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[derive(Debug, Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    config_hash: String,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
}

/// Write the resolved configuration and its hash into `dir`.
pub fn write_snapshot(dir: &Path, command: &str, cfg: &RunConfig, inputs: &BTreeMap<String, String>) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let hash = cfg.hash()?;
    let snap = Snapshot {
        command,
        config_hash: hash.clone(),
        config: cfg,
        inputs,
    };
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&snap)?)?;
    Ok(hash)
}
