//! Checkpoint files.
//!
//! ```text
//! magic    4 bytes  "TPCK"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes (CheckpointHeader)
//! archive  tensor archive with `param/<name>`, `adam.m/<name>`, `adam.v/<name>`
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TpNet};
use crate::params::ParamStore;
use crate::trainer::{Adam, EpochRecord, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// SHA-256 of the JSON encoding of a configuration value.
pub fn config_hash<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub epoch: usize,
    pub adam_step: u64,
    pub seed: u64,
    pub best_val_plcc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    pub params_checksum: String,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub moment1: ParamStore<f32>,
    pub moment2: ParamStore<f32>,
}

fn prefixed(out: &mut ParamStore<f32>, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
    for (name, p) in store.iter() {
        out.insert(format!("{prefix}{name}"), p.tensor.as_ref().clone(), p.role)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &TpNet<f32>, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    let header = CheckpointHeader {
        epoch: state.epoch,
        adam_step: state.adam.step,
        seed: cfg.seed,
        best_val_plcc: state.best_val_plcc,
        best_epoch: state.best_epoch,
        model: net.model.clone(),
        backbone: net.backbone.clone(),
        train: cfg.clone(),
        config_hash: config_hash(&(&net.model, &net.backbone, cfg))?,
        params_checksum: net.params.checksum(),
        history: state.history.clone(),
    };
    let mut tensors = ParamStore::new();
    prefixed(&mut tensors, PARAM, &net.params)?;
    prefixed(&mut tensors, MOMENT1, &state.adam.m)?;
    prefixed(&mut tensors, MOMENT2, &state.adam.v)?;

    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&archive::encode(&tensors));
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let what = path.display().to_string();
    if bytes.len() < 16 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{what} is not a checkpoint")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(what));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if body.len() < 16 + hlen {
        return Err(Error::Format(format!("{what}: header overruns file")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[16..16 + hlen])?;
    let tensors = archive::decode(&body[16 + hlen..], &what)?;

    let (mut params, mut moment1, mut moment2) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    for (name, p) in tensors.iter() {
        let (target, rest) = if let Some(rest) = name.strip_prefix(PARAM) {
            (&mut params, rest)
        } else if let Some(rest) = name.strip_prefix(MOMENT1) {
            (&mut moment1, rest)
        } else if let Some(rest) = name.strip_prefix(MOMENT2) {
            (&mut moment2, rest)
        } else {
            return Err(Error::Format(format!("{what}: unexpected tensor {name}")));
        };
        target.insert(rest, p.tensor.as_ref().clone(), p.role)?;
    }
    if params.checksum() != header.params_checksum {
        return Err(Error::Checksum(format!("{what} (parameter digest)")));
    }
    Ok(Checkpoint {
        header,
        params,
        moment1,
        moment2,
    })
}

impl Checkpoint {
    /// Rebuild the network under `model`/`backbone`, which must match the stored tensors.
    pub fn network(&self, model: &ModelConfig, backbone: &BackboneConfig) -> Result<TpNet<f32>> {
        TpNet::new(model.clone(), backbone.clone(), self.params.clone())
    }

    /// Network with the configuration recorded in the checkpoint.
    pub fn stored_network(&self) -> Result<TpNet<f32>> {
        self.network(&self.header.model, &self.header.backbone)
    }

    /// Optimizer and bookkeeping state, with hyperparameters from `cfg`.
    pub fn train_state(&self, cfg: &TrainConfig) -> Result<TrainState> {
        for name in self.moment1.names().chain(self.moment2.names()) {
            if !self.params.contains(name) {
                return Err(Error::Integrity {
                    missing: Vec::new(),
                    unexpected: vec![format!("optimizer moment {name}")],
                    mismatched: Vec::new(),
                });
            }
        }
        let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
        adam.step = self.header.adam_step;
        adam.m = self.moment1.clone();
        adam.v = self.moment2.clone();
        Ok(TrainState {
            epoch: self.header.epoch,
            adam,
            best_val_plcc: self.header.best_val_plcc,
            best_epoch: self.header.best_epoch,
            history: self.header.history.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> TpNet<f32> {
        let model = ModelConfig {
            base_channels: 4,
            regressor_channels: vec![8, 4, 1],
            use_perceptual: false,
            ..Default::default()
        };
        TpNet::init(model, BackboneConfig::default(), 9).unwrap()
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let n = net();
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(&cfg);
        state.epoch = 3;
        state.best_val_plcc = Some(0.123456789012345);
        state.adam.step = 17;
        state
            .adam
            .m
            .insert(
                "stem.bias",
                crate::tensor::Tensor::full(&[4], 0.25),
                crate::params::Role::Bias,
            )
            .ok();
        save_checkpoint(&path, &n, &cfg, &state).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, n.params);
        assert_eq!(ck.header.train, cfg);
        let restored = ck.train_state(&cfg);
        // the stray moment has no matching parameter
        assert!(matches!(restored, Err(Error::Integrity { .. })));

        let mut bytes = fs::read(&path).unwrap();
        let k = bytes.len() / 2;
        bytes[k] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    }

    #[test]
    fn mismatched_model_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let n = net();
        let cfg = TrainConfig::default();
        save_checkpoint(&path, &n, &cfg, &TrainState::new(&cfg)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let wider = ModelConfig {
            base_channels: 8,
            ..n.model.clone()
        };
        assert!(matches!(
            ck.network(&wider, &n.backbone),
            Err(Error::Integrity { ref mismatched, .. }) if !mismatched.is_empty()
        ));
        assert!(ck.stored_network().is_ok());
    }
}
