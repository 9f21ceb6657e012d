//! Optimization of the network against normalized MOS labels.

mod adam;
mod checkpoint;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::backbone::{self, vgg_features};
use crate::data::{self, center_crop_to_multiple, sample_crop, Manifest};
use crate::error::{Error, Result};
use crate::graph::{Eval, Ops, Tape};
use crate::metrics;
use crate::model::{head, ModelConfig, TpNet, SIDE_MULTIPLE};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{FeatureMap, Tensor};

/// Parameter-name prefix shared by every backbone tensor.
pub const BACKBONE_PREFIX: &str = "backbone.";

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub crop_size: u32,
    pub freeze_backbone: bool,
    /// Reuse backbone features of crops that cover the whole image.
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            seed: 0,
            crop_size: 224,
            freeze_backbone: true,
            cache_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let crop = self.crop_size as usize;
        if !crop.is_multiple_of(SIDE_MULTIPLE) || crop < model.min_input_side() {
            return bad(format!(
                "crop_size {crop} must be a multiple of {SIDE_MULTIPLE} and at least {}",
                model.min_input_side()
            ));
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn l1_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(predicted.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_plcc: Option<f64>,
    pub val_srcc: Option<f64>,
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam<f32>,
    pub best_val_plcc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            adam: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon),
            best_val_plcc: None,
            best_epoch: None,
            history: Vec::new(),
        }
    }
}

/// Preprocessed training batch; `taps` carries precomputed backbone features.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: FeatureMap<f32>,
    pub taps: Option<Vec<FeatureMap<f32>>>,
    pub targets: Vec<f32>,
}

/// One optimizer update on a batch; returns the batch loss.
///
/// With `freeze_backbone` the backbone is a constant and its tensors are
/// never written. A non-finite loss aborts and names the offending samples.
pub fn train_step(net: &mut TpNet<f32>, state: &mut TrainState, batch: &Batch, freeze_backbone: bool) -> Result<f32> {
    let (n, _, h, w) = batch.images.nchw()?;
    if n != batch.targets.len() || n != batch.ids.len() {
        return Err(Error::Shape(format!(
            "batch of {n} images has {} targets and {} ids",
            batch.targets.len(),
            batch.ids.len()
        )));
    }
    net.model.check_input_size(h, w)?;
    let mut tape = Tape::new();
    if freeze_backbone {
        tape = tape.freeze_prefix(BACKBONE_PREFIX);
    }
    let img = tape.input(batch.images.clone());
    let taps = match &batch.taps {
        Some(t) => t.iter().map(|t| tape.input(t.clone())).collect(),
        None if net.model.use_perceptual => backbone::vgg_taps(&mut tape, &img, &net.params, &net.backbone)?,
        None => Vec::new(),
    };
    let score = head(&mut tape, &img, &taps, &net.params, &net.model)?;
    let loss = tape.l1_loss(score, &batch.targets)?;
    let value = tape.value(&loss).data()[0];
    if !value.is_finite() {
        let preds = tape.value(&score).data();
        let mut bad: Vec<&str> = batch
            .ids
            .iter()
            .zip(preds)
            .filter(|(_, p)| !p.is_finite())
            .map(|(id, _)| id.as_str())
            .collect();
        if bad.is_empty() {
            bad = batch.ids.iter().map(String::as_str).collect();
        }
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on samples [{}]",
            bad.join(", ")
        )));
    }
    let grads = tape.backward(loss)?;
    drop(tape);
    let names: Vec<String> = grads.param_names().map(str::to_string).collect();
    state.adam.update(
        &mut net.params,
        names
            .iter()
            .map(|n| (n.as_str(), grads.param(n).expect("listed gradient"))),
    )?;
    Ok(value)
}

/// A decoded image with its normalized label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub target: f32,
}

pub fn load_samples(m: &Manifest) -> Result<Vec<Sample>> {
    m.records
        .iter()
        .map(|r| {
            Ok(Sample {
                id: r.id.clone(),
                image: data::load_rgb(&r.image_path)?,
                target: r.mos_normalized as f32,
            })
        })
        .collect()
}

/// Image prepared for whole-image scoring: central crop to a multiple of 32.
pub fn prepare_eval_image(image: &RgbImage, net: &TpNet<f32>) -> Result<FeatureMap<f32>> {
    let cropped = center_crop_to_multiple(image, SIDE_MULTIPLE as u32);
    net.model
        .check_input_size(cropped.height() as usize, cropped.width() as usize)?;
    Ok(backbone::normalize_rgb(&cropped, &net.backbone))
}

fn head_score(net: &TpNet<f32>, image: &FeatureMap<f32>, taps: &[FeatureMap<f32>]) -> Result<Vec<f32>> {
    let mut ops = Eval::new();
    let img = ops.input(image.clone());
    let taps: Vec<_> = taps.iter().map(|t| ops.input(t.clone())).collect();
    let out = head(&mut ops, &img, &taps, &net.params, &net.model)?;
    out.ensure_finite("quality score")?;
    Ok(out.data().to_vec())
}

struct EvalItem {
    image: FeatureMap<f32>,
    taps: Option<Vec<FeatureMap<f32>>>,
    target: f64,
}

/// Epoch loop over in-memory samples with feature caching and model selection.
pub struct Trainer {
    pub net: TpNet<f32>,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub best: Option<ParamStore<f32>>,
    train: Vec<Sample>,
    val: Vec<EvalItem>,
    tap_cache: HashMap<usize, Vec<FeatureMap<f32>>>,
}

impl Trainer {
    pub fn new(
        net: TpNet<f32>,
        cfg: TrainConfig,
        state: TrainState,
        train: Vec<Sample>,
        val: Vec<Sample>,
    ) -> Result<Self> {
        cfg.validate(&net.model)?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let crop = cfg.crop_size;
        for s in &train {
            let (w, h) = s.image.dimensions();
            if w < data::MIN_CROP_SOURCE_SIDE || h < data::MIN_CROP_SOURCE_SIDE {
                return Err(Error::Data(format!(
                    "{}: {w}x{h} is below the {} pixel training minimum",
                    s.id,
                    data::MIN_CROP_SOURCE_SIDE
                )));
            }
        }
        let mut trainer = Trainer {
            net,
            cfg,
            state,
            best: None,
            train,
            val: Vec::new(),
            tap_cache: HashMap::new(),
        };
        trainer.val = val
            .iter()
            .map(|s| {
                let image = prepare_eval_image(&s.image, &trainer.net)?;
                let taps = if trainer.frozen_taps() {
                    Some(trainer.net.perceptual(&image)?)
                } else {
                    None
                };
                Ok(EvalItem {
                    image,
                    taps,
                    target: s.target as f64,
                })
            })
            .collect::<Result<_>>()?;
        log::debug!(
            "trainer ready: {} train, {} val, crop {crop}, frozen backbone {}",
            trainer.train.len(),
            trainer.val.len(),
            trainer.cfg.freeze_backbone
        );
        Ok(trainer)
    }

    fn frozen_taps(&self) -> bool {
        self.cfg.freeze_backbone && self.net.model.use_perceptual
    }

    fn crop_seed(&self, epoch: usize, index: usize) -> u64 {
        seed::derive(self.cfg.seed, "crop", ((epoch as u64) << 32) | index as u64)
    }

    /// Training order of one epoch (0-based).
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seed::substream(self.cfg.seed, "order", epoch as u64));
        order
    }

    fn batch(&mut self, epoch: usize, indices: &[usize]) -> Result<Batch> {
        let crop = self.cfg.crop_size;
        let mut images = Vec::with_capacity(indices.len());
        let mut taps: Vec<Vec<FeatureMap<f32>>> = Vec::new();
        for &i in indices {
            let sample = &self.train[i];
            let full_frame = sample.image.dimensions() == (crop, crop);
            let cropped = sample_crop(&sample.image, crop, self.crop_seed(epoch, i))?;
            let x = backbone::normalize_rgb(&cropped, &self.net.backbone);
            if self.frozen_taps() {
                let t = match self.tap_cache.get(&i) {
                    Some(t) => t.clone(),
                    None => {
                        let t = vgg_features(&x, &self.net.params, &self.net.backbone)?;
                        if self.cfg.cache_features && full_frame {
                            self.tap_cache.insert(i, t.clone());
                        }
                        t
                    }
                };
                taps.push(t);
            }
            images.push(x);
        }
        let stacked_taps = if taps.is_empty() {
            None
        } else {
            let levels = taps[0].len();
            Some(
                (0..levels)
                    .map(|l| Tensor::stack_batch(&taps.iter().map(|t| &t[l]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        Ok(Batch {
            ids: indices.iter().map(|&i| self.train[i].id.clone()).collect(),
            images: Tensor::stack_batch(&images.iter().collect::<Vec<_>>())?,
            taps: stacked_taps,
            targets: indices.iter().map(|&i| self.train[i].target).collect(),
        })
    }

    /// One update on the given training indices.
    pub fn step_on(&mut self, epoch: usize, indices: &[usize]) -> Result<f32> {
        let batch = self.batch(epoch, indices)?;
        train_step(&mut self.net, &mut self.state, &batch, self.cfg.freeze_backbone)
    }

    /// Validation predictions in split order.
    pub fn predict_val(&self) -> Result<Vec<f64>> {
        self.val
            .iter()
            .map(|item| {
                let s = match &item.taps {
                    Some(t) => head_score(&self.net, &item.image, t)?,
                    None => self.net.score(&item.image)?,
                };
                Ok(s[0] as f64)
            })
            .collect()
    }

    fn validate_epoch(&self) -> Result<(Option<f64>, Option<f64>)> {
        if self.val.len() < 2 {
            return Ok((None, None));
        }
        let preds = self.predict_val()?;
        let targets: Vec<f64> = self.val.iter().map(|v| v.target).collect();
        let p = metrics::plcc(&preds, &targets);
        let s = metrics::srcc(&preds, &targets);
        if let Err(e) = &p {
            log::warn!("validation correlation undefined: {e}");
        }
        Ok((p.ok(), s.ok()))
    }

    /// Train one epoch, validate, and update model selection.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let order = self.epoch_order(epoch);
        let (mut loss_sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let loss = self.step_on(epoch, chunk)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            count += chunk.len();
        }
        let (val_plcc, val_srcc) = self.validate_epoch()?;
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch: self.state.epoch,
            train_loss: loss_sum / count as f64,
            val_plcc,
            val_srcc,
        };
        let improved = match (val_plcc, self.state.best_val_plcc) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            (None, _) => self.best.is_none(),
        };
        if improved {
            if val_plcc.is_some() {
                self.state.best_val_plcc = val_plcc;
            }
            self.state.best_epoch = Some(self.state.epoch);
            self.best = Some(self.net.params.clone());
        }
        log::info!(
            "epoch {} loss {:.5} val plcc {} srcc {}",
            record.epoch,
            record.train_loss,
            fmt_opt(val_plcc),
            fmt_opt(val_srcc)
        );
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Run the remaining epochs. With `out_dir`, the history CSV and the
    /// last and best checkpoints are rewritten after every epoch.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<FitOutcome> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        while self.state.epoch < self.cfg.epochs {
            let improved_before = self.state.best_epoch;
            self.run_epoch()?;
            if let Some(dir) = out_dir {
                write_history(&dir.join(HISTORY_FILE), &self.state.history)?;
                save_checkpoint(&dir.join(LAST_CHECKPOINT), &self.net, &self.cfg, &self.state)?;
                if self.state.best_epoch != improved_before {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &self.net, &self.cfg, &self.state)?;
                }
            }
        }
        Ok(FitOutcome {
            history: self.state.history.clone(),
            best: self.best.clone().unwrap_or_else(|| self.net.params.clone()),
            best_epoch: self.state.best_epoch,
            best_val_plcc: self.state.best_val_plcc,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best: ParamStore<f32>,
    pub best_epoch: Option<usize>,
    pub best_val_plcc: Option<f64>,
}

/// Train from scratch on two manifests.
pub fn fit(
    net: TpNet<f32>,
    train: &Manifest,
    val: &Manifest,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fit needs non-empty training and validation splits".into()));
    }
    let mut trainer = Trainer::new(
        net,
        cfg.clone(),
        TrainState::new(cfg),
        load_samples(train)?,
        load_samples(val)?,
    )?;
    trainer.fit(out_dir)
}

/// Write `epoch,train_loss,val_plcc,val_srcc`; undefined correlations are empty.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_plcc", "val_srcc"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.train_loss),
            opt(r.val_plcc),
            opt(r.val_srcc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::synth::pattern_image;

    fn tiny_net(perceptual: bool) -> TpNet<f32> {
        let model = ModelConfig {
            base_channels: 4,
            regressor_channels: vec![8, 4, 1],
            use_perceptual: perceptual,
            ..Default::default()
        };
        TpNet::init(model, BackboneConfig::default(), 3).unwrap()
    }

    fn samples(n: usize, side: u32) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                image: pattern_image(side, side, i as u64),
                target: i as f32 / n as f32,
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 2,
            crop_size: 128,
            ..Default::default()
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((l1_loss(&[1.0, 2.0], &[0.5, 1.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((l1_loss(&[0.2, 0.8], &[0.0, 1.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(l1_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let m = ModelConfig::default();
        assert!(TrainConfig::default().validate(&m).is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                crop_size: 200,
                ..Default::default()
            },
            TrainConfig {
                crop_size: 96,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(&m), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn frozen_backbone_is_untouched_and_head_moves() {
        let net = tiny_net(true);
        let before = net.params.clone();
        let mut t = Trainer::new(net, cfg(), TrainState::new(&cfg()), samples(2, 128), Vec::new()).unwrap();
        t.step_on(0, &[0, 1]).unwrap();
        for (name, p) in before.iter() {
            let now = t.net.params.tensor(name).unwrap();
            if name.starts_with(BACKBONE_PREFIX) {
                assert_eq!(now, p.tensor.as_ref(), "{name} changed");
            }
        }
        assert_ne!(
            t.net.params.tensor("regressor.conv3.weight").unwrap(),
            before.tensor("regressor.conv3.weight").unwrap()
        );
        assert!(t.state.adam.m.names().all(|n| !n.starts_with(BACKBONE_PREFIX)));
    }

    #[test]
    fn non_finite_loss_names_samples() {
        let mut net = tiny_net(false);
        net.params.tensor_mut("regressor.conv3.bias").unwrap().data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(net, cfg(), TrainState::new(&cfg()), samples(2, 128), Vec::new()).unwrap();
        let err = t.step_on(0, &[1, 0]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("s1"), "{err}");
    }

    #[test]
    fn fit_history_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(
            tiny_net(false),
            cfg(),
            TrainState::new(&cfg()),
            samples(4, 128),
            samples(3, 160),
        )
        .unwrap();
        let out = t.fit(Some(dir.path())).unwrap();
        assert_eq!(out.history.len(), 2);
        let csv = fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,train_loss,val_plcc,val_srcc"));
        assert!(dir.path().join(BEST_CHECKPOINT).is_file());
        assert!(dir.path().join(LAST_CHECKPOINT).is_file());
    }
}
