use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::{Eval, Ops};
use crate::model::{init_params, regressor, textural_branch, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Scalar};

/// Textural branch followed by the regressor; `(n, 1, 1, 1)` scores.
pub fn head<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    image: &O::Value,
    taps: &[O::Value],
    params: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<O::Value> {
    let features = textural_branch(ops, image, taps, params, cfg)?;
    regressor(ops, &features, params, cfg)
}

/// Score a preprocessed `(n, 3, H, W)` batch; one score per item.
pub fn tpnet_forward<T: Scalar>(
    image: &FeatureMap<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    backbone: &BackboneConfig,
) -> Result<Vec<T>> {
    run(&mut Eval::new(), image, params, cfg, backbone)
}

pub(crate) fn run<T: Scalar>(
    ops: &mut Eval<T>,
    image: &FeatureMap<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    backbone: &BackboneConfig,
) -> Result<Vec<T>> {
    let (_, c, h, w) = image.nchw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
    }
    cfg.check_input_size(h, w)?;
    image.ensure_finite("image")?;
    let img = ops.input(image.clone());
    let taps = if cfg.use_perceptual {
        backbone::vgg_taps(ops, &img, params, backbone)?
    } else {
        Vec::new()
    };
    let score = head(ops, &img, &taps, params, cfg)?;
    score.ensure_finite("quality score")?;
    Ok(score.data().to_vec())
}

/// A configured network with its weights.
#[derive(Clone, Debug)]
pub struct TpNet<T: Scalar = f32> {
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TpNet<T> {
    /// Validates both configs and that `params` holds exactly the architecture's tensors.
    pub fn new(model: ModelConfig, backbone: BackboneConfig, params: ParamStore<T>) -> Result<Self> {
        model.validate()?;
        backbone.validate()?;
        params.check_against(&model.param_specs(&backbone))?;
        Ok(TpNet {
            model,
            backbone,
            params,
        })
    }

    pub fn init(model: ModelConfig, backbone: BackboneConfig, seed: u64) -> Result<Self> {
        let params = init_params(&model, &backbone, seed)?;
        Ok(TpNet {
            model,
            backbone,
            params,
        })
    }

    pub fn score(&self, image: &FeatureMap<T>) -> Result<Vec<T>> {
        tpnet_forward(image, &self.params, &self.model, &self.backbone)
    }

    /// Backbone taps for an image (empty when the perceptual stream is off).
    pub fn perceptual(&self, image: &FeatureMap<T>) -> Result<Vec<FeatureMap<T>>> {
        if !self.model.use_perceptual {
            return Ok(Vec::new());
        }
        backbone::vgg_features(image, &self.params, &self.backbone)
    }
}
