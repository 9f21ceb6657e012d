use crate::error::{Error, Result};
use crate::graph::{Eval, Ops};
use crate::kernels::ConvSpec;
use crate::model::blocks::conv;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Scalar};

/// Pooling regressor.
///
/// Adaptive max and average pooling to `p x p` are concatenated along
/// channels, then unpadded convolutions with kernels `p - 1`, 2 and 1
/// (ReLU between) reduce the map to one linear score per batch item,
/// returned as an `(n, 1, 1, 1)` map.
pub fn regressor<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    features: &O::Value,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<O::Value> {
    let (_, _, h, w) = ops.value(features).nchw()?;
    let p = cfg.regressor_pool_size;
    if h < p || w < p {
        return Err(Error::Shape(format!(
            "regressor needs at least {p}x{p} features, got {h}x{w}"
        )));
    }
    let mx = ops.adaptive_max_pool(features, p, p)?;
    let av = ops.adaptive_avg_pool(features, p, p)?;
    let pooled = ops.concat_channels(&[&mx, &av])?;
    let h = conv(ops, &pooled, params, "regressor.conv1", ConvSpec::padded(0))?;
    let h = ops.relu(&h);
    let h = conv(ops, &h, params, "regressor.conv2", ConvSpec::padded(0))?;
    let h = ops.relu(&h);
    let score = conv(ops, &h, params, "regressor.conv3", ConvSpec::padded(0))?;
    let dims = ops.value(&score).dims().to_vec();
    if dims[1..] != [1, 1, 1] {
        return Err(Error::Config(format!(
            "regressor produced {dims:?}; expected one scalar per batch item"
        )));
    }
    Ok(score)
}

/// Eager regressor returning one score per batch item.
pub fn regressor_forward<T: Scalar>(
    features: &FeatureMap<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<Vec<T>> {
    features.ensure_finite("regressor input")?;
    let mut ops = Eval::new();
    let f = ops.input(features.clone());
    let score = regressor(&mut ops, &f, params, cfg)?;
    Ok(score.data().to_vec())
}
