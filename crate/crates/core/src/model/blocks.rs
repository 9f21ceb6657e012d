use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Eval, Ops};
use crate::kernels::ConvSpec;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Scalar};

fn channels<T: Scalar, O: Ops<T>>(ops: &O, x: &O::Value) -> Result<usize> {
    Ok(ops.value(x).nchw()?.1)
}

pub(crate) fn conv<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    params: &ParamStore<T>,
    prefix: &str,
    spec: ConvSpec,
) -> Result<O::Value> {
    let w = ops.param(params, &format!("{prefix}.weight"))?;
    let b = ops.param(params, &format!("{prefix}.bias"))?;
    ops.conv2d(x, &w, Some(&b), spec)
}

/// Spatial attention gate: `x * sigmoid(gconv2(relu(gconv1(x))))`.
///
/// Both grouped 3x3 convolutions use `c / group_divisor` groups; the first
/// squeezes to `c / group_divisor` channels and the second restores `c`.
/// The sigmoid map is reported to [`Ops::record_attention`] under `stage`.
pub fn spatial_attention<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    params: &ParamStore<T>,
    prefix: &str,
    group_divisor: usize,
    stage: usize,
) -> Result<O::Value> {
    let c = channels(ops, x)?;
    if group_divisor == 0 || c % group_divisor != 0 {
        return Err(Error::Config(format!(
            "attention input has {c} channels, not divisible by group divisor {group_divisor}"
        )));
    }
    let groups = c / group_divisor;
    let squeezed = conv(ops, x, params, &format!("{prefix}.conv1"), ConvSpec::new(1, groups))?;
    let squeezed = ops.relu(&squeezed);
    let logits = conv(
        ops,
        &squeezed,
        params,
        &format!("{prefix}.conv2"),
        ConvSpec::new(1, groups),
    )?;
    let attention = ops.sigmoid(&logits);
    ops.record_attention(stage, &attention);
    ops.mul(x, &attention)
}

/// Feature normalization: `x + dwconv3x3(x)`.
pub fn fnorm<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<O::Value> {
    let c = channels(ops, x)?;
    let w = params.tensor(&format!("{prefix}.weight"))?;
    if w.dims() != [c, 1, 3, 3] {
        return Err(Error::Config(format!(
            "depth-wise kernel {:?} does not match {c} channels (expected [{c}, 1, 3, 3])",
            w.dims()
        )));
    }
    let d = conv(ops, x, params, prefix, ConvSpec::new(1, c))?;
    ops.add(x, &d)
}

/// Residual SR block.
///
/// `body = fnorm(sa(conv(relu(conv(x)))))`, output `body + skip(x)` where
/// `skip` is the identity when `x` already has `base_channels` channels and
/// a 1x1 projection otherwise. The attention and normalization layers are
/// skipped when disabled in `cfg`.
pub fn rsrb<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    params: &ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<O::Value> {
    let cin = channels(ops, x)?;
    let h = conv(ops, x, params, &format!("{prefix}.conv1"), ConvSpec::padded(1))?;
    let h = ops.relu(&h);
    let mut h = conv(ops, &h, params, &format!("{prefix}.conv2"), ConvSpec::padded(1))?;
    if cfg.use_sa {
        h = spatial_attention(ops, &h, params, &format!("{prefix}.sa"), cfg.sa_group_divisor, stage)?;
    }
    if cfg.use_fnorm {
        h = fnorm(ops, &h, params, &format!("{prefix}.fnorm"))?;
    }
    let skip = if cin == cfg.base_channels {
        x.clone()
    } else {
        conv(ops, x, params, &format!("{prefix}.skip"), ConvSpec::padded(0))?
    };
    ops.add(&h, &skip)
}

fn unwrap_arc<T: Scalar>(v: Arc<FeatureMap<T>>) -> FeatureMap<T> {
    Arc::try_unwrap(v).unwrap_or_else(|shared| (*shared).clone())
}

/// Eager spatial attention returning `(output, attention)`.
pub fn sa_forward<T: Scalar>(
    x: &FeatureMap<T>,
    params: &ParamStore<T>,
    prefix: &str,
    group_divisor: usize,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    x.ensure_finite("attention input")?;
    let mut ops = Eval::capturing_attention();
    let xv = ops.input(x.clone());
    let out = spatial_attention(&mut ops, &xv, params, prefix, group_divisor, 0)?;
    let attention = ops.take_attention().remove(&0).expect("attention is always recorded");
    Ok((unwrap_arc(out), attention))
}

pub fn fnorm_forward<T: Scalar>(x: &FeatureMap<T>, params: &ParamStore<T>, prefix: &str) -> Result<FeatureMap<T>> {
    x.ensure_finite("feature normalization input")?;
    let mut ops = Eval::new();
    let xv = ops.input(x.clone());
    Ok(unwrap_arc(fnorm(&mut ops, &xv, params, prefix)?))
}

pub fn rsrb_forward<T: Scalar>(
    x: &FeatureMap<T>,
    params: &ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<FeatureMap<T>> {
    x.ensure_finite("residual block input")?;
    let mut ops = Eval::new();
    let xv = ops.input(x.clone());
    Ok(unwrap_arc(rsrb(&mut ops, &xv, params, prefix, cfg, 0)?))
}
