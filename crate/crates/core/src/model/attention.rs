use std::collections::BTreeMap;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::Eval;
use crate::model::network::run;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Scalar, Tensor};

/// Per-stage attention maps ready for export.
#[derive(Clone, Debug)]
pub struct AttentionMaps<T: Scalar = f32> {
    /// Stage index (1-based) to a channel-averaged `(n, 1, h, w)` map in `[0, 1]`.
    pub maps: BTreeMap<usize, FeatureMap<T>>,
    /// Stage index to the `(min, max)` of the channel-averaged map before rescaling.
    pub ranges: BTreeMap<usize, (T, T)>,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Channel-average each raw sigmoid map and min-max rescale it to `[0, 1]`.
    /// A constant map rescales to all zeros.
    pub fn from_raw(raw: BTreeMap<usize, FeatureMap<T>>) -> Result<Self> {
        let mut maps = BTreeMap::new();
        let mut ranges = BTreeMap::new();
        for (stage, a) in raw {
            let (n, c, h, w) = a.nchw()?;
            let inv_c = T::one() / T::from_f64(c as f64);
            let mut mean = Tensor::zeros(&[n, 1, h, w]);
            for ni in 0..n {
                let dst = &mut mean.data_mut()[ni * h * w..(ni + 1) * h * w];
                for ci in 0..c {
                    let src = &a.data()[(ni * c + ci) * h * w..][..h * w];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
                dst.iter_mut().for_each(|d| *d = *d * inv_c);
            }
            let (lo, hi) = mean.min_max();
            let span = hi - lo;
            let normalized = if span > T::zero() {
                mean.map(|v: T| ((v - lo) / span).max(T::zero()).min(T::one()))
            } else {
                Tensor::zeros(mean.dims())
            };
            maps.insert(stage, normalized);
            ranges.insert(stage, (lo, hi));
        }
        Ok(AttentionMaps { maps, ranges })
    }
}

/// Run the network and collect every stage's attention map.
pub fn extract_attention<T: Scalar>(
    image: &FeatureMap<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    backbone: &BackboneConfig,
) -> Result<AttentionMaps<T>> {
    if !cfg.use_sa {
        return Err(Error::Unsupported(
            "attention export needs a model with spatial attention enabled".into(),
        ));
    }
    let mut ops = Eval::capturing_attention();
    run(&mut ops, image, params, cfg, backbone)?;
    AttentionMaps::from_raw(ops.take_attention())
}
