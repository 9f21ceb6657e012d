//! VGG-19 perceptual feature extractor.
//!
//! Layers follow the canonical VGG-19 feature enumeration, in which
//! convolutions, ReLUs and max-pools each take one index (`conv1_1` = 0).
//! Taps are raw convolution outputs, taken before their ReLU. Weights live
//! in the shared [`ParamStore`] as `backbone.features.<index>.{weight,bias}`.
//!
//! | canonical | index | weight name                    |
//! |-----------|-------|--------------------------------|
//! | conv1_1   | 0     | `backbone.features.0.weight`   |
//! | conv1_2   | 2     | `backbone.features.2.weight`   |
//! | conv2_1   | 5     | `backbone.features.5.weight`   |
//! | conv2_2   | 7     | `backbone.features.7.weight`   |
//! | conv3_1   | 10    | `backbone.features.10.weight`  |
//! | conv3_2   | 12    | `backbone.features.12.weight`  |
//! | conv3_3   | 14    | `backbone.features.14.weight`  |
//! | conv3_4   | 16    | `backbone.features.16.weight`  |
//! | conv4_1   | 19    | `backbone.features.19.weight`  |
//! | conv4_2   | 21    | `backbone.features.21.weight`  |
//! | conv4_3   | 23    | `backbone.features.23.weight`  |
//! | conv4_4   | 25    | `backbone.features.25.weight`  |
//! | conv5_1   | 28    | `backbone.features.28.weight`  |
//! | conv5_2   | 30    | `backbone.features.30.weight`  |
//! | conv5_3   | 32    | `backbone.features.32.weight`  |
//! | conv5_4   | 34    | `backbone.features.34.weight`  |

use std::path::Path;
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::graph::{Eval, Ops};
use crate::kernels::ConvSpec;
use crate::model::ModelConfig;
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::{FeatureMap, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VggConv {
    pub index: usize,
    pub name: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
}

const fn conv(index: usize, name: &'static str, in_channels: usize, out_channels: usize) -> VggConv {
    VggConv {
        index,
        name,
        in_channels,
        out_channels,
    }
}

pub const VGG19_CONVS: [VggConv; 16] = [
    conv(0, "conv1_1", 3, 64),
    conv(2, "conv1_2", 64, 64),
    conv(5, "conv2_1", 64, 128),
    conv(7, "conv2_2", 128, 128),
    conv(10, "conv3_1", 128, 256),
    conv(12, "conv3_2", 256, 256),
    conv(14, "conv3_3", 256, 256),
    conv(16, "conv3_4", 256, 256),
    conv(19, "conv4_1", 256, 512),
    conv(21, "conv4_2", 512, 512),
    conv(23, "conv4_3", 512, 512),
    conv(25, "conv4_4", 512, 512),
    conv(28, "conv5_1", 512, 512),
    conv(30, "conv5_2", 512, 512),
    conv(32, "conv5_3", 512, 512),
    conv(34, "conv5_4", 512, 512),
];

pub const VGG19_POOLS: [usize; 5] = [4, 9, 18, 27, 36];

/// ImageNet channel statistics the published VGG-19 weights were trained under.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn conv_at(index: usize) -> Option<&'static VggConv> {
    VGG19_CONVS.iter().find(|c| c.index == index)
}

pub fn weight_name(index: usize) -> String {
    format!("backbone.features.{index}.weight")
}

pub fn bias_name(index: usize) -> String {
    format!("backbone.features.{index}.bias")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub tap_layers: Vec<usize>,
    pub channels_per_tap: Vec<usize>,
    pub frozen: bool,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            tap_layers: vec![2, 7, 12, 21, 30],
            channels_per_tap: vec![64, 128, 256, 512, 512],
            frozen: true,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_layers.len() != 5 || self.channels_per_tap.len() != 5 {
            return Err(Error::Config(format!(
                "backbone needs exactly 5 taps, got {:?}",
                self.tap_layers
            )));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap layers must be strictly increasing, got {:?}",
                self.tap_layers
            )));
        }
        for (&t, &c) in self.tap_layers.iter().zip(&self.channels_per_tap) {
            match conv_at(t) {
                None => {
                    return Err(Error::Config(format!(
                        "tap {t} is not a convolution in the VGG-19 feature stack"
                    )))
                }
                Some(l) if l.out_channels != c => {
                    return Err(Error::Config(format!(
                        "tap {t} ({}) has {} channels, configured {c}",
                        l.name, l.out_channels
                    )))
                }
                Some(_) => {}
            }
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config(format!("non-positive channel std {:?}", self.std)));
        }
        Ok(())
    }

    pub fn last_tap(&self) -> usize {
        *self.tap_layers.last().expect("validated taps")
    }

    /// Convolutions needed to reach the deepest tap.
    pub fn required_convs(&self) -> impl Iterator<Item = &'static VggConv> + '_ {
        let last = self.last_tap();
        VGG19_CONVS.iter().filter(move |c| c.index <= last)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.required_convs()
            .flat_map(|c| {
                [
                    ParamSpec::weight(weight_name(c.index), [c.out_channels, c.in_channels, 3, 3]),
                    ParamSpec::bias(bias_name(c.index), c.out_channels),
                ]
            })
            .collect()
    }
}

/// Scale an 8-bit RGB image to `[0, 1]` and standardize each channel.
pub fn preprocess(image: &DynamicImage, backbone: &BackboneConfig, model: &ModelConfig) -> Result<FeatureMap<f32>> {
    let channels = image.color().channel_count();
    if channels != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {channels} channels")));
    }
    let rgb = image
        .as_rgb8()
        .ok_or_else(|| Error::Shape(format!("expected 8-bit RGB, got {:?}", image.color())))?;
    model.check_input_size(rgb.height() as usize, rgb.width() as usize)?;
    Ok(normalize_rgb(rgb, backbone))
}

/// [`preprocess`] without the size contract; used on crops already checked.
pub fn normalize_rgb(rgb: &image::RgbImage, backbone: &BackboneConfig) -> FeatureMap<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    let data = t.data_mut();
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            data[(c * h + y as usize) * w + x as usize] = (v - backbone.mean[c]) / backbone.std[c];
        }
    }
    t
}

/// The five tap features, in tap order.
pub fn vgg_taps<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    params: &ParamStore<T>,
    cfg: &BackboneConfig,
) -> Result<Vec<O::Value>> {
    let (_, c, _, _) = ops.value(x).nchw()?;
    if c != 3 {
        return Err(Error::Shape(format!("backbone expects 3 channels, got {c}")));
    }
    let missing: Vec<String> = cfg
        .param_specs()
        .into_iter()
        .filter(|s| !params.contains(&s.name))
        .map(|s| s.name)
        .collect();
    if !missing.is_empty() {
        return Err(Error::integrity_missing(missing));
    }
    let mut taps = Vec::with_capacity(cfg.tap_layers.len());
    let mut h = x.clone();
    for index in 0..=cfg.last_tap() {
        if conv_at(index).is_some() {
            let w = ops.param(params, &weight_name(index))?;
            let b = ops.param(params, &bias_name(index))?;
            h = ops.conv2d(&h, &w, Some(&b), ConvSpec::padded(1))?;
            if cfg.tap_layers.contains(&index) {
                taps.push(h.clone());
            }
        } else if VGG19_POOLS.contains(&index) {
            h = ops.max_pool2(&h)?;
        } else {
            h = ops.relu(&h);
        }
    }
    Ok(taps)
}

/// Eager feature extraction.
pub fn vgg_features<T: Scalar>(
    x: &FeatureMap<T>,
    params: &ParamStore<T>,
    cfg: &BackboneConfig,
) -> Result<Vec<FeatureMap<T>>> {
    let mut ops = Eval::new();
    let xv = ops.input(x.clone());
    let taps = vgg_taps(&mut ops, &xv, params, cfg)?;
    drop(xv);
    Ok(taps
        .into_iter()
        .map(|t| Arc::try_unwrap(t).unwrap_or_else(|s| (*s).clone()))
        .collect())
}

/// Load published VGG-19 weights from a named-tensor archive.
///
/// Entries may be named `features.<i>.*` (torchvision), `backbone.features.<i>.*`
/// or `<canonical>.*` (e.g. `conv3_2.weight`). Only layers up to the
/// deepest tap are imported; anything else in the archive is ignored.
pub fn import_pretrained(path: &Path, cfg: &BackboneConfig) -> Result<ParamStore<f32>> {
    let source = archive::load_params(path)?;
    let imported = import_from_store(&source, cfg)?;
    log::info!(
        "imported {} backbone tensors from {} (sha256 {})",
        imported.len(),
        path.display(),
        imported.checksum()
    );
    Ok(imported)
}

pub fn import_from_store(source: &ParamStore<f32>, cfg: &BackboneConfig) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut out = ParamStore::new();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for layer in cfg.required_convs() {
        let find = |suffix: &str| {
            [
                format!("features.{}.{suffix}", layer.index),
                format!("backbone.features.{}.{suffix}", layer.index),
                format!("{}.{suffix}", layer.name),
            ]
            .into_iter()
            .find_map(|n| source.get(&n).ok())
        };
        let (Some(w), Some(b)) = (find("weight"), find("bias")) else {
            missing.push(layer.name.to_string());
            continue;
        };
        let w_dims = [layer.out_channels, layer.in_channels, 3, 3];
        if w.tensor.dims() != w_dims || b.tensor.dims() != [layer.out_channels] {
            mismatched.push(format!(
                "{} (weight {:?}, bias {:?}; expected {:?} and [{}])",
                layer.name,
                w.tensor.dims(),
                b.tensor.dims(),
                w_dims,
                layer.out_channels
            ));
            continue;
        }
        out.set(weight_name(layer.index), (*w.tensor).clone(), w.role);
        out.set(bias_name(layer.index), (*b.tensor).clone(), b.role);
    }
    if !missing.is_empty() || !mismatched.is_empty() {
        return Err(Error::Integrity {
            missing,
            unexpected: Vec::new(),
            mismatched,
        });
    }
    Ok(out)
}
