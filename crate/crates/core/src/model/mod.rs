//! The quality network: residual blocks with spatial attention and feature
//! normalization, the six-stage textural branch that fuses backbone taps,
//! and the pooling regressor.
//!
//! Every layer is written against [`Ops`](crate::graph::Ops) so the same
//! code runs eagerly for scoring and on a [`Tape`](crate::graph::Tape) for
//! training.

mod attention;
mod blocks;
mod network;
mod regressor;
mod textural;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{kaiming_init, ParamSpec, ParamStore};
use crate::seed;
use crate::tensor::Scalar;

pub use attention::{extract_attention, AttentionMaps};
pub use blocks::{fnorm, fnorm_forward, rsrb, rsrb_forward, sa_forward, spatial_attention};
pub use network::{head, tpnet_forward, TpNet};
pub use regressor::{regressor, regressor_forward};
pub use textural::{textural_branch, textural_forward};

/// Channel widths of the five backbone taps.
pub const PERCEPTUAL_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// Each textural stage after the first halves the resolution, so inputs must
/// be multiples of this.
pub const SIDE_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub base_channels: usize,
    /// Channels per attention group; the attention convs use
    /// `base_channels / sa_group_divisor` groups.
    pub sa_group_divisor: usize,
    pub use_sa: bool,
    pub use_fnorm: bool,
    /// Feed backbone taps into stages 2..=6.
    pub use_perceptual: bool,
    /// Carry the learned textural stream between stages.
    pub use_textural: bool,
    pub regressor_pool_size: usize,
    pub regressor_channels: Vec<usize>,
    pub perceptual_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stages: 6,
            base_channels: 64,
            sa_group_divisor: 4,
            use_sa: true,
            use_fnorm: true,
            use_perceptual: true,
            use_textural: true,
            regressor_pool_size: 4,
            regressor_channels: vec![256, 64, 1],
            perceptual_channels: PERCEPTUAL_CHANNELS.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.sa_group_divisor == 0 || !self.base_channels.is_multiple_of(self.sa_group_divisor) {
            return bad(format!(
                "base_channels {} is not divisible by sa_group_divisor {}",
                self.base_channels, self.sa_group_divisor
            ));
        }
        if self.perceptual_channels != PERCEPTUAL_CHANNELS {
            return bad(format!(
                "perceptual_channels must be {PERCEPTUAL_CHANNELS:?}, got {:?}",
                self.perceptual_channels
            ));
        }
        if self.num_stages != self.perceptual_channels.len() + 1 {
            return bad(format!(
                "num_stages must be {} (one raw-image stage plus one per backbone tap), got {}",
                self.perceptual_channels.len() + 1,
                self.num_stages
            ));
        }
        if self.regressor_channels.len() != 3 || self.regressor_channels.last() != Some(&1) {
            return bad(format!(
                "regressor_channels must be three widths ending in 1, got {:?}",
                self.regressor_channels
            ));
        }
        if self.regressor_channels.contains(&0) {
            return bad("regressor widths must be positive".into());
        }
        if self.regressor_pool_size < 2 {
            return bad(format!(
                "regressor_pool_size must be at least 2, got {}",
                self.regressor_pool_size
            ));
        }
        Ok(())
    }

    /// Smallest accepted input side: the textural branch divides by 32 and
    /// the regressor pools to `regressor_pool_size`.
    pub fn min_input_side(&self) -> usize {
        SIDE_MULTIPLE * self.regressor_pool_size
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let min = self.min_input_side();
        if height < min || width < min || !height.is_multiple_of(SIDE_MULTIPLE) || !width.is_multiple_of(SIDE_MULTIPLE)
        {
            return Err(Error::InputTooSmall {
                height,
                width,
                min,
                multiple: SIDE_MULTIPLE,
            });
        }
        Ok(())
    }

    pub fn sa_groups(&self) -> usize {
        self.base_channels / self.sa_group_divisor
    }

    /// Stages that exist under the current branch toggles (1-based).
    pub fn stages(&self) -> Vec<usize> {
        match (self.use_perceptual, self.use_textural) {
            (_, true) => (1..=self.num_stages).collect(),
            (true, false) => (2..=self.num_stages).collect(),
            (false, false) => Vec::new(),
        }
    }

    /// Input channel count of stage `s`.
    pub fn stage_in_channels(&self, s: usize) -> usize {
        if s == 1 {
            return 3;
        }
        let tap = if self.use_perceptual {
            self.perceptual_channels[s - 2]
        } else {
            0
        };
        let carried = if self.use_textural { self.base_channels } else { 0 };
        tap + carried
    }

    /// Parameters of the head (everything except the backbone).
    pub fn head_param_specs(&self) -> Vec<ParamSpec> {
        let c = self.base_channels;
        let mut specs = Vec::new();
        if self.stages().is_empty() {
            specs.push(ParamSpec::weight("stem.weight", [c, 3, 3, 3]).linear());
            specs.push(ParamSpec::bias("stem.bias", c));
        }
        for s in self.stages() {
            let p = stage_prefix(s);
            let cin = self.stage_in_channels(s);
            specs.push(ParamSpec::weight(format!("{p}.conv1.weight"), [c, cin, 3, 3]));
            specs.push(ParamSpec::bias(format!("{p}.conv1.bias"), c));
            specs.push(ParamSpec::weight(format!("{p}.conv2.weight"), [c, c, 3, 3]).linear());
            specs.push(ParamSpec::bias(format!("{p}.conv2.bias"), c));
            if self.use_sa {
                let g = self.sa_groups();
                specs.push(ParamSpec::weight(
                    format!("{p}.sa.conv1.weight"),
                    [g, self.sa_group_divisor, 3, 3],
                ));
                specs.push(ParamSpec::bias(format!("{p}.sa.conv1.bias"), g));
                specs.push(ParamSpec::weight(format!("{p}.sa.conv2.weight"), [c, 1, 3, 3]).linear());
                specs.push(ParamSpec::bias(format!("{p}.sa.conv2.bias"), c));
            }
            if self.use_fnorm {
                specs.push(ParamSpec::weight(format!("{p}.fnorm.weight"), [c, 1, 3, 3]).linear());
                specs.push(ParamSpec::bias(format!("{p}.fnorm.bias"), c));
            }
            if cin != c {
                specs.push(ParamSpec::weight(format!("{p}.skip.weight"), [c, cin, 1, 1]).linear());
                specs.push(ParamSpec::bias(format!("{p}.skip.bias"), c));
            }
        }
        let [r1, r2, r3] = [
            self.regressor_channels[0],
            self.regressor_channels[1],
            self.regressor_channels[2],
        ];
        let k = self.regressor_pool_size - 1;
        specs.push(ParamSpec::weight("regressor.conv1.weight", [r1, 2 * c, k, k]));
        specs.push(ParamSpec::bias("regressor.conv1.bias", r1));
        specs.push(ParamSpec::weight("regressor.conv2.weight", [r2, r1, 2, 2]));
        specs.push(ParamSpec::bias("regressor.conv2.bias", r2));
        specs.push(ParamSpec::weight("regressor.conv3.weight", [r3, r2, 1, 1]).linear());
        specs.push(ParamSpec::bias("regressor.conv3.bias", r3));
        specs
    }

    /// Every parameter of the full network, backbone first.
    pub fn param_specs(&self, backbone: &crate::backbone::BackboneConfig) -> Vec<ParamSpec> {
        let mut specs = if self.use_perceptual {
            backbone.param_specs()
        } else {
            Vec::new()
        };
        specs.extend(self.head_param_specs());
        specs
    }
}

pub(crate) fn stage_prefix(stage: usize) -> String {
    format!("textural.stage{stage}")
}

/// Seeded initialization of the full network (backbone included).
pub fn init_params<T: Scalar>(
    cfg: &ModelConfig,
    backbone: &crate::backbone::BackboneConfig,
    seed: u64,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    backbone.validate()?;
    let mut rng = seed::substream(seed, "init", 0);
    Ok(kaiming_init(&cfg.param_specs(backbone), &mut rng))
}

/// Seeded initialization of the head only.
pub fn init_head_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = seed::substream(seed, "init", 1);
    Ok(kaiming_init(&cfg.head_param_specs(), &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().min_input_side(), 128);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig {
            base_channels: 30,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.base_channels = 64;
        c.num_stages = 5;
        assert!(c.validate().is_err());
        c.num_stages = 6;
        c.regressor_channels = vec![256, 64, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_widths_follow_concatenation() {
        let c = ModelConfig::default();
        let widths: Vec<_> = c.stages().iter().map(|&s| c.stage_in_channels(s)).collect();
        assert_eq!(widths, vec![3, 128, 192, 320, 576, 576]);
    }

    #[test]
    fn head_specs_have_unique_names() {
        let specs = ModelConfig::default().head_param_specs();
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        // 6 stages x (conv1, conv2, sa1, sa2, fnorm, skip) x 2 + regressor 6
        assert_eq!(specs.len(), 6 * 12 + 6);
    }

    #[test]
    fn ablation_toggles_drop_parameters() {
        let c = ModelConfig {
            use_sa: false,
            use_fnorm: false,
            ..Default::default()
        };
        assert!(c
            .head_param_specs()
            .iter()
            .all(|s| !s.name.contains(".sa.") && !s.name.contains("fnorm")));
        let none = ModelConfig {
            use_perceptual: false,
            use_textural: false,
            ..Default::default()
        };
        assert!(none.head_param_specs().iter().any(|s| s.name == "stem.weight"));
        let perceptual_only = ModelConfig {
            use_textural: false,
            ..Default::default()
        };
        assert_eq!(perceptual_only.stages(), vec![2, 3, 4, 5, 6]);
        assert_eq!(perceptual_only.stage_in_channels(2), 64);
    }

    #[test]
    fn input_size_rule() {
        let c = ModelConfig::default();
        assert!(c.check_input_size(128, 128).is_ok());
        assert!(c.check_input_size(160, 224).is_ok());
        assert!(matches!(c.check_input_size(96, 128), Err(Error::InputTooSmall { .. })));
        assert!(c.check_input_size(130, 128).is_err());
    }
}
