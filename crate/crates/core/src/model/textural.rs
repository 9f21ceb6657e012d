use crate::error::{Error, Result};
use crate::graph::{Eval, Ops};
use crate::kernels::ConvSpec;
use crate::model::blocks::{conv, rsrb};
use crate::model::{stage_prefix, ModelConfig, SIDE_MULTIPLE};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Scalar};

fn check_taps<T: Scalar, O: Ops<T>>(
    ops: &O,
    taps: &[O::Value],
    cfg: &ModelConfig,
    n: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    if taps.len() != cfg.perceptual_channels.len() {
        return Err(Error::Shape(format!(
            "expected {} perceptual features, got {}",
            cfg.perceptual_channels.len(),
            taps.len()
        )));
    }
    for (i, (tap, &c)) in taps.iter().zip(&cfg.perceptual_channels).enumerate() {
        let expected = (n, c, h >> i, w >> i);
        let got = ops.value(tap).nchw()?;
        if got != expected {
            return Err(Error::Shape(format!(
                "perceptual feature {} has shape {got:?}, expected {expected:?}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// The textural branch.
///
/// Stage 1 runs a residual block on the raw image at full resolution. Each
/// later stage `s` concatenates backbone tap `s - 1` with the previous
/// stage output (both at the same resolution), runs a residual block and
/// max-pools by 2, so the result sits at 1/32 of the input resolution.
pub fn textural_branch<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    image: &O::Value,
    taps: &[O::Value],
    params: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<O::Value> {
    let (n, c, h, w) = ops.value(image).nchw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
    }
    if h < SIDE_MULTIPLE || w < SIDE_MULTIPLE || h % SIDE_MULTIPLE != 0 || w % SIDE_MULTIPLE != 0 {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            min: SIDE_MULTIPLE,
            multiple: SIDE_MULTIPLE,
        });
    }
    if cfg.use_perceptual {
        check_taps(ops, taps, cfg, n, h, w)?;
    }

    let stages = cfg.stages();
    if stages.is_empty() {
        return conv(ops, image, params, "stem", ConvSpec::padded(1));
    }

    let mut carried: Option<O::Value> = None;
    for s in stages {
        let input = if s == 1 {
            image.clone()
        } else {
            let tap = cfg.use_perceptual.then(|| &taps[s - 2]);
            let prev = carried.as_ref().filter(|_| cfg.use_textural);
            match (tap, prev) {
                (Some(tap), Some(prev)) => ops.concat_channels(&[tap, prev])?,
                (Some(tap), None) => tap.clone(),
                (None, Some(prev)) => prev.clone(),
                (None, None) => unreachable!("stage 1 always precedes when the textural stream is on"),
            }
        };
        let out = rsrb(ops, &input, params, &stage_prefix(s), cfg, s)?;
        carried = Some(if s >= 2 { ops.max_pool2(&out)? } else { out });
    }
    Ok(carried.expect("at least one stage ran"))
}

/// Eager textural branch; `taps` may be empty when the perceptual stream is off.
pub fn textural_forward<T: Scalar>(
    image: &FeatureMap<T>,
    taps: &[FeatureMap<T>],
    params: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<FeatureMap<T>> {
    image.ensure_finite("image")?;
    let mut ops = Eval::new();
    let img = ops.input(image.clone());
    let taps: Vec<_> = taps.iter().map(|t| ops.input(t.clone())).collect();
    let out = textural_branch(&mut ops, &img, &taps, params, cfg)?;
    Ok((*out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_head_params;
    use crate::tensor::Tensor;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            ..Default::default()
        }
    }

    fn taps_for(n: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
        crate::model::PERCEPTUAL_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| Tensor::from_fn(&[n, c, h >> i, w >> i], |j| ((j % 17) as f32) * 0.01))
            .collect()
    }

    #[test]
    fn output_sits_at_one_thirty_second_resolution() {
        let cfg = small_cfg();
        let p = init_head_params::<f32>(&cfg, 1).unwrap();
        let img = Tensor::from_fn(&[1, 3, 64, 32], |i| (i as f32 * 0.01).sin());
        let out = textural_forward(&img, &taps_for(1, 64, 32), &p, &cfg).unwrap();
        assert_eq!(out.dims(), &[1, 4, 2, 1]);
    }

    #[test]
    fn mismatched_tap_resolution_is_shape_error() {
        let cfg = small_cfg();
        let p = init_head_params::<f32>(&cfg, 1).unwrap();
        let img = Tensor::zeros(&[1, 3, 64, 64]);
        let mut taps = taps_for(1, 64, 64);
        taps[2] = Tensor::zeros(&[1, 256, 8, 8]);
        assert!(matches!(textural_forward(&img, &taps, &p, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn undersized_image_is_rejected() {
        let cfg = small_cfg();
        let p = init_head_params::<f32>(&cfg, 1).unwrap();
        let img = Tensor::zeros(&[1, 3, 16, 32]);
        assert!(matches!(
            textural_forward(&img, &[], &p, &cfg),
            Err(Error::InputTooSmall { .. })
        ));
    }

    #[test]
    fn branch_ablations_run() {
        for (perc, text) in [(false, true), (true, false), (false, false)] {
            let cfg = ModelConfig {
                use_perceptual: perc,
                use_textural: text,
                ..small_cfg()
            };
            let p = init_head_params::<f32>(&cfg, 2).unwrap();
            let img = Tensor::from_fn(&[1, 3, 32, 32], |i| (i as f32 * 0.1).cos());
            let taps = if perc { taps_for(1, 32, 32) } else { Vec::new() };
            let out = textural_forward(&img, &taps, &p, &cfg).unwrap();
            let side = if !perc && !text { 32 } else { 1 };
            assert_eq!(out.dims(), &[1, 4, side, side], "perceptual={perc} textural={text}");
        }
    }
}
