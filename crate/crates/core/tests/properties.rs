use std::collections::HashMap;
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpnet::backbone::{vgg_features, BackboneConfig};
use tpnet::data::{center_crop_to_multiple, sample_crop, MIN_CROP_SOURCE_SIDE};
use tpnet::data::{split_counts, split_manifest, Manifest, SampleRecord, Split};
use tpnet::graph::{Ops, Tape};
use tpnet::metrics::{plcc, srcc};
use tpnet::model::{extract_attention, init_head_params, regressor_forward, sa_forward, textural_forward, ModelConfig};
use tpnet::params::kaiming_init;
use tpnet::{ParamStore, Tensor, TpNet};

fn backbone_params() -> &'static ParamStore<f32> {
    static P: OnceLock<ParamStore<f32>> = OnceLock::new();
    P.get_or_init(|| {
        let specs = BackboneConfig::default().param_specs();
        kaiming_init(&specs, &mut ChaCha8Rng::seed_from_u64(0))
    })
}

fn noise(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.gen_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn backbone_tap_shapes(h in 16usize..72, w in 16usize..72) {
        let taps = vgg_features(&noise(&[1, 3, h, w], 1), backbone_params(), &BackboneConfig::default()).unwrap();
        let expected: Vec<Vec<usize>> = [(64, 1), (128, 2), (256, 4), (512, 8), (512, 16)]
            .iter()
            .map(|&(c, s)| vec![1, c, h / s, w / s])
            .collect();
        let got: Vec<Vec<usize>> = taps.iter().map(|t| t.dims().to_vec()).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn regressor_emits_one_scalar_per_item(n in 1usize..3, h in 4usize..13, w in 4usize..13) {
        let cfg = ModelConfig::default();
        let p = init_head_params::<f32>(&cfg, 2).unwrap();
        let scores = regressor_forward(&noise(&[n, 64, h, w], 3), &p, &cfg).unwrap();
        prop_assert_eq!(scores.len(), n);
    }
}

#[test]
fn textural_branch_is_64_channels_at_a_32nd() {
    let net = TpNet::<f32>::init(ModelConfig::default(), BackboneConfig::default(), 4).unwrap();
    for (h, w) in [(128, 128), (128, 160)] {
        let x = noise(&[1, 3, h, w], 5);
        let taps = net.perceptual(&x).unwrap();
        let f = textural_forward(&x, &taps, &net.params, &net.model).unwrap();
        assert_eq!(f.dims(), &[1, 64, h / 32, w / 32]);
        assert_eq!(net.score(&x).unwrap().len(), 1);
    }
}

fn records(groups: &[usize]) -> Manifest {
    let recs = groups
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut r = SampleRecord::new(format!("{i}.png"), format!("{i}.png"), i as f64);
            r.group_id = Some(format!("g{g}"));
            r
        })
        .collect();
    Manifest::from_records(recs).unwrap()
}

proptest! {
    #[test]
    fn plain_split_hits_exact_counts(n in 5usize..200, seed in any::<u64>()) {
        let m = records(&(0..n).collect::<Vec<_>>());
        let a = split_manifest(&m, seed, false).unwrap();
        let b = split_manifest(&m, seed, false).unwrap();
        prop_assert_eq!(&a.splits, &b.splits);
        let (tr, va, te) = split_counts(n);
        prop_assert_eq!(a.indices(Split::Train).len(), tr);
        prop_assert_eq!(a.indices(Split::Val).len(), va);
        prop_assert_eq!(a.indices(Split::Test).len(), te);
        prop_assert_eq!(tr + va + te, n);
    }

    #[test]
    fn group_split_keeps_groups_whole(groups in prop::collection::vec(0usize..12, 5..120), seed in any::<u64>()) {
        let distinct: std::collections::BTreeSet<_> = groups.iter().collect();
        prop_assume!(distinct.len() >= 3);
        let m = split_manifest(&records(&groups), seed, true).unwrap();
        let splits = m.splits.clone().unwrap();
        prop_assert_eq!(splits.len(), groups.len());
        let mut seen: HashMap<usize, Split> = HashMap::new();
        for (g, s) in groups.iter().zip(&splits) {
            prop_assert_eq!(*seen.entry(*g).or_insert(*s), *s);
        }
        for s in [Split::Train, Split::Val, Split::Test] {
            prop_assert!(!m.indices(s).is_empty());
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Covariance over the product of standard deviations, straight from the definition.
fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

/// Rank = count of smaller values plus the mid-point of the tie block.
fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

#[test]
fn correlations_match_definitions_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.gen_range(2..60);
        // small integer alphabets force ties; every fourth pair is continuous
        let levels = if checked % 4 == 0 { 0 } else { rng.gen_range(2..8) };
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if levels == 0 {
                rng.gen_range(-10.0..10.0)
            } else {
                rng.gen_range(0..levels) as f64
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if is_constant(&x) || is_constant(&y) {
            assert!(plcc(&x, &y).is_err());
            assert!(srcc(&x, &y).is_err());
            continue;
        }
        checked += 1;
        let p = plcc(&x, &y).unwrap();
        assert!((p - pearson_oracle(&x, &y)).abs() <= 1e-12);
        let s = srcc(&x, &y).unwrap();
        assert!((s - pearson_oracle(&rank_oracle(&x), &rank_oracle(&y))).abs() <= 1e-12);
        if levels == 0 {
            // distinct values: the squared rank-difference formula applies
            let (rx, ry) = (rank_oracle(&x), rank_oracle(&y));
            let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
            let nf = n as f64;
            assert!((s - (1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)))).abs() <= 1e-12);
        }

        let a = rng.gen_range(0.1..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let b = rng.gen_range(-3.0..3.0);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        assert!((plcc(&ax, &y).unwrap() - a.signum() * p).abs() <= 1e-12);
        assert!((srcc(&ax, &y).unwrap() - a.signum() * s).abs() <= 1e-12);
        let mono: Vec<f64> = x.iter().map(|v| v.powi(3) + (v / 4.0).exp()).collect();
        assert!((srcc(&mono, &y).unwrap() - s).abs() <= 1e-12);
        assert!((plcc(&y, &x).unwrap() - p).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn attention_is_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.1f32..3.0) {
        let cfg = ModelConfig { base_channels: 8, ..Default::default() };
        let p = init_head_params::<f32>(&cfg, seed).unwrap().with_prefix("textural.stage2.sa");
        let x = noise(&[1, 8, 6, 5], seed).scale(scale);
        let (out, att) = sa_forward(&x, &p, "textural.stage2.sa", cfg.sa_group_divisor).unwrap();
        prop_assert!(att.data().iter().all(|&a| a > 0.0 && a < 1.0));
        for ((o, xi), a) in out.data().iter().zip(x.data()).zip(att.data()) {
            prop_assert!((o - xi * a).abs() <= 1e-6);
            prop_assert!(o.abs() <= xi.abs());
        }
    }

    #[test]
    fn crops_have_the_requested_size(w in 128u32..200, h in 128u32..200, size in 64u32..240, seed in any::<u64>()) {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y) % 256) as u8]));
        prop_assume!(size < 2 * w.min(h));
        let c = sample_crop(&img, size, seed).unwrap();
        prop_assert_eq!(c.dimensions(), (size, size));
        prop_assert_eq!(&c, &sample_crop(&img, size, seed).unwrap());
        if size <= w.min(h) {
            // an unpadded crop is a window of the source
            let p = c.get_pixel(0, 0);
            let (x0, y0) = (p[0] as u32, p[1] as u32);
            prop_assert_eq!(*c.get_pixel(size - 1, size - 1), *img.get_pixel(x0 + size - 1, y0 + size - 1));
        }
        let cc = center_crop_to_multiple(&img, 32);
        let (cw, ch) = cc.dimensions();
        prop_assert!(cw % 32 == 0 && ch % 32 == 0 && w - cw < 32 && h - ch < 32);
    }

    #[test]
    fn l1_loss_is_non_negative(pred in prop::collection::vec(-5.0f64..5.0, 1..16), shift in -5.0f64..5.0) {
        let n = pred.len();
        let target: Vec<f64> = pred.iter().map(|p| p + shift).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.input(Tensor::new(vec![n, 1, 1, 1], pred.clone()).unwrap());
        let l = tape.l1_loss(v, &target).unwrap();
        let value = tape.value(&l).data()[0];
        prop_assert!(value >= 0.0);
        prop_assert!((value - shift.abs()).abs() <= 1e-12);
        let mut tape = Tape::<f64>::new();
        let v = tape.input(Tensor::new(vec![n, 1, 1, 1], pred.clone()).unwrap());
        let l = tape.l1_loss(v, &pred).unwrap();
        prop_assert_eq!(tape.value(&l).data()[0], 0.0);
    }
}

#[test]
fn small_sources_are_rejected_by_the_crop_sampler() {
    let img = RgbImage::new(MIN_CROP_SOURCE_SIDE - 1, 200);
    assert!(sample_crop(&img, 64, 0).is_err());
}

#[test]
fn exported_attention_maps_are_normalized() {
    let cfg = ModelConfig {
        base_channels: 8,
        use_perceptual: false,
        regressor_channels: vec![8, 4, 1],
        ..Default::default()
    };
    let net = TpNet::<f32>::init(cfg, BackboneConfig::default(), 6).unwrap();
    let maps = extract_attention(&noise(&[1, 3, 128, 160], 7), &net.params, &net.model, &net.backbone).unwrap();
    assert_eq!(
        maps.maps.keys().copied().collect::<Vec<_>>(),
        (1..=6).collect::<Vec<_>>()
    );
    for (s, m) in &maps.maps {
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "stage {s}");
        let (lo, hi) = maps.ranges[s];
        assert!(lo > 0.0 && hi < 1.0 && lo <= hi);
    }
}
