//! Forward passes against explicit nested-loop reference implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpnet::kernels::{conv2d, ConvSpec};
use tpnet::model::{fnorm_forward, regressor_forward, rsrb_forward, sa_forward, ModelConfig};
use tpnet::params::{ParamStore, Role};
use tpnet::{Scalar, Tensor};

fn random<T: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Direct definition of a zero-padded, stride-1, grouped 2-D convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, pad: usize, groups: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.nchw().unwrap();
    let (cout, cin_g, kh, kw) = w.nchw().unwrap();
    assert_eq!(cin_g * groups, cin);
    let cout_g = cout / groups;
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(ni, g * cin_g + ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct Case {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    groups: usize,
}

fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for _ in 0..40 {
        let groups = [1, 1, 2, 4, 8][rng.gen_range(0..5)];
        let cin = groups * rng.gen_range(1..=(8 / groups));
        let depthwise = groups > 1 && rng.gen_bool(0.3);
        let (cin, cout) = if depthwise {
            (groups, groups)
        } else {
            (cin, groups * rng.gen_range(1..=(8 / groups)))
        };
        let k = [1, 2, 3][rng.gen_range(0..3)];
        out.push(Case {
            n: rng.gen_range(1..=2),
            cin,
            cout,
            h: rng.gen_range(k..=6),
            w: rng.gen_range(k..=6),
            k,
            pad: rng.gen_range(0..=(k / 2)),
            groups,
        });
    }
    // pinned corners: plain, grouped and depth-wise at the largest size
    for (cin, cout, groups) in [(8, 8, 1), (8, 8, 4), (8, 8, 8)] {
        out.push(Case {
            n: 2,
            cin,
            cout,
            h: 6,
            w: 6,
            k: 3,
            pad: 1,
            groups,
        });
    }
    out
}

fn check_conv<T: Scalar>(tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for c in cases() {
        let x: Tensor<f64> = random(&mut rng, &[c.n, c.cin, c.h, c.w]);
        let w: Tensor<f64> = random(&mut rng, &[c.cout, c.cin / c.groups, c.k, c.k]);
        let b: Tensor<f64> = random(&mut rng, &[c.cout]);
        let expected = conv_oracle(&x, &w, Some(&b), c.pad, c.groups);
        let got = conv2d(
            &x.cast::<T>(),
            &w.cast::<T>(),
            Some(&b.cast::<T>()),
            ConvSpec::new(c.pad, c.groups),
        )
        .unwrap();
        assert_eq!(got.dims(), expected.dims());
        let err = got.cast::<f64>().max_abs_diff(&expected).unwrap();
        assert!(
            err <= tol,
            "n{} cin{} cout{} {}x{} k{} pad{} groups{}: error {err:e}",
            c.n,
            c.cin,
            c.cout,
            c.h,
            c.w,
            c.k,
            c.pad,
            c.groups
        );
    }
}

#[test]
fn conv_matches_oracle_f32() {
    check_conv::<f32>(1e-5);
}

#[test]
fn conv_matches_oracle_f64() {
    check_conv::<f64>(1e-10);
}

#[test]
fn conv_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f64> = random(&mut rng, &[1, 4, 5, 5]);
    let w: Tensor<f64> = random(&mut rng, &[6, 2, 3, 3]);
    let got = conv2d(&x, &w, None, ConvSpec::new(1, 2)).unwrap();
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, None, 1, 2)).unwrap() <= 1e-12);
}

#[test]
fn conv_rejects_bad_geometry() {
    let x = Tensor::<f32>::zeros(&[1, 6, 4, 4]);
    assert!(conv2d(&x, &Tensor::zeros(&[4, 3, 3, 3]), None, ConvSpec::new(1, 4)).is_err());
    assert!(conv2d(&x, &Tensor::zeros(&[4, 5, 3, 3]), None, ConvSpec::padded(1)).is_err());
}

fn put(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) {
    let role = if name.ends_with("bias") {
        Role::Bias
    } else {
        Role::Weight
    };
    store.insert(name, t, role).unwrap();
}

#[test]
fn spatial_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, div) = (8, 4);
    let g = c / div;
    let x: Tensor<f64> = random(&mut rng, &[2, c, 5, 6]);
    let mut p = ParamStore::new();
    put(&mut p, "sa.conv1.weight", random(&mut rng, &[g, div, 3, 3]));
    put(&mut p, "sa.conv1.bias", random(&mut rng, &[g]));
    put(&mut p, "sa.conv2.weight", random(&mut rng, &[c, 1, 3, 3]));
    put(&mut p, "sa.conv2.bias", random(&mut rng, &[c]));
    let (out, att) = sa_forward(&x, &p, "sa", div).unwrap();

    let t = |n: &str| p.tensor(n).unwrap();
    let h = conv_oracle(&x, t("sa.conv1.weight"), Some(t("sa.conv1.bias")), 1, g).map(|v| v.max(0.0));
    let a = conv_oracle(&h, t("sa.conv2.weight"), Some(t("sa.conv2.bias")), 1, g).map(sigmoid);
    let expected = x.zip_map(&a, |u, v| u * v).unwrap();
    assert!(att.max_abs_diff(&a).unwrap() <= 1e-12);
    assert!(out.max_abs_diff(&expected).unwrap() <= 1e-12);
}

#[test]
fn fnorm_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = random(&mut rng, &[1, 5, 6, 4]);
    let mut p = ParamStore::new();
    put(&mut p, "f.weight", random(&mut rng, &[5, 1, 3, 3]));
    put(&mut p, "f.bias", random(&mut rng, &[5]));
    let got = fnorm_forward(&x, &p, "f").unwrap();
    let d = conv_oracle(
        &x,
        p.tensor("f.weight").unwrap(),
        Some(p.tensor("f.bias").unwrap()),
        1,
        5,
    );
    assert!(got.max_abs_diff(&x.zip_map(&d, |a, b| a + b).unwrap()).unwrap() <= 1e-12);
}

fn block_params(rng: &mut ChaCha8Rng, cin: usize, c: usize, div: usize) -> ParamStore<f64> {
    let g = c / div;
    let mut p = ParamStore::new();
    put(&mut p, "b.conv1.weight", random(rng, &[c, cin, 3, 3]));
    put(&mut p, "b.conv1.bias", random(rng, &[c]));
    put(&mut p, "b.conv2.weight", random(rng, &[c, c, 3, 3]));
    put(&mut p, "b.conv2.bias", random(rng, &[c]));
    put(&mut p, "b.sa.conv1.weight", random(rng, &[g, div, 3, 3]));
    put(&mut p, "b.sa.conv1.bias", random(rng, &[g]));
    put(&mut p, "b.sa.conv2.weight", random(rng, &[c, 1, 3, 3]));
    put(&mut p, "b.sa.conv2.bias", random(rng, &[c]));
    put(&mut p, "b.fnorm.weight", random(rng, &[c, 1, 3, 3]));
    put(&mut p, "b.fnorm.bias", random(rng, &[c]));
    if cin != c {
        put(&mut p, "b.skip.weight", random(rng, &[c, cin, 1, 1]));
        put(&mut p, "b.skip.bias", random(rng, &[c]));
    }
    p
}

fn rsrb_oracle(x: &Tensor<f64>, p: &ParamStore<f64>, c: usize, div: usize) -> Tensor<f64> {
    let t = |n: &str| p.tensor(&format!("b.{n}")).unwrap();
    let g = c / div;
    let h = conv_oracle(x, t("conv1.weight"), Some(t("conv1.bias")), 1, 1).map(|v| v.max(0.0));
    let h = conv_oracle(&h, t("conv2.weight"), Some(t("conv2.bias")), 1, 1);
    let s = conv_oracle(&h, t("sa.conv1.weight"), Some(t("sa.conv1.bias")), 1, g).map(|v| v.max(0.0));
    let a = conv_oracle(&s, t("sa.conv2.weight"), Some(t("sa.conv2.bias")), 1, g).map(sigmoid);
    let h = h.zip_map(&a, |u, v| u * v).unwrap();
    let d = conv_oracle(&h, t("fnorm.weight"), Some(t("fnorm.bias")), 1, c);
    let h = h.zip_map(&d, |u, v| u + v).unwrap();
    let skip = if x.dims()[1] == c {
        x.clone()
    } else {
        conv_oracle(x, t("skip.weight"), Some(t("skip.bias")), 0, 1)
    };
    h.zip_map(&skip, |u, v| u + v).unwrap()
}

#[test]
fn rsrb_matches_oracle_with_both_skips() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for cin in [4, 3] {
        let cfg = ModelConfig {
            base_channels: 4,
            sa_group_divisor: 2,
            ..Default::default()
        };
        let p = block_params(&mut rng, cin, 4, 2);
        let x: Tensor<f64> = random(&mut rng, &[2, cin, 5, 5]);
        let got = rsrb_forward(&x, &p, "b", &cfg).unwrap();
        let err = got.max_abs_diff(&rsrb_oracle(&x, &p, 4, 2)).unwrap();
        assert!(err <= 1e-12, "cin {cin}: {err:e}");
    }
}

#[test]
fn regressor_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig {
        base_channels: 3,
        regressor_channels: vec![5, 4, 1],
        ..Default::default()
    };
    let mut p = ParamStore::new();
    put(&mut p, "regressor.conv1.weight", random(&mut rng, &[5, 6, 3, 3]));
    put(&mut p, "regressor.conv1.bias", random(&mut rng, &[5]));
    put(&mut p, "regressor.conv2.weight", random(&mut rng, &[4, 5, 2, 2]));
    put(&mut p, "regressor.conv2.bias", random(&mut rng, &[4]));
    put(&mut p, "regressor.conv3.weight", random(&mut rng, &[1, 4, 1, 1]));
    put(&mut p, "regressor.conv3.bias", random(&mut rng, &[1]));
    // 9x6 features: adaptive bins of unequal width along the rows
    let f: Tensor<f64> = random(&mut rng, &[2, 3, 9, 6]);
    let got = regressor_forward(&f, &p, &cfg).unwrap();

    let (n, c, h, w) = f.nchw().unwrap();
    let bin = |i: usize, len: usize| ((i * len) / 4, ((i + 1) * len).div_ceil(4));
    let mut pooled = Tensor::zeros(&[n, 2 * c, 4, 4]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..4 {
                for ox in 0..4 {
                    let ((y0, y1), (x0, x1)) = (bin(oy, h), bin(ox, w));
                    let vals: Vec<f64> = (y0..y1)
                        .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                        .map(|(y, x)| f.at4(ni, ci, y, x))
                        .collect();
                    let mx = vals.iter().cloned().fold(f64::MIN, f64::max);
                    let av = vals.iter().sum::<f64>() / vals.len() as f64;
                    pooled.data_mut()[((ni * 2 * c + ci) * 4 + oy) * 4 + ox] = mx;
                    pooled.data_mut()[((ni * 2 * c + c + ci) * 4 + oy) * 4 + ox] = av;
                }
            }
        }
    }
    let t = |n: &str| p.tensor(n).unwrap();
    let r = conv_oracle(
        &pooled,
        t("regressor.conv1.weight"),
        Some(t("regressor.conv1.bias")),
        0,
        1,
    )
    .map(|v| v.max(0.0));
    let r = conv_oracle(&r, t("regressor.conv2.weight"), Some(t("regressor.conv2.bias")), 0, 1).map(|v| v.max(0.0));
    let r = conv_oracle(&r, t("regressor.conv3.weight"), Some(t("regressor.conv3.bias")), 0, 1);
    assert_eq!(got.len(), 2);
    for (g, e) in got.iter().zip(r.data()) {
        assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
    }
}
