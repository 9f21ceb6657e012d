//! Correlation statistics and full-reference baselines.

use std::collections::BTreeMap;
use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BT.601 luma weights used before SSIM.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Data(format!("need at least 2 pairs, got {}", xs.len())));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {v} in correlation input")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson's linear correlation coefficient.
pub fn plcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("correlation undefined for a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank range.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman's rank correlation: Pearson over average ranks.
pub fn srcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    plcc(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Psnr {
    Finite(f64),
    /// Identical images.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

/// PSNR over all RGB samples.
pub fn psnr(reference: &RgbImage, test: &RgbImage, max_value: f64) -> Result<Psnr> {
    check_dims(reference, test)?;
    let (a, b) = (reference.as_raw(), test.as_raw());
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if se == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let mse = se / a.len() as f64;
    Ok(Psnr::Finite(10.0 * (max_value * max_value / mse).log10()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            window: 11,
            sigma: 1.5,
        }
    }
}

pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| LUMA_WEIGHTS[0] * p.0[0] as f64 + LUMA_WEIGHTS[1] * p.0[1] as f64 + LUMA_WEIGHTS[2] * p.0[2] as f64)
        .collect()
}

/// Mean SSIM of the luma planes with default constants.
pub fn ssim(reference: &RgbImage, test: &RgbImage) -> Result<f64> {
    check_dims(reference, test)?;
    let (w, h) = reference.dimensions();
    ssim_plane(
        &luma(reference),
        &luma(test),
        w as usize,
        h as usize,
        &SsimParams::default(),
    )
}

/// Valid-region filter with a separable normalized window.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(j, kv)| kv * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(j, kv)| kv * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

/// Mean of the local SSIM map over positions where the window fits.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape(format!("plane buffers do not match {w}x{h}")));
    }
    if w < p.window || h < p.window {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            min: p.window,
            multiple: 1,
        });
    }
    let r = (p.window / 2) as f64;
    let k: Vec<f64> = (0..p.window)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * p.sigma * p.sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / s).collect();

    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let e_aa = filter_valid(&prod(a, a), w, h, &k);
    let e_bb = filter_valid(&prod(b, b), w, h, &k);
    let e_ab = filter_valid(&prod(a, b), w, h, &k);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub predicted: f64,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subsets: BTreeMap<String, SubsetReport>,
}

pub fn evaluate(pairs: &[ScoredPair]) -> Result<MetricsReport> {
    let pred: Vec<f64> = pairs.iter().map(|p| p.predicted).collect();
    let mos: Vec<f64> = pairs.iter().map(|p| p.mos).collect();
    Ok(MetricsReport {
        plcc: plcc(&pred, &mos)?,
        srcc: srcc(&pred, &mos)?,
        n: pairs.len(),
        subsets: BTreeMap::new(),
    })
}

/// [`evaluate`] plus a breakdown by `subset_of(pair)`; subsets with fewer than
/// two pairs or a constant column are left out.
pub fn evaluate_by(pairs: &[ScoredPair], subset_of: impl Fn(&ScoredPair) -> Option<String>) -> Result<MetricsReport> {
    let mut report = evaluate(pairs)?;
    let mut groups: BTreeMap<String, Vec<ScoredPair>> = BTreeMap::new();
    for p in pairs {
        if let Some(key) = subset_of(p) {
            groups.entry(key).or_default().push(p.clone());
        }
    }
    for (key, g) in groups {
        if let Ok(r) = evaluate(&g) {
            report.subsets.insert(
                key,
                SubsetReport {
                    plcc: r.plcc,
                    srcc: r.srcc,
                    n: r.n,
                },
            );
        }
    }
    Ok(report)
}
