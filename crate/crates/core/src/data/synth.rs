//! Synthetic degradations with monotone pseudo-MOS labels.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::{Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    AdditiveNoise,
    BicubicUpdown,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [
        DegradationKind::GaussianBlur,
        DegradationKind::AdditiveNoise,
        DegradationKind::BicubicUpdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::AdditiveNoise => "additive_noise",
            DegradationKind::BicubicUpdown => "bicubic_updown",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown degradation kind {s:?} (expected gaussian_blur, additive_noise or bicubic_updown)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Blur sigma in pixels, noise std in 8-bit levels, or the resize factor minus one.
    pub severity: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: f64, seed: u64) -> Self {
        DegradationSpec { kind, severity, seed }
    }

    pub fn pseudo_mos(&self) -> f64 {
        pseudo_mos(self.severity)
    }

    fn validate(&self) -> Result<()> {
        if !self.severity.is_finite() || self.severity < 0.0 {
            return Err(Error::Config(format!(
                "severity must be finite and non-negative, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

pub fn pseudo_mos(severity: f64) -> f64 {
    (-severity).exp()
}

/// Apply a degradation; returns the image and its pseudo-MOS.
pub fn synthesize(source: &RgbImage, spec: &DegradationSpec) -> Result<(RgbImage, f64)> {
    spec.validate()?;
    if spec.severity == 0.0 {
        return Ok((source.clone(), 1.0));
    }
    let out = match spec.kind {
        DegradationKind::GaussianBlur => gaussian_blur(source, spec.severity),
        DegradationKind::AdditiveNoise => additive_noise(source, spec.severity, spec.seed),
        DegradationKind::BicubicUpdown => bicubic_updown(source, spec.severity),
    };
    Ok((out, spec.pseudo_mos()))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn mirror(i: i64, len: i64) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i.rem_euclid(period);
    (if m >= len { period - m } else { m }) as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(src: &RgbImage, sigma: f64) -> RgbImage {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (src.width() as usize, src.height() as usize);
    let raw = src.as_raw();
    let mut tmp = vec![0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sx = mirror(x as i64 + j as i64 - r, w as i64);
                    acc += kv * raw[(y * w + sx) * 3 + c] as f64;
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sy = mirror(y as i64 + j as i64 - r, h as i64);
                    acc += kv * tmp[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(w as u32, h as u32, out).expect("buffer sized to image")
}

/// Zero-mean Gaussian noise (std in 8-bit levels), one draw per byte in
/// row-major RGB order from `ChaCha8Rng::seed_from_u64(seed)`, rounded and clipped.
pub fn additive_noise(src: &RgbImage, std: f64, seed: u64) -> RgbImage {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = src
        .as_raw()
        .iter()
        .map(|&p| (p as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(src.width(), src.height(), data).expect("same dimensions")
}

/// Bicubic (Catmull-Rom) downscale by `1 + severity`, then back up.
pub fn bicubic_updown(src: &RgbImage, severity: f64) -> RgbImage {
    let f = 1.0 + severity;
    let (w, h) = src.dimensions();
    let sw = ((w as f64 / f).round() as u32).max(1);
    let sh = ((h as f64 / f).round() as u32).max(1);
    let small = imageops::resize(src, sw, sh, FilterType::CatmullRom);
    imageops::resize(&small, w, h, FilterType::CatmullRom)
}

/// Dead-leaves RGB texture: occluding flat-coloured discs with power-law radii
/// over a smooth shaded background.
pub fn pattern_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let (r_min, r_max) = (2.0f64, (w.min(h) / 4.0).max(3.0));
    let mut buf: Vec<[f64; 3]> = {
        let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(60.0..190.0));
        let slope: [f64; 2] = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let v = slope[0] * (x as f64 / w - 0.5) + slope[1] * (y as f64 / h - 0.5);
                base.map(|b| b + v)
            })
            .collect()
    };
    let discs = (w * h / 120.0) as usize;
    for _ in 0..discs {
        // inverse-CDF sample of p(r) ~ r^-3 on [r_min, r_max]
        let u: f64 = rng.gen_range(0.0..1.0);
        let r = 1.0 / (r_min.powi(-2) - u * (r_min.powi(-2) - r_max.powi(-2))).sqrt();
        let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(20.0..235.0));
        let y0 = (cy - r).floor().max(0.0) as u32;
        let y1 = ((cy + r).ceil() as u32).min(height);
        let x0 = (cx - r).floor().max(0.0) as u32;
        let x1 = ((cx + r).ceil() as u32).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    buf[(y * width + x) as usize] = colour;
                }
            }
        }
    }
    RgbImage::from_fn(width, height, |x, y| {
        Rgb(buf[(y * width + x) as usize].map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGrid {
    pub kinds: Vec<DegradationKind>,
    pub severities: Vec<f64>,
}

impl SynthGrid {
    pub fn len(&self) -> usize {
        self.kinds.len() * self.severities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("degradation grid is empty".into()));
        }
        for &s in &self.severities {
            DegradationSpec::new(DegradationKind::GaussianBlur, s, 0).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub file: String,
    pub source: String,
    pub kind: DegradationKind,
    pub severity: f64,
    pub seed: u64,
    pub pseudo_mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub root_seed: u64,
    pub grid: SynthGrid,
    pub entries: Vec<SynthEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "seeds.json";

/// Degrade every source with every grid cell into `out_dir`.
///
/// Writes `<stem>_<kind>_<k>.png` (k = severity index), `manifest.csv` with
/// the pseudo-MOS as `mos` and the source stem as `group_id`, and
/// `seeds.json` recording each entry's seed. Severity-0 entries of PNG
/// sources are copied byte-for-byte.
pub fn synthesize_dataset(sources: &[PathBuf], grid: &SynthGrid, root_seed: u64, out_dir: &Path) -> Result<Manifest> {
    grid.validate()?;
    if sources.is_empty() {
        return Err(Error::Data("no source images".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for src_path in sources {
        let stem = src_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("{}: unusable file name", src_path.display())))?
            .to_string();
        let img = image::open(src_path)?.to_rgb8();
        let is_png = src_path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        for &kind in &grid.kinds {
            for (k, &severity) in grid.severities.iter().enumerate() {
                let seed = seed::derive(root_seed, "noise", entries.len() as u64);
                let spec = DegradationSpec::new(kind, severity, seed);
                let file = format!("{stem}_{kind}_{k}.png");
                let dest = out_dir.join(&file);
                let (out, mos) = synthesize(&img, &spec)?;
                if severity == 0.0 && is_png {
                    fs::copy(src_path, &dest).map_err(|e| Error::file(&dest, e))?;
                } else {
                    out.save(&dest)?;
                }
                let mut rec = SampleRecord::new(file.clone(), dest, mos);
                rec.group_id = Some(stem.clone());
                rec.method_tag = Some(kind.to_string());
                rec.scale_tag = Some(format!("{severity}"));
                records.push(rec);
                entries.push(SynthEntry {
                    file,
                    source: src_path.display().to_string(),
                    kind,
                    severity,
                    seed,
                    pseudo_mos: mos,
                });
            }
        }
    }
    let manifest = Manifest::from_records(records)?;
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    let sidecar = SynthSidecar {
        root_seed,
        grid: grid.clone(),
        entries,
    };
    let path = out_dir.join(SIDECAR_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

/// Write `count` procedural sources named `src<i>.png`.
pub fn write_pattern_sources(dir: &Path, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("src{i}.png"));
            pattern_image(size, size, seed::derive(seed, "pattern", i as u64)).save(&p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_severity_is_identity() {
        let img = pattern_image(64, 48, 1);
        for kind in DegradationKind::ALL {
            let (out, mos) = synthesize(&img, &DegradationSpec::new(kind, 0.0, 3)).unwrap();
            assert_eq!(out, img);
            assert_eq!(mos, 1.0);
        }
    }

    #[test]
    fn pseudo_mos_decreases() {
        let m: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&s| pseudo_mos(s)).collect();
        assert!(m[0] > m[1] && m[1] > m[2]);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("jpeg".parse::<DegradationKind>(), Err(Error::Config(_))));
        assert_eq!(
            "bicubic_updown".parse::<DegradationKind>().unwrap(),
            DegradationKind::BicubicUpdown
        );
    }

    #[test]
    fn negative_severity_rejected() {
        let img = pattern_image(32, 32, 0);
        assert!(synthesize(&img, &DegradationSpec::new(DegradationKind::AdditiveNoise, -1.0, 0)).is_err());
    }

    #[test]
    fn blur_preserves_constant_and_smooths() {
        let flat = RgbImage::from_pixel(20, 20, Rgb([90, 120, 200]));
        assert_eq!(gaussian_blur(&flat, 1.5), flat);
        let img = pattern_image(64, 64, 4);
        let tv = |im: &RgbImage| {
            im.as_raw()
                .windows(4)
                .map(|w| (w[0] as i32 - w[3] as i32).abs() as u64)
                .sum::<u64>()
        };
        assert!(tv(&gaussian_blur(&img, 2.0)) < tv(&gaussian_blur(&img, 0.5)));
    }

    #[test]
    fn updown_keeps_size() {
        let img = pattern_image(130, 70, 2);
        assert_eq!(bicubic_updown(&img, 1.5).dimensions(), (130, 70));
    }
}
