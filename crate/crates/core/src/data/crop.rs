use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smallest side accepted for training crops.
pub const MIN_CROP_SOURCE_SIDE: u32 = 128;

/// Mirror index into `0..len` without repeating the edge pixel.
fn reflect(i: i64, len: i64) -> u32 {
    let period = 2 * (len - 1);
    let m = i.rem_euclid(period.max(1));
    (if m >= len { period - m } else { m }) as u32
}

/// Reflect-pad so both sides are at least `size`, splitting the padding
/// evenly (extra pixel after). Padding must stay below the side length.
pub fn reflect_pad_to(img: &RgbImage, size: u32) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    let (nw, nh) = (w.max(size), h.max(size));
    if nw - w >= w || nh - h >= h {
        return Err(Error::Shape(format!(
            "{w}x{h} image is too small to reflect-pad to {size}x{size}"
        )));
    }
    if (nw, nh) == (w, h) {
        return Ok(img.clone());
    }
    let (left, top) = (((nw - w) / 2) as i64, ((nh - h) / 2) as i64);
    Ok(RgbImage::from_fn(nw, nh, |x, y| {
        let sx = reflect(x as i64 - left, w as i64);
        let sy = reflect(y as i64 - top, h as i64);
        *img.get_pixel(sx, sy)
    }))
}

/// Seeded `size x size` crop; smaller images are reflect-padded first.
pub fn sample_crop(img: &RgbImage, size: u32, seed: u64) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w < MIN_CROP_SOURCE_SIDE || h < MIN_CROP_SOURCE_SIDE {
        return Err(Error::InputTooSmall {
            height: h as usize,
            width: w as usize,
            min: MIN_CROP_SOURCE_SIDE as usize,
            multiple: 1,
        });
    }
    let padded = reflect_pad_to(img, size)?;
    let (w, h) = padded.dimensions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(0..=w - size);
    let y0 = rng.gen_range(0..=h - size);
    Ok(image::imageops::crop_imm(&padded, x0, y0, size, size).to_image())
}

/// Central crop to the largest sides that are multiples of `multiple`.
pub fn center_crop_to_multiple(img: &RgbImage, multiple: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cw, ch) = (w - w % multiple, h - h % multiple);
    if (cw, ch) == (w, h) {
        return img.clone();
    }
    image::imageops::crop_imm(img, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image()
}
