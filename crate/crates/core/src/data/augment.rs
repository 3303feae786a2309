use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::Landmarks;
use crate::error::{param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub p_hflip: f64,
    pub p_blur: f64,
    pub p_rgb_shift: f64,
    pub p_compress: f64,
    /// Largest per-channel additive offset for the RGB shift.
    pub rgb_shift_max: f32,
    /// Pad-then-crop margin in pixels; 0 disables random cropping.
    pub crop_pad: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_blur: 0.05,
            p_rgb_shift: 0.05,
            p_compress: 0.05,
            rgb_shift_max: 20.0,
            crop_pad: 4,
        }
    }
}

impl AugConfig {
    /// Every augmentation off.
    pub fn none() -> Self {
        Self {
            p_hflip: 0.0,
            p_blur: 0.0,
            p_rgb_shift: 0.0,
            p_compress: 0.0,
            rgb_shift_max: 0.0,
            crop_pad: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_blur", self.p_blur),
            ("p_rgb_shift", self.p_rgb_shift),
            ("p_compress", self.p_compress),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(param_err!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.rgb_shift_max >= 0.0) {
            return Err(param_err!("rgb_shift_max must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlurKind {
    Box,
    Gaussian,
}

/// Which augmentations fired for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugTrace {
    pub hflip: bool,
    pub blur: Option<BlurKind>,
    pub rgb_shift: Option<[f32; 3]>,
    pub compress: bool,
    pub crop_offset: Option<(usize, usize)>,
}

/// Mirrors the image; landmark left/right identities swap.
pub fn hflip(image: &Image, landmarks: &Landmarks) -> (Image, Landmarks) {
    let mut out = image.clone();
    let w = image.width;
    for y in 0..image.height {
        for x in 0..w {
            out.set_pixel(x, y, image.pixel(w - 1 - x, y));
        }
    }
    let m = |(x, y): (f64, f64)| ((w - 1) as f64 - x, y);
    let l = landmarks;
    (out, [m(l[1]), m(l[0]), m(l[2]), m(l[4]), m(l[3])])
}

fn blur(image: &Image, kind: BlurKind) -> Image {
    let k: [f32; 3] = match kind {
        BlurKind::Box => [1.0 / 3.0; 3],
        BlurKind::Gaussian => [0.25, 0.5, 0.25],
    };
    let pass = |src: &Image, dx: isize, dy: isize| {
        let mut out = src.clone();
        for y in 0..src.height {
            for x in 0..src.width {
                let mut acc = [0.0f32; 3];
                for (t, &kw) in k.iter().enumerate() {
                    let o = t as isize - 1;
                    let p = src.pixel_clamped(x as isize + o * dx, y as isize + o * dy);
                    for c in 0..3 {
                        acc[c] += kw * p[c];
                    }
                }
                out.set_pixel(x, y, acc);
            }
        }
        out
    };
    pass(&pass(image, 1, 0), 0, 1)
}

fn rgb_shift(image: &mut Image, offset: [f32; 3]) {
    for px in image.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] + offset[c]).clamp(0.0, 255.0);
        }
    }
}

/// 2× box downscale followed by nearest-neighbour upscale.
fn compress(image: &Image) -> Image {
    let (sw, sh) = (image.width.div_ceil(2), image.height.div_ceil(2));
    let mut small = Image::new(sw, sh);
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = [0.0f32; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = image.pixel_clamped((2 * x + dx) as isize, (2 * y + dy) as isize);
                for c in 0..3 {
                    acc[c] += 0.25 * p[c];
                }
            }
            small.set_pixel(x, y, acc);
        }
    }
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            out.set_pixel(x, y, small.pixel(x / 2, y / 2));
        }
    }
    out
}

/// Pads by `pad` black pixels and crops back to the original size at
/// `(ox, oy)` in the padded frame.
fn pad_crop(image: &Image, landmarks: &Landmarks, pad: usize, (ox, oy): (usize, usize)) -> (Image, Landmarks) {
    let mut out = Image::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let sx = (x + ox) as isize - pad as isize;
            let sy = (y + oy) as isize - pad as isize;
            if sx >= 0 && sy >= 0 && (sx as usize) < image.width && (sy as usize) < image.height {
                out.set_pixel(x, y, image.pixel(sx as usize, sy as usize));
            }
        }
    }
    let (dx, dy) = (pad as f64 - ox as f64, pad as f64 - oy as f64);
    (out, landmarks.map(|(x, y)| (x + dx, y + dy)))
}

pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    landmarks: &Landmarks,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(Image, Landmarks)> {
    augment_with_trace(image, landmarks, cfg, rng).map(|(i, l, _)| (i, l))
}

/// Applies, in order: flip, blur, RGB shift, compression, pad-crop. Each
/// fires independently with its configured probability.
pub fn augment_with_trace<R: Rng + ?Sized>(
    image: &Image,
    landmarks: &Landmarks,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(Image, Landmarks, AugTrace)> {
    cfg.validate()?;
    let mut trace = AugTrace::default();
    let mut img = image.clone();
    let mut lm = *landmarks;
    if rng.random::<f64>() < cfg.p_hflip {
        (img, lm) = hflip(&img, &lm);
        trace.hflip = true;
    }
    if rng.random::<f64>() < cfg.p_blur {
        let kind = if rng.random::<bool>() { BlurKind::Gaussian } else { BlurKind::Box };
        img = blur(&img, kind);
        trace.blur = Some(kind);
    }
    if rng.random::<f64>() < cfg.p_rgb_shift {
        let m = cfg.rgb_shift_max;
        let offset = [0; 3].map(|_| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 });
        rgb_shift(&mut img, offset);
        trace.rgb_shift = Some(offset);
    }
    if rng.random::<f64>() < cfg.p_compress {
        img = compress(&img);
        trace.compress = true;
    }
    if cfg.crop_pad > 0 {
        let p = cfg.crop_pad;
        let off = (rng.random_range(0..=2 * p), rng.random_range(0..=2 * p));
        (img, lm) = pad_crop(&img, &lm, p, off);
        trace.crop_offset = Some(off);
    }
    Ok((img, lm, trace))
}
