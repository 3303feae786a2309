use rand::Rng;
use serde::{Deserialize, Serialize};

use super::align::{estimate_similarity, TEMPLATE_112};
use super::image::Image;
use super::manifest::Landmarks;
use crate::error::{param_err, Error, Result};

/// Lower-face mask shape in the 112×112 template frame, drawn below the eyes
/// and covering the nose tip and both mouth corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskTemplate {
    pub polygon: Vec<(f64, f64)>,
    pub fill: [f32; 3],
    pub opacity: f32,
    /// Uniform per-vertex jitter in template pixels.
    pub shape_jitter: f64,
    /// Uniform per-channel jitter of the fill colour.
    pub color_jitter: f32,
}

/// Highest point (smallest y) a jittered vertex may reach in the template.
const MIN_TOP_Y: f64 = 58.0;

impl Default for MaskTemplate {
    fn default() -> Self {
        Self {
            polygon: vec![
                (24.0, 64.0),
                (56.0, 60.0),
                (88.0, 64.0),
                (94.0, 90.0),
                (80.0, 110.0),
                (56.0, 116.0),
                (32.0, 110.0),
                (18.0, 90.0),
            ],
            fill: [200.0, 215.0, 230.0],
            opacity: 1.0,
            shape_jitter: 2.0,
            color_jitter: 40.0,
        }
    }
}

impl MaskTemplate {
    /// Fixed shape and colour: no per-sample jitter.
    pub fn solid(fill: [f32; 3], opacity: f32) -> Self {
        Self {
            fill,
            opacity,
            shape_jitter: 0.0,
            color_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.polygon.len() < 3 {
            return Err(param_err!("mask polygon needs at least 3 vertices"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(param_err!("mask opacity must be in [0, 1], got {}", self.opacity));
        }
        if self.shape_jitter < 0.0 || self.color_jitter < 0.0 {
            return Err(param_err!("mask jitter must be non-negative"));
        }
        Ok(())
    }

    fn jittered<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<(f64, f64)>, [f32; 3]) {
        let mut poly = self.polygon.clone();
        if self.shape_jitter > 0.0 {
            let j = self.shape_jitter;
            for p in &mut poly {
                p.0 += rng.random_range(-j..=j);
                p.1 = (p.1 + rng.random_range(-j..=j)).max(MIN_TOP_Y);
            }
        }
        let mut fill = self.fill;
        if self.color_jitter > 0.0 {
            let j = self.color_jitter;
            for c in &mut fill {
                *c = (*c + rng.random_range(-j..=j)).clamp(0.0, 255.0);
            }
        }
        (poly, fill)
    }
}

fn inside(poly: &[(f64, f64)], (x, y): (f64, f64)) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Draws the template polygon onto `image`, mapped through the similarity
/// that takes the canonical template points onto `landmarks`. Only pixels
/// whose centres fall inside the mapped polygon change.
pub fn apply_mask_overlay<R: Rng + ?Sized>(
    image: &Image,
    landmarks: &Landmarks,
    template: &MaskTemplate,
    rng: &mut R,
) -> Result<Image> {
    template.validate()?;
    let [le, re, nose, ..] = *landmarks;
    let eye = (re.0 - le.0, re.1 - le.1);
    let to_nose = (nose.0 - le.0, nose.1 - le.1);
    let cross = eye.0 * to_nose.1 - eye.1 * to_nose.0;
    let eye_len2 = eye.0 * eye.0 + eye.1 * eye.1;
    if eye_len2 < 1e-9 || cross.abs() < 1e-3 * eye_len2 {
        return Err(Error::Geometry(format!(
            "eye and nose landmarks {le:?}, {re:?}, {nose:?} are collinear"
        )));
    }
    let frame = estimate_similarity(&TEMPLATE_112, landmarks)?;
    let (poly, fill) = template.jittered(rng);
    let mapped: Vec<(f64, f64)> = poly.iter().map(|&p| frame.apply(p)).collect();
    let mut out = image.clone();
    if image.width == 0 || image.height == 0 {
        return Ok(out);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &mapped {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let clip = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64) as usize;
    let (xa, xb) = (clip(x0.ceil(), image.width), clip(x1.floor(), image.width));
    let (ya, yb) = (clip(y0.ceil(), image.height), clip(y1.floor(), image.height));
    let a = template.opacity;
    for y in ya..=yb {
        for x in xa..=xb {
            if inside(&mapped, (x as f64, y as f64)) {
                let p = image.pixel(x, y);
                let blended = [0, 1, 2].map(|c| (1.0 - a) * p[c] + a * fill[c]);
                out.set_pixel(x, y, blended);
            }
        }
    }
    Ok(out)
}
