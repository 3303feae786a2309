use super::image::Image;
use crate::error::{Error, Result};

/// Side of the aligned face crop.
pub const ALIGNED_SIZE: usize = 112;

/// Canonical five-point template for 112×112 crops: left eye, right eye, nose
/// tip, left mouth corner, right mouth corner.
pub const TEMPLATE_112: [(f64, f64); 5] = [
    (38.2946, 51.6963),
    (73.5318, 51.5014),
    (56.0252, 71.7366),
    (41.5493, 92.3655),
    (70.7299, 92.2041),
];

/// `p ↦ [[a, -b], [b, a]]·p + (tx, ty)`: rotation, uniform scale and
/// translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn from_parts(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        }
    }

    /// Row-major 2×3 affine matrix.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }

    #[inline]
    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-12 || !det.is_finite() {
            return Err(Error::Geometry(format!("similarity {:?} is not invertible", self.matrix())));
        }
        let (a, b) = (self.a / det, -self.b / det);
        Ok(Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Similarity) -> Self {
        let (tx, ty) = self.apply((other.tx, other.ty));
        Self {
            a: self.a * other.a - self.b * other.b,
            b: self.b * other.a + self.a * other.b,
            tx,
            ty,
        }
    }
}

/// Least-squares similarity taking `src[i]` to `dst[i]` (closed form, no
/// reflection).
pub fn estimate_similarity(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(Error::Geometry(format!(
            "need at least two corresponding points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mean = |pts: &[(f64, f64)]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
        (sx / n, sy / n)
    };
    let (msx, msy) = mean(src);
    let (mdx, mdy) = mean(dst);
    let (mut dot, mut cross, mut var) = (0.0, 0.0, 0.0);
    for (&(sx, sy), &(dx, dy)) in src.iter().zip(dst) {
        let (sx, sy, dx, dy) = (sx - msx, sy - msy, dx - mdx, dy - mdy);
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
        var += sx * sx + sy * sy;
    }
    let spread = src.iter().map(|&(x, y)| x.abs().max(y.abs())).fold(1.0, f64::max);
    if var <= 1e-12 * spread * spread {
        return Err(Error::Geometry("source points are coincident".into()));
    }
    let (a, b) = (dot / var, cross / var);
    Ok(Similarity {
        a,
        b,
        tx: mdx - (a * msx - b * msy),
        ty: mdy - (b * msx + a * msy),
    })
}

fn bilinear(img: &Image, x: f64, y: f64) -> [f32; 3] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut out = [0.0f64; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            if w == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            if px < 0 || py < 0 || px >= img.width as isize || py >= img.height as isize {
                continue;
            }
            let p = img.pixel(px as usize, py as usize);
            for c in 0..3 {
                out[c] += w * p[c] as f64;
            }
        }
    }
    [out[0] as f32, out[1] as f32, out[2] as f32]
}

/// Resamples `image` into the 112×112 template frame, where `transform` maps
/// image coordinates to template coordinates. Samples falling outside the
/// source are black.
pub fn warp_to_template(image: &Image, transform: &Similarity) -> Result<Image> {
    let inv = transform.inverse()?;
    let mut out = Image::new(ALIGNED_SIZE, ALIGNED_SIZE);
    for v in 0..ALIGNED_SIZE {
        for u in 0..ALIGNED_SIZE {
            let (x, y) = inv.apply((u as f64, v as f64));
            out.set_pixel(u, v, bilinear(image, x, y));
        }
    }
    Ok(out)
}

/// Aligns a face to the 112×112 template using its five landmarks.
pub fn align_face(image: &Image, landmarks: &[(f64, f64); 5]) -> Result<Image> {
    let t = estimate_similarity(landmarks, &TEMPLATE_112)?;
    warp_to_template(image, &t)
}
