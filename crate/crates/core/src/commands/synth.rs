use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{mix_seed, prepare_out_dir};
use crate::config::SynthConfig;
use crate::data::{
    apply_mask_overlay, write_manifest, write_pairs, write_ppm, Image, Landmarks, ManifestRecord, MaskTemplate,
    PairRecord, Similarity, ALIGNED_SIZE, TEMPLATE_112,
};
use crate::error::{Error, Result};

/// Procedural appearance of one synthetic identity, defined in the template
/// frame.
#[derive(Debug, Clone)]
struct Identity {
    skin: [f64; 3],
    blobs: Vec<Blob>,
    gratings: Vec<Grating>,
    eye_radius: f64,
    iris: [f64; 3],
    mouth: [f64; 3],
}

#[derive(Debug, Clone)]
struct Blob {
    centre: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone)]
struct Grating {
    freq: f64,
    angle: f64,
    phase: f64,
    amp: [f64; 3],
}

fn rand_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

impl Identity {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut blobs = Vec::new();
        for k in 0..6 {
            // Half of the blobs sit above the mask line so masked faces stay
            // identifiable.
            let y = if k % 2 == 0 { rng.random_range(18.0..50.0) } else { rng.random_range(20.0..110.0) };
            blobs.push(Blob {
                centre: (rng.random_range(20.0..92.0), y),
                radius: rng.random_range(5.0..12.0),
                color: rand_color(rng, -90.0, 90.0),
            });
        }
        let gratings = (0..2)
            .map(|_| Grating {
                freq: rng.random_range(0.08..0.3),
                angle: rng.random_range(0.0..PI),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rand_color(rng, -35.0, 35.0),
            })
            .collect();
        Self {
            skin: rand_color(rng, 90.0, 210.0),
            blobs,
            gratings,
            eye_radius: rng.random_range(3.0..5.5),
            iris: rand_color(rng, 10.0, 120.0),
            mouth: rand_color(rng, 60.0, 200.0),
        }
    }

    /// Colour at template coordinate `(x, y)`, or `None` off the face.
    fn shade(&self, (x, y): (f64, f64)) -> Option<[f64; 3]> {
        let (ex, ey) = ((x - 56.0) / 42.0, (y - 66.0) / 56.0);
        if ex * ex + ey * ey > 1.0 {
            return None;
        }
        let mut c = self.skin;
        for b in &self.blobs {
            let d2 = (x - b.centre.0).powi(2) + (y - b.centre.1).powi(2);
            let w = (-d2 / (2.0 * b.radius * b.radius)).exp();
            for i in 0..3 {
                c[i] += w * b.color[i];
            }
        }
        for g in &self.gratings {
            let s = (g.freq * (x * g.angle.cos() + y * g.angle.sin()) + g.phase).sin();
            for i in 0..3 {
                c[i] += s * g.amp[i];
            }
        }
        for &(lx, ly) in &TEMPLATE_112[..2] {
            if (x - lx).powi(2) + (y - ly).powi(2) <= self.eye_radius * self.eye_radius {
                c = self.iris;
            }
        }
        let (ml, mr) = (TEMPLATE_112[3], TEMPLATE_112[4]);
        if x >= ml.0 && x <= mr.0 && (y - (ml.1 + (mr.1 - ml.1) * (x - ml.0) / (mr.0 - ml.0))).abs() <= 1.5 {
            c = self.mouth;
        }
        Some(c)
    }
}

/// Renders one image of an identity under a random pose, illumination and
/// noise. Returns the image and its landmarks in image coordinates.
fn render(id: &Identity, seed: u64) -> (Image, Landmarks) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = Similarity::from_parts(
        rng.random_range(0.92..1.08),
        rng.random_range(-8.0f64..8.0).to_radians(),
        0.0,
        0.0,
    );
    // Rotate and scale about the template centre, then shift.
    let centre = (56.0, 62.0);
    let (cx, cy) = pose.apply(centre);
    let pose = Similarity {
        tx: centre.0 - cx + rng.random_range(-4.0..4.0),
        ty: centre.1 - cy + rng.random_range(-4.0..4.0),
        ..pose
    };
    let inv = pose.inverse().expect("pose scale is positive");
    let gain = rng.random_range(0.85..1.15);
    let offset = rng.random_range(-15.0..15.0);
    let background = rand_color(&mut rng, 0.0, 80.0);
    let noise = Normal::new(0.0, 4.0).unwrap();
    let mut img = Image::new(ALIGNED_SIZE, ALIGNED_SIZE);
    for y in 0..ALIGNED_SIZE {
        for x in 0..ALIGNED_SIZE {
            let q = inv.apply((x as f64, y as f64));
            let base = id.shade(q).unwrap_or(background);
            let px = [0, 1, 2].map(|c| (gain * base[c] + offset + noise.sample(&mut rng)).clamp(0.0, 255.0) as f32);
            img.set_pixel(x, y, px);
        }
    }
    let landmarks = TEMPLATE_112.map(|p| {
        let (x, y) = pose.apply(p);
        (x + rng.random_range(-0.5..0.5), y + rng.random_range(-0.5..0.5))
    });
    (img, landmarks)
}

/// Deterministic face of identity `identity` for a dataset seed, rendered at
/// image index `index`.
pub fn render_identity_face(seed: u64, identity: usize, index: usize) -> (Image, Landmarks) {
    let id = Identity::sample(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1, identity as u64])));
    render(&id, mix_seed(&[seed, 2, identity as u64, index as u64]))
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub train: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
    pub pairs: Vec<PairRecord>,
}

/// Writes a synthetic dataset: `images/*.ppm`, `manifest.csv` (all records),
/// `train.csv`, `test.csv` (last `test_per_identity` images of each identity)
/// and `pairs.csv` (every pair of test images).
pub fn synth_data(cfg: &SynthConfig, seed: u64, out_dir: &Path, force: bool) -> Result<SynthSummary> {
    if cfg.identities == 0 || cfg.images_per_identity == 0 || cfg.test_per_identity >= cfg.images_per_identity {
        return Err(Error::Config(
            "synthetic data needs identities > 0 and test_per_identity < images_per_identity".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.masked_fraction) {
        return Err(Error::Config(format!("masked_fraction must be in [0, 1], got {}", cfg.masked_fraction)));
    }
    prepare_out_dir(out_dir, force)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let total = cfg.identities * cfg.images_per_identity;
    let masked_count = (cfg.masked_fraction * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3])));
    let mut masked = vec![false; total];
    for &i in &order[..masked_count] {
        masked[i] = true;
    }

    let template = MaskTemplate::default();
    let records: Vec<ManifestRecord> = (0..total)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let (identity, index) = (i / cfg.images_per_identity, i % cfg.images_per_identity);
            let (mut img, landmarks) = render_identity_face(seed, identity, index);
            if masked[i] {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 4, i as u64]));
                img = apply_mask_overlay(&img, &landmarks, &template, &mut rng)?;
            }
            let rel = format!("images/id{identity:03}_{index:03}.ppm");
            write_ppm(out_dir.join(&rel), &img)?;
            Ok(ManifestRecord {
                path: rel,
                identity,
                masked: masked[i],
                landmarks,
            })
        })
        .collect::<Result<_>>()?;

    let first_test = cfg.images_per_identity - cfg.test_per_identity;
    let (test, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| i % cfg.images_per_identity >= first_test);
    let train: Vec<ManifestRecord> = train.into_iter().map(|(_, r)| r).collect();
    let test: Vec<ManifestRecord> = test.into_iter().map(|(_, r)| r).collect();
    let mut pairs = Vec::new();
    for (i, a) in test.iter().enumerate() {
        for b in &test[i + 1..] {
            pairs.push(PairRecord {
                path_a: a.path.clone(),
                path_b: b.path.clone(),
                same_identity: a.identity == b.identity,
                masked_pair: a.masked || b.masked,
            });
        }
    }
    write_manifest(out_dir.join("manifest.csv"), &records)?;
    write_manifest(out_dir.join("train.csv"), &train)?;
    write_manifest(out_dir.join("test.csv"), &test)?;
    write_pairs(out_dir.join("pairs.csv"), &pairs)?;
    Ok(SynthSummary {
        dir: out_dir.to_path_buf(),
        records,
        train,
        test,
        pairs,
    })
}
