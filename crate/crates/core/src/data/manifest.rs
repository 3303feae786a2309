use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::image::read_ppm_size;
use crate::error::{Error, Result};

/// Left eye, right eye, nose tip, left mouth corner, right mouth corner.
pub type Landmarks = [(f64, f64); 5];

pub const MANIFEST_HEADER: [&str; 13] = [
    "path", "identity", "masked", "lx1", "ly1", "lx2", "ly2", "lx3", "ly3", "lx4", "ly4", "lx5", "ly5",
];

pub const PAIRS_HEADER: [&str; 4] = ["path_a", "path_b", "same_identity", "masked_pair"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: String,
    pub identity: usize,
    pub masked: bool,
    pub landmarks: Landmarks,
}

impl ManifestRecord {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        base.join(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub path_a: String,
    pub path_b: String,
    pub same_identity: bool,
    pub masked_pair: bool,
}

/// How landmark coordinates are bounds-checked while loading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LandmarkBounds {
    /// Read each image's PPM header.
    FromImage,
    /// All images share this `(width, height)`.
    Fixed(usize, usize),
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_flag(path: &Path, line: u64, field: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(path, line, format!("{field} must be 0 or 1, got '{other}'"))),
    }
}

fn reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}', got '{}'", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(rdr)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    load_manifest_with(path, LandmarkBounds::FromImage)
}

/// Parses and validates a manifest: landmark coordinates must lie inside the
/// image and identity labels must cover `0..n` without gaps.
pub fn load_manifest_with(path: impl AsRef<Path>, bounds: LandmarkBounds) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = reader(path, &MANIFEST_HEADER)?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let rec_path = row[0].to_string();
        if rec_path.is_empty() {
            return Err(parse_err(path, line, "empty image path"));
        }
        let identity = row[1]
            .parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("identity must be a non-negative integer, got '{}'", &row[1])))?;
        let masked = parse_flag(path, line, "masked", &row[2])?;
        let mut landmarks = [(0.0, 0.0); 5];
        for (k, lm) in landmarks.iter_mut().enumerate() {
            let coord = |j: usize| -> Result<f64> {
                let s = &row[3 + 2 * k + j];
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("bad landmark {} '{s}'", MANIFEST_HEADER[3 + 2 * k + j])))
            };
            *lm = (coord(0)?, coord(1)?);
        }
        let (w, h) = match bounds {
            LandmarkBounds::Fixed(w, h) => (w, h),
            LandmarkBounds::FromImage => {
                let img = base.join(&rec_path);
                read_ppm_size(&img).map_err(|e| {
                    Error::Validation(format!("{}:{line}: cannot read image size: {e}", path.display()))
                })?
            }
        };
        for (k, &(x, y)) in landmarks.iter().enumerate() {
            if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
                return Err(Error::Validation(format!(
                    "{}:{line}: landmark {} ({x}, {y}) outside {w}x{h} image",
                    path.display(),
                    k + 1
                )));
            }
        }
        records.push(ManifestRecord {
            path: rec_path,
            identity,
            masked,
            landmarks,
        });
    }
    let ids: BTreeSet<usize> = records.iter().map(|r| r.identity).collect();
    if let Some(&max) = ids.last() {
        if let Some(gap) = (0..max).find(|i| !ids.contains(i)) {
            return Err(Error::Validation(format!(
                "{}: identity labels are not contiguous, label {gap} is missing (max {max})",
                path.display()
            )));
        }
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let mut row = vec![r.path.clone(), r.identity.to_string(), u8::from(r.masked).to_string()];
        for &(x, y) in &r.landmarks {
            row.push(x.to_string());
            row.push(y.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let mut rdr = reader(path, &PAIRS_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        out.push(PairRecord {
            path_a: row[0].to_string(),
            path_b: row[1].to_string(),
            same_identity: parse_flag(path, line, "same_identity", &row[2])?,
            masked_pair: parse_flag(path, line, "masked_pair", &row[3])?,
        });
    }
    Ok(out)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PairRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PAIRS_HEADER)?;
    for p in pairs {
        w.write_record([
            p.path_a.as_str(),
            p.path_b.as_str(),
            if p.same_identity { "1" } else { "0" },
            if p.masked_pair { "1" } else { "0" },
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
