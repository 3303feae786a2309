use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// 8-bit-range RGB image stored as `f32` in HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(dim_err!("{width}x{height} RGB image needs {} values, got {}", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Clamped-to-edge lookup.
    #[inline]
    pub fn pixel_clamped(&self, x: isize, y: isize) -> [f32; 3] {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixel(x, y)
    }

    /// CHW network input scaled to roughly `[-1, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = (px[c] - 127.5) / 128.0;
            }
        }
        out
    }

    /// Stacks images of equal size into a `[b, 3, h, w]` tensor.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
        let Some(first) = images.first() else {
            return Err(dim_err!("cannot batch zero images"));
        };
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(dim_err!("batch mixes {w}x{h} and {}x{} images", img.width, img.height));
            }
            data.extend(img.to_chw());
        }
        Tensor::new(&[images.len(), 3, h, w], data)
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn header_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            return Err(fmt_err(path, "truncated PPM header"));
        }
        let c = byte[0];
        if c == b'#' {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip).map_err(|e| Error::io(path, e))?;
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c as char);
        }
    }
}

fn read_header<R: BufRead>(r: &mut R, path: &Path) -> Result<(usize, usize)> {
    if header_token(r, path)? != "P6" {
        return Err(fmt_err(path, "not a binary PPM (P6)"));
    }
    let mut nums = [0usize; 3];
    for n in &mut nums {
        let t = header_token(r, path)?;
        *n = t.parse().map_err(|_| fmt_err(path, format!("bad PPM header field '{t}'")))?;
    }
    let [w, h, maxval] = nums;
    if maxval != 255 {
        return Err(fmt_err(path, format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(fmt_err(path, "empty PPM image"));
    }
    Ok((w, h))
}

/// Image width and height from the PPM header only.
pub fn read_ppm_size(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(f), path)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let (w, h) = read_header(&mut r, path)?;
    let mut buf = vec![0u8; w * h * 3];
    r.read_exact(&mut buf).map_err(|_| fmt_err(path, "truncated PPM pixel data"))?;
    Ok(Image {
        width: w,
        height: h,
        data: buf.into_iter().map(f32::from).collect(),
    })
}

/// Writes values rounded and clamped to `0..=255`.
pub fn write_ppm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
