use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MFRE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Keyed fixed-dimension vectors. Keys are image paths as written in the
/// manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    keys: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(dim_err!("embedding dim must be positive"));
        }
        Ok(Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys.iter().zip(self.values.chunks_exact(self.dim)).map(|(k, v)| (k.as_str(), v))
    }

    pub fn push(&mut self, key: impl Into<String>, vector: &[f32]) -> Result<()> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(dim_err!("vector for '{key}' has {} values, set dim is {}", vector.len(), self.dim));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Set(format!("duplicate embedding key '{key}'")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4 + self.keys.len() * 24);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (k, v) in self.iter() {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated embedding file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != EMBEDDING_MAGIC {
            return Err(bad("bad magic, expected MFRE"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
        let version = u32_at(take(4)?);
        if version != EMBEDDING_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32_at(take(4)?) as usize;
        let count = u32_at(take(4)?) as usize;
        let mut set = Self::new(dim).map_err(|_| bad("zero embedding dim"))?;
        let mut v = vec![0f32; dim];
        for _ in 0..count {
            let klen = u32_at(take(4)?) as usize;
            let key = std::str::from_utf8(take(klen)?).map_err(|_| bad("key is not UTF-8"))?.to_string();
            for x in v.iter_mut() {
                let b = take(4)?;
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            set.push(key, &v).map_err(|e| bad(&e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

/// Joins the vectors of two sets key by key: `[a ‖ b]`, each part
/// L2-normalised first when `normalize_parts`.
pub fn concat_features(a: &EmbeddingSet, b: &EmbeddingSet, normalize_parts: bool) -> Result<EmbeddingSet> {
    let ka: HashSet<&str> = a.keys().iter().map(String::as_str).collect();
    let kb: HashSet<&str> = b.keys().iter().map(String::as_str).collect();
    if ka != kb {
        let mut only_a: Vec<&str> = ka.difference(&kb).copied().collect();
        let mut only_b: Vec<&str> = kb.difference(&ka).copied().collect();
        only_a.sort_unstable();
        only_b.sort_unstable();
        return Err(Error::Set(format!(
            "key sets differ: missing from second set {only_a:?}, missing from first set {only_b:?}"
        )));
    }
    let mut out = EmbeddingSet::new(a.dim() + b.dim())?;
    let mut buf = Vec::with_capacity(out.dim());
    for (key, va) in a.iter() {
        let vb = b.get(key).expect("key sets checked equal");
        buf.clear();
        if normalize_parts {
            buf.extend(l2_normalized(va));
            buf.extend(l2_normalized(vb));
        } else {
            buf.extend_from_slice(va);
            buf.extend_from_slice(vb);
        }
        out.push(key, &buf)?;
    }
    Ok(out)
}
