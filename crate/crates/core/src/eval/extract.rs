use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use super::embeddings::EmbeddingSet;
use crate::data::{align_face, read_ppm, Image, ManifestRecord};
use crate::error::Result;
use crate::nn::Backbone;
use crate::tensor::ParamStore;

/// Embeddings plus the records that could not be processed.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub set: EmbeddingSet,
    /// `(key, reason)` for every skipped record.
    pub failures: Vec<(String, String)>,
}

/// Eval-mode embeddings for every distinct manifest path. Images are aligned
/// to the template before the forward pass; unreadable images are reported
/// in `failures` and skipped.
pub fn extract_embeddings(
    model: &Backbone,
    store: &ParamStore<f32>,
    records: &[ManifestRecord],
    base_dir: &Path,
    batch_size: usize,
) -> Result<Extraction> {
    let mut seen = HashSet::new();
    let unique: Vec<&ManifestRecord> = records.iter().filter(|r| seen.insert(r.path.as_str())).collect();
    let prepared: Vec<Result<Image>> = unique
        .par_iter()
        .map(|r| {
            let img = read_ppm(r.resolve(base_dir))?;
            align_face(&img, &r.landmarks)
        })
        .collect();
    let mut set = EmbeddingSet::new(model.config.embedding_dim)?;
    let mut failures = Vec::new();
    let mut ok: Vec<(&str, Image)> = Vec::new();
    for (r, p) in unique.iter().zip(prepared) {
        match p {
            Ok(img) => ok.push((r.path.as_str(), img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.path);
                failures.push((r.path.clone(), e.to_string()));
            }
        }
    }
    for chunk in ok.chunks(batch_size.max(1)) {
        let imgs: Vec<&Image> = chunk.iter().map(|(_, i)| i).collect();
        let emb = model.embed(store, Image::batch_tensor(&imgs)?)?;
        let dim = set.dim();
        for ((key, _), v) in chunk.iter().zip(emb.data().chunks_exact(dim)) {
            set.push(*key, v)?;
        }
    }
    Ok(Extraction { set, failures })
}
