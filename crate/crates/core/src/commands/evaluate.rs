use std::collections::HashMap;
use std::path::Path;

use super::write_text;
use crate::config::RunConfig;
use crate::data::{load_manifest, load_pairs};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, identification_top1, EmbeddingSet, MetricReport};

#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub embeddings: &'a Path,
    pub pairs: &'a Path,
    /// Enrolled embeddings for top-1 identification of `embeddings`.
    pub gallery: Option<&'a Path>,
    /// Manifest giving the identity of every gallery and probe key.
    pub manifest: Option<&'a Path>,
}

pub fn identity_map(manifest: &Path) -> Result<HashMap<String, usize>> {
    Ok(load_manifest(manifest)?.into_iter().map(|r| (r.path, r.identity)).collect())
}

/// Scores the pair list and, with a gallery, identification accuracy. Writes
/// `report.json` and `report.txt` into `out_dir` when given.
pub fn evaluate(cfg: &RunConfig, inputs: EvalInputs<'_>, out_dir: Option<&Path>) -> Result<MetricReport> {
    let set = EmbeddingSet::read(inputs.embeddings)?;
    let pairs = load_pairs(inputs.pairs)?;
    let mut report = evaluate_pairs(&set, &pairs, &cfg.eval.far_targets, cfg.eval.primary_far)?;
    if let Some(g) = inputs.gallery {
        let manifest = inputs
            .manifest
            .ok_or_else(|| Error::Config("identification needs a manifest with identities".into()))?;
        let gallery = EmbeddingSet::read(g)?;
        report.top1 = Some(identification_top1(&gallery, &set, &identity_map(manifest)?)?);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("report.json"), &report.to_json()?)?;
        write_text(&dir.join("report.txt"), &report.to_text())?;
    }
    Ok(report)
}
