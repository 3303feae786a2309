use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::load_manifest;
use crate::error::Result;
use crate::eval::{concat_features, extract_embeddings, EmbeddingSet, Extraction};
use crate::nn::Backbone;
use crate::tensor::{read_checkpoint, ParamStore};

/// Freshly initialised backbone for `cfg`.
pub fn build_backbone(cfg: &RunConfig) -> Result<(Backbone, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
    Ok((model, store))
}

/// Backbone for `cfg` with weights from `checkpoint`; tensors the backbone
/// does not use (the classifier) are ignored.
pub fn load_backbone(cfg: &RunConfig, checkpoint: &Path) -> Result<(Backbone, ParamStore<f32>)> {
    let (model, mut store) = build_backbone(cfg)?;
    store.load_named(&read_checkpoint::<f32>(checkpoint)?)?;
    Ok((model, store))
}

/// Embeds every record of `manifest` and writes the set to `out_file`.
pub fn extract(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out_file: &Path) -> Result<Extraction> {
    let (model, store) = load_backbone(cfg, checkpoint)?;
    let records = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let ex = extract_embeddings(&model, &store, &records, base, cfg.eval.batch_size)?;
    ex.set.write(out_file)?;
    Ok(ex)
}

/// Concatenates two embedding files into `out_file`.
pub fn concat_files(a: &Path, b: &Path, normalize_parts: bool, out_file: &Path) -> Result<EmbeddingSet> {
    let set = concat_features(&EmbeddingSet::read(a)?, &EmbeddingSet::read(b)?, normalize_parts)?;
    set.write(out_file)?;
    Ok(set)
}
