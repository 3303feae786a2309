//! Dataset handling: manifests, the masked-ratio sampler, synthetic mask
//! overlay, augmentation and five-point alignment.

mod align;
mod augment;
mod image;
mod manifest;
mod mask;
mod sampler;

pub use align::{align_face, estimate_similarity, warp_to_template, Similarity, ALIGNED_SIZE, TEMPLATE_112};
pub use augment::{augment, augment_with_trace, AugConfig, AugTrace, BlurKind};
pub use image::{read_ppm, read_ppm_size, write_ppm, Image};
pub use manifest::{
    load_manifest, load_manifest_with, load_pairs, write_manifest, write_pairs, LandmarkBounds, Landmarks,
    ManifestRecord, PairRecord, MANIFEST_HEADER, PAIRS_HEADER,
};
pub use mask::{apply_mask_overlay, MaskTemplate};
pub use sampler::{plan_epoch, SamplerConfig};
