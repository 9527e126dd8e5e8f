//! File formats: FVEC matrices, JSON manifests, CKPT1 checkpoints.

mod checkpoint;
mod fvec;
mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CKPT_MAGIC};
pub use fvec::{decode_fvec, encode_fvec, read_fvec, read_fvec_shape, write_fvec, FVEC_MAGIC};
pub use manifest::{
    load_manifest, segment_rows, validate_manifest, ClassPrototypeEntry, Dataset, DatasetManifest,
    SegmentAnnotation, ValidatedManifest, VideoEntry,
};
