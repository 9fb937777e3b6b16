//! On-disk formats: single-file NIfTI-1 volumes and model checkpoints.

mod checkpoint;
mod nifti;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, TemplateGrid, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use nifti::{
    read_labels, read_nifti, read_volume, write_labels, write_nifti, write_nifti_with_header, NiftiData, NiftiDatatype,
    NiftiHeader,
};
