//! On-disk formats: tensor payloads with JSON sidecars, cohort manifests,
//! mask PNGs, NIfTI-1 volumes, checkpoints, and LEDD CSV import.
//!
//! All float payloads are little-endian `f32`; metrics and headers that need
//! more precision stay in JSON as `f64`.

mod checkpoint;
mod cohort;
mod nifti;
mod png;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointBuilder, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cohort::{
    load_cohort, load_subject, read_ledd_csv, save_cohort, CohortManifest, SubjectEntry,
};
pub use nifti::{read_nifti, write_nifti, NiftiVolume};
pub use png::{read_zone_png, write_heatmap_png, write_triptych_png, write_zone_png, VIRIDIS_LUT};
pub use tensor::{read_tensor_f32, write_tensor_f32, TensorMeta};

/// Fresh scratch directory for IO tests.
#[cfg(test)]
pub(crate) fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "datforecast-test-{}-{}",
        std::process::id(),
        rand::random::<u64>()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
