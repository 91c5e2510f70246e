//! Volume ingestion, augmentation and the 3D windowed encoder.

pub mod augment;
pub mod preprocess;
pub mod swin;
pub mod volume;

pub use augment::{extract_subvolume, flip_axis, AugmentConfig};
pub use preprocess::{
    filter_record, minmax_normalize, resample_depth, resample_to_volume, z_sample_indices,
    FilterDecision, PrepConfig, RejectReason, DEFAULT_SIDE, MIN_SLICES,
};
pub use swin::{SwinEncoder3d, VisionConfig, VisionPyramid};
pub use volume::{
    list_volume_dirs, read_exclusion_list, read_volume_dir, write_volume_dir, Volume, VolumeMeta,
    VolumeRecord,
};
