//! File formats: binary tensor checkpoints, run configuration files,
//! PGM/PPM image export and parsing, and dataset directories.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod image;

pub use checkpoint::{
    load_params, read_checkpoint, save_params, write_checkpoint, CheckpointEntry,
    CheckpointError,
};
pub use config::{ConfigFileError, RunConfig};
pub use dataset::{load_clip_frames, load_dataset, save_dataset, DatasetIoError};
pub use image::{read_pgm, read_ppm, write_overlay_ppm, write_pgm, write_ppm};
