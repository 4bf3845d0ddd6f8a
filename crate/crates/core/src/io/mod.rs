//! On-disk formats: checkpoints, dataset files, PNG images and the flat
//! training config file. All multi-byte integers are little-endian.

mod binary;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod image;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{apply_config, parse_config};
pub use dataset::{read_dataset, write_dataset, DatasetHeader, DatasetReader, DatasetWriter, DATASET_VERSION};
pub use image::{decode_png, encode_png, image_grid, read_png, write_png};
