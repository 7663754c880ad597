//! On-disk formats: MNIST IDX, aperture files, checkpoints, run configs.

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod idx;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{load_config, RunConfig};
pub use formats::{load_ca, save_ca, CaFormat};
pub use idx::{load_mnist_dir, load_mnist_idx};
