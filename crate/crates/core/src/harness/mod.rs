//! Dataset ingestion, training loops, plateau scheduling, checkpointing,
//! evaluation reports, and the synthetic demo data generator.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod grid;
pub mod manifest;
pub mod schedule;
pub mod toy;
pub mod train;

pub use checkpoint::{file_sha256, Checkpoint};
pub use config::{Alternation, Config, Stage};
pub use eval::{evaluate, EvalReport, PSNR_CAP};
pub use grid::IndexGrid;
pub use manifest::{Manifest, ManifestRecord};
pub use schedule::PlateauScheduler;
pub use train::{load_augvae_ml, load_augvae_sl, load_biart, train_augvae, train_biart, TrainReport};
