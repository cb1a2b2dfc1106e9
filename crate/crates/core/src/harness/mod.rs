//! Data files, toy corpus, checkpoints, run configuration and image I/O.

mod checkpoint;
mod config;
mod imageio;
mod records;
mod toy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Model, MAGIC, VERSION};
pub use config::{RunConfig, TaskConfig};
pub use imageio::{grid_image, overlay_strokes, read_image, write_image, write_pgm, write_png};
pub use records::{export_drawings, ingest_drawings, parse_drawings, DrawingRecord, Ingest};
pub use toy::{synthesize_toy_corpus, ToyCorpus, ToyDrawing, TOY_RENDER};

/// Version tag carried by every JSON document the harness writes.
pub const SCHEMA: &str = "gns/1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Independent generator for a named purpose under one run seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(crc32fast::hash(name.as_bytes()) as u64);
    rng
}
