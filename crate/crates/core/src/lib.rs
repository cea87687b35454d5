//! Analysis pipeline for pulsed two-station Bell experiments.
//!
//! The crate covers the full chain from raw converter time tags to the
//! slot-resolved evidence tables:
//!
//! * [`ingest`] reads `.btt` time-tag files and JSON run manifests,
//! * [`sync`] recovers a shared pulse numbering from the modulated trigger
//!   trains and positions detections inside their pulse,
//! * [`coincidence`] pairs Alice/Bob detections and tallies joint outcomes,
//! * [`bell`] turns counts into correlation parameters, time-resolved
//!   `S_CHSH` and the min-entropy certificate,
//! * [`randomness`] estimates minimum entropy and Lempel-Ziv complexity of
//!   the per-slot outcome series,
//! * [`stats`] runs the t-test / slope comparison battery,
//! * [`simulator`] produces synthetic experiments with known ground truth,
//! * [`pipeline`] composes the stages and writes the report artifacts.

pub mod bell;
pub mod coincidence;
pub mod error;
pub mod format;
pub mod ingest;
pub mod pipeline;
pub mod randomness;
pub mod simulator;
pub mod stats;
pub mod sync;
pub mod types;

pub use error::{Error, ErrorKind, Result};
pub use types::{
    Bit, Channel, CoincidenceRecord, DetectionEvent, SettingKey, SettingPair, SlotConfig,
    SlotSeries, Station, TimeTagRecord, TimeTagStream,
};
