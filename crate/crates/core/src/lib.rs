//! Context-aware predictive coding (CAPC) for self-supervised learning on
//! WiFi channel state information.
//!
//! The crate covers the whole pipeline: CSI containers and segmentation
//! ([`csi`]), a paired uplink/downlink channel simulator ([`synth`]), the
//! augmentation suite ([`augment`]), the twin encoder/GRU model ([`model`]),
//! the hybrid temporal-prediction + cross-view loss ([`loss`]), LARS/Adam with
//! warmup-cosine schedules ([`optim`]), the pre-training loop ([`train`]),
//! downstream probes ([`eval`]) and diagnostics ([`diagnose`], [`sweep`]).

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod csi;
pub mod diagnose;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{CapcError, Result};
pub use scalar::Scalar;
