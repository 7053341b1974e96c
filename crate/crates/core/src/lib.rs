//! Polysomnography to hypnodensity to narcolepsy score.
//!
//! The pipeline runs raw recordings through channel conditioning
//! ([`preprocess`]), one of two signal encodings ([`encoding`]), a small
//! three-branch stage classifier ([`neuralnet`]), hypnodensity post-processing
//! and agreement statistics ([`hypnodensity`]), a 481-value feature bank
//! ([`features`]) and finally a Gaussian-process classifier with HLA gating
//! ([`diagnosis`]).

pub mod diagnosis;
pub mod encoding;
pub mod error;
pub mod features;
pub mod hypnodensity;
pub mod neuralnet;
pub mod preprocess;
pub mod signal_io;

pub use error::{Error, Result};
pub use signal_io::{ChannelRole, HypnogramLabels, PolySignalSet, Stage};
