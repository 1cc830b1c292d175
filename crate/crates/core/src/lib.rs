//! Early detection of malicious UTXO addresses.
//!
//! The pipeline traces asset-transfer paths around each address, builds
//! hourly feature timelines, selects and expands features with a
//! decision-tree loop, segments timelines into status/action sequences, and
//! fuses boosted-tree predictions with a survival-based intention network.

pub mod cart;
pub mod chain;
pub mod error;
pub mod features;
pub mod gbt;
pub mod intention;
pub mod metrics;
pub mod paths;
pub mod pipeline;
pub mod sapm;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
