//! Unsupervised anomaly detection by multi-scale feature restoration.
//!
//! The pipeline extracts multi-scale features from a frozen backbone,
//! masks them with crossed (complementary) masks, restores each masked
//! copy with a hybrid transformer network, and scores anomalies from the
//! discrepancy between original and restored features.

pub mod crossed_mask;
pub mod error;
pub mod feature_aggregator;
pub mod losses;
pub mod ops;
pub mod restoration_net;
#[doc(hidden)]
pub mod scalar_ref;

pub use error::{Error, Result};
