//! Airway tree analysis: hard-region-aware segmentation losses, skeleton to
//! graph construction, point/voxel node features, and a residual
//! mean-aggregation graph network with hand-written gradients.

pub mod ahr;
pub mod brongraph;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pvgnn;
pub mod skeleton;
pub mod synthgen;
pub mod volgrid;

pub use error::{Error, Result};
