//! Point-voxel graph neural network for segment classification.
//!
//! An input projection, `blocks - 1` residual Conv-Norm blocks
//! (`ReLU(GraphNorm(MeanSAGE(H))) + H`) and a linear head. Every layer has
//! a hand-written backward pass; training uses Adam over node-weighted
//! mini-batches of whole graphs with per-step DropEdge.

pub mod loss;
pub mod model;
pub mod ops;
pub mod train;

pub use loss::{ncr_loss, softmax_ce, total_loss};
pub use model::{
    argmax_rows, backward, backward_from_logits, conv_norm_block, forward, forward_cached, predict,
    BlockParams, DenseMatrix, FeatureMode, GraphInput, ModelShape, PvgnnParams,
};
pub use ops::{graph_norm, graph_norm_backward, mean_sage, mean_sage_backward, Adjacency, GN_EPS};
pub use train::{
    adam_step, batch_gradient, dropedge, history_jsonl, node_accuracy, train, AdamState,
    EpochRecord, TrainConfig,
};
