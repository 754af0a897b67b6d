//! Minimal dense-tensor numerical core with reverse-mode differentiation.
//!
//! Everything is 64-bit. An [`ExprGraph`] is a tape of eagerly-evaluated
//! operation nodes; [`ExprGraph::backward`] runs reverse-mode accumulation
//! from a scalar output, and [`ExprGraph::reforward`] re-evaluates the whole
//! tape after leaf values change (used by the finite-difference checker).

mod checkpoint;
mod expr;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC,
};
pub use expr::{
    finite_difference_check, lstm_cell, ExprGraph, Gradients, NodeId, NumError, Op,
    LOG_CLAMP,
};
pub use tensor::Tensor;
