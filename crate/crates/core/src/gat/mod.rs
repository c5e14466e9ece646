//! Relation-aware graph attention over a pruned element graph, with a
//! hand-written backward pass and an RAdam trainer.

mod gradcheck;
mod linalg;
mod model;
mod params;
mod reason;
pub mod synth;
mod train;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_GRAD_SAMPLES, GRAD_FLOOR};
pub use model::{
    forward, layer_forward, loss, loss_and_grad, AnswerDistribution, AttentionMap, ForwardOutput,
    MessageEdge, NodeStates,
};
pub use params::{
    Activation, AttentionMode, GatConfig, GatParams, DEFAULT_DROPOUT, DEFAULT_HIDDEN,
    DEFAULT_LAYERS, DEFAULT_POOL_SIZE,
};
pub use reason::{extract_reason_elements, ReasonElement, ReasonElements};
pub use train::{
    batch_gradient, evaluate, train, EpochMetrics, GatExample, RAdam, TrainConfig, TrainReport,
    DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE,
};
