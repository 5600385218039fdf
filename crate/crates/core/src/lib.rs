//! Dependency-aware structured channel pruning.
//!
//! The pipeline has three stages. Combing ([`combing`]) walks a
//! [`graph::ComputationGraph`] and groups every channel-producing layer with
//! the layers whose channels must shrink in lockstep with it. Pruning
//! ([`pruning`]) trains the gated model, scores channels with a
//! gradient-times-weight curvature proxy ([`importance`]) and masks the least
//! important channel group at a fixed interval. Distillation ([`distill`])
//! keeps the pruned student close to the frozen original during training.

pub mod tensor;
pub mod graph;
pub mod combing;
pub mod importance;
pub mod distill;
pub mod pruning;
pub mod harness;
