//! Compiler and runtime simulator for fine-grained task/event graphs.

pub mod compile;
pub mod decompose;
pub mod ir;
pub mod mpkg;
pub mod normalize;
pub mod profile;
pub mod sim;
pub mod tgraph;
pub mod workloads;
