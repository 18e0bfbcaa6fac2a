//! The full compilation pipeline, stage by stage.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::decompose::{decompose_graph, DecomposeError, TaskId};
use crate::ir::{CompGraph, Diagnostic};
use crate::normalize::{linearize_with_modes, normalize, LaunchMode, LinearizedImage, NormalizeError};
use crate::profile::HardwareProfile;
use crate::sim::{classify_launch_modes, ForceMode};
use crate::tgraph::{build_raw_events, fuse_fixpoint, Granularity, TGraph};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("validate: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("decompose: {0}")]
    Decompose(#[from] DecomposeError),
    #[error("normalize: {0}")]
    Normalize(#[from] NormalizeError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompileOptions {
    pub granularity: Granularity,
    pub force: ForceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompileSummary {
    pub ops: usize,
    pub tasks: usize,
    pub dummy_tasks: usize,
    pub dummy_ratio: f64,
    pub raw_events: usize,
    pub fused_events: usize,
    pub events: usize,
    pub total_needed: u64,
    pub max_needed: u32,
    pub jit_tasks: usize,
    pub aot_tasks: usize,
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub raw: TGraph,
    pub fused: TGraph,
    pub normalized: TGraph,
    pub modes: BTreeMap<TaskId, LaunchMode>,
    pub image: LinearizedImage,
    pub summary: CompileSummary,
}

pub fn compile(graph: &CompGraph, profile: &HardwareProfile, opts: CompileOptions) -> Result<Compiled, CompileError> {
    let diags = graph.validate();
    if !diags.is_empty() {
        return Err(CompileError::Invalid(diags));
    }
    let tasks = decompose_graph(graph, profile)?;
    let raw = build_raw_events(&tasks, graph, opts.granularity);
    let fused = fuse_fixpoint(&raw);
    let normalized = normalize(&fused)?;
    let mut modes = classify_launch_modes(&normalized, graph);
    let forced = match opts.force {
        ForceMode::Hybrid => None,
        ForceMode::Jit => Some(LaunchMode::Jit),
        ForceMode::Aot => Some(LaunchMode::Aot),
    };
    if let Some(m) = forced {
        modes.values_mut().for_each(|v| *v = m);
    }
    let image = linearize_with_modes(&normalized, &modes)?;

    let dummy_tasks = normalized.dummy_count();
    let n = normalized.tasks.len();
    let summary = CompileSummary {
        ops: graph.ops.len(),
        tasks: n,
        dummy_tasks,
        dummy_ratio: if n == 0 { 0.0 } else { dummy_tasks as f64 / n as f64 },
        raw_events: raw.events.len(),
        fused_events: fused.events.len(),
        events: image.events.len(),
        total_needed: image.events.iter().map(|e| e.needed as u64).sum(),
        max_needed: image.events.iter().map(|e| e.needed).max().unwrap_or(0),
        jit_tasks: modes.values().filter(|m| **m == LaunchMode::Jit).count(),
        aot_tasks: modes.values().filter(|m| **m == LaunchMode::Aot).count(),
    };
    Ok(Compiled { raw, fused, normalized, modes, image, summary })
}
