//! Discrete-event model of the in-kernel runtime.
//!
//! Workers own a JIT queue and an AOT queue; schedulers turn activated events
//! into JIT dispatches. Time is an integer clock and every division rounds up.

mod check;
mod engine;
mod launch;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::TaskKind;
use crate::mpkg::Descriptor;
use crate::normalize::LaunchMode;
use crate::profile::HardwareProfile;

pub use check::{compute_metrics, enumerate_schedules, trace_order, validate_trace, Violation, MAX_ENUMERATED_TASKS};
pub use engine::{pre_enqueue_aot, simulate};
pub use launch::{apply_launch_modes, classify_launch_modes, ForceMode};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("worker {worker} {queue} queue exceeds capacity {capacity}")]
    QueueOverflow { worker: usize, queue: &'static str, capacity: u32 },
    #[error("deadlock at t={time}: {frontier}")]
    Deadlock { time: u64, frontier: String },
    #[error("image is invalid: {0}")]
    InvalidImage(String),
    #[error("graph has {0} tasks; schedule enumeration is limited to {MAX_ENUMERATED_TASKS}")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    pub iterations: u32,
    pub pipelining: bool,
    pub seed: u64,
    /// Uniform compute-time jitter in percent, 0 disables it.
    pub jitter_pct: u32,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { iterations: 1, pipelining: true, seed: 0, jitter_pct: 0 }
    }
}

/// Turns descriptors into engine time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationModel {
    /// Fixed per-kind compute overhead added to every non-dummy task.
    pub base_cost: BTreeMap<TaskKind, u64>,
}

impl DurationModel {
    pub fn load_time(&self, kind: TaskKind, d: &Descriptor, p: &HardwareProfile) -> u64 {
        if kind == TaskKind::Dummy {
            return 0;
        }
        d.bytes_in.div_ceil(p.mem_bandwidth)
    }

    /// Compute-engine time, or link time for CommSend tasks.
    pub fn compute_time(&self, kind: TaskKind, d: &Descriptor, p: &HardwareProfile) -> u64 {
        let base = self.base_cost.get(&kind).copied().unwrap_or(0);
        match kind {
            TaskKind::Dummy => 0,
            TaskKind::CommSend => base + p.comm_latency + d.comm_bytes.div_ceil(p.comm_bandwidth),
            _ => base + d.flops.div_ceil(p.compute_throughput),
        }
    }
}

/// One task execution in one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub iteration: u32,
    /// Index into the image's task table.
    pub index: u32,
    pub task_id: u32,
    pub kind: TaskKind,
    pub device: u8,
    pub worker: u32,
    pub mode: LaunchMode,
    pub enqueue: u64,
    /// When the task became eligible to run on its worker.
    pub ready: u64,
    pub dequeue: u64,
    pub load_start: u64,
    pub load_end: u64,
    pub compute_start: u64,
    pub compute_end: u64,
    pub pages: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventActivation {
    pub iteration: u32,
    pub event: u32,
    pub time: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub makespan: u64,
    pub utilization: f64,
    pub bubble_fraction: f64,
    pub jit_tasks: u64,
    pub aot_tasks: u64,
    pub mean_queue_wait: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub tasks: Vec<TaskTrace>,
    pub activations: Vec<EventActivation>,
    pub makespan: u64,
    pub total_workers: u32,
    pub pages_per_worker: u32,
    pub iterations: u32,
    pub metrics: Metrics,
}

impl SimTrace {
    /// JSON lines: one record per task, then a metrics record.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            s.push_str(&serde_json::to_string(t).unwrap());
            s.push('\n');
        }
        s.push_str(&serde_json::json!({ "metrics": self.metrics }).to_string());
        s.push('\n');
        s
    }
}
