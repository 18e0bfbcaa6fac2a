//! `.mpkg` binary images and task descriptors.
//!
//! Layout is little-endian and fixed-width: a 28-byte header, then task
//! records, then event records.

use thiserror::Error;

use crate::decompose::{TaskKind, TaskProto};
use crate::normalize::{EventRecord, LaunchMode, LinearizedImage, TaskRecord, NONE};

pub const MAGIC: &[u8; 4] = b"MPKG";
pub const VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 28;
pub const DEFAULT_DESCRIPTOR_SIZE: u32 = 352;
/// Bytes of the descriptor that carry fields; the remainder is zero padding.
pub const DESCRIPTOR_FIELDS: usize = 48;
const EVENT_RECORD: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MpkgError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("descriptor size {0} is smaller than {DESCRIPTOR_FIELDS}")]
    DescriptorTooSmall(u32),
    #[error("unknown {field} code {code} in task {task}")]
    BadCode { field: &'static str, code: u8, task: usize },
    #[error("image invariant violated: {0}")]
    Invalid(String),
}

/// Per-task metadata the runtime needs to time a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Descriptor {
    pub task_id: u32,
    pub op_id: Option<u32>,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub max_in_tile_bytes: u64,
    pub flops: u64,
    pub comm_bytes: u64,
}

impl Descriptor {
    pub fn from_task(t: &TaskProto) -> Self {
        Self {
            task_id: t.task_id.0,
            op_id: t.op_id.map(|o| o.0),
            bytes_in: t.bytes_in,
            bytes_out: t.bytes_out,
            max_in_tile_bytes: t.max_in_tile_bytes,
            flops: t.flops,
            comm_bytes: t.comm_bytes,
        }
    }

    pub fn footprint_bytes(&self) -> u64 {
        self.max_in_tile_bytes + self.bytes_out
    }

    pub fn encode(&self, size: u32) -> Vec<u8> {
        let mut b = Vec::with_capacity(size as usize);
        b.extend_from_slice(&self.task_id.to_le_bytes());
        b.extend_from_slice(&self.op_id.unwrap_or(NONE).to_le_bytes());
        for v in [self.bytes_in, self.bytes_out, self.max_in_tile_bytes, self.flops, self.comm_bytes] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.resize(size as usize, 0);
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let op = u32_at(4);
        Self {
            task_id: u32_at(0),
            op_id: (op != NONE).then_some(op),
            bytes_in: u64_at(8),
            bytes_out: u64_at(16),
            max_in_tile_bytes: u64_at(24),
            flops: u64_at(32),
            comm_bytes: u64_at(40),
        }
    }
}

pub fn serialize(img: &LinearizedImage) -> Vec<u8> {
    let ds = img.descriptor_size as usize;
    let mut b = Vec::with_capacity(HEADER_SIZE + img.tasks.len() * (12 + ds) + img.events.len() * EVENT_RECORD);
    b.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        img.tasks.len() as u32,
        img.events.len() as u32,
        img.descriptor_size,
        img.start_event,
        img.end_event,
    ] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for t in &img.tasks {
        b.extend_from_slice(&t.dependent_event.to_le_bytes());
        b.extend_from_slice(&t.trigger_event.to_le_bytes());
        b.extend_from_slice(&[t.kind.code(), t.device, t.launch_mode.code(), 0]);
        b.extend_from_slice(&t.descriptor);
    }
    for e in &img.events {
        for v in [e.needed, e.first_task, e.last_task] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

/// Parses an image and rejects it if any table invariant fails.
pub fn deserialize(b: &[u8]) -> Result<LinearizedImage, MpkgError> {
    let img = deserialize_unchecked(b)?;
    if let Some(first) = img.violations().into_iter().next() {
        return Err(MpkgError::Invalid(first));
    }
    Ok(img)
}

/// Parses the layout without checking graph invariants.
pub fn deserialize_unchecked(b: &[u8]) -> Result<LinearizedImage, MpkgError> {
    if b.len() < HEADER_SIZE {
        return Err(MpkgError::Truncated { expected: HEADER_SIZE, got: b.len() });
    }
    if &b[..4] != MAGIC {
        return Err(MpkgError::BadMagic);
    }
    let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(MpkgError::BadVersion(version));
    }
    let (n, m, ds) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16));
    if (ds as usize) < DESCRIPTOR_FIELDS {
        return Err(MpkgError::DescriptorTooSmall(ds));
    }
    let task_rec = 12 + ds as usize;
    let expected = HEADER_SIZE as u128 + n as u128 * task_rec as u128 + m as u128 * EVENT_RECORD as u128;
    if b.len() as u128 != expected {
        return Err(MpkgError::Truncated { expected: expected.min(usize::MAX as u128) as usize, got: b.len() });
    }
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let o = HEADER_SIZE + i * task_rec;
        let kind = TaskKind::from_code(b[o + 8]).ok_or(MpkgError::BadCode { field: "kind", code: b[o + 8], task: i })?;
        let launch_mode =
            LaunchMode::from_code(b[o + 10]).ok_or(MpkgError::BadCode { field: "launch_mode", code: b[o + 10], task: i })?;
        tasks.push(TaskRecord {
            dependent_event: u32_at(o),
            trigger_event: u32_at(o + 4),
            kind,
            device: b[o + 9],
            launch_mode,
            descriptor: b[o + 12..o + task_rec].to_vec(),
        });
    }
    let base = HEADER_SIZE + n * task_rec;
    let events = (0..m)
        .map(|i| {
            let o = base + i * EVENT_RECORD;
            EventRecord { needed: u32_at(o), first_task: u32_at(o + 4), last_task: u32_at(o + 8) }
        })
        .collect();
    Ok(LinearizedImage { tasks, events, start_event: u32_at(20), end_event: u32_at(24), descriptor_size: ds })
}
