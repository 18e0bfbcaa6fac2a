//! Operator decomposition into SM-level tasks.
//!
//! Each operator's output tensor is cut into a grid of disjoint tiles, one
//! task per tile. Tiles use ceil division: every tile in a dimension has
//! extent `ceil(n / s)` except the last, which may be smaller. A split `s` is
//! only valid when it yields exactly `s` non-empty tiles.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{CompGraph, IrError, OpId, OpKind, OpNode, Region, TensorId};
use crate::profile::HardwareProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    MatMul,
    Attention,
    Elementwise,
    RMSNorm,
    Embedding,
    TopKSoftmax,
    CommSend,
    Reduce,
    Dummy,
    StartHook,
}

impl TaskKind {
    pub fn from_op(kind: OpKind) -> Self {
        match kind {
            OpKind::MatMul => TaskKind::MatMul,
            OpKind::Attention => TaskKind::Attention,
            OpKind::Elementwise => TaskKind::Elementwise,
            OpKind::RMSNorm => TaskKind::RMSNorm,
            OpKind::Embedding => TaskKind::Embedding,
            OpKind::TopKSoftmax => TaskKind::TopKSoftmax,
            OpKind::AllReduce | OpKind::AllGather => TaskKind::Reduce,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use TaskKind::*;
        [MatMul, Attention, Elementwise, RMSNorm, Embedding, TopKSoftmax, CommSend, Reduce, Dummy, StartHook]
            .get(code as usize)
            .copied()
    }
}

/// One SM-level unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProto {
    pub task_id: TaskId,
    /// `None` for dummy tasks.
    pub op_id: Option<OpId>,
    pub kind: TaskKind,
    pub device: u32,
    /// Tile index within the op's output tiling.
    pub tile: u32,
    pub out_tensor: Option<TensorId>,
    pub out_region: Option<Region>,
    pub in_regions: Vec<(TensorId, Region)>,
    pub bytes_in: u64,
    pub bytes_out: u64,
    /// Largest single input tile, bytes.
    pub max_in_tile_bytes: u64,
    pub flops: u64,
    /// Bytes pushed over the device link (CommSend only).
    pub comm_bytes: u64,
}

impl TaskProto {
    pub fn dummy(task_id: TaskId, device: u32) -> Self {
        Self {
            task_id,
            op_id: None,
            kind: TaskKind::Dummy,
            device,
            tile: 0,
            out_tensor: None,
            out_region: None,
            in_regions: Vec::new(),
            bytes_in: 0,
            bytes_out: 0,
            max_in_tile_bytes: 0,
            flops: 0,
            comm_bytes: 0,
        }
    }

    pub fn is_dummy(&self) -> bool {
        self.kind == TaskKind::Dummy
    }

    /// Shared-memory footprint: largest single input tile plus one output tile.
    pub fn footprint_bytes(&self) -> u64 {
        self.max_in_tile_bytes + self.bytes_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tiling {
    pub splits: Vec<u64>,
}

impl Tiling {
    pub fn new(splits: Vec<u64>) -> Self {
        Self { splits }
    }

    pub fn task_count(&self) -> u64 {
        self.splits.iter().product()
    }
}

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("op {op}: partition {splits:?} is invalid for output dims {dims:?}")]
    InvalidTiling { op: OpId, splits: Vec<u64>, dims: Vec<u64> },
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Tile extent and whether `s` yields exactly `s` non-empty tiles of an `n`-long axis.
fn tile_extent(n: u64, s: u64) -> Option<u64> {
    if s == 0 || s > n {
        return None;
    }
    let t = n.div_ceil(s);
    ((s - 1) * t < n).then_some(t)
}

pub fn valid_split(n: u64, s: u64) -> bool {
    tile_extent(n, s).is_some()
}

pub fn tiling_fits(dims: &[u64], tiling: &Tiling) -> bool {
    tiling.splits.len() == dims.len() && dims.iter().zip(&tiling.splits).all(|(&n, &s)| valid_split(n, s))
}

/// Output tiles in row-major order.
pub fn tile_regions(dims: &[u64], tiling: &Tiling) -> Vec<Region> {
    let rank = dims.len();
    let per_dim: Vec<Vec<(u64, u64)>> = (0..rank)
        .map(|d| {
            let t = tile_extent(dims[d], tiling.splits[d]).expect("tiling validated by caller");
            (0..tiling.splits[d])
                .map(|i| {
                    let lo = i * t;
                    (lo, t.min(dims[d] - lo))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(tiling.task_count() as usize);
    let mut idx = vec![0usize; rank];
    loop {
        let offsets = (0..rank).map(|d| per_dim[d][idx[d]].0).collect();
        let extents = (0..rank).map(|d| per_dim[d][idx[d]].1).collect();
        out.push(Region::new(offsets, extents));
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < per_dim[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// All valid tilings with `1 <= task_count <= 4 * target_tasks`, lexicographic on splits.
pub fn enumerate_tilings(dims: &[u64], target_tasks: u64) -> Vec<Tiling> {
    let cap = 4 * target_tasks.max(1);
    let mut result = Vec::new();
    let mut current = Vec::with_capacity(dims.len());
    fn walk(dims: &[u64], cap: u64, product: u64, current: &mut Vec<u64>, result: &mut Vec<Tiling>) {
        let d = current.len();
        if d == dims.len() {
            result.push(Tiling::new(current.clone()));
            return;
        }
        let mut s = 1;
        while s <= dims[d] && product * s <= cap {
            if valid_split(dims[d], s) {
                current.push(s);
                walk(dims, cap, product * s, current, result);
                current.pop();
            }
            s += 1;
        }
    }
    walk(dims, cap, 1, &mut current, &mut result);
    result
}

fn region_bytes(graph: &CompGraph, regions: &[(TensorId, Region)]) -> Result<(u64, u64), IrError> {
    let mut total = 0;
    let mut largest = 0;
    for (t, r) in regions {
        let spec = graph.tensor(*t).ok_or(IrError::UnknownTensor(*t))?;
        let bytes = r.volume() * spec.elem_size as u64;
        total += bytes;
        largest = largest.max(bytes);
    }
    Ok((total, largest))
}

/// Aggregate load statistics of one tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilingStats {
    /// Total device-memory input bytes over all tiles.
    pub total_bytes: u64,
    /// Input bytes of the heaviest tile.
    pub max_tile_bytes: u64,
}

/// Σ over tiles of the bytes read under `input_regions`.
pub fn tiling_cost(graph: &CompGraph, op: &OpNode, tiling: &Tiling) -> Result<u64, DecomposeError> {
    Ok(tiling_stats(graph, op, tiling)?.total_bytes)
}

pub fn tiling_stats(graph: &CompGraph, op: &OpNode, tiling: &Tiling) -> Result<TilingStats, DecomposeError> {
    let out = graph.tensor(op.output).ok_or(IrError::UnknownTensor(op.output))?;
    if !tiling_fits(&out.dims, tiling) {
        return Err(DecomposeError::InvalidTiling {
            op: op.id,
            splits: tiling.splits.clone(),
            dims: out.dims.clone(),
        });
    }
    let mut stats = TilingStats { total_bytes: 0, max_tile_bytes: 0 };
    if op.kind == OpKind::AllGather {
        // Footprint depends on tile position.
        for region in tile_regions(&out.dims, tiling) {
            let (bytes, _) = region_bytes(graph, &graph.input_regions(op, &region)?)?;
            stats.total_bytes += bytes;
            stats.max_tile_bytes = stats.max_tile_bytes.max(bytes);
        }
        return Ok(stats);
    }
    // Every other kind reads a footprint that depends only on tile extents, and
    // a ceil tiling has at most two distinct extents per dimension.
    let rank = out.dims.len();
    let classes: Vec<Vec<(u64, u64)>> = (0..rank)
        .map(|d| {
            let n = out.dims[d];
            let s = tiling.splits[d];
            let t = tile_extent(n, s).unwrap();
            let last = n - (s - 1) * t;
            if s == 1 {
                vec![(n, 1)]
            } else if last == t {
                vec![(t, s)]
            } else {
                vec![(t, s - 1), (last, 1)]
            }
        })
        .collect();
    let mut idx = vec![0usize; rank];
    loop {
        let extents: Vec<u64> = (0..rank).map(|d| classes[d][idx[d]].0).collect();
        let count: u64 = (0..rank).map(|d| classes[d][idx[d]].1).product();
        let region = Region::new(vec![0; rank], extents);
        let (bytes, _) = region_bytes(graph, &graph.input_regions(op, &region)?)?;
        stats.total_bytes += bytes * count;
        stats.max_tile_bytes = stats.max_tile_bytes.max(bytes);
        let mut d = rank;
        loop {
            if d == 0 {
                return Ok(stats);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < classes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Chooses the output tiling of `op` for a machine with `profile.num_workers` SMs.
///
/// Candidates come from [`enumerate_tilings`] with the worker count as target.
/// The winner minimizes the load on the critical path, `waves * max_tile_bytes`
/// where `waves = ceil(tasks / workers)`; ties go to the lowest total
/// [`tiling_cost`], then to the task count closest to the worker count, then to
/// fewer tasks, then to the lexicographically smallest splits. Attention is cut
/// into one task per (request, head group). A `partition` attr wins outright.
pub fn select_partition(graph: &CompGraph, op: &OpNode, profile: &HardwareProfile) -> Result<Tiling, DecomposeError> {
    let out = graph.tensor(op.output).ok_or(IrError::UnknownTensor(op.output))?;
    if let Some(splits) = &op.attrs.partition {
        let tiling = Tiling::new(splits.clone());
        if !tiling_fits(&out.dims, &tiling) {
            return Err(DecomposeError::InvalidTiling { op: op.id, splits: splits.clone(), dims: out.dims.clone() });
        }
        return Ok(tiling);
    }
    let workers = profile.num_workers.max(1) as u64;
    if op.kind == OpKind::Attention {
        let requests = out.dims[0];
        let heads = op.attrs.num_heads.unwrap_or(1).max(1);
        let groups = (1..=heads)
            .filter(|g| heads.is_multiple_of(*g))
            .min_by_key(|&g| ((requests * g).abs_diff(workers), requests * g))
            .unwrap_or(1);
        return Ok(Tiling::new(vec![requests, groups]));
    }
    let mut best: Option<((u64, u64, u64, u64), Tiling)> = None;
    for tiling in enumerate_tilings(&out.dims, workers) {
        let stats = tiling_stats(graph, op, &tiling)?;
        let count = tiling.task_count();
        let waves = count.div_ceil(workers);
        let key = (waves * stats.max_tile_bytes, stats.total_bytes, count.abs_diff(workers), count);
        // Enumeration is lexicographic, so keeping the first minimum honors the last tie-break.
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, tiling));
        }
    }
    Ok(best.map(|(_, t)| t).unwrap_or_else(|| Tiling::new(vec![1; out.dims.len()])))
}

fn attention_flops(op: &OpNode, region: &Region) -> u64 {
    let seqs = op.attrs.seq_lens.as_deref().unwrap_or(&[]);
    let rows = region.offsets[0]..region.offsets[0] + region.extents[0];
    let seq_total: u64 = rows.map(|r| seqs.get(r as usize).copied().unwrap_or(1)).sum();
    // QK^T and PV over the cached sequence.
    4 * seq_total * region.extents[1]
}

fn compute_flops(graph: &CompGraph, op: &OpNode, region: &Region, inputs: &[(TensorId, Region)]) -> u64 {
    let vol = region.volume();
    match op.kind {
        OpKind::MatMul => 2 * vol * inputs[0].1.extents[1],
        OpKind::Attention => attention_flops(op, region),
        OpKind::Elementwise => vol * inputs.len() as u64,
        OpKind::RMSNorm => 3 * inputs[0].1.volume() + vol,
        OpKind::Embedding => vol,
        OpKind::TopKSoftmax => 4 * inputs[0].1.volume(),
        OpKind::AllReduce => vol * (inputs.len() as u64).saturating_sub(1),
        OpKind::AllGather => {
            let _ = graph;
            vol
        }
    }
}

/// Decomposes every op of a validated graph. Task ids are dense, assigned in
/// topological op order and row-major tile order. Collectives expand into one
/// CommSend per (tile, source device) followed by one Reduce per (tile, device).
pub fn decompose_graph(graph: &CompGraph, profile: &HardwareProfile) -> Result<Vec<TaskProto>, DecomposeError> {
    let order = graph.topo_order()?;
    let mut tasks: Vec<TaskProto> = Vec::new();
    for op_id in order {
        let op = graph.op(op_id).unwrap();
        let out = graph.tensor(op.output).unwrap();
        let tiling = select_partition(graph, op, profile)?;
        let tiles = tile_regions(&out.dims, &tiling);
        let elem = out.elem_size as u64;
        let next_id = |tasks: &Vec<TaskProto>| TaskId(tasks.len() as u32);

        if !op.kind.is_collective() {
            for (i, region) in tiles.into_iter().enumerate() {
                let inputs = graph.input_regions(op, &region)?;
                let (bytes_in, largest) = region_bytes(graph, &inputs)?;
                let flops = compute_flops(graph, op, &region, &inputs);
                tasks.push(TaskProto {
                    task_id: next_id(&tasks),
                    op_id: Some(op.id),
                    kind: TaskKind::from_op(op.kind),
                    device: op.device(),
                    tile: i as u32,
                    out_tensor: Some(op.output),
                    bytes_out: region.volume() * elem,
                    out_region: Some(region),
                    in_regions: inputs,
                    bytes_in,
                    max_in_tile_bytes: largest,
                    flops,
                    comm_bytes: 0,
                });
            }
            continue;
        }

        let peers = op.device_group.len() as u64 - 1;
        for (i, region) in tiles.iter().enumerate() {
            let inputs = graph.input_regions(op, region)?;
            for (&dev, input) in op.device_group.iter().zip(&op.inputs) {
                let Some((t, r)) = inputs.iter().find(|(t, _)| t == input) else {
                    continue;
                };
                let bytes = r.volume() * graph.tensor(*t).unwrap().elem_size as u64;
                tasks.push(TaskProto {
                    task_id: next_id(&tasks),
                    op_id: Some(op.id),
                    kind: TaskKind::CommSend,
                    device: dev,
                    tile: i as u32,
                    out_tensor: Some(op.output),
                    out_region: Some(region.clone()),
                    in_regions: vec![(*t, r.clone())],
                    bytes_in: bytes,
                    bytes_out: bytes,
                    max_in_tile_bytes: bytes,
                    flops: 0,
                    comm_bytes: bytes * peers,
                });
            }
        }
        for (i, region) in tiles.iter().enumerate() {
            let inputs = graph.input_regions(op, region)?;
            let (bytes_in, largest) = region_bytes(graph, &inputs)?;
            let flops = compute_flops(graph, op, region, &inputs);
            for &dev in &op.device_group {
                tasks.push(TaskProto {
                    task_id: next_id(&tasks),
                    op_id: Some(op.id),
                    kind: TaskKind::Reduce,
                    device: dev,
                    tile: i as u32,
                    out_tensor: Some(op.output),
                    out_region: Some(region.clone()),
                    in_regions: inputs.clone(),
                    bytes_in,
                    bytes_out: region.volume() * elem,
                    max_in_tile_bytes: largest,
                    flops,
                    comm_bytes: 0,
                });
            }
        }
    }
    Ok(tasks)
}

/// Task ids grouped by originating op.
pub fn tasks_by_op(tasks: &[TaskProto]) -> BTreeMap<OpId, Vec<TaskId>> {
    let mut map: BTreeMap<OpId, Vec<TaskId>> = BTreeMap::new();
    for t in tasks {
        if let Some(op) = t.op_id {
            map.entry(op).or_default().push(t.task_id);
        }
    }
    map
}
