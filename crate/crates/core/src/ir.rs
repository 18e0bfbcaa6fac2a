//! Tensor-program computation graphs.
//!
//! A [`CompGraph`] is a DAG of tensor operators connected by tensors. Every
//! tensor is a dense row-major array living on one device; operators read
//! rectangular regions of their inputs to produce rectangular regions of
//! their output. [`CompGraph::input_regions`] is the per-kind region mapping
//! that drives both the tiling cost model and dependency analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(pub u32);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum IrError {
    #[error("graph is invalid: {0}")]
    Invalid(String),
    #[error("unknown op {0}")]
    UnknownOp(OpId),
    #[error("unknown tensor {0}")]
    UnknownTensor(TensorId),
    #[error("region rank {got} does not match tensor rank {expected}")]
    RankMismatch { expected: usize, got: usize },
    #[error("region {region} is out of bounds for dims {dims:?}")]
    RegionOutOfBounds { region: String, dims: Vec<u64> },
    #[error("malformed graph file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub id: TensorId,
    pub dims: Vec<u64>,
    pub elem_size: u32,
    pub device: u32,
}

impl TensorSpec {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn volume(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn full_region(&self) -> Region {
        Region::full(&self.dims)
    }
}

/// Axis-aligned hyper-rectangle of a tensor, in elements, half-open.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    pub offsets: Vec<u64>,
    pub extents: Vec<u64>,
}

impl Region {
    pub fn new(offsets: Vec<u64>, extents: Vec<u64>) -> Self {
        debug_assert_eq!(offsets.len(), extents.len());
        Self { offsets, extents }
    }

    pub fn full(dims: &[u64]) -> Self {
        Self { offsets: vec![0; dims.len()], extents: dims.to_vec() }
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn volume(&self) -> u64 {
        self.extents.iter().product()
    }

    pub fn end(&self, dim: usize) -> u64 {
        self.offsets[dim] + self.extents[dim]
    }

    pub fn fits(&self, dims: &[u64]) -> bool {
        self.rank() == dims.len()
            && (0..dims.len()).all(|d| self.extents[d] >= 1 && self.end(d) <= dims[d])
    }

    /// Per-dimension interval intersection; `None` when any dimension is disjoint.
    pub fn intersect(&self, other: &Region) -> Option<Region> {
        if self.rank() != other.rank() {
            return None;
        }
        let mut offsets = Vec::with_capacity(self.rank());
        let mut extents = Vec::with_capacity(self.rank());
        for d in 0..self.rank() {
            let lo = self.offsets[d].max(other.offsets[d]);
            let hi = self.end(d).min(other.end(d));
            if lo >= hi {
                return None;
            }
            offsets.push(lo);
            extents.push(hi - lo);
        }
        Some(Region { offsets, extents })
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.rank() == other.rank()
            && (0..self.rank())
                .all(|d| self.offsets[d] <= other.offsets[d] && other.end(d) <= self.end(d))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..self.rank() {
            if d > 0 {
                write!(f, "x")?;
            }
            write!(f, "[{},{})", self.offsets[d], self.end(d))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    MatMul,
    Attention,
    Elementwise,
    RMSNorm,
    Embedding,
    TopKSoftmax,
    AllReduce,
    AllGather,
}

impl OpKind {
    pub fn is_collective(self) -> bool {
        matches!(self, OpKind::AllReduce | OpKind::AllGather)
    }
}

/// Kind-specific operator parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    /// Attention: one sequence length per request (one request per output row).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_lens: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u64>,
    /// User-specified parallelization degree per output dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<u64>>,
    /// Shared id linking per-device replicas of one logical tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logical_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNode {
    pub id: OpId,
    pub kind: OpKind,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    #[serde(default)]
    pub attrs: OpAttrs,
    /// `None` means the kind default: only attention is data dependent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dependent: Option<bool>,
    #[serde(default)]
    pub device_group: Vec<u32>,
}

impl OpNode {
    pub fn is_data_dependent(&self) -> bool {
        self.data_dependent.unwrap_or(self.kind == OpKind::Attention)
    }

    /// Device that executes a non-collective op.
    pub fn device(&self) -> u32 {
        self.device_group.first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub subject: String,
    pub message: String,
}

impl Diagnostic {
    fn new(subject: impl Into<String>, message: impl Into<String>) -> Self {
        Self { subject: subject.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompGraph {
    pub tensors: Vec<TensorSpec>,
    pub ops: Vec<OpNode>,
}

impl CompGraph {
    pub fn from_json(text: &str) -> Result<Self, IrError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }

    pub fn tensor(&self, id: TensorId) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.id == id)
    }

    pub fn op(&self, id: OpId) -> Option<&OpNode> {
        self.ops.iter().find(|o| o.id == id)
    }

    fn tensor_or_err(&self, id: TensorId) -> Result<&TensorSpec, IrError> {
        self.tensor(id).ok_or(IrError::UnknownTensor(id))
    }

    /// tensor id → producing op. Graph inputs are absent.
    pub fn producers(&self) -> BTreeMap<TensorId, OpId> {
        self.ops.iter().map(|o| (o.output, o.id)).collect()
    }

    /// tensor id → consuming ops, ascending.
    pub fn consumers(&self) -> BTreeMap<TensorId, Vec<OpId>> {
        let mut map: BTreeMap<TensorId, Vec<OpId>> = BTreeMap::new();
        let mut ops: Vec<&OpNode> = self.ops.iter().collect();
        ops.sort_by_key(|o| o.id);
        for op in ops {
            for &t in &op.inputs {
                let entry = map.entry(t).or_default();
                if entry.last() != Some(&op.id) {
                    entry.push(op.id);
                }
            }
        }
        map
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();

        let mut seen_tensors = BTreeSet::new();
        for t in &self.tensors {
            let subject = format!("tensor {}", t.id.0);
            if !seen_tensors.insert(t.id) {
                diags.push(Diagnostic::new(&subject, "duplicate tensor id"));
            }
            if t.dims.is_empty() {
                diags.push(Diagnostic::new(&subject, "dims must be non-empty"));
            }
            if t.dims.contains(&0) {
                diags.push(Diagnostic::new(&subject, format!("zero extent in dims {:?}", t.dims)));
            }
            if !matches!(t.elem_size, 1 | 2 | 4 | 8) {
                diags.push(Diagnostic::new(
                    &subject,
                    format!("elem_size {} not in {{1,2,4,8}}", t.elem_size),
                ));
            }
        }

        let mut seen_ops = BTreeSet::new();
        let mut producer: BTreeMap<TensorId, OpId> = BTreeMap::new();
        let mut refs_ok = true;
        for op in &self.ops {
            let subject = format!("op {}", op.id.0);
            if !seen_ops.insert(op.id) {
                diags.push(Diagnostic::new(&subject, "duplicate op id"));
            }
            for &t in op.inputs.iter().chain(std::iter::once(&op.output)) {
                if !seen_tensors.contains(&t) {
                    refs_ok = false;
                    diags.push(Diagnostic::new(&subject, format!("references missing tensor {}", t.0)));
                }
            }
            if let Some(prev) = producer.insert(op.output, op.id) {
                diags.push(Diagnostic::new(
                    format!("tensor {}", op.output.0),
                    format!("produced by both op {} and op {}", prev.0, op.id.0),
                ));
            }
            if op.inputs.contains(&op.output) {
                diags.push(Diagnostic::new(&subject, "op reads its own output"));
            }
            if op.kind.is_collective() {
                if op.device_group.len() < 2 {
                    diags.push(Diagnostic::new(&subject, "collective needs a device group of at least 2"));
                }
            } else if op.device_group.len() != 1 {
                diags.push(Diagnostic::new(&subject, "compute op needs exactly one device"));
            }
            let mut group = op.device_group.clone();
            group.sort_unstable();
            group.dedup();
            if group.len() != op.device_group.len() {
                diags.push(Diagnostic::new(&subject, "device group has duplicates"));
            }
        }

        if let Some(cycle) = self.find_cycle() {
            let path: Vec<String> = cycle.iter().map(|o| o.0.to_string()).collect();
            diags.push(Diagnostic::new("graph", format!("cycle detected: {}", path.join(" -> "))));
        }

        if refs_ok {
            for op in &self.ops {
                self.check_shapes(op, &producer, &mut diags);
            }
        }
        diags
    }

    /// Returns a cycle of op ids (first repeated at the end) if one exists.
    fn find_cycle(&self) -> Option<Vec<OpId>> {
        let producers = self.producers();
        let mut succ: BTreeMap<OpId, BTreeSet<OpId>> = BTreeMap::new();
        for op in &self.ops {
            succ.entry(op.id).or_default();
            for t in &op.inputs {
                if let Some(&p) = producers.get(t) {
                    succ.entry(p).or_default().insert(op.id);
                }
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<OpId, u8> = succ.keys().map(|&k| (k, 0)).collect();
        for &root in succ.keys() {
            if state[&root] != 0 {
                continue;
            }
            let mut stack: Vec<(OpId, Vec<OpId>)> =
                vec![(root, succ[&root].iter().rev().copied().collect())];
            state.insert(root, 1);
            while let Some((node, pending)) = stack.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(next) => match state[&next] {
                        0 => {
                            state.insert(next, 1);
                            stack.push((next, succ[&next].iter().rev().copied().collect()));
                        }
                        1 => {
                            let start = stack.iter().position(|(n, _)| *n == next).unwrap();
                            let mut cycle: Vec<OpId> = stack[start..].iter().map(|(n, _)| *n).collect();
                            cycle.push(next);
                            return Some(cycle);
                        }
                        _ => {}
                    },
                    None => {
                        state.insert(node, 2);
                        stack.pop();
                    }
                }
            }
        }
        None
    }

    fn check_shapes(&self, op: &OpNode, producer: &BTreeMap<TensorId, OpId>, diags: &mut Vec<Diagnostic>) {
        let subject = format!("op {}", op.id.0);
        let mut bad = |msg: String| diags.push(Diagnostic::new(&subject, msg));
        let out = self.tensor(op.output).unwrap();
        let ins: Vec<&TensorSpec> = op.inputs.iter().map(|&t| self.tensor(t).unwrap()).collect();

        // Inputs must live on the executing device, unless they are replicated
        // collective outputs covering that device.
        if !op.kind.is_collective() {
            let dev = op.device();
            for t in ins.iter().chain(std::iter::once(&out)) {
                if t.device == dev {
                    continue;
                }
                let replicated = producer
                    .get(&t.id)
                    .and_then(|p| self.op(*p))
                    .is_some_and(|p| p.kind.is_collective() && p.device_group.contains(&dev));
                if !replicated || t.id == out.id {
                    bad(format!("tensor {} lives on device {} but op runs on device {}", t.id.0, t.device, dev));
                }
            }
        }

        match op.kind {
            OpKind::MatMul => {
                if ins.len() != 2 || ins.iter().any(|t| t.rank() != 2) || out.rank() != 2 {
                    bad("MatMul expects inputs [M,K] and [K,N] with output [M,N]".into());
                    return;
                }
                let (m, k) = (ins[0].dims[0], ins[0].dims[1]);
                let (k2, n) = (ins[1].dims[0], ins[1].dims[1]);
                if k != k2 || out.dims != [m, n] {
                    bad(format!(
                        "MatMul shapes inconsistent: {:?} x {:?} -> {:?}",
                        ins[0].dims, ins[1].dims, out.dims
                    ));
                }
                for (name, attr, actual) in
                    [("m", op.attrs.m, m), ("k", op.attrs.k, k), ("n", op.attrs.n, n)]
                {
                    if let Some(v) = attr {
                        if v != actual {
                            bad(format!("attr {name}={v} disagrees with tensor extent {actual}"));
                        }
                    }
                }
            }
            OpKind::Elementwise => {
                if ins.is_empty() || ins.iter().any(|t| t.dims != out.dims) {
                    bad("Elementwise inputs must all match the output shape".into());
                }
            }
            OpKind::RMSNorm => {
                let ok = out.rank() == 2
                    && !ins.is_empty()
                    && ins.len() <= 2
                    && ins[0].dims == out.dims
                    && (ins.len() == 1 || ins[1].dims == [out.dims[1]]);
                if !ok {
                    bad("RMSNorm expects X [R,D] (and optional weight [D]) with output [R,D]".into());
                }
            }
            OpKind::Embedding => {
                let ok = ins.len() == 2
                    && ins[0].rank() == 1
                    && ins[1].rank() == 2
                    && out.dims == [ins[0].dims[0], ins[1].dims[1]];
                if !ok {
                    bad("Embedding expects ids [T] and table [V,D] with output [T,D]".into());
                }
            }
            OpKind::TopKSoftmax => {
                let k = op.attrs.top_k.unwrap_or(0);
                let ok = ins.len() == 1
                    && ins[0].rank() == 2
                    && out.rank() == 2
                    && out.dims[0] == ins[0].dims[0]
                    && out.dims[1] == k
                    && k <= ins[0].dims[1];
                if !ok {
                    bad("TopKSoftmax expects logits [T,E] and output [T,top_k] with top_k <= E".into());
                }
            }
            OpKind::Attention => {
                if ins.len() != 3 || out.rank() != 2 || ins.iter().any(|t| t.dims != out.dims) {
                    bad("Attention expects Q, K, V and output all shaped [requests, hidden]".into());
                    return;
                }
                match &op.attrs.seq_lens {
                    Some(s) if s.len() as u64 == out.dims[0] && s.iter().all(|&l| l >= 1) => {}
                    _ => bad(format!("Attention needs one positive seq_len per request ({} rows)", out.dims[0])),
                }
                match op.attrs.num_heads {
                    Some(h) if h >= 1 && out.dims[1].is_multiple_of(h) => {}
                    _ => bad("Attention num_heads must divide the hidden size".into()),
                }
            }
            OpKind::AllReduce => {
                if ins.len() != op.device_group.len() || ins.iter().any(|t| t.dims != out.dims) {
                    bad("AllReduce expects one partial per device, each shaped like the output".into());
                    return;
                }
                self.check_collective_devices(op, &ins, out, &mut bad);
            }
            OpKind::AllGather => {
                let g = op.device_group.len() as u64;
                let ok = ins.len() as u64 == g
                    && !ins.is_empty()
                    && ins.iter().all(|t| t.dims == ins[0].dims)
                    && out.rank() == ins[0].rank()
                    && {
                        let r = out.rank();
                        out.dims[..r - 1] == ins[0].dims[..r - 1] && out.dims[r - 1] == ins[0].dims[r - 1] * g
                    };
                if !ok {
                    bad("AllGather expects equal per-device slices concatenated along the last dim".into());
                    return;
                }
                self.check_collective_devices(op, &ins, out, &mut bad);
            }
        }
    }

    fn check_collective_devices(
        &self,
        op: &OpNode,
        ins: &[&TensorSpec],
        out: &TensorSpec,
        bad: &mut impl FnMut(String),
    ) {
        for (t, &dev) in ins.iter().zip(&op.device_group) {
            if t.device != dev {
                bad(format!("input tensor {} must live on device {dev}", t.id.0));
            }
        }
        if out.device != op.device_group[0] {
            bad(format!("output tensor {} must live on device {}", out.id.0, op.device_group[0]));
        }
    }

    /// Producers before consumers; ties broken by ascending op id.
    pub fn topo_order(&self) -> Result<Vec<OpId>, IrError> {
        let diags = self.validate();
        if !diags.is_empty() {
            let msg: Vec<String> = diags.iter().map(ToString::to_string).collect();
            return Err(IrError::Invalid(msg.join("; ")));
        }
        let producers = self.producers();
        let mut indegree: BTreeMap<OpId, usize> = self.ops.iter().map(|o| (o.id, 0)).collect();
        let mut succ: BTreeMap<OpId, BTreeSet<OpId>> = BTreeMap::new();
        for op in &self.ops {
            let preds: BTreeSet<OpId> = op.inputs.iter().filter_map(|t| producers.get(t).copied()).collect();
            *indegree.get_mut(&op.id).unwrap() = preds.len();
            for p in preds {
                succ.entry(p).or_default().insert(op.id);
            }
        }
        let mut ready: BTreeSet<OpId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&o, _)| o).collect();
        let mut order = Vec::with_capacity(self.ops.len());
        while let Some(op) = ready.pop_first() {
            order.push(op);
            for next in succ.get(&op).into_iter().flatten() {
                let d = indegree.get_mut(next).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(*next);
                }
            }
        }
        if order.len() != self.ops.len() {
            return Err(IrError::Invalid("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Minimal input regions `op` must read to produce `out` of its output tensor.
    pub fn input_regions(&self, op: &OpNode, out: &Region) -> Result<Vec<(TensorId, Region)>, IrError> {
        let out_t = self.tensor_or_err(op.output)?;
        if out.rank() != out_t.rank() {
            return Err(IrError::RankMismatch { expected: out_t.rank(), got: out.rank() });
        }
        if !out.fits(&out_t.dims) {
            return Err(IrError::RegionOutOfBounds { region: out.to_string(), dims: out_t.dims.clone() });
        }
        let ins: Vec<&TensorSpec> =
            op.inputs.iter().map(|&t| self.tensor_or_err(t)).collect::<Result<_, _>>()?;
        let rows = |r: &Region| (r.offsets[0], r.extents[0]);
        let cols = |r: &Region| (r.offsets[1], r.extents[1]);
        let mut result = Vec::with_capacity(ins.len());
        match op.kind {
            OpKind::Elementwise | OpKind::Attention | OpKind::AllReduce => {
                for t in ins {
                    result.push((t.id, out.clone()));
                }
            }
            OpKind::MatMul => {
                let (ro, re) = rows(out);
                let (co, ce) = cols(out);
                let k = ins[0].dims[1];
                result.push((ins[0].id, Region::new(vec![ro, 0], vec![re, k])));
                result.push((ins[1].id, Region::new(vec![0, co], vec![k, ce])));
            }
            OpKind::RMSNorm => {
                let (ro, re) = rows(out);
                let d = ins[0].dims[1];
                result.push((ins[0].id, Region::new(vec![ro, 0], vec![re, d])));
                if let Some(w) = ins.get(1) {
                    result.push((w.id, Region::full(&w.dims)));
                }
            }
            OpKind::Embedding => {
                let (ro, re) = rows(out);
                let (co, ce) = cols(out);
                result.push((ins[0].id, Region::new(vec![ro], vec![re])));
                let vocab = ins[1].dims[0];
                result.push((ins[1].id, Region::new(vec![0, co], vec![vocab, ce])));
            }
            OpKind::TopKSoftmax => {
                let (ro, re) = rows(out);
                let e = ins[0].dims[1];
                result.push((ins[0].id, Region::new(vec![ro, 0], vec![re, e])));
            }
            OpKind::AllGather => {
                let last = out.rank() - 1;
                let slice = ins[0].dims[last];
                for (j, t) in ins.iter().enumerate() {
                    let lo = j as u64 * slice;
                    let mut span = out.clone();
                    span.offsets[last] = lo;
                    span.extents[last] = slice;
                    if let Some(mut hit) = out.intersect(&span) {
                        hit.offsets[last] -= lo;
                        result.push((t.id, hit));
                    }
                }
            }
        }
        Ok(result)
    }

    /// Number of distinct devices referenced by ops.
    pub fn device_count(&self) -> u32 {
        self.ops
            .iter()
            .flat_map(|o| o.device_group.iter().copied())
            .max()
            .map_or(1, |d| d + 1)
    }
}
