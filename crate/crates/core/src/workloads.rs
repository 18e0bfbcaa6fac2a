//! Fixture computation graphs and a seeded random-DAG generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{CompGraph, OpAttrs, OpId, OpKind, OpNode, TensorId, TensorSpec};

/// bf16 activations and weights.
pub const ELEM_SIZE: u32 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid fixture parameters: {0}")]
    Params(String),
    #[error("unknown fixture {0:?}")]
    Unknown(String),
}

fn params(msg: impl Into<String>) -> WorkloadError {
    WorkloadError::Params(msg.into())
}

#[derive(Default)]
struct Builder {
    g: CompGraph,
}

impl Builder {
    fn tensor(&mut self, dims: &[u64], device: u32) -> TensorId {
        let id = TensorId(self.g.tensors.len() as u32);
        self.g.tensors.push(TensorSpec { id, dims: dims.to_vec(), elem_size: ELEM_SIZE, device });
        id
    }

    fn dims(&self, t: TensorId) -> Vec<u64> {
        self.g.tensors[t.0 as usize].dims.clone()
    }

    fn op(&mut self, kind: OpKind, inputs: Vec<TensorId>, out_dims: &[u64], group: Vec<u32>, attrs: OpAttrs) -> TensorId {
        let device = group.first().copied().unwrap_or(0);
        let output = self.tensor(out_dims, device);
        let id = OpId(self.g.ops.len() as u32);
        self.g.ops.push(OpNode { id, kind, inputs, output, attrs, data_dependent: None, device_group: group });
        output
    }

    fn matmul(&mut self, a: TensorId, b: TensorId, device: u32) -> TensorId {
        let (m, n) = (self.dims(a)[0], self.dims(b)[1]);
        self.op(OpKind::MatMul, vec![a, b], &[m, n], vec![device], OpAttrs::default())
    }

    fn weight(&mut self, rows: u64, cols: u64, device: u32) -> TensorId {
        self.tensor(&[rows, cols], device)
    }
}

/// Q/K/V projections, attention, then output projection and RMSNorm both
/// reading the attention result.
pub fn attention_block(d_model: u64, n_heads: u64, seqs: &[u64]) -> Result<CompGraph, WorkloadError> {
    if seqs.is_empty() {
        return Err(params("attention block needs at least one request"));
    }
    if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(params(format!("d_model {d_model} must be a positive multiple of n_heads {n_heads}")));
    }
    if seqs.contains(&0) {
        return Err(params("sequence lengths must be positive"));
    }
    let r = seqs.len() as u64;
    let mut b = Builder::default();
    let x = b.tensor(&[r, d_model], 0);
    let qkv: Vec<TensorId> = (0..3)
        .map(|_| {
            let w = b.weight(d_model, d_model, 0);
            b.matmul(x, w, 0)
        })
        .collect();
    let attrs = OpAttrs { seq_lens: Some(seqs.to_vec()), num_heads: Some(n_heads), ..OpAttrs::default() };
    let a = b.op(OpKind::Attention, qkv, &[r, d_model], vec![0], attrs);
    let wo = b.weight(d_model, d_model, 0);
    b.matmul(a, wo, 0);
    let gamma = b.tensor(&[d_model], 0);
    b.op(OpKind::RMSNorm, vec![a, gamma], &[r, d_model], vec![0], OpAttrs::default());
    Ok(b.g)
}

/// Row-parallel MatMul shards, one per device, summed by an AllReduce.
/// `ar_tiles` splits the AllReduce output rows; `mm_partition` overrides the
/// MatMul tiling.
pub fn matmul_allreduce(
    m: u64,
    k: u64,
    n: u64,
    tp: u32,
    ar_tiles: Option<u64>,
    mm_partition: Option<Vec<u64>>,
) -> Result<CompGraph, WorkloadError> {
    if tp < 2 {
        return Err(params("matmul+allreduce needs a tensor-parallel degree of at least 2"));
    }
    if m == 0 || n == 0 || k == 0 || !k.is_multiple_of(tp as u64) {
        return Err(params(format!("K={k} must be a positive multiple of tp={tp}")));
    }
    let mut b = Builder::default();
    let shard = k / tp as u64;
    let mut partials = Vec::new();
    for dev in 0..tp {
        let x = b.tensor(&[m, shard], dev);
        let w = b.weight(shard, n, dev);
        let attrs = OpAttrs { partition: mm_partition.clone(), logical_id: Some(0), ..OpAttrs::default() };
        partials.push(b.op(OpKind::MatMul, vec![x, w], &[m, n], vec![dev], attrs));
    }
    let attrs = OpAttrs { partition: ar_tiles.map(|t| vec![t, 1]), ..OpAttrs::default() };
    b.op(OpKind::AllReduce, partials, &[m, n], (0..tp).collect(), attrs);
    Ok(b.g)
}

/// Attention block and gated MLP, each followed by an AllReduce when
/// `tp > 1`. Weights are sharded so every device runs its own replica chain.
pub fn transformer_block(d_model: u64, n_heads: u64, ffn_mult: u64, tp: u32, seqs: &[u64]) -> Result<CompGraph, WorkloadError> {
    let tpu = tp as u64;
    if seqs.is_empty() || seqs.contains(&0) {
        return Err(params("transformer block needs positive sequence lengths"));
    }
    if tp == 0 || n_heads == 0 || !n_heads.is_multiple_of(tpu) || !d_model.is_multiple_of(n_heads) || ffn_mult == 0 {
        return Err(params(format!("inconsistent shapes: d={d_model} h={n_heads} ffn={ffn_mult} tp={tp}")));
    }
    let r = seqs.len() as u64;
    let (dl, ffl) = (d_model / tpu, ffn_mult * d_model / tpu);
    let group: Vec<u32> = (0..tp).collect();
    let mut b = Builder::default();
    let xs: Vec<TensorId> = (0..tp).map(|d| b.tensor(&[r, d_model], d)).collect();

    let rms = |b: &mut Builder, x: TensorId, dev: u32, lid: u32| {
        let gamma = b.tensor(&[d_model], dev);
        let attrs = OpAttrs { logical_id: Some(lid), ..OpAttrs::default() };
        b.op(OpKind::RMSNorm, vec![x, gamma], &[r, d_model], vec![dev], attrs)
    };
    let proj = |b: &mut Builder, x: TensorId, rows: u64, cols: u64, dev: u32, lid: u32| {
        let w = b.weight(rows, cols, dev);
        let m = b.dims(x)[0];
        let attrs = OpAttrs { logical_id: Some(lid), ..OpAttrs::default() };
        b.op(OpKind::MatMul, vec![x, w], &[m, cols], vec![dev], attrs)
    };

    let mut attn_out = Vec::new();
    for dev in 0..tp {
        let n1 = rms(&mut b, xs[dev as usize], dev, 0);
        let qkv: Vec<TensorId> = (1..=3).map(|lid| proj(&mut b, n1, d_model, dl, dev, lid)).collect();
        let attrs = OpAttrs {
            seq_lens: Some(seqs.to_vec()),
            num_heads: Some(n_heads / tpu),
            logical_id: Some(4),
            ..OpAttrs::default()
        };
        let a = b.op(OpKind::Attention, qkv, &[r, dl], vec![dev], attrs);
        attn_out.push(proj(&mut b, a, dl, d_model, dev, 5));
    }
    let reduce = |b: &mut Builder, parts: Vec<TensorId>, lid: u32| -> Vec<TensorId> {
        if tp == 1 {
            return parts;
        }
        let attrs = OpAttrs { logical_id: Some(lid), ..OpAttrs::default() };
        let y = b.op(OpKind::AllReduce, parts, &[r, d_model], group.clone(), attrs);
        vec![y; tp as usize]
    };
    let ys = reduce(&mut b, attn_out, 6);

    let mut mlp_out = Vec::new();
    for dev in 0..tp {
        let n2 = rms(&mut b, ys[dev as usize], dev, 7);
        let gate = proj(&mut b, n2, d_model, ffl, dev, 8);
        let up = proj(&mut b, n2, d_model, ffl, dev, 9);
        let attrs = OpAttrs { logical_id: Some(10), ..OpAttrs::default() };
        let h = b.op(OpKind::Elementwise, vec![gate, up], &[r, ffl], vec![dev], attrs);
        mlp_out.push(proj(&mut b, h, ffl, d_model, dev, 11));
    }
    reduce(&mut b, mlp_out, 12);
    Ok(b.g)
}

/// `count` independent single-task MatMuls sharing one activation, forming a
/// back-to-back task sequence on a single worker.
pub fn matmul_chain(count: u32, m: u64, k: u64, n: u64) -> Result<CompGraph, WorkloadError> {
    if count == 0 || m == 0 || k == 0 || n == 0 {
        return Err(params("matmul chain needs positive sizes"));
    }
    let mut b = Builder::default();
    let x = b.tensor(&[m, k], 0);
    for _ in 0..count {
        let w = b.weight(k, n, 0);
        let attrs = OpAttrs { partition: Some(vec![1, 1]), ..OpAttrs::default() };
        b.op(OpKind::MatMul, vec![x, w], &[m, n], vec![0], attrs);
    }
    Ok(b.g)
}

/// Random Elementwise/MatMul DAG over square tensors whose partition
/// overrides sum to exactly `target_tasks` tasks.
pub fn random_dag(target_tasks: u32, seed: u64) -> Result<CompGraph, WorkloadError> {
    if target_tasks == 0 {
        return Err(params("random DAG needs at least one task"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = [8u64, 16, 32, 64][rng.gen_range(0..4)];
    let mut b = Builder::default();
    let mut pool: Vec<TensorId> = (0..rng.gen_range(1..=3)).map(|_| b.tensor(&[side, side], 0)).collect();
    let mut left = target_tasks as u64;
    while left > 0 {
        let splits = [1u64, 2, 4];
        let s0 = *splits.iter().filter(|&&s| s <= left).nth(rng.gen_range(0..3)).unwrap_or(&1);
        let s1_max = left / s0;
        let s1 = *splits.iter().filter(|&&s| s <= s1_max).nth(rng.gen_range(0..3)).unwrap_or(&1);
        left -= s0 * s1;
        let attrs = OpAttrs { partition: Some(vec![s0, s1]), ..OpAttrs::default() };
        // lean towards recent tensors so graphs grow deep as well as wide
        let pick = |rng: &mut ChaCha8Rng| {
            let lo = pool.len().saturating_sub(4);
            if rng.gen_bool(0.7) {
                pool[rng.gen_range(lo..pool.len())]
            } else {
                pool[rng.gen_range(0..pool.len())]
            }
        };
        let out = if rng.gen_bool(0.5) {
            let (a, w) = (pick(&mut rng), pick(&mut rng));
            b.op(OpKind::MatMul, vec![a, w], &[side, side], vec![0], attrs)
        } else {
            let arity = rng.gen_range(1..=3);
            let mut ins: Vec<TensorId> = (0..arity).map(|_| pick(&mut rng)).collect();
            ins.sort();
            ins.dedup();
            b.op(OpKind::Elementwise, ins, &[side, side], vec![0], attrs)
        };
        pool.push(out);
    }
    Ok(b.g)
}

/// Named fixture with every generator parameter; unset fields take defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub name: String,
    pub d_model: u64,
    pub n_heads: u64,
    pub ffn_mult: u64,
    pub tp: u32,
    pub seqs: Vec<u64>,
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub tiles: Option<u64>,
    /// MatMul split for `matmul-allreduce`; chosen by the cost model when unset.
    pub mm_partition: Option<Vec<u64>>,
    pub count: u32,
    pub target: u32,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            d_model: 256,
            n_heads: 8,
            ffn_mult: 4,
            tp: 1,
            seqs: vec![512; 32],
            m: 1024,
            k: 4096,
            n: 2048,
            tiles: None,
            mm_partition: None,
            count: 16,
            target: 64,
            seed: 0,
        }
    }

    pub fn generate(&self) -> Result<CompGraph, WorkloadError> {
        match self.name.as_str() {
            "attention" => attention_block(self.d_model, self.n_heads, &self.seqs),
            "matmul-allreduce" => matmul_allreduce(self.m, self.k, self.n, self.tp.max(2), self.tiles, self.mm_partition.clone()),
            "transformer" => transformer_block(self.d_model, self.n_heads, self.ffn_mult, self.tp, &self.seqs),
            "matmul-chain" => matmul_chain(self.count, self.m, self.k, self.n),
            "random" => random_dag(self.target, self.seed),
            other => Err(WorkloadError::Unknown(other.to_string())),
        }
    }
}

pub const FIXTURE_NAMES: [&str; 5] = ["attention", "matmul-allreduce", "transformer", "matmul-chain", "random"];

/// Fixtures shared by the acceptance matrix: (label, graph).
pub fn standard_fixtures() -> Vec<(String, CompGraph)> {
    let mut out = vec![
        ("attention".to_string(), attention_block(64, 4, &[8]).unwrap()),
        ("attention-skewed".to_string(), attention_block(64, 4, &[8, 4096]).unwrap()),
        ("matmul-allreduce".to_string(), acceptance_matmul_allreduce()),
        ("transformer-tp1".to_string(), transformer_block(256, 8, 4, 1, &TRANSFORMER_SEQS).unwrap()),
        ("transformer-tp4".to_string(), transformer_block(256, 8, 4, 4, &TRANSFORMER_SEQS).unwrap()),
        ("matmul-chain".to_string(), acceptance_matmul_chain()),
    ];
    for seed in 0..3 {
        out.push((format!("random-{seed}"), random_dag(48, seed).unwrap()));
    }
    out
}

/// Request batch of the overhead benchmark.
pub const TRANSFORMER_SEQS: [u64; 32] = [512; 32];

/// MatMul+AllReduce of the overlap ablation: tp=4, 16 AllReduce tiles and a
/// MatMul tiling of one and a half waves on 128 workers.
pub fn acceptance_matmul_allreduce() -> CompGraph {
    matmul_allreduce(1024, 4096, 2048, 4, Some(16), Some(vec![16, 12])).unwrap()
}

/// Sixteen MatMuls of two pages each.
pub fn acceptance_matmul_chain() -> CompGraph {
    matmul_chain(16, 128, 128, 128).unwrap()
}
