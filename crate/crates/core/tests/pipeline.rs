use tgraph::compile::{compile, CompileOptions, Compiled};
use tgraph::decompose::TaskKind;
use tgraph::ir::{CompGraph, OpAttrs, OpId, OpKind, OpNode, TensorId, TensorSpec};
use tgraph::normalize::LaunchMode;
use tgraph::profile::HardwareProfile;
use tgraph::sim::{simulate, validate_trace, DurationModel, ForceMode, SimOptions};
use tgraph::tgraph::Granularity;
use tgraph::workloads::{attention_block, matmul_allreduce, standard_fixtures};

fn build(g: &CompGraph, granularity: Granularity) -> Compiled {
    compile(g, &HardwareProfile::h100(), CompileOptions { granularity, force: ForceMode::Hybrid }).unwrap()
}

#[test]
fn skewed_requests_spread_attention_durations() {
    let c = build(&attention_block(64, 4, &[8, 4096]).unwrap(), Granularity::Fine);
    let even = build(&attention_block(64, 4, &[8, 8]).unwrap(), Granularity::Fine);
    assert_eq!(c.image.tasks.len(), even.image.tasks.len());
    let flops: Vec<u64> = c
        .image
        .tasks
        .iter()
        .filter(|t| t.kind == TaskKind::Attention)
        .map(|t| t.decode().flops)
        .collect();
    // attention work is linear in sequence length
    let (lo, hi) = (*flops.iter().min().unwrap(), *flops.iter().max().unwrap());
    assert_eq!(hi, 512 * lo, "{flops:?}");
}

#[test]
fn allreduce_expands_per_device_and_tile() {
    let g = matmul_allreduce(64, 64, 64, 4, Some(4), None).unwrap();
    let c = build(&g, Granularity::Fine);
    let count = |k| c.raw.tasks.values().filter(|t| t.kind == k).count();
    assert_eq!(count(TaskKind::CommSend), 16);
    assert_eq!(count(TaskKind::Reduce), 16);
}

#[test]
fn coarse_events_wait_for_more_triggers() {
    for (name, g) in standard_fixtures() {
        let fine = build(&g, Granularity::Fine).summary;
        let coarse = build(&g, Granularity::Coarse).summary;
        assert!(coarse.max_needed >= fine.max_needed, "{name}: {fine:?} vs {coarse:?}");
        assert!(coarse.events <= fine.events, "{name}");
    }
}

#[test]
fn data_dependent_attention_and_its_consumers_are_jit() {
    let g = attention_block(64, 4, &[8, 16, 32, 64]).unwrap();
    let c = build(&g, Granularity::Fine);
    for t in c.normalized.tasks.values() {
        let Some(op) = t.op_id else { continue };
        if g.ops[op.0 as usize].kind == OpKind::Attention {
            assert_eq!(c.modes[&t.task_id], LaunchMode::Jit);
        }
    }
    // Q/K/V projections run before attention and stay AOT
    assert!(c.normalized.tasks.values().any(|t| t.op_id.map(|o| o.0) == Some(0) && c.modes[&t.task_id] == LaunchMode::Aot));
}

#[test]
fn pipelining_is_monotone_on_fixtures() {
    for (name, g) in standard_fixtures() {
        for p in HardwareProfile::builtins() {
            let c = compile(&g, &p, CompileOptions::default()).unwrap();
            let run = |pipelining| {
                simulate(&c.image, &p, &DurationModel::default(), SimOptions { pipelining, ..SimOptions::default() })
                    .unwrap()
                    .makespan
            };
            assert!(run(true) <= run(false), "{name} on {}", p.name);
        }
    }
}

/// `n` single-task Elementwise ops, each reading the previous output.
fn elementwise_chain(n: u32) -> CompGraph {
    let tensor = |id: u32| TensorSpec { id: TensorId(id), dims: vec![64, 64], elem_size: 2, device: 0 };
    let op = |id: u32| OpNode {
        id: OpId(id),
        kind: OpKind::Elementwise,
        inputs: vec![TensorId(id)],
        output: TensorId(id + 1),
        attrs: OpAttrs { partition: Some(vec![1, 1]), ..OpAttrs::default() },
        data_dependent: None,
        device_group: vec![0],
    };
    CompGraph { tensors: (0..=n).map(tensor).collect(), ops: (0..n).map(op).collect() }
}

#[test]
fn serial_chain_utilization_matches_closed_form() {
    let n = 8u64;
    let p = HardwareProfile { num_workers: 4, ..HardwareProfile::h100() };
    let c = compile(&elementwise_chain(n as u32), &p, CompileOptions::default()).unwrap();
    let t = simulate(&c.image, &p, &DurationModel::default(), SimOptions::default()).unwrap();
    assert!(validate_trace(&t, &c.image).is_empty());
    // 8192 bytes at 25 per unit, 4096 flops at 7500 per unit
    let (load, compute) = (8192u64.div_ceil(25), 1u64);
    let busy = p.descriptor_fetch_latency + n * (load + compute);
    let makespan = busy + (n - 1) * p.sync_latency;
    assert_eq!(t.makespan, makespan);
    let expected = busy as f64 / (4.0 * makespan as f64);
    assert!((t.metrics.utilization - expected).abs() < 1e-12);
    assert!(t.metrics.utilization < 0.25);
}

#[test]
fn corrupted_trace_is_flagged() {
    let c = build(&attention_block(64, 4, &[8]).unwrap(), Granularity::Fine);
    let mut t = simulate(&c.image, &HardwareProfile::h100(), &DurationModel::default(), SimOptions::default()).unwrap();
    assert!(validate_trace(&t, &c.image).is_empty());
    let victim = t.tasks.iter().position(|r| c.image.tasks[r.index as usize].dependent_event != c.image.start_event).unwrap();
    let r = &mut t.tasks[victim];
    let dep = c.image.tasks[r.index as usize].dependent_event;
    let activated = t.activations.iter().find(|a| a.event == dep).unwrap().time;
    r.enqueue = r.enqueue.min(activated - 1);
    r.ready = r.ready.min(activated - 1);
    r.dequeue = activated - 1;
    r.load_start = activated - 1;
    let v = validate_trace(&t, &c.image);
    assert_eq!(v.len(), 1, "{v:?}");
}
