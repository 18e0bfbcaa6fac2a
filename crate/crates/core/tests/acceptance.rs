//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use tgraph::compile::{compile, CompileOptions, Compiled};
use tgraph::decompose::{decompose_graph, TaskId};
use tgraph::ir::{CompGraph, OpAttrs, OpId, OpKind, OpNode, TensorId, TensorSpec};
use tgraph::mpkg::{deserialize, serialize, DEFAULT_DESCRIPTOR_SIZE, HEADER_SIZE};
use tgraph::normalize::NONE;
use tgraph::profile::HardwareProfile;
use tgraph::sim::{enumerate_schedules, simulate, trace_order, validate_trace, DurationModel, ForceMode, SimOptions};
use tgraph::tgraph::{build_raw_events, fuse_fixpoint, Granularity, TGraph};
use tgraph::workloads::{
    acceptance_matmul_allreduce, acceptance_matmul_chain, random_dag, standard_fixtures, transformer_block, TRANSFORMER_SEQS,
};

type Outcome = Result<String, String>;

fn h100() -> HardwareProfile {
    HardwareProfile::h100()
}

fn build(g: &CompGraph, p: &HardwareProfile, granularity: Granularity, force: ForceMode) -> Compiled {
    compile(g, p, CompileOptions { granularity, force }).expect("fixture compiles")
}

/// Reachability by breadth-first search over task → event → task edges.
fn closure_oracle(g: &TGraph) -> BTreeSet<(TaskId, TaskId)> {
    let mut succ: BTreeMap<TaskId, BTreeSet<TaskId>> = BTreeMap::new();
    for e in g.events.values() {
        for a in &e.in_tasks {
            succ.entry(*a).or_default().extend(&e.out_tasks);
        }
    }
    let mut out = BTreeSet::new();
    for &a in g.tasks.keys() {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<TaskId> = succ.get(&a).into_iter().flatten().copied().collect();
        while let Some(b) = queue.pop_front() {
            if seen.insert(b) {
                queue.extend(succ.get(&b).into_iter().flatten().copied());
            }
        }
        out.extend(seen.into_iter().map(|b| (a, b)));
    }
    out
}

/// (fan-in, fan-out) counts per task, by scanning events.
fn degrees(g: &TGraph) -> BTreeMap<TaskId, (usize, usize)> {
    let mut d: BTreeMap<TaskId, (usize, usize)> = g.tasks.keys().map(|t| (*t, (0, 0))).collect();
    for e in g.events.values() {
        for t in &e.out_tasks {
            d.get_mut(t).unwrap().0 += 1;
        }
        for t in &e.in_tasks {
            d.get_mut(t).unwrap().1 += 1;
        }
    }
    d
}

fn c1_linearization() -> Outcome {
    let mut max_tasks = 0;
    for seed in 0..1000u64 {
        // shrink the real-task target until the normalized graph fits in 200 tasks
        let mut target = 1 + (seed % 150) as u32;
        let c = loop {
            let c = build(&random_dag(target, seed).unwrap(), &h100(), Granularity::Fine, ForceMode::Hybrid);
            if c.normalized.tasks.len() <= 200 {
                break c;
            }
            target = target * 3 / 4;
        };
        let n = &c.normalized;
        max_tasks = max_tasks.max(n.tasks.len());
        let placed: Vec<u32> = c.image.tasks.iter().map(|t| t.decode().task_id).collect();
        let unique: BTreeSet<u32> = placed.iter().copied().collect();
        let expected: BTreeSet<u32> = n.tasks.keys().map(|t| t.0).collect();
        if placed.len() != n.tasks.len() || unique != expected {
            return Err(format!("seed {seed}: tasks not placed exactly once"));
        }
        let pos: BTreeMap<u32, usize> = placed.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        for e in n.events.values() {
            if e.out_tasks.is_empty() {
                continue;
            }
            let idx: Vec<usize> = e.out_tasks.iter().map(|t| pos[&t.0]).collect();
            let (lo, hi) = (*idx.iter().min().unwrap(), *idx.iter().max().unwrap());
            if hi - lo + 1 != e.out_tasks.len() {
                return Err(format!("seed {seed}: event {} launches a non-contiguous range", e.event_id));
            }
        }
        if c.image.events.len() != n.events.len() {
            return Err(format!("seed {seed}: {} events enqueued for {}", c.image.events.len(), n.events.len()));
        }
        if !c.image.violations().is_empty() {
            return Err(format!("seed {seed}: {:?}", c.image.violations()));
        }
    }
    Ok(format!("1000 random DAGs, up to {max_tasks} tasks, zero violations"))
}

fn c2_fusion() -> Outcome {
    let (mut raw_events, mut fused_events) = (0, 0);
    for seed in 0..500u64 {
        let g = random_dag(1 + (seed % 50) as u32, 10_000 + seed).unwrap();
        let tasks = decompose_graph(&g, &h100()).unwrap();
        let raw = build_raw_events(&tasks, &g, Granularity::Fine);
        let fused = fuse_fixpoint(&raw);
        raw_events += raw.events.len();
        fused_events += fused.events.len();
        if closure_oracle(&raw) != closure_oracle(&fused) {
            return Err(format!("seed {seed}: closure changed by fusion"));
        }
    }
    Ok(format!("500 random DAGs, closure identical; events {raw_events} -> {fused_events}"))
}

fn c3_normalization() -> Outcome {
    let mut graphs: Vec<(String, CompGraph)> = standard_fixtures();
    for seed in 0..200u64 {
        graphs.push((format!("random seed {seed}"), random_dag(1 + (seed % 100) as u32, 30_000 + seed).unwrap()));
    }
    let mut tasks = 0;
    for (name, g) in &graphs {
        let c = build(g, &h100(), Granularity::Fine, ForceMode::Hybrid);
        let start_launched = &c.normalized.events[&c.normalized.start_event].out_tasks;
        for (t, (fan_in, fan_out)) in degrees(&c.normalized) {
            tasks += 1;
            if fan_in > 1 || fan_out != 1 || (fan_in == 0 && !start_launched.contains(&t)) {
                return Err(format!("{name}: task {t} has fan-in {fan_in}, fan-out {fan_out}"));
            }
        }
    }
    let mut ratios = Vec::new();
    for tp in [1, 4] {
        let g = transformer_block(256, 8, 4, tp, &TRANSFORMER_SEQS).unwrap();
        let c = build(&g, &h100(), Granularity::Fine, ForceMode::Hybrid);
        let ratio = c.summary.dummy_ratio;
        ratios.push(format!("tp={tp} {}/{} = {:.3}%", c.summary.dummy_tasks, c.summary.tasks, 100.0 * ratio));
        if ratio >= 0.01 {
            return Err(format!("transformer tp={tp}: dummy ratio {:.3}%", 100.0 * ratio));
        }
    }
    Ok(format!("{} graphs, {tasks} tasks normalized; dummy ratio {}", graphs.len(), ratios.join(", ")))
}

fn c4_serialization() -> Outcome {
    let mut checked = 0;
    for (name, g) in standard_fixtures() {
        let c = build(&g, &h100(), Granularity::Fine, ForceMode::Hybrid);
        let bytes = serialize(&c.image);
        let back = deserialize(&bytes).map_err(|e| format!("{name}: verify failed: {e}"))?;
        if serialize(&back) != bytes || back != c.image {
            return Err(format!("{name}: round trip not bit-exact"));
        }
        if c.image.descriptor_size != 352 || DEFAULT_DESCRIPTOR_SIZE != 352 {
            return Err(format!("{name}: descriptor size {}", c.image.descriptor_size));
        }
        let (n, m) = (c.image.tasks.len(), c.image.events.len());
        if n > 0 && (bytes.len() - HEADER_SIZE - 12 * m) / n != 12 + 352 {
            return Err(format!("{name}: task record is not 12 + 352 bytes"));
        }
        checked += 1;
    }
    let c = build(&standard_fixtures()[0].1, &h100(), Granularity::Fine, ForceMode::Hybrid);
    let bytes = serialize(&c.image);
    let event_base = bytes.len() - 12 * c.image.events.len();
    let ranged = c.image.events.iter().position(|e| e.first_task != NONE).unwrap();
    let mut corruptions: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut b = bytes.clone();
    let o = event_base + 12 * ranged + 8;
    b[o..o + 4].copy_from_slice(&(c.image.tasks.len() as u32 + 5).to_le_bytes());
    corruptions.push(("range field", b));
    let mut b = bytes.clone();
    let o = event_base + 12 * c.image.end_event as usize;
    let needed = u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    b[o..o + 4].copy_from_slice(&(needed + 1).to_le_bytes());
    corruptions.push(("needed count", b));
    let mut b = bytes.clone();
    b[..4].copy_from_slice(b"XPKG");
    corruptions.push(("magic", b));
    for (what, b) in &corruptions {
        if deserialize(b).is_ok() {
            return Err(format!("corrupted {what} accepted"));
        }
    }
    Ok(format!("{checked} fixture images round-trip bit-exactly; 352-byte descriptors; 3/3 corruptions rejected"))
}

/// X → Elementwise → Elementwise, one task each.
fn two_task_chain() -> CompGraph {
    let t = |id: u32| TensorSpec { id: TensorId(id), dims: vec![64, 64], elem_size: 2, device: 0 };
    let op = |id: u32| OpNode {
        id: OpId(id),
        kind: OpKind::Elementwise,
        inputs: vec![TensorId(id)],
        output: TensorId(id + 1),
        attrs: OpAttrs { partition: Some(vec![1, 1]), ..OpAttrs::default() },
        data_dependent: None,
        device_group: vec![0],
    };
    CompGraph { tensors: (0..3).map(t).collect(), ops: vec![op(0), op(1)] }
}

fn c5_launch_latency() -> Outcome {
    let g = two_task_chain();
    let mut seen = Vec::new();
    for l in [500u64, 800, 1200] {
        let p = HardwareProfile { sync_latency: l, ..h100() };
        for (force, expected) in [(ForceMode::Aot, l), (ForceMode::Jit, 2 * l + p.dispatch_cost)] {
            let c = build(&g, &p, Granularity::Fine, force);
            let opts = SimOptions { pipelining: false, ..SimOptions::default() };
            let t = simulate(&c.image, &p, &DurationModel::default(), opts).map_err(|e| e.to_string())?;
            let by_id: BTreeMap<u32, _> = t.tasks.iter().map(|r| (r.task_id, r)).collect();
            let gap = by_id[&1].load_start - by_id[&0].compute_end;
            if gap != expected {
                return Err(format!("L_sync={l} {force:?}: gap {gap}, expected {expected}"));
            }
            seen.push(format!("{gap}"));
        }
    }
    Ok(format!("gaps (AOT, JIT) for L_sync 500/800/1200: {}", seen.join(", ")))
}

fn c6_schedule_oracle() -> Outcome {
    let p = HardwareProfile { num_workers: 3, ..h100() };
    let (mut graphs, mut seed) = (0, 40_000u64);
    let forces = [ForceMode::Hybrid, ForceMode::Jit, ForceMode::Aot];
    while graphs < 50 {
        seed += 1;
        let g = random_dag(2 + (seed % 5) as u32, seed).unwrap();
        let force = forces[graphs % 3];
        let c = build(&g, &p, Granularity::Fine, force);
        if c.normalized.tasks.len() > 8 {
            continue;
        }
        let schedules = enumerate_schedules(&c.normalized).map_err(|e| e.to_string())?;
        for pipelining in [false, true] {
            let opts = SimOptions { pipelining, ..SimOptions::default() };
            let t = simulate(&c.image, &p, &DurationModel::default(), opts).map_err(|e| e.to_string())?;
            let order = trace_order(&t, 0);
            if !schedules.contains(&order) {
                return Err(format!("seed {seed}: order {order:?} is not a topological order"));
            }
        }
        graphs += 1;
    }
    Ok("50 graphs of at most 8 tasks, every simulated order is a valid topological order".into())
}

fn c7_overlap() -> Outcome {
    let g = acceptance_matmul_allreduce();
    let p = h100();
    let run = |gran| {
        let c = build(&g, &p, gran, ForceMode::Hybrid);
        simulate(&c.image, &p, &DurationModel::default(), SimOptions::default()).map(|t| t.makespan)
    };
    let fine = run(Granularity::Fine).map_err(|e| e.to_string())?;
    let coarse = run(Granularity::Coarse).map_err(|e| e.to_string())?;
    let reduction = 1.0 - fine as f64 / coarse as f64;
    let msg = format!("fine {fine} vs coarse {coarse}: {:.1}% shorter ({:.2}x)", 100.0 * reduction, coarse as f64 / fine as f64);
    if fine < coarse && reduction >= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_pipelining() -> Outcome {
    let p = HardwareProfile { num_workers: 1, ..h100() };
    let c = build(&acceptance_matmul_chain(), &p, Granularity::Fine, ForceMode::Hybrid);
    let run = |pipelining| simulate(&c.image, &p, &DurationModel::default(), SimOptions { pipelining, ..SimOptions::default() });
    let on = run(true).map_err(|e| e.to_string())?;
    let off = run(false).map_err(|e| e.to_string())?;
    let mut seq: Vec<_> = off.tasks.iter().filter(|t| t.kind != tgraph::decompose::TaskKind::Dummy).collect();
    seq.sort_by_key(|t| t.dequeue);
    if let Some(t) = seq.iter().find(|t| 2 * t.pages > p.pages_per_worker) {
        return Err(format!("task {} needs {} pages", t.task_id, t.pages));
    }
    let expected: u64 = seq
        .windows(2)
        .map(|w| (w[1].load_end - w[1].load_start).min(w[0].compute_end - w[0].compute_start))
        .sum();
    let saved = off.makespan as i64 - on.makespan as i64;
    let msg = format!(
        "pipelined {} vs serial {}: saved {saved}, overlap sum {expected} ({:.2}x)",
        on.makespan,
        off.makespan,
        off.makespan as f64 / on.makespan as f64
    );
    if on.makespan < off.makespan && saved == expected as i64 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_matrix() -> Outcome {
    let started = Instant::now();
    let mut runs = 0;
    for (name, g) in standard_fixtures() {
        for p in HardwareProfile::builtins() {
            for force in [ForceMode::Hybrid, ForceMode::Jit, ForceMode::Aot] {
                let c = build(&g, &p, Granularity::Fine, force);
                for pipelining in [true, false] {
                    let opts = SimOptions { pipelining, ..SimOptions::default() };
                    let t = simulate(&c.image, &p, &DurationModel::default(), opts)
                        .map_err(|e| format!("{name} {} {force:?} pipelining={pipelining}: {e}", p.name))?;
                    let v = validate_trace(&t, &c.image);
                    if !v.is_empty() {
                        return Err(format!("{name} {} {force:?} pipelining={pipelining}: {}", p.name, v[0]));
                    }
                    runs += 1;
                }
            }
        }
    }
    let took = started.elapsed();
    if took > Duration::from_secs(300) {
        return Err(format!("{runs} runs took {took:?}"));
    }
    Ok(format!("{runs} runs without deadlock or trace violations in {:.1}s", took.as_secs_f64()))
}

fn c10_determinism() -> Outcome {
    for (name, g) in standard_fixtures() {
        let a = build(&g, &h100(), Granularity::Fine, ForceMode::Hybrid);
        let b = build(&g, &h100(), Granularity::Fine, ForceMode::Hybrid);
        if serialize(&a.image) != serialize(&b.image) {
            return Err(format!("{name}: image differs"));
        }
        for (x, y) in [(&a.raw, &b.raw), (&a.fused, &b.fused), (&a.normalized, &b.normalized)] {
            if x.to_dot() != y.to_dot() {
                return Err(format!("{name}: DOT differs"));
            }
        }
        if a.image.to_dot() != b.image.to_dot() {
            return Err(format!("{name}: linearized DOT differs"));
        }
        let opts = SimOptions { iterations: 2, jitter_pct: 10, seed: 3, ..SimOptions::default() };
        let ta = simulate(&a.image, &h100(), &DurationModel::default(), opts).unwrap();
        let tb = simulate(&b.image, &h100(), &DurationModel::default(), opts).unwrap();
        if ta.to_json_lines() != tb.to_json_lines() {
            return Err(format!("{name}: trace differs"));
        }
    }
    Ok("images, DOT for every stage, and traces identical across repeated runs".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("linearization contiguity", c1_linearization),
        ("fusion soundness", c2_fusion),
        ("normalization shape and overhead", c3_normalization),
        ("serialization", c4_serialization),
        ("launch-latency law", c5_launch_latency),
        ("schedule-oracle containment", c6_schedule_oracle),
        ("overlap ablation", c7_overlap),
        ("pipelining ablation", c8_pipelining),
        ("liveness and safety matrix", c9_matrix),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
