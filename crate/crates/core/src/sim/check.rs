//! Trace oracles and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{Metrics, SimError, SimTrace};
use crate::decompose::TaskId;
use crate::normalize::{LaunchMode, LinearizedImage, NONE};
use crate::tgraph::TGraph;

pub const MAX_ENUMERATED_TASKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Checks a trace against the image it was produced from. Empty means every
/// task ran once per iteration, never before its launching event activated,
/// every event activated at its last trigger, and pages never overflowed.
pub fn validate_trace(trace: &SimTrace, img: &LinearizedImage) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut bad = |s: String| v.push(Violation(s));
    let iters = trace.iterations;

    let mut runs: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for t in &trace.tasks {
        *runs.entry((t.iteration, t.index)).or_default() += 1;
        let seq = [t.enqueue, t.ready, t.dequeue, t.load_start, t.load_end, t.compute_start, t.compute_end];
        if seq.windows(2).any(|w| w[0] > w[1]) {
            bad(format!("iteration {} task {}: intervals out of order {:?}", t.iteration, t.index, seq));
        }
        if t.pages > trace.pages_per_worker {
            bad(format!("task {} holds {} pages", t.index, t.pages));
        }
    }
    for it in 0..iters {
        for i in 0..img.tasks.len() as u32 {
            let n = runs.get(&(it, i)).copied().unwrap_or(0);
            if n != 1 {
                bad(format!("iteration {it} task {i} ran {n} times"));
            }
        }
    }

    let mut act: BTreeMap<(u32, u32), Vec<u64>> = BTreeMap::new();
    for a in &trace.activations {
        act.entry((a.iteration, a.event)).or_default().push(a.time);
    }
    let mut last_trigger: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for t in &trace.tasks {
        let e = img.tasks[t.index as usize].trigger_event;
        let slot = last_trigger.entry((t.iteration, e)).or_insert(0);
        *slot = (*slot).max(t.compute_end);
    }
    let mut iter_start = 0;
    for it in 0..iters {
        for (e, rec) in img.events.iter().enumerate() {
            let e = e as u32;
            let times = act.get(&(it, e)).cloned().unwrap_or_default();
            if times.len() != 1 {
                bad(format!("iteration {it} event {e} activated {} times", times.len()));
                continue;
            }
            let expected = if e == img.start_event || rec.needed == 0 {
                iter_start
            } else {
                last_trigger.get(&(it, e)).copied().unwrap_or(u64::MAX)
            };
            if times[0] != expected {
                bad(format!("iteration {it} event {e} activated at {} but its last trigger arrived at {expected}", times[0]));
            }
        }
        if let Some(t) = act.get(&(it, img.end_event)).and_then(|t| t.first()) {
            iter_start = *t;
        }
    }
    for t in &trace.tasks {
        let dep = img.tasks[t.index as usize].dependent_event;
        let dep = if dep == NONE { img.start_event } else { dep };
        if let Some(&[a]) = act.get(&(t.iteration, dep)).map(Vec::as_slice) {
            if t.dequeue < a || t.load_start < a {
                bad(format!("iteration {} task {} started at {} before event {dep} activated at {a}", t.iteration, t.index, t.load_start));
            }
        }
    }

    // page sweep per worker; releases sort before acquires at equal times
    let mut by_worker: BTreeMap<u32, Vec<(u64, i64)>> = BTreeMap::new();
    for t in &trace.tasks {
        let w = by_worker.entry(t.worker).or_default();
        w.push((t.dequeue, t.pages as i64));
        w.push((t.compute_end, -(t.pages as i64)));
    }
    for (w, mut evs) in by_worker {
        evs.sort();
        let mut held = 0i64;
        for (time, delta) in evs {
            held += delta;
            if held < 0 || held > trace.pages_per_worker as i64 {
                bad(format!("worker {w} holds {held} pages at t={time}"));
                break;
            }
        }
    }
    v
}

/// Every topological order of the tasks of a small graph.
pub fn enumerate_schedules(g: &TGraph) -> Result<BTreeSet<Vec<TaskId>>, SimError> {
    if g.tasks.len() > MAX_ENUMERATED_TASKS {
        return Err(SimError::TooLarge(g.tasks.len()));
    }
    let closure = g.task_closure();
    let ids: Vec<TaskId> = g.tasks.keys().copied().collect();
    let preds: Vec<Vec<usize>> = (0..ids.len())
        .map(|j| (0..ids.len()).filter(|&i| closure.precedes(ids[i], ids[j])).collect())
        .collect();
    fn go(ids: &[TaskId], preds: &[Vec<usize>], used: &mut Vec<bool>, cur: &mut Vec<TaskId>, out: &mut BTreeSet<Vec<TaskId>>) {
        if cur.len() == ids.len() {
            out.insert(cur.clone());
            return;
        }
        for j in 0..ids.len() {
            if !used[j] && preds[j].iter().all(|&i| used[i]) {
                used[j] = true;
                cur.push(ids[j]);
                go(ids, preds, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = BTreeSet::new();
    go(&ids, &preds, &mut vec![false; ids.len()], &mut Vec::new(), &mut out);
    Ok(out)
}

/// Task ids of one iteration in dequeue order.
pub fn trace_order(trace: &SimTrace, iteration: u32) -> Vec<TaskId> {
    let mut ts: Vec<_> = trace.tasks.iter().filter(|t| t.iteration == iteration).collect();
    ts.sort_by_key(|t| (t.dequeue, t.index));
    ts.iter().map(|t| TaskId(t.task_id)).collect()
}

fn merge(mut iv: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    iv.retain(|(a, b)| b > a);
    iv.sort();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn measure(iv: &[(u64, u64)]) -> u64 {
    iv.iter().map(|(a, b)| b - a).sum()
}

fn overlap(x: &[(u64, u64)], y: &[(u64, u64)]) -> u64 {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < x.len() && j < y.len() {
        let lo = x[i].0.max(y[j].0);
        let hi = x[i].1.min(y[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if x[i].1 < y[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

pub fn compute_metrics(trace: &SimTrace) -> Metrics {
    if trace.tasks.is_empty() {
        return Metrics::default();
    }
    let makespan = trace.tasks.iter().map(|t| t.compute_end).max().unwrap_or(0);
    let mut busy: BTreeMap<u32, Vec<(u64, u64)>> = BTreeMap::new();
    let mut compute: BTreeMap<u32, Vec<(u64, u64)>> = BTreeMap::new();
    let mut copy: BTreeMap<u32, Vec<(u64, u64)>> = BTreeMap::new();
    for t in &trace.tasks {
        busy.entry(t.worker).or_default().push((t.dequeue, t.compute_end));
        compute.entry(t.worker).or_default().push((t.compute_start, t.compute_end));
        copy.entry(t.worker).or_default().push((t.load_start, t.load_end));
    }
    let (mut busy_total, mut bubble) = (0u64, 0u64);
    for (w, iv) in busy {
        busy_total += measure(&merge(iv));
        let c = merge(compute.remove(&w).unwrap_or_default());
        let k = merge(copy.remove(&w).unwrap_or_default());
        bubble += measure(&c) - overlap(&c, &k);
    }
    let n = trace.tasks.len() as f64;
    let denom = trace.total_workers as f64 * makespan as f64;
    Metrics {
        makespan,
        utilization: if denom > 0.0 { busy_total as f64 / denom } else { 0.0 },
        bubble_fraction: if busy_total > 0 { bubble as f64 / busy_total as f64 } else { 0.0 },
        jit_tasks: trace.tasks.iter().filter(|t| t.mode == LaunchMode::Jit).count() as u64,
        aot_tasks: trace.tasks.iter().filter(|t| t.mode == LaunchMode::Aot).count() as u64,
        mean_queue_wait: trace.tasks.iter().map(|t| (t.dequeue - t.ready) as f64).sum::<f64>() / n,
    }
}
