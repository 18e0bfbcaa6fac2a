//! Hybrid JIT/AOT launch classification.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::decompose::TaskId;
use crate::ir::{CompGraph, OpId};
use crate::normalize::{LaunchMode, LinearizedImage};
use crate::tgraph::{EventId, TGraph};

/// Launch-mode override applied on top of the classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceMode {
    #[default]
    Hybrid,
    Jit,
    Aot,
}

/// Walks through dummy tasks to the real tasks on either side of an event.
struct RealEnds<'a> {
    g: &'a TGraph,
    triggers: BTreeMap<TaskId, Vec<EventId>>,
    dependents: BTreeMap<TaskId, Vec<EventId>>,
    producers: BTreeMap<EventId, BTreeSet<TaskId>>,
    consumers: BTreeMap<EventId, BTreeSet<TaskId>>,
}

impl<'a> RealEnds<'a> {
    fn new(g: &'a TGraph) -> Self {
        Self {
            g,
            triggers: g.triggers(),
            dependents: g.dependents(),
            producers: BTreeMap::new(),
            consumers: BTreeMap::new(),
        }
    }

    fn producers(&mut self, e: EventId) -> BTreeSet<TaskId> {
        if let Some(p) = self.producers.get(&e) {
            return p.clone();
        }
        let mut out = BTreeSet::new();
        for t in self.g.events[&e].in_tasks.clone() {
            if self.g.tasks[&t].is_dummy() {
                for de in self.dependents[&t].clone() {
                    out.extend(self.producers(de));
                }
            } else {
                out.insert(t);
            }
        }
        self.producers.insert(e, out.clone());
        out
    }

    fn consumers(&mut self, e: EventId) -> BTreeSet<TaskId> {
        if let Some(c) = self.consumers.get(&e) {
            return c.clone();
        }
        let mut out = BTreeSet::new();
        for t in self.g.events[&e].out_tasks.clone() {
            if self.g.tasks[&t].is_dummy() {
                for te in self.triggers[&t].clone() {
                    out.extend(self.consumers(te));
                }
            } else {
                out.insert(t);
            }
        }
        self.consumers.insert(e, out.clone());
        out
    }
}

/// Operator-granularity launch modes. Data-dependent ops are JIT, and JIT
/// spreads downstream through every event that is not a global barrier: an
/// event whose contributing ops all have every task among its triggers.
/// Dummy tasks follow the real tasks they launch, or their producers when
/// they only feed the end event.
pub fn classify_launch_modes(g: &TGraph, graph: &CompGraph) -> BTreeMap<TaskId, LaunchMode> {
    let op_of = |t: &TaskId| g.tasks[t].op_id;
    let mut op_tasks: BTreeMap<OpId, BTreeSet<TaskId>> = BTreeMap::new();
    for (id, t) in &g.tasks {
        if let Some(op) = t.op_id {
            op_tasks.entry(op).or_default().insert(*id);
        }
    }

    let mut ends = RealEnds::new(g);
    // op → (event is barrier, consumer ops) for each event it contributes to
    let mut out_edges: BTreeMap<OpId, Vec<(bool, BTreeSet<OpId>)>> = BTreeMap::new();
    for &e in g.events.keys() {
        if e == g.start_event || Some(e) == g.end_event {
            continue;
        }
        let producers = ends.producers(e);
        let consumers: BTreeSet<OpId> = ends.consumers(e).iter().filter_map(op_of).collect();
        if producers.is_empty() || consumers.is_empty() {
            continue;
        }
        let ops: BTreeSet<OpId> = producers.iter().filter_map(op_of).collect();
        let barrier = ops.iter().all(|op| op_tasks[op].is_subset(&producers));
        for op in ops {
            out_edges.entry(op).or_default().push((barrier, consumers.clone()));
        }
    }

    let mut jit: BTreeSet<OpId> = graph
        .ops
        .iter()
        .filter(|op| op.is_data_dependent() && op_tasks.contains_key(&op.id))
        .map(|op| op.id)
        .collect();
    let mut queue: VecDeque<OpId> = jit.iter().copied().collect();
    while let Some(op) = queue.pop_front() {
        for (barrier, consumers) in out_edges.get(&op).into_iter().flatten() {
            if *barrier {
                continue;
            }
            for c in consumers {
                if jit.insert(*c) {
                    queue.push_back(*c);
                }
            }
        }
    }

    let mode = |op: Option<OpId>| match op {
        Some(op) if jit.contains(&op) => LaunchMode::Jit,
        _ => LaunchMode::Aot,
    };
    let mut modes = BTreeMap::new();
    for (id, t) in &g.tasks {
        let m = if t.is_dummy() {
            let mut reals: BTreeSet<TaskId> = BTreeSet::new();
            for te in ends.triggers[id].clone() {
                reals.extend(ends.consumers(te));
            }
            if reals.is_empty() {
                for de in ends.dependents[id].clone() {
                    reals.extend(ends.producers(de));
                }
            }
            if reals.iter().any(|r| mode(op_of(r)) == LaunchMode::Jit) {
                LaunchMode::Jit
            } else {
                LaunchMode::Aot
            }
        } else {
            mode(t.op_id)
        };
        modes.insert(*id, m);
    }
    modes
}

/// Overrides every task record when a mode is forced.
pub fn apply_launch_modes(img: &mut LinearizedImage, force: ForceMode) {
    let m = match force {
        ForceMode::Hybrid => return,
        ForceMode::Jit => LaunchMode::Jit,
        ForceMode::Aot => LaunchMode::Aot,
    };
    for t in &mut img.tasks {
        t.launch_mode = m;
    }
}
