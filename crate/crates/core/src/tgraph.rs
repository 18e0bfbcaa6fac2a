//! Task/event graphs.
//!
//! A [`TGraph`] is bipartite: tasks only point at the events they trigger,
//! and events only point at the tasks that depend on them. An event fires once
//! every task in its `in_tasks` set has completed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{TaskId, TaskKind, TaskProto};
use crate::ir::{CompGraph, OpId, Region, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u32);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("regions have different ranks ({0} vs {1})")]
    RankMismatch(usize, usize),
    #[error("event {0} references unknown task {1}")]
    DanglingTask(EventId, TaskId),
    #[error("event {0} has no triggering tasks")]
    EmptyEvent(EventId),
    #[error("task {0} both triggers and depends on event {1}")]
    SelfDependency(TaskId, EventId),
    #[error("task/event graph has a cycle through {0}")]
    Cycle(TaskId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: EventId,
    pub in_tasks: BTreeSet<TaskId>,
    pub out_tasks: BTreeSet<TaskId>,
}

impl Event {
    pub fn new(event_id: EventId) -> Self {
        Self { event_id, in_tasks: BTreeSet::new(), out_tasks: BTreeSet::new() }
    }

    /// Triggers required before the event activates.
    pub fn needed(&self) -> usize {
        self.in_tasks.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TGraph {
    pub tasks: BTreeMap<TaskId, TaskProto>,
    pub events: BTreeMap<EventId, Event>,
    pub start_event: EventId,
    pub end_event: Option<EventId>,
}

/// How producer/consumer dependencies are captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Granularity {
    /// One event per overlapping producer/consumer task pair.
    #[default]
    Fine,
    /// One barrier event per producer-op/consumer-op pair.
    Coarse,
}

pub fn regions_overlap(a: &Region, b: &Region) -> Result<bool, GraphError> {
    if a.rank() != b.rank() {
        return Err(GraphError::RankMismatch(a.rank(), b.rank()));
    }
    Ok(a.intersect(b).is_some())
}

/// Producer/consumer task pairs, grouped by (producer op, consumer op).
fn dependency_pairs(tasks: &[TaskProto], graph: &CompGraph) -> BTreeMap<(OpId, OpId), BTreeSet<(TaskId, TaskId)>> {
    // (tensor) → producing tasks with their output regions
    let mut produced: BTreeMap<TensorId, Vec<&TaskProto>> = BTreeMap::new();
    for t in tasks {
        if t.kind == TaskKind::CommSend {
            continue;
        }
        if let Some(tensor) = t.out_tensor {
            produced.entry(tensor).or_default().push(t);
        }
    }
    let mut pairs: BTreeMap<(OpId, OpId), BTreeSet<(TaskId, TaskId)>> = BTreeMap::new();
    for consumer in tasks {
        let Some(c_op) = consumer.op_id else { continue };
        // Reduce tasks read data delivered by CommSend tasks, not device memory.
        if consumer.kind == TaskKind::Reduce {
            continue;
        }
        for (tensor, region) in &consumer.in_regions {
            for producer in produced.get(tensor).into_iter().flatten() {
                let p_op = producer.op_id.unwrap();
                if p_op == c_op || producer.device != consumer.device {
                    continue;
                }
                let out = producer.out_region.as_ref().unwrap();
                if out.intersect(region).is_some() {
                    pairs.entry((p_op, c_op)).or_default().insert((producer.task_id, consumer.task_id));
                }
            }
        }
    }
    // Collective exchange: every Reduce of a tile waits for every CommSend of that tile.
    let mut sends: BTreeMap<(OpId, u32), Vec<TaskId>> = BTreeMap::new();
    let mut reduces: BTreeMap<(OpId, u32), Vec<TaskId>> = BTreeMap::new();
    for t in tasks {
        let Some(op) = t.op_id else { continue };
        match t.kind {
            TaskKind::CommSend => sends.entry((op, t.tile)).or_default().push(t.task_id),
            TaskKind::Reduce => reduces.entry((op, t.tile)).or_default().push(t.task_id),
            _ => {}
        }
    }
    for ((op, tile), senders) in &sends {
        for r in reduces.get(&(*op, *tile)).into_iter().flatten() {
            for s in senders {
                pairs.entry((*op, *op)).or_default().insert((*s, *r));
            }
        }
    }
    let _ = graph;
    pairs
}

/// Builds the dependency graph of decomposed tasks, plus the start event that
/// launches every task without producers.
pub fn build_raw_events(tasks: &[TaskProto], graph: &CompGraph, granularity: Granularity) -> TGraph {
    let pairs = dependency_pairs(tasks, graph);
    let mut events: BTreeMap<EventId, Event> = BTreeMap::new();
    let start = EventId(0);
    events.insert(start, Event::new(start));
    let mut next = 1u32;
    let mut has_dep: BTreeSet<TaskId> = BTreeSet::new();
    match granularity {
        Granularity::Fine => {
            let flat: BTreeSet<(TaskId, TaskId)> = pairs.values().flatten().copied().collect();
            for (a, b) in flat {
                let mut e = Event::new(EventId(next));
                e.in_tasks.insert(a);
                e.out_tasks.insert(b);
                events.insert(e.event_id, e);
                has_dep.insert(b);
                next += 1;
            }
        }
        Granularity::Coarse => {
            for set in pairs.values() {
                let mut e = Event::new(EventId(next));
                for &(a, b) in set {
                    e.in_tasks.insert(a);
                    e.out_tasks.insert(b);
                    has_dep.insert(b);
                }
                events.insert(e.event_id, e);
                next += 1;
            }
        }
    }
    let start_ev = events.get_mut(&start).unwrap();
    for t in tasks {
        if !has_dep.contains(&t.task_id) {
            start_ev.out_tasks.insert(t.task_id);
        }
    }
    TGraph {
        tasks: tasks.iter().map(|t| (t.task_id, t.clone())).collect(),
        events,
        start_event: start,
        end_event: None,
    }
}

/// Merges every class of events that share a key into the smallest member id.
fn fuse_by<K: Ord>(g: &TGraph, key: impl Fn(&Event) -> K, merge_in: bool) -> TGraph {
    let mut classes: BTreeMap<K, Vec<EventId>> = BTreeMap::new();
    for (id, e) in &g.events {
        if *id == g.start_event || Some(*id) == g.end_event {
            continue;
        }
        classes.entry(key(e)).or_default().push(*id);
    }
    let mut out = g.clone();
    for members in classes.into_values() {
        if members.len() < 2 {
            continue;
        }
        let keep = members[0];
        for other in &members[1..] {
            let removed = out.events.remove(other).unwrap();
            let target = out.events.get_mut(&keep).unwrap();
            if merge_in {
                target.in_tasks.extend(removed.in_tasks);
            } else {
                target.out_tasks.extend(removed.out_tasks);
            }
        }
    }
    out
}

/// Successor-set fusion: events with identical `out_tasks` merge, unioning `in_tasks`.
pub fn fuse_successor_sets(g: &TGraph) -> TGraph {
    fuse_by(g, |e| e.out_tasks.clone(), true)
}

/// Predecessor-set fusion: events with identical `in_tasks` merge, unioning `out_tasks`.
pub fn fuse_predecessor_sets(g: &TGraph) -> TGraph {
    fuse_by(g, |e| e.in_tasks.clone(), false)
}

/// Alternates successor-set and predecessor-set fusion until neither changes the graph.
pub fn fuse_fixpoint(g: &TGraph) -> TGraph {
    let mut current = g.clone();
    loop {
        let before = current.events.len();
        current = fuse_predecessor_sets(&fuse_successor_sets(&current));
        if current.events.len() == before {
            return current;
        }
    }
}

/// Task-to-task reachability through events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskClosure {
    ids: Vec<TaskId>,
    index: BTreeMap<TaskId, usize>,
    reach: Vec<Vec<u64>>,
}

impl TaskClosure {
    pub fn precedes(&self, a: TaskId, b: TaskId) -> bool {
        match (self.index.get(&a), self.index.get(&b)) {
            (Some(&i), Some(&j)) => self.reach[i][j / 64] >> (j % 64) & 1 == 1,
            _ => false,
        }
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.ids
    }

    /// Ordered pairs `(a, b)` with `a ≺ b`, restricted to tasks accepted by `keep`.
    pub fn pairs_where(&self, keep: impl Fn(TaskId) -> bool) -> BTreeSet<(TaskId, TaskId)> {
        let mut out = BTreeSet::new();
        for (i, &a) in self.ids.iter().enumerate() {
            if !keep(a) {
                continue;
            }
            for (j, &b) in self.ids.iter().enumerate() {
                if self.reach[i][j / 64] >> (j % 64) & 1 == 1 && keep(b) {
                    out.insert((a, b));
                }
            }
        }
        out
    }

    pub fn pairs(&self) -> BTreeSet<(TaskId, TaskId)> {
        self.pairs_where(|_| true)
    }
}

impl TGraph {
    /// task → events it triggers
    pub fn triggers(&self) -> BTreeMap<TaskId, Vec<EventId>> {
        let mut map: BTreeMap<TaskId, Vec<EventId>> = self.tasks.keys().map(|&t| (t, Vec::new())).collect();
        for e in self.events.values() {
            for t in &e.in_tasks {
                map.entry(*t).or_default().push(e.event_id);
            }
        }
        map
    }

    /// task → events it depends on
    pub fn dependents(&self) -> BTreeMap<TaskId, Vec<EventId>> {
        let mut map: BTreeMap<TaskId, Vec<EventId>> = self.tasks.keys().map(|&t| (t, Vec::new())).collect();
        for e in self.events.values() {
            for t in &e.out_tasks {
                map.entry(*t).or_default().push(e.event_id);
            }
        }
        map
    }

    pub fn dummy_count(&self) -> usize {
        self.tasks.values().filter(|t| t.is_dummy()).count()
    }

    /// Direct task successors, through one event.
    fn task_successors(&self) -> BTreeMap<TaskId, BTreeSet<TaskId>> {
        let mut succ: BTreeMap<TaskId, BTreeSet<TaskId>> = self.tasks.keys().map(|&t| (t, BTreeSet::new())).collect();
        for e in self.events.values() {
            for a in &e.in_tasks {
                succ.entry(*a).or_default().extend(e.out_tasks.iter().copied());
            }
        }
        succ
    }

    /// Tasks in a dependency-respecting order, or the task on a cycle.
    pub fn task_topo_order(&self) -> Result<Vec<TaskId>, GraphError> {
        let succ = self.task_successors();
        let mut indeg: BTreeMap<TaskId, usize> = succ.keys().map(|&t| (t, 0)).collect();
        for outs in succ.values() {
            for b in outs {
                *indeg.get_mut(b).unwrap() += 1;
            }
        }
        let mut queue: VecDeque<TaskId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&t, _)| t).collect();
        let mut order = Vec::with_capacity(succ.len());
        while let Some(t) = queue.pop_front() {
            order.push(t);
            for b in &succ[&t] {
                let d = indeg.get_mut(b).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(*b);
                }
            }
        }
        if order.len() != succ.len() {
            let stuck = indeg.iter().find(|(_, &d)| d > 0).map(|(&t, _)| t).unwrap();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    pub fn task_closure(&self) -> TaskClosure {
        let ids: Vec<TaskId> = self.tasks.keys().copied().collect();
        let index: BTreeMap<TaskId, usize> = ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let words = ids.len().div_ceil(64).max(1);
        let mut reach = vec![vec![0u64; words]; ids.len()];
        let succ = self.task_successors();
        let order = self.task_topo_order().expect("closure requires an acyclic graph");
        for &t in order.iter().rev() {
            let i = index[&t];
            let mut row = vec![0u64; words];
            for b in &succ[&t] {
                let j = index[b];
                row[j / 64] |= 1 << (j % 64);
                for (w, bits) in reach[j].iter().enumerate() {
                    row[w] |= bits;
                }
            }
            reach[i] = row;
        }
        TaskClosure { ids, index, reach }
    }

    /// Structural sanity: references resolve, only the start event is empty,
    /// no task triggers an event it depends on, and the graph is acyclic.
    pub fn check(&self) -> Result<(), GraphError> {
        for e in self.events.values() {
            for t in e.in_tasks.iter().chain(&e.out_tasks) {
                if !self.tasks.contains_key(t) {
                    return Err(GraphError::DanglingTask(e.event_id, *t));
                }
            }
            if e.in_tasks.is_empty() && e.event_id != self.start_event {
                return Err(GraphError::EmptyEvent(e.event_id));
            }
            if let Some(t) = e.in_tasks.intersection(&e.out_tasks).next() {
                return Err(GraphError::SelfDependency(*t, e.event_id));
            }
        }
        self.task_topo_order().map(|_| ())
    }

    /// Graphviz rendering: tasks as boxes `op/task`, events as circles `e<id>:<needed>`.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph tgraph {\n  rankdir=LR;\n");
        for (id, t) in &self.tasks {
            let op = t.op_id.map_or_else(|| "D".to_string(), |o| o.0.to_string());
            let _ = writeln!(s, "  T{} [shape=box,label=\"{}/{}\"];", id.0, op, id.0);
        }
        for (id, e) in &self.events {
            let _ = writeln!(s, "  E{} [shape=circle,label=\"e{}:{}\"];", id.0, id.0, e.needed());
        }
        for (id, e) in &self.events {
            for t in &e.in_tasks {
                let _ = writeln!(s, "  T{} -> E{};", t.0, id.0);
            }
            for t in &e.out_tasks {
                let _ = writeln!(s, "  E{} -> T{};", id.0, t.0);
            }
        }
        s.push_str("}\n");
        s
    }
}
