//! Normalization, BFS linearization and the flat image consumed by the runtime.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{TaskId, TaskKind, TaskProto};
use crate::mpkg::{Descriptor, DEFAULT_DESCRIPTOR_SIZE};
use crate::tgraph::{Event, EventId, GraphError, TGraph};

/// Encodes "no event" in task and event records.
pub const NONE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph is not normalized: task {0} {1}")]
    NotNormalized(TaskId, &'static str),
    #[error("graph has no end event")]
    MissingEnd,
    #[error("{0} task(s) unreachable from the start event")]
    Unreached(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaunchMode {
    #[default]
    Aot,
    Jit,
}

impl LaunchMode {
    pub fn code(self) -> u8 {
        match self {
            LaunchMode::Aot => 0,
            LaunchMode::Jit => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LaunchMode::Aot),
            1 => Some(LaunchMode::Jit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    /// Event that launches the task, `NONE` if launched externally.
    pub dependent_event: u32,
    pub trigger_event: u32,
    pub kind: TaskKind,
    pub device: u8,
    pub launch_mode: LaunchMode,
    pub descriptor: Vec<u8>,
}

impl TaskRecord {
    pub fn decode(&self) -> Descriptor {
        Descriptor::decode(&self.descriptor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub needed: u32,
    /// Inclusive range of launched task indices; both `NONE` when empty.
    pub first_task: u32,
    pub last_task: u32,
}

impl EventRecord {
    pub fn range(&self) -> Option<std::ops::RangeInclusive<u32>> {
        (self.first_task != NONE).then_some(self.first_task..=self.last_task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedImage {
    pub tasks: Vec<TaskRecord>,
    pub events: Vec<EventRecord>,
    pub start_event: u32,
    pub end_event: u32,
    pub descriptor_size: u32,
}

/// Rewrites a fused graph so every task has one triggering event and at most
/// one dependent event. Tasks sharing the same multi-event trigger set (or
/// dependent set) share one splitter event and one set of dummies.
pub fn normalize(g: &TGraph) -> Result<TGraph, NormalizeError> {
    g.check()?;
    let mut out = g.clone();
    let mut next_task = out.tasks.keys().next_back().map_or(0, |t| t.0 + 1);
    let mut next_event = out.events.keys().next_back().map_or(0, |e| e.0 + 1);

    // fan-out
    let mut groups: BTreeMap<Vec<EventId>, Vec<TaskId>> = BTreeMap::new();
    for (t, evs) in out.triggers() {
        if evs.len() > 1 {
            groups.entry(evs).or_default().push(t);
        }
    }
    for (evs, members) in groups {
        let device = out.tasks[&members[0]].device;
        let mut split = Event::new(EventId(next_event));
        next_event += 1;
        split.in_tasks.extend(members.iter().copied());
        for e in evs {
            let d = TaskId(next_task);
            next_task += 1;
            out.tasks.insert(d, TaskProto::dummy(d, device));
            split.out_tasks.insert(d);
            let target = out.events.get_mut(&e).unwrap();
            for m in &members {
                target.in_tasks.remove(m);
            }
            target.in_tasks.insert(d);
        }
        out.events.insert(split.event_id, split);
    }

    // fan-in
    let mut groups: BTreeMap<Vec<EventId>, Vec<TaskId>> = BTreeMap::new();
    for (t, evs) in out.dependents() {
        if evs.len() > 1 {
            groups.entry(evs).or_default().push(t);
        }
    }
    for (evs, members) in groups {
        let device = out.tasks[&members[0]].device;
        let mut join = Event::new(EventId(next_event));
        next_event += 1;
        join.out_tasks.extend(members.iter().copied());
        for e in evs {
            let d = TaskId(next_task);
            next_task += 1;
            out.tasks.insert(d, TaskProto::dummy(d, device));
            join.in_tasks.insert(d);
            let source = out.events.get_mut(&e).unwrap();
            for m in &members {
                source.out_tasks.remove(m);
            }
            source.out_tasks.insert(d);
        }
        out.events.insert(join.event_id, join);
    }

    let mut end = Event::new(EventId(next_event));
    for (t, evs) in out.triggers() {
        if evs.is_empty() {
            end.in_tasks.insert(t);
        }
    }
    out.end_event = Some(end.event_id);
    out.events.insert(end.event_id, end);
    Ok(out)
}

/// Direct scan of the normalized shape: fan-out exactly one, fan-in at most one.
pub fn check_normalized(g: &TGraph) -> Result<(), NormalizeError> {
    for (t, evs) in g.triggers() {
        if evs.len() != 1 {
            return Err(NormalizeError::NotNormalized(t, "does not trigger exactly one event"));
        }
    }
    for (t, evs) in g.dependents() {
        if evs.len() > 1 {
            return Err(NormalizeError::NotNormalized(t, "depends on several events"));
        }
    }
    Ok(())
}

pub fn linearize(g: &TGraph) -> Result<LinearizedImage, NormalizeError> {
    linearize_with_modes(g, &BTreeMap::new())
}

/// Breadth-first placement: tasks launched by one event are appended
/// consecutively, and an event is queued once all its triggers are placed.
pub fn linearize_with_modes(
    g: &TGraph,
    modes: &BTreeMap<TaskId, LaunchMode>,
) -> Result<LinearizedImage, NormalizeError> {
    check_normalized(g)?;
    let end_id = g.end_event.ok_or(NormalizeError::MissingEnd)?;
    let trigger_of: BTreeMap<TaskId, EventId> = g.triggers().into_iter().map(|(t, evs)| (t, evs[0])).collect();
    let mut remaining: BTreeMap<EventId, usize> = g.events.iter().map(|(&id, e)| (id, e.needed())).collect();

    let mut index_of: BTreeMap<EventId, u32> = BTreeMap::new();
    let mut queue = VecDeque::new();
    let enqueue = |e: EventId, index_of: &mut BTreeMap<EventId, u32>, queue: &mut VecDeque<EventId>| {
        let prev = index_of.insert(e, index_of.len() as u32);
        assert!(prev.is_none(), "event {e} enqueued twice");
        queue.push_back(e);
    };
    enqueue(g.start_event, &mut index_of, &mut queue);
    for (&id, e) in &g.events {
        if id != g.start_event && e.needed() == 0 {
            enqueue(id, &mut index_of, &mut queue);
        }
    }

    let mut placed: Vec<(TaskId, EventId)> = Vec::with_capacity(g.tasks.len());
    let mut ranges: BTreeMap<EventId, (u32, u32)> = BTreeMap::new();
    while let Some(e) = queue.pop_front() {
        let outs = &g.events[&e].out_tasks;
        if outs.is_empty() {
            continue;
        }
        let first = placed.len() as u32;
        for &t in outs {
            placed.push((t, e));
            let trig = trigger_of[&t];
            let left = remaining.get_mut(&trig).unwrap();
            *left -= 1;
            if *left == 0 {
                enqueue(trig, &mut index_of, &mut queue);
            }
        }
        ranges.insert(e, (first, placed.len() as u32 - 1));
    }
    if placed.len() != g.tasks.len() {
        return Err(NormalizeError::Unreached(g.tasks.len() - placed.len()));
    }
    let seen: BTreeSet<TaskId> = placed.iter().map(|(t, _)| *t).collect();
    assert_eq!(seen.len(), placed.len(), "task placed twice");

    let mut events = vec![EventRecord { needed: 0, first_task: NONE, last_task: NONE }; index_of.len()];
    for (e, &idx) in &index_of {
        let (first_task, last_task) = ranges.get(e).copied().unwrap_or((NONE, NONE));
        events[idx as usize] = EventRecord { needed: g.events[e].needed() as u32, first_task, last_task };
    }
    let tasks = placed
        .iter()
        .map(|(t, e)| {
            let proto = &g.tasks[t];
            TaskRecord {
                dependent_event: index_of[e],
                trigger_event: index_of[&trigger_of[t]],
                kind: proto.kind,
                device: proto.device as u8,
                launch_mode: modes.get(t).copied().unwrap_or_default(),
                descriptor: Descriptor::from_task(proto).encode(DEFAULT_DESCRIPTOR_SIZE),
            }
        })
        .collect();
    Ok(LinearizedImage {
        tasks,
        events,
        start_event: index_of[&g.start_event],
        end_event: index_of[&end_id],
        descriptor_size: DEFAULT_DESCRIPTOR_SIZE,
    })
}

impl LinearizedImage {
    /// Every invariant that can be checked from the tables alone, as messages.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = self.tasks.len() as u32;
        let m = self.events.len() as u32;
        if self.start_event >= m || self.end_event >= m {
            v.push(format!("start/end event index out of bounds ({} events)", m));
            return v;
        }
        if self.events[self.start_event as usize].needed != 0 {
            v.push("start event requires triggers".into());
        }
        let mut cover = vec![0u32; n as usize];
        for (i, e) in self.events.iter().enumerate() {
            match (e.first_task == NONE, e.last_task == NONE) {
                (true, true) => {}
                (false, false) if e.first_task <= e.last_task && e.last_task < n => {
                    for t in e.first_task..=e.last_task {
                        cover[t as usize] += 1;
                        if self.tasks[t as usize].dependent_event != i as u32 {
                            v.push(format!("task {t} lies in the range of event {i} but depends on another event"));
                        }
                    }
                }
                _ => v.push(format!("event {i} has an invalid range [{}, {}]", e.first_task, e.last_task)),
            }
        }
        for (t, c) in cover.iter().enumerate() {
            if *c != 1 {
                v.push(format!("task {t} covered by {c} event ranges"));
            }
        }
        let mut triggers = vec![0u32; m as usize];
        for (i, t) in self.tasks.iter().enumerate() {
            if t.trigger_event >= m {
                v.push(format!("task {i} triggers out-of-bounds event {}", t.trigger_event));
                continue;
            }
            triggers[t.trigger_event as usize] += 1;
            if t.dependent_event != NONE && t.trigger_event <= t.dependent_event {
                v.push(format!("task {i} triggers event {} not after its dependent {}", t.trigger_event, t.dependent_event));
            }
            if t.descriptor.len() != self.descriptor_size as usize {
                v.push(format!("task {i} has a descriptor of {} bytes", t.descriptor.len()));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.needed != triggers[i] {
                v.push(format!("event {i} needs {} triggers but {} tasks trigger it", e.needed, triggers[i]));
            }
        }
        v
    }

    pub fn dummy_count(&self) -> usize {
        self.tasks.iter().filter(|t| t.kind == TaskKind::Dummy).count()
    }

    /// Tasks labelled with their linear index.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph image {\n  rankdir=LR;\n");
        for (i, t) in self.tasks.iter().enumerate() {
            let d = t.decode();
            let op = d.op_id.map_or_else(|| "D".to_string(), |o| o.to_string());
            let _ = writeln!(s, "  T{i} [shape=box,label=\"#{i} {op}/{}\"];", d.task_id);
        }
        for (i, e) in self.events.iter().enumerate() {
            let _ = writeln!(s, "  E{i} [shape=circle,label=\"e{i}:{}\"];", e.needed);
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.dependent_event != NONE {
                let _ = writeln!(s, "  E{} -> T{i};", t.dependent_event);
            }
            let _ = writeln!(s, "  T{i} -> E{};", t.trigger_event);
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::OpId;

    fn graph(n: u32, events: &[(&[u32], &[u32])]) -> TGraph {
        let mut evs = BTreeMap::new();
        evs.insert(EventId(0), Event::new(EventId(0)));
        let mut has_dep = BTreeSet::new();
        for (i, (ins, outs)) in events.iter().enumerate() {
            let mut e = Event::new(EventId(i as u32 + 1));
            e.in_tasks = ins.iter().map(|&t| TaskId(t)).collect();
            e.out_tasks = outs.iter().map(|&t| TaskId(t)).collect();
            has_dep.extend(e.out_tasks.iter().copied());
            evs.insert(e.event_id, e);
        }
        evs.get_mut(&EventId(0)).unwrap().out_tasks = (0..n).map(TaskId).filter(|t| !has_dep.contains(t)).collect();
        let tasks = (0..n)
            .map(|i| {
                let mut t = TaskProto::dummy(TaskId(i), 0);
                t.kind = TaskKind::Elementwise;
                t.op_id = Some(OpId(i));
                (TaskId(i), t)
            })
            .collect();
        TGraph { tasks, events: evs, start_event: EventId(0), end_event: None }
    }

    #[test]
    fn fan_out_of_three() {
        let g = graph(4, &[(&[0], &[1]), (&[0], &[2]), (&[0], &[3])]);
        let n = normalize(&g).unwrap();
        assert_eq!(n.dummy_count(), 3);
        // splitter plus end event
        assert_eq!(n.events.len(), g.events.len() + 2);
        check_normalized(&n).unwrap();
        assert!(n.tasks.keys().filter(|t| n.tasks[t].is_dummy()).all(|t| t.0 >= 4));
    }

    #[test]
    fn chain_only_gains_end_event() {
        let g = graph(3, &[(&[0], &[1]), (&[1], &[2])]);
        let n = normalize(&g).unwrap();
        assert_eq!(n.dummy_count(), 0);
        assert_eq!(n.tasks, g.tasks);
        let end = &n.events[&n.end_event.unwrap()];
        assert_eq!(end.in_tasks, BTreeSet::from([TaskId(2)]));
    }

    #[test]
    fn shared_fan_out_gets_shared_dummies() {
        // two producers both feeding two consumer groups
        let g = graph(4, &[(&[0, 1], &[2]), (&[0, 1], &[3])]);
        let n = normalize(&g).unwrap();
        assert_eq!(n.dummy_count(), 2);
        check_normalized(&n).unwrap();
        let real = |t: TaskId| t.0 < 4;
        assert_eq!(n.task_closure().pairs_where(real), g.task_closure().pairs());
    }

    #[test]
    fn fan_in_group() {
        let g = graph(4, &[(&[0], &[2, 3]), (&[1], &[2, 3])]);
        let n = normalize(&g).unwrap();
        assert_eq!(n.dummy_count(), 2);
        check_normalized(&n).unwrap();
        assert_eq!(n.task_closure().pairs_where(|t| t.0 < 4), g.task_closure().pairs());
    }

    #[test]
    fn cyclic_input_rejected() {
        let g = graph(2, &[(&[0], &[1]), (&[1], &[0])]);
        assert!(matches!(normalize(&g), Err(NormalizeError::Graph(GraphError::Cycle(_)))));
    }

    #[test]
    fn chain_linearizes_in_order() {
        let n = normalize(&graph(2, &[(&[0], &[1])])).unwrap();
        let img = linearize(&n).unwrap();
        let ids: Vec<u32> = img.tasks.iter().map(|t| t.decode().task_id).collect();
        assert_eq!(ids, [0, 1]);
        assert_eq!(img.events[1].range(), Some(1..=1));
        assert_eq!(img.end_event, 2);
        assert!(img.violations().is_empty());
    }

    #[test]
    fn empty_graph_has_start_and_end() {
        let n = normalize(&graph(0, &[])).unwrap();
        let img = linearize(&n).unwrap();
        assert!(img.tasks.is_empty());
        assert_eq!(img.events.len(), 2);
        assert!(img.events.iter().all(|e| e.range().is_none()));
        assert!(img.violations().is_empty());
    }

    #[test]
    fn linearize_requires_normalized_graph() {
        let g = graph(3, &[(&[0], &[1]), (&[0], &[2])]);
        assert!(matches!(linearize(&g), Err(NormalizeError::NotNormalized(..))));
    }

    #[test]
    fn violations_catch_tampering() {
        let n = normalize(&graph(4, &[(&[0], &[1, 2]), (&[1, 2], &[3])])).unwrap();
        let img = linearize(&n).unwrap();
        assert!(img.violations().is_empty());
        let mut bad = img.clone();
        bad.events[1].needed += 1;
        assert!(!bad.violations().is_empty());
        let mut bad = img.clone();
        bad.events[1].last_task = 7;
        assert!(!bad.violations().is_empty());
    }
}
