//! The event-heap engine.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, DurationModel, EventActivation, SimError, SimOptions, SimTrace, TaskTrace};
use crate::decompose::TaskKind;
use crate::mpkg::Descriptor;
use crate::normalize::{LaunchMode, LinearizedImage};
use crate::profile::HardwareProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stim {
    Wake(usize),
    /// task index, worker
    End(usize, usize),
    JitArrive(usize, usize),
    Visible(usize),
}

#[derive(Debug, Default)]
struct Worker {
    jit: VecDeque<(usize, u64)>,
    aot: VecDeque<usize>,
    /// Time the current AOT head reached the front; its descriptor is
    /// prefetched from then on.
    head_since: u64,
    copy_free: u64,
    compute_free: u64,
    free_pages: u32,
    in_flight: usize,
}

struct TaskInfo {
    kind: TaskKind,
    device: usize,
    mode: LaunchMode,
    dependent: Option<usize>,
    trigger: usize,
    load: u64,
    compute: u64,
    pages: u32,
}

fn device_count(img: &LinearizedImage) -> usize {
    img.tasks.iter().map(|t| t.device as usize + 1).max().unwrap_or(1)
}

/// AOT tasks of each device are dealt round-robin to that device's workers
/// in linearized order. Returns one queue per global worker index.
pub fn pre_enqueue_aot(img: &LinearizedImage, profile: &HardwareProfile) -> Result<Vec<VecDeque<usize>>, SimError> {
    let w = profile.num_workers as usize;
    let mut queues = vec![VecDeque::new(); device_count(img) * w];
    let mut rank = vec![0usize; device_count(img)];
    for (i, t) in img.tasks.iter().enumerate() {
        if t.launch_mode != LaunchMode::Aot {
            continue;
        }
        let d = t.device as usize;
        let worker = d * w + rank[d] % w;
        rank[d] += 1;
        queues[worker].push_back(i);
        if queues[worker].len() > profile.queue_capacity as usize {
            return Err(SimError::QueueOverflow { worker, queue: "AOT", capacity: profile.queue_capacity });
        }
    }
    Ok(queues)
}

struct Engine<'a> {
    img: &'a LinearizedImage,
    p: &'a HardwareProfile,
    opts: SimOptions,
    info: Vec<TaskInfo>,
    initial_aot: Vec<VecDeque<usize>>,
    aot_worker: Vec<usize>,
    workers: Vec<Worker>,
    heap: BinaryHeap<Reverse<(u64, u64, Stim)>>,
    seq: u64,
    link_free: Vec<u64>,
    sched_busy: BTreeMap<(usize, usize), u64>,
    sched_rr: BTreeMap<(usize, usize), usize>,
    iteration: u32,
    iter_start: u64,
    counter: Vec<u32>,
    activated: Vec<Option<u64>>,
    visible: Vec<Option<u64>>,
    // per-task partial records for the current iteration
    current: Vec<Option<TaskTrace>>,
    trace: Vec<TaskTrace>,
    activations: Vec<EventActivation>,
    finished: bool,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: u64, s: Stim) {
        self.seq += 1;
        self.heap.push(Reverse((time, self.seq, s)));
    }

    fn begin_iteration(&mut self, t0: u64) {
        let m = self.img.events.len();
        self.iter_start = t0;
        self.counter = vec![0; m];
        self.activated = vec![None; m];
        self.visible = vec![None; m];
        self.current = vec![None; self.img.tasks.len()];
        for (w, q) in self.initial_aot.iter().enumerate() {
            debug_assert!(self.workers[w].aot.is_empty());
            self.workers[w].aot = q.clone();
            self.workers[w].head_since = t0;
        }
        let first = self.iteration == 0;
        let start = self.img.start_event as usize;
        self.activate(start, t0, first);
        for e in 0..m {
            if e != start && self.img.events[e].needed == 0 && self.activated[e].is_none() {
                self.activate(e, t0, first);
            }
        }
    }

    /// `immediate` marks the initial start event, which needs no notification hop.
    fn activate(&mut self, e: usize, now: u64, immediate: bool) {
        self.activated[e] = Some(now);
        self.activations.push(EventActivation { iteration: self.iteration, event: e as u32, time: now });
        let hop = if immediate { 0 } else { self.p.sync_latency };
        let range = self.img.events[e].range();
        let mut jit: Vec<usize> = Vec::new();
        let mut wake: BTreeSet<usize> = BTreeSet::new();
        for t in range.into_iter().flatten().map(|t| t as usize) {
            match self.info[t].mode {
                LaunchMode::Jit => jit.push(t),
                LaunchMode::Aot => {
                    wake.insert(self.aot_worker[t]);
                }
            }
        }
        self.visible[e] = Some(now + hop);
        if !wake.is_empty() {
            self.push(now + hop, Stim::Visible(e));
        }
        // one scheduler per (device, event) handles the JIT tasks in order
        let w = self.p.num_workers as usize;
        for t in jit {
            let d = self.info[t].device;
            let key = (d, e % self.p.num_schedulers as usize);
            let busy = self.sched_busy.entry(key).or_insert(0);
            *busy = (*busy).max(now + hop) + self.p.dispatch_cost;
            let done = *busy;
            let rr = self.sched_rr.entry(key).or_insert(0);
            let worker = d * w + *rr % w;
            *rr += 1;
            self.push(done + self.p.sync_latency, Stim::JitArrive(t, worker));
        }
        if e == self.img.end_event as usize {
            self.iteration += 1;
            if self.iteration < self.opts.iterations {
                self.begin_iteration(now);
            } else {
                self.finished = true;
            }
        }
    }

    fn try_start(&mut self, w: usize, now: u64, rng: &mut Option<ChaCha8Rng>) {
        loop {
            let wk = &self.workers[w];
            if wk.copy_free > now || (!self.opts.pipelining && wk.in_flight > 0) {
                return;
            }
            let (t, mode, ready) = if let Some(&(t, at)) = wk.jit.front() {
                (t, LaunchMode::Jit, at)
            } else if let Some(&t) = wk.aot.front() {
                let dep = self.info[t].dependent.unwrap_or(self.img.start_event as usize);
                match self.visible[dep] {
                    Some(v) if v <= now => (t, LaunchMode::Aot, v.max(wk.head_since)),
                    _ => return,
                }
            } else {
                return;
            };
            let info = &self.info[t];
            if info.pages > wk.free_pages {
                return;
            }
            let desc_ready = match mode {
                LaunchMode::Jit => now,
                LaunchMode::Aot => wk.head_since + self.p.descriptor_fetch_latency,
            };
            let (load, mut compute, pages, kind, device) = (info.load, info.compute, info.pages, info.kind, info.device);
            if let Some(rng) = rng.as_mut() {
                if compute > 0 {
                    let j = self.opts.jitter_pct as i64;
                    let pct = rng.gen_range(-j..=j);
                    compute = (compute as i64 + compute as i64 * pct / 100).max(0) as u64;
                }
            }
            let wk = &mut self.workers[w];
            match mode {
                LaunchMode::Jit => {
                    wk.jit.pop_front();
                }
                LaunchMode::Aot => {
                    wk.aot.pop_front();
                    wk.head_since = now;
                }
            }
            let load_start = now.max(desc_ready);
            let load_end = load_start + load;
            let (compute_start, compute_end);
            if kind == TaskKind::CommSend {
                compute_start = load_end.max(self.link_free[device]);
                compute_end = compute_start + compute;
                self.link_free[device] = compute_end;
            } else {
                compute_start = load_end.max(wk.compute_free);
                compute_end = compute_start + compute;
                wk.compute_free = compute_end;
            }
            wk.copy_free = load_end;
            wk.in_flight += 1;
            wk.free_pages -= pages;
            let enqueue = match mode {
                LaunchMode::Jit => ready,
                LaunchMode::Aot => self.iter_start,
            };
            let d = self.img.tasks[t].decode();
            self.current[t] = Some(TaskTrace {
                iteration: self.iteration,
                index: t as u32,
                task_id: d.task_id,
                kind,
                device: device as u8,
                worker: w as u32,
                mode,
                enqueue,
                ready,
                dequeue: now,
                load_start,
                load_end,
                compute_start,
                compute_end,
                pages,
            });
            self.push(compute_end, Stim::End(t, w));
            if load_end > now {
                self.push(load_end, Stim::Wake(w));
            }
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        let mut rng = (self.opts.jitter_pct > 0).then(|| ChaCha8Rng::seed_from_u64(self.opts.seed));
        if self.opts.iterations == 0 {
            return Ok(());
        }
        self.begin_iteration(0);
        for w in 0..self.workers.len() {
            self.try_start(w, 0, &mut rng);
        }
        let mut now = 0;
        while let Some(Reverse((time, _, stim))) = self.heap.pop() {
            now = time;
            match stim {
                Stim::Wake(w) => self.try_start(w, now, &mut rng),
                Stim::JitArrive(t, w) => {
                    let wk = &mut self.workers[w];
                    wk.jit.push_back((t, now));
                    if wk.jit.len() > self.p.queue_capacity as usize {
                        return Err(SimError::QueueOverflow { worker: w, queue: "JIT", capacity: self.p.queue_capacity });
                    }
                    self.try_start(w, now, &mut rng);
                }
                Stim::Visible(e) => {
                    let mut ws: BTreeSet<usize> = BTreeSet::new();
                    for t in self.img.events[e].range().into_iter().flatten() {
                        if self.info[t as usize].mode == LaunchMode::Aot {
                            ws.insert(self.aot_worker[t as usize]);
                        }
                    }
                    for w in ws {
                        self.try_start(w, now, &mut rng);
                    }
                }
                Stim::End(t, w) => {
                    let pages = self.info[t].pages;
                    let wk = &mut self.workers[w];
                    wk.in_flight -= 1;
                    wk.free_pages += pages;
                    self.trace.push(self.current[t].take().expect("task ended twice"));
                    let e = self.info[t].trigger;
                    self.counter[e] += 1;
                    if self.counter[e] == self.img.events[e].needed {
                        self.activate(e, now, false);
                    }
                    if self.finished {
                        continue;
                    }
                    self.try_start(w, now, &mut rng);
                }
            }
        }
        if !self.finished {
            return Err(SimError::Deadlock { time: now, frontier: self.frontier() });
        }
        Ok(())
    }

    fn frontier(&self) -> String {
        let mut parts = Vec::new();
        for (w, wk) in self.workers.iter().enumerate() {
            if let Some(&t) = wk.aot.front() {
                let dep = self.info[t].dependent.unwrap_or(self.img.start_event as usize);
                parts.push(format!(
                    "worker {w} holds task {t} waiting on event {dep} ({}/{} triggers)",
                    self.counter[dep], self.img.events[dep].needed
                ));
            }
            if parts.len() >= 8 {
                parts.push("...".into());
                break;
            }
        }
        if parts.is_empty() {
            let pending: Vec<String> = (0..self.img.events.len())
                .filter(|&e| self.activated[e].is_none())
                .take(8)
                .map(|e| format!("event {e} ({}/{})", self.counter[e], self.img.events[e].needed))
                .collect();
            parts.push(format!("no runnable tasks; pending {}", pending.join(", ")));
        }
        parts.join("; ")
    }
}

pub fn simulate(
    img: &LinearizedImage,
    profile: &HardwareProfile,
    dmodel: &DurationModel,
    opts: SimOptions,
) -> Result<SimTrace, SimError> {
    if let Some(v) = img.violations().into_iter().next() {
        return Err(SimError::InvalidImage(v));
    }
    let info: Vec<TaskInfo> = img
        .tasks
        .iter()
        .map(|r| {
            let d: Descriptor = r.decode();
            let pages = if r.kind == TaskKind::Dummy { 0 } else { profile.pages_for(d.footprint_bytes()) };
            TaskInfo {
                kind: r.kind,
                device: r.device as usize,
                mode: r.launch_mode,
                dependent: (r.dependent_event != crate::normalize::NONE).then_some(r.dependent_event as usize),
                trigger: r.trigger_event as usize,
                load: dmodel.load_time(r.kind, &d, profile),
                compute: dmodel.compute_time(r.kind, &d, profile),
                pages,
            }
        })
        .collect();
    let initial_aot = pre_enqueue_aot(img, profile)?;
    let mut aot_worker = vec![usize::MAX; img.tasks.len()];
    for (w, q) in initial_aot.iter().enumerate() {
        for &t in q {
            aot_worker[t] = w;
        }
    }
    let devices = device_count(img);
    let workers = (0..initial_aot.len())
        .map(|_| Worker { free_pages: profile.pages_per_worker, ..Worker::default() })
        .collect();
    let mut engine = Engine {
        img,
        p: profile,
        opts,
        info,
        initial_aot,
        aot_worker,
        workers,
        heap: BinaryHeap::new(),
        seq: 0,
        link_free: vec![0; devices],
        sched_busy: BTreeMap::new(),
        sched_rr: BTreeMap::new(),
        iteration: 0,
        iter_start: 0,
        counter: vec![],
        activated: vec![],
        visible: vec![],
        current: vec![],
        trace: vec![],
        activations: vec![],
        finished: false,
    };
    engine.run()?;
    let makespan = engine.trace.iter().map(|t| t.compute_end).max().unwrap_or(0);
    let mut trace = SimTrace {
        tasks: engine.trace,
        activations: engine.activations,
        makespan,
        total_workers: (devices as u32) * profile.num_workers,
        pages_per_worker: profile.pages_per_worker,
        iterations: opts.iterations,
        metrics: Default::default(),
    };
    trace.tasks.sort_by_key(|t| (t.iteration, t.index));
    trace.metrics = check::compute_metrics(&trace);
    Ok(trace)
}
