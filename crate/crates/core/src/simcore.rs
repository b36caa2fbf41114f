//! Deterministic discrete-event engine.
//!
//! A run executes every time step's loops in order, with a barrier after
//! each loop. Inside a loop a [`Protocol`] reacts to engine callbacks by
//! queueing work and sending messages; the engine owns time, processors,
//! message transport and the trace.
//!
//! Each processor does one thing at a time: execute a job, or (with serial
//! congestion) handle one message send or receive. Message handling has
//! priority over queued jobs but never interrupts a running job.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiagent::{AgentConfig, MultiagentProtocol};
use crate::platform::{CongestionPolicy, PerturbationModel, PerturbationStream, PlatformGraph};
use crate::schedulers_ms::{MasterSlaveConfig, MasterSlaveProtocol};
use crate::time::SimTime;
use crate::workload::TimeSteppedWorkload;

/// Payload carried by simulated messages.
pub trait Payload: fmt::Debug {
    /// Short label for trace logs.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<M> {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub body: M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkKind {
    /// An iterate of the current loop; must run exactly once per step.
    Job,
    /// A duplicate execution used for speed calibration.
    Replica,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItem {
    pub job: usize,
    pub kind: WorkKind,
}

impl WorkItem {
    pub fn job(job: usize) -> Self {
        WorkItem {
            job,
            kind: WorkKind::Job,
        }
    }

    pub fn replica(job: usize) -> Self {
        WorkItem {
            job,
            kind: WorkKind::Replica,
        }
    }
}

/// Scheduling logic driven by the engine, one loop at a time.
pub trait Protocol {
    type Msg: Payload;

    /// Called at the loop's start time, before any processor is dispatched.
    fn start_loop(&mut self, sim: &mut Sim<'_, Self::Msg>) -> Result<()>;

    /// A message finished its receive handling at `at`.
    fn on_message(
        &mut self,
        sim: &mut Sim<'_, Self::Msg>,
        at: usize,
        msg: Message<Self::Msg>,
    ) -> Result<()>;

    /// `item` finished on `at` after `elapsed` wall time.
    fn on_work_done(
        &mut self,
        sim: &mut Sim<'_, Self::Msg>,
        at: usize,
        item: WorkItem,
        elapsed: SimTime,
    ) -> Result<()>;

    /// `at` has nothing queued. May queue work or sends; otherwise the
    /// processor idles until a message arrives.
    fn on_idle(&mut self, sim: &mut Sim<'_, Self::Msg>, at: usize) -> Result<()>;

    /// The loop is quiescent: no events pending, every processor idle.
    fn end_loop(&mut self, _sim: &mut Sim<'_, Self::Msg>) -> Result<()> {
        Ok(())
    }

    /// Lets the protocol add its own counters once the run is over.
    fn finish(&mut self, _metrics: &mut RunMetrics) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Compute,
    Communicate,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: SimTime,
    pub end: SimTime,
    pub kind: IntervalKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    JobBatchComplete {
        processor: usize,
        step: usize,
        loop_id: usize,
        jobs: Vec<usize>,
        replica: bool,
    },
    MessageDelivered {
        src: usize,
        dst: usize,
        bytes: u64,
        payload: String,
    },
    PerturbationStart {
        processor: usize,
    },
    PerturbationEnd {
        processor: usize,
    },
    StepBoundary {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Picoseconds of virtual time.
    pub time: SimTime,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Per-processor activity record and event log of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Tiles `[0, T_P]` per processor. Empty unless recording was enabled.
    pub intervals: Vec<Vec<Interval>>,
    pub inbound: Vec<u64>,
    pub outbound: Vec<u64>,
    /// Chronological. Empty unless recording was enabled.
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut out, ev)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Total time of intervals of `kind` on processor `p`.
    pub fn total(&self, p: usize, kind: IntervalKind) -> SimTime {
        self.intervals[p]
            .iter()
            .filter(|i| i.kind == kind)
            .fold(SimTime::ZERO, |acc, i| acc + (i.end - i.start))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub m: usize,
    /// Parallel time, seconds.
    pub t_p: f64,
    /// Parallel cost `m * T_P`, processor-seconds.
    pub c_p: f64,
    pub t_p_exact: SimTime,
    pub idle_seconds: Vec<f64>,
    pub inbound: Vec<u64>,
    pub max_inbound: u64,
    pub max_inbound_processor: usize,
    pub total_messages: u64,
    pub total_bytes: u64,
    /// Sum over processors of compute intervals.
    pub busy_compute: SimTime,
    /// Sum of realized durations of everything executed: jobs, replicas and
    /// the sequential portions.
    pub realized_work: SimTime,
    pub jobs_executed: u64,
    pub replicas_executed: u64,
    /// Master-slave end-game transfers, or multiagent reallocation moves.
    pub jobs_transferred: u64,
    /// Multiagent rounds in which every agent's reallocation was compared.
    pub agreement_rounds: u64,
}

impl RunMetrics {
    pub fn idle_fraction(&self) -> f64 {
        if self.t_p == 0.0 {
            return 0.0;
        }
        self.idle_seconds.iter().sum::<f64>() / (self.m as f64 * self.t_p)
    }

    pub fn median_inbound(&self) -> f64 {
        median_u64(&self.inbound)
    }
}

pub(crate) fn median_u64(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] as f64 + v[mid] as f64) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Keep per-processor intervals and the event log.
    pub record_trace: bool,
}

enum Activity<M> {
    Computing { item: WorkItem, start: SimTime },
    Sending(Message<M>),
    Receiving(Message<M>),
}

enum CommTask<M> {
    Send(Message<M>),
    Recv(Message<M>),
}

enum Ev<M> {
    ActivityDone(usize),
    Arrive(Message<M>),
    Log(EventKind),
}

struct Scheduled<M> {
    time: SimTime,
    seq: u64,
    ev: Ev<M>,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl<M> Eq for Scheduled<M> {}
impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Scheduled<M> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

struct ProcState<M> {
    active: Option<Activity<M>>,
    comm: VecDeque<CommTask<M>>,
    work: VecDeque<WorkItem>,
    /// End of the last recorded interval.
    clock: SimTime,
    busy_compute: SimTime,
    busy_comm: SimTime,
}

impl<M> ProcState<M> {
    fn new() -> Self {
        ProcState {
            active: None,
            comm: VecDeque::new(),
            work: VecDeque::new(),
            clock: SimTime::ZERO,
            busy_compute: SimTime::ZERO,
            busy_comm: SimTime::ZERO,
        }
    }
}

/// Engine state visible to protocols.
pub struct Sim<'a, M> {
    platform: &'a PlatformGraph,
    workload: &'a TimeSteppedWorkload,
    congestion: CongestionPolicy,
    overhead: SimTime,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled<M>>>,
    procs: Vec<ProcState<M>>,
    streams: Vec<PerturbationStream>,
    dirty: Vec<usize>,
    record: bool,

    step: usize,
    loop_id: usize,
    costs: Vec<f64>,
    executed: Vec<u32>,
    executed_count: usize,

    intervals: Vec<Vec<Interval>>,
    events: Vec<TraceEvent>,
    inbound: Vec<u64>,
    outbound: Vec<u64>,
    total_messages: u64,
    total_bytes: u64,
    realized_work: SimTime,
    jobs_executed: u64,
    replicas_executed: u64,
}

impl<'a, M: Payload> Sim<'a, M> {
    fn new(
        workload: &'a TimeSteppedWorkload,
        platform: &'a PlatformGraph,
        congestion: CongestionPolicy,
        perturbation: PerturbationModel,
        seed: u64,
        record: bool,
    ) -> Self {
        let m = platform.m();
        Sim {
            platform,
            workload,
            congestion,
            overhead: SimTime::from_secs(congestion.overhead),
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            procs: (0..m).map(|_| ProcState::new()).collect(),
            streams: (0..m)
                .map(|p| PerturbationStream::new(perturbation, seed, p))
                .collect(),
            dirty: Vec::new(),
            record,
            step: 0,
            loop_id: 0,
            costs: Vec::new(),
            executed: Vec::new(),
            executed_count: 0,
            intervals: vec![Vec::new(); if record { m } else { 0 }],
            events: Vec::new(),
            inbound: vec![0; m],
            outbound: vec![0; m],
            total_messages: 0,
            total_bytes: 0,
            realized_work: SimTime::ZERO,
            jobs_executed: 0,
            replicas_executed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn m(&self) -> usize {
        self.procs.len()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn loop_id(&self) -> usize {
        self.loop_id
    }

    pub fn num_steps(&self) -> usize {
        self.workload.num_steps
    }

    pub fn num_loops(&self) -> usize {
        self.workload.loops.len()
    }

    /// Iterates in the current loop.
    pub fn loop_len(&self) -> usize {
        self.costs.len()
    }

    pub fn data_size(&self) -> u64 {
        self.workload.loops[self.loop_id].data_size
    }

    pub fn platform(&self) -> &PlatformGraph {
        self.platform
    }

    pub fn congestion(&self) -> CongestionPolicy {
        self.congestion
    }

    /// Unit-speed cost of an iterate of the current loop. Only test
    /// protocols and oracles should look at this.
    pub fn hidden_cost(&self, job: usize) -> f64 {
        self.costs[job]
    }

    pub fn work_queue(&self, p: usize) -> &VecDeque<WorkItem> {
        &self.procs[p].work
    }

    pub fn push_work(&mut self, p: usize, item: WorkItem) -> Result<()> {
        if item.job >= self.costs.len() {
            return Err(Error::Integrity(format!(
                "job {} does not exist in a loop of {}",
                item.job,
                self.costs.len()
            )));
        }
        self.procs[p].work.push_back(item);
        self.mark(p);
        Ok(())
    }

    /// Removes queued (unstarted) items matching `pred`, keeping order.
    pub fn take_work(
        &mut self,
        p: usize,
        mut pred: impl FnMut(&WorkItem) -> bool,
    ) -> Vec<WorkItem> {
        let mut taken = Vec::new();
        self.procs[p].work.retain(|it| {
            if pred(it) {
                taken.push(*it);
                false
            } else {
                true
            }
        });
        taken
    }

    /// Is `p` executing a job or handling a message right now?
    pub fn is_active(&self, p: usize) -> bool {
        self.procs[p].active.is_some()
    }

    pub fn send(&mut self, src: usize, dst: usize, bytes: u64, body: M) -> Result<()> {
        let m = self.m();
        if src >= m || dst >= m {
            return Err(Error::Integrity(format!(
                "message between unknown processors {src}->{dst}"
            )));
        }
        let msg = Message {
            src,
            dst,
            bytes,
            body,
        };
        if self.congestion.serial {
            self.procs[src].comm.push_back(CommTask::Send(msg));
            self.mark(src);
        } else {
            let delay = SimTime::from_secs(self.platform.message_delay(src, dst, bytes)?);
            self.account_outbound(&msg);
            let at = self.now + self.overhead + delay + self.overhead;
            self.schedule(at, Ev::Arrive(msg));
        }
        Ok(())
    }

    fn mark(&mut self, p: usize) {
        if !self.dirty.contains(&p) {
            self.dirty.push(p);
        }
    }

    fn schedule(&mut self, time: SimTime, ev: Ev<M>) {
        debug_assert!(time >= self.now);
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, ev }));
    }

    fn log(&mut self, kind: EventKind) {
        if self.record {
            let seq = self.seq;
            self.seq += 1;
            self.events.push(TraceEvent {
                time: self.now,
                seq,
                kind,
            });
        }
    }

    /// Appends a busy interval to `p`'s timeline, filling any gap with idle.
    pub(crate) fn record_interval(
        &mut self,
        p: usize,
        start: SimTime,
        end: SimTime,
        kind: IntervalKind,
    ) -> Result<()> {
        if end < start {
            return Err(Error::Integrity(format!(
                "interval on {p} ends before it starts"
            )));
        }
        let st = &mut self.procs[p];
        if start < st.clock {
            return Err(Error::Integrity(format!(
                "overlapping intervals on processor {p}: {start} < {}",
                st.clock
            )));
        }
        match kind {
            IntervalKind::Compute => st.busy_compute += end - start,
            IntervalKind::Communicate => st.busy_comm += end - start,
            IntervalKind::Idle => {}
        }
        let gap = (st.clock, start);
        st.clock = end;
        if self.record {
            let list = &mut self.intervals[p];
            if gap.1 > gap.0 {
                list.push(Interval {
                    start: gap.0,
                    end: gap.1,
                    kind: IntervalKind::Idle,
                });
            }
            if end > start {
                list.push(Interval { start, end, kind });
            }
        }
        Ok(())
    }

    fn account_outbound(&mut self, msg: &Message<M>) {
        self.outbound[msg.src] += 1;
        self.total_messages += 1;
        self.total_bytes += msg.bytes;
    }

    fn account_inbound(&mut self, msg: &Message<M>) {
        self.inbound[msg.dst] += 1;
        if self.record {
            self.log(EventKind::MessageDelivered {
                src: msg.src,
                dst: msg.dst,
                bytes: msg.bytes,
                payload: msg.body.describe(),
            });
        }
    }

    /// Starts the next queued task on `p` if it is free. Returns false when
    /// there is nothing queued.
    fn start_next(&mut self, p: usize) -> Result<bool> {
        if self.procs[p].active.is_some() {
            return Ok(true);
        }
        if let Some(task) = self.procs[p].comm.pop_front() {
            let act = match task {
                CommTask::Send(msg) => Activity::Sending(msg),
                CommTask::Recv(msg) => Activity::Receiving(msg),
            };
            self.procs[p].active = Some(act);
            let at = self.now + self.overhead;
            self.schedule(at, Ev::ActivityDone(p));
            return Ok(true);
        }
        if let Some(item) = self.procs[p].work.pop_front() {
            let speed = self.platform.processor(p).speed;
            let work = SimTime::from_secs(self.costs[item.job] / speed);
            let (dur, stalls) = self.streams[p].realize(self.now, work);
            if self.record {
                for s in stalls {
                    self.schedule(
                        s.start,
                        Ev::Log(EventKind::PerturbationStart { processor: p }),
                    );
                    self.schedule(s.end, Ev::Log(EventKind::PerturbationEnd { processor: p }));
                }
            }
            self.procs[p].active = Some(Activity::Computing {
                item,
                start: self.now,
            });
            let at = self.now + dur;
            self.schedule(at, Ev::ActivityDone(p));
            return Ok(true);
        }
        Ok(false)
    }
}

fn dispatch<P: Protocol>(sim: &mut Sim<'_, P::Msg>, proto: &mut P) -> Result<()> {
    while let Some(p) = sim.dirty.pop() {
        if sim.start_next(p)? {
            continue;
        }
        proto.on_idle(sim, p)?;
        // on_idle may have queued something for p (or others)
        sim.start_next(p)?;
    }
    Ok(())
}

fn handle<P: Protocol>(sim: &mut Sim<'_, P::Msg>, proto: &mut P, ev: Ev<P::Msg>) -> Result<()> {
    match ev {
        Ev::Log(kind) => sim.log(kind),
        Ev::Arrive(msg) => {
            let dst = msg.dst;
            if sim.congestion.serial {
                sim.procs[dst].comm.push_back(CommTask::Recv(msg));
                sim.mark(dst);
            } else {
                sim.account_inbound(&msg);
                proto.on_message(sim, dst, msg)?;
                sim.mark(dst);
            }
        }
        Ev::ActivityDone(p) => {
            let act = sim.procs[p]
                .active
                .take()
                .ok_or_else(|| Error::Integrity(format!("completion on idle processor {p}")))?;
            match act {
                Activity::Computing { item, start } => {
                    let now = sim.now;
                    sim.record_interval(p, start, now, IntervalKind::Compute)?;
                    let elapsed = now - start;
                    sim.realized_work += elapsed;
                    match item.kind {
                        WorkKind::Job => {
                            let slot = &mut sim.executed[item.job];
                            *slot += 1;
                            if *slot > 1 {
                                return Err(Error::Integrity(format!(
                                    "job {} of loop {} executed twice in step {}",
                                    item.job, sim.loop_id, sim.step
                                )));
                            }
                            sim.executed_count += 1;
                            sim.jobs_executed += 1;
                        }
                        WorkKind::Replica => sim.replicas_executed += 1,
                    }
                    if sim.record {
                        let kind = EventKind::JobBatchComplete {
                            processor: p,
                            step: sim.step,
                            loop_id: sim.loop_id,
                            jobs: vec![item.job],
                            replica: item.kind == WorkKind::Replica,
                        };
                        sim.log(kind);
                    }
                    proto.on_work_done(sim, p, item, elapsed)?;
                }
                Activity::Sending(msg) => {
                    let now = sim.now;
                    sim.record_interval(p, now - sim.overhead, now, IntervalKind::Communicate)?;
                    let delay = SimTime::from_secs(
                        sim.platform.message_delay(msg.src, msg.dst, msg.bytes)?,
                    );
                    sim.account_outbound(&msg);
                    sim.schedule(now + delay, Ev::Arrive(msg));
                }
                Activity::Receiving(msg) => {
                    let now = sim.now;
                    sim.record_interval(p, now - sim.overhead, now, IntervalKind::Communicate)?;
                    sim.account_inbound(&msg);
                    proto.on_message(sim, p, msg)?;
                }
            }
            sim.mark(p);
        }
    }
    Ok(())
}

fn run_loop<P: Protocol>(sim: &mut Sim<'_, P::Msg>, proto: &mut P) -> Result<()> {
    sim.costs = sim.workload.loop_costs(sim.step, sim.loop_id);
    sim.executed = vec![0; sim.costs.len()];
    sim.executed_count = 0;

    proto.start_loop(sim)?;
    for p in 0..sim.m() {
        sim.mark(p);
    }
    dispatch(sim, proto)?;
    while let Some(Reverse(next)) = sim.queue.pop() {
        sim.now = next.time;
        handle(sim, proto, next.ev)?;
        dispatch(sim, proto)?;
    }
    if sim.executed_count != sim.costs.len() {
        return Err(Error::Integrity(format!(
            "loop {} of step {} ended with {} of {} jobs executed",
            sim.loop_id,
            sim.step,
            sim.executed_count,
            sim.costs.len()
        )));
    }
    if let Some(p) =
        (0..sim.m()).find(|&p| !sim.procs[p].work.is_empty() || !sim.procs[p].comm.is_empty())
    {
        return Err(Error::Integrity(format!(
            "processor {p} still holds queued tasks at loop end"
        )));
    }
    proto.end_loop(sim)?;
    // barrier: the next loop starts when the last processor is done
    sim.now = sim
        .procs
        .iter()
        .map(|s| s.clock)
        .max()
        .unwrap_or(sim.now)
        .max(sim.now);
    Ok(())
}

/// Runs a whole workload under an arbitrary protocol.
pub fn run_protocol<P: Protocol>(
    workload: &TimeSteppedWorkload,
    platform: &PlatformGraph,
    proto: &mut P,
    congestion: &CongestionPolicy,
    perturbation: &PerturbationModel,
    seed: u64,
    options: RunOptions,
) -> Result<(RunMetrics, Trace)> {
    workload.validate()?;
    perturbation.validate()?;
    if !(congestion.overhead >= 0.0 && congestion.overhead.is_finite()) {
        return Err(Error::Platform("congestion overhead must be >= 0".into()));
    }
    let mut sim = Sim::new(
        workload,
        platform,
        *congestion,
        *perturbation,
        seed,
        options.record_trace,
    );
    let sequential = SimTime::from_secs(workload.sequential_overhead);

    for step in 0..workload.num_steps {
        sim.step = step;
        sim.log(EventKind::StepBoundary { step });
        if sequential > SimTime::ZERO {
            // s_0/s_1 run on processor 0 while everyone waits
            let start = sim.now;
            sim.record_interval(0, start, start + sequential, IntervalKind::Compute)?;
            sim.realized_work += sequential;
            sim.now = start + sequential;
        }
        for loop_id in 0..workload.loops.len() {
            sim.loop_id = loop_id;
            run_loop(&mut sim, proto)?;
        }
    }

    let t_p = sim.now;
    let m = sim.m();
    for p in 0..m {
        // close every timeline at T_P
        sim.record_interval(p, t_p, t_p, IntervalKind::Idle)?;
    }
    let idle_seconds = sim
        .procs
        .iter()
        .map(|s| (t_p - s.busy_compute - s.busy_comm).as_secs())
        .collect();
    let (max_inbound_processor, max_inbound) =
        sim.inbound
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, 0),
                |best, (p, c)| if c > best.1 { (p, c) } else { best },
            );
    let t_p_secs = t_p.as_secs();
    let mut metrics = RunMetrics {
        m,
        t_p: t_p_secs,
        c_p: m as f64 * t_p_secs,
        t_p_exact: t_p,
        idle_seconds,
        inbound: sim.inbound.clone(),
        max_inbound,
        max_inbound_processor,
        total_messages: sim.total_messages,
        total_bytes: sim.total_bytes,
        busy_compute: sim
            .procs
            .iter()
            .fold(SimTime::ZERO, |a, s| a + s.busy_compute),
        realized_work: sim.realized_work,
        jobs_executed: sim.jobs_executed,
        replicas_executed: sim.replicas_executed,
        jobs_transferred: 0,
        agreement_rounds: 0,
    };
    proto.finish(&mut metrics);
    let trace = Trace {
        intervals: std::mem::take(&mut sim.intervals),
        inbound: sim.inbound,
        outbound: sim.outbound,
        events: sim.events,
    };
    Ok((metrics, trace))
}

/// A scheduling policy selectable for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    MasterSlave(MasterSlaveConfig),
    Multiagent(AgentConfig),
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::MasterSlave(cfg) => cfg.policy.name(),
            Policy::Multiagent(_) => "multiagent".to_string(),
        }
    }
}

pub fn run_with(
    workload: &TimeSteppedWorkload,
    platform: &PlatformGraph,
    policy: &Policy,
    congestion: &CongestionPolicy,
    perturbation: &PerturbationModel,
    seed: u64,
    options: RunOptions,
) -> Result<(RunMetrics, Trace)> {
    match policy {
        Policy::MasterSlave(cfg) => {
            let mut proto = MasterSlaveProtocol::new(cfg.clone(), platform)?;
            run_protocol(
                workload,
                platform,
                &mut proto,
                congestion,
                perturbation,
                seed,
                options,
            )
        }
        Policy::Multiagent(cfg) => {
            let mut proto =
                MultiagentProtocol::new(cfg.clone(), platform.m(), workload.loops.len())?;
            run_protocol(
                workload,
                platform,
                &mut proto,
                congestion,
                perturbation,
                seed,
                options,
            )
        }
    }
}

/// Runs with full trace recording.
pub fn run(
    workload: &TimeSteppedWorkload,
    platform: &PlatformGraph,
    policy: &Policy,
    congestion: &CongestionPolicy,
    perturbation: &PerturbationModel,
    seed: u64,
) -> Result<(RunMetrics, Trace)> {
    run_with(
        workload,
        platform,
        policy,
        congestion,
        perturbation,
        seed,
        RunOptions { record_trace: true },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{CostModel, LoopSpec};

    #[derive(Debug, Clone)]
    struct Note;
    impl Payload for Note {
        fn describe(&self) -> String {
            "note".into()
        }
    }

    /// Processor 0 runs every job; optionally processor 1 fires `burst`
    /// messages at processor 2 when the loop starts.
    struct Solo {
        burst: usize,
        received_at: Vec<SimTime>,
        double: bool,
    }

    impl Protocol for Solo {
        type Msg = Note;
        fn start_loop(&mut self, sim: &mut Sim<'_, Note>) -> Result<()> {
            for j in 0..sim.loop_len() {
                sim.push_work(0, WorkItem::job(j))?;
            }
            if self.double {
                sim.push_work(1, WorkItem::job(0))?;
            }
            for _ in 0..self.burst {
                sim.send(1, 2, 64, Note)?;
            }
            Ok(())
        }
        fn on_message(
            &mut self,
            sim: &mut Sim<'_, Note>,
            _at: usize,
            _msg: Message<Note>,
        ) -> Result<()> {
            self.received_at.push(sim.now());
            Ok(())
        }
        fn on_work_done(
            &mut self,
            _: &mut Sim<'_, Note>,
            _: usize,
            _: WorkItem,
            _: SimTime,
        ) -> Result<()> {
            Ok(())
        }
        fn on_idle(&mut self, _: &mut Sim<'_, Note>, _: usize) -> Result<()> {
            Ok(())
        }
    }

    fn uniform(n: usize, t: f64, steps: usize) -> TimeSteppedWorkload {
        TimeSteppedWorkload::single_loop(LoopSpec::new(n, CostModel::Uniform { t }), steps, 0)
            .unwrap()
    }

    fn solo() -> Solo {
        Solo {
            burst: 0,
            received_at: Vec::new(),
            double: false,
        }
    }

    #[test]
    fn intervals_tile_the_run() {
        let w = uniform(3, 1.0, 1);
        let p = PlatformGraph::fully_connected(&[1.0, 1.0], 0.0, 0.0).unwrap();
        let (metrics, trace) = run_protocol(
            &w,
            &p,
            &mut solo(),
            &CongestionPolicy::NONE,
            &PerturbationModel::None,
            0,
            RunOptions { record_trace: true },
        )
        .unwrap();
        assert_eq!(metrics.t_p, 3.0);
        assert_eq!(trace.intervals[0].len(), 3);
        assert_eq!(
            trace.intervals[1],
            vec![Interval {
                start: SimTime::ZERO,
                end: SimTime::from_secs(3.0),
                kind: IntervalKind::Idle
            }]
        );
        assert_eq!(metrics.idle_seconds, vec![0.0, 3.0]);
        assert_eq!(metrics.max_inbound, 0);
    }

    #[test]
    fn overlapping_interval_is_an_integrity_error() {
        let w = uniform(1, 1.0, 1);
        let p = PlatformGraph::fully_connected(&[1.0], 0.0, 0.0).unwrap();
        let mut sim: Sim<'_, Note> = Sim::new(
            &w,
            &p,
            CongestionPolicy::NONE,
            PerturbationModel::None,
            0,
            true,
        );
        sim.record_interval(0, SimTime(0), SimTime(10), IntervalKind::Compute)
            .unwrap();
        sim.record_interval(0, SimTime(10), SimTime(20), IntervalKind::Idle)
            .unwrap();
        let err = sim
            .record_interval(0, SimTime(15), SimTime(30), IntervalKind::Compute)
            .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn serial_sends_depart_one_overhead_apart() {
        let w = uniform(1, 0.001, 1);
        let p = PlatformGraph::fully_connected(&[1.0; 3], 0.0, 0.0).unwrap();
        let mut proto = Solo { burst: 2, ..solo() };
        let congestion = CongestionPolicy::serial(0.01);
        let (_, trace) = run_protocol(
            &w,
            &p,
            &mut proto,
            &congestion,
            &PerturbationModel::None,
            0,
            RunOptions { record_trace: true },
        )
        .unwrap();
        let sends: Vec<&Interval> = trace.intervals[1]
            .iter()
            .filter(|i| i.kind == IntervalKind::Communicate)
            .collect();
        assert_eq!(sends.len(), 2);
        assert!((sends[1].end - sends[0].end).as_secs() >= 0.01);
        // receiver handles k messages no earlier than k * overhead after the first arrival
        let first_arrival = sends[0].end;
        assert!((*proto.received_at.last().unwrap() - first_arrival).as_secs() >= 2.0 * 0.01);
        assert_eq!(trace.inbound, vec![0, 0, 2]);
        assert_eq!(trace.outbound, vec![0, 2, 0]);
    }

    #[test]
    fn double_execution_fails_fast() {
        let w = uniform(2, 1.0, 1);
        let p = PlatformGraph::fully_connected(&[1.0; 2], 0.0, 0.0).unwrap();
        let mut proto = Solo {
            double: true,
            ..solo()
        };
        let err = run_protocol(
            &w,
            &p,
            &mut proto,
            &CongestionPolicy::NONE,
            &PerturbationModel::None,
            0,
            RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn sequential_portion_blocks_everyone() {
        // two steps, 1 s of sequential code, 5 s of loop work each
        let mut w = uniform(5, 1.0, 2);
        w.sequential_overhead = 1.0;
        let p = PlatformGraph::fully_connected(&[1.0; 2], 0.0, 0.0).unwrap();
        let (metrics, _) = run_protocol(
            &w,
            &p,
            &mut solo(),
            &CongestionPolicy::NONE,
            &PerturbationModel::None,
            0,
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(metrics.t_p, 12.0);
        assert_eq!(metrics.c_p, 24.0);
        assert_eq!(metrics.busy_compute, metrics.realized_work);
    }

    #[test]
    fn median_of_counts() {
        assert_eq!(median_u64(&[3, 1, 2]), 2.0);
        assert_eq!(median_u64(&[4, 1, 2, 3]), 2.5);
        assert_eq!(median_u64(&[]), 0.0);
    }
}
