//! Master-slave chunk scheduling: static chunking, fixed-size chunks and
//! the factoring family, with end-game work give-up.
//!
//! Processor 0 is the master. It executes chunks like any slave but serves
//! every request first, at job boundaries. Slaves ask for work, execute the
//! chunk they receive, and report the chunk's elapsed time with the next
//! request.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::platform::PlatformGraph;
use crate::simcore::{Message, Payload, Protocol, RunMetrics, Sim, WorkItem, WorkKind};
use crate::time::SimTime;

pub const MASTER: usize = 0;
pub const REQUEST_BYTES: u64 = 64;
pub const ASSIGN_BASE_BYTES: u64 = 64;
pub const ASSIGN_PER_JOB_BYTES: u64 = 16;
pub const REPORT_BYTES: u64 = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkPolicy {
    /// One block of ⌈n/m⌉ iterates per processor.
    Static,
    FixedSize(usize),
    Factoring,
    /// Per-processor weights summing to one. An empty list means "use the
    /// platform's relative speeds".
    WeightedFactoring(Vec<f64>),
    AdaptiveWeightedFactoring,
    AdaptiveFactoring,
}

impl ChunkPolicy {
    pub fn name(&self) -> String {
        match self {
            ChunkPolicy::Static => "static".into(),
            ChunkPolicy::FixedSize(c) => format!("fixed:c={c}"),
            ChunkPolicy::Factoring => "fac".into(),
            ChunkPolicy::WeightedFactoring(_) => "wf".into(),
            ChunkPolicy::AdaptiveWeightedFactoring => "awf".into(),
            ChunkPolicy::AdaptiveFactoring => "af".into(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            ChunkPolicy::FixedSize(0) => Err(Error::InvalidWorkload(
                "fixed chunk size must be >= 1".into(),
            )),
            ChunkPolicy::WeightedFactoring(w) if !w.is_empty() => {
                if w.len() != m {
                    return Err(Error::InvalidWorkload(format!(
                        "{} weights for {m} processors",
                        w.len()
                    )));
                }
                if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(Error::InvalidWorkload("weights must be positive".into()));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidWorkload(format!(
                        "weights sum to {sum}, expected 1"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// `x / sum(x)`.
pub fn normalized(values: &[f64]) -> Vec<f64> {
    let sum: f64 = values.iter().sum();
    values.iter().map(|v| v / sum).collect()
}

/// ⌈x⌉ that ignores floating-point residue just above an integer.
fn ceil_count(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Running mean and variance of per-iterate times (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outstanding {
    pub assigned: Range<usize>,
    /// Where the master thinks the slave's work ends after give-ups.
    pub believed_end: usize,
    pub since: SimTime,
}

/// Jobs a donor must hand to an idle processor. `donor == None` means there
/// is nothing worth moving.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferDirective {
    pub donor: Option<usize>,
    pub jobs: Range<usize>,
}

impl TransferDirective {
    pub fn empty() -> Self {
        TransferDirective {
            donor: None,
            jobs: 0..0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.donor.is_none()
    }
}

#[derive(Debug, Clone)]
struct Batch {
    remaining_at_start: usize,
    served: usize,
    weights: Vec<f64>,
}

/// The master's bookkeeping for one loop.
#[derive(Debug, Clone)]
pub struct MasterState {
    m: usize,
    n: usize,
    policy: ChunkPolicy,
    remaining: usize,
    next: usize,
    batch: Option<Batch>,
    static_served: Vec<bool>,
    stats: Vec<RunningStats>,
    /// Per-iterate means from the previous step (adaptive weighted factoring).
    prior_means: Vec<Option<f64>>,
    outstanding: Vec<Option<Outstanding>>,
    giveups: usize,
}

impl MasterState {
    pub fn new(n: usize, m: usize, policy: ChunkPolicy) -> Self {
        MasterState {
            m,
            n,
            policy,
            remaining: n,
            next: 0,
            batch: None,
            static_served: vec![false; m],
            stats: vec![RunningStats::default(); m],
            prior_means: vec![None; m],
            outstanding: vec![None; m],
            giveups: 0,
        }
    }

    pub fn with_prior_means(mut self, prior: Vec<Option<f64>>) -> Self {
        self.prior_means = prior;
        self
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn assigned(&self) -> usize {
        self.n - self.remaining
    }

    pub fn stats(&self, slave: usize) -> &RunningStats {
        &self.stats[slave]
    }

    pub fn outstanding(&self, slave: usize) -> Option<&Outstanding> {
        self.outstanding[slave].as_ref()
    }

    pub fn giveups(&self) -> usize {
        self.giveups
    }

    pub fn means(&self) -> Vec<Option<f64>> {
        self.stats.iter().map(|s| s.mean()).collect()
    }

    fn check_slave(&self, slave: usize) -> Result<()> {
        if slave >= self.m {
            Err(Error::Integrity(format!("unknown slave {slave}")))
        } else {
            Ok(())
        }
    }

    /// Weights ∝ 1/μ̂ with unknown means replaced by the mean of the known
    /// ones; equal weights when nothing is known.
    fn inverse_mean_weights(means: &[Option<f64>]) -> Vec<f64> {
        let known: Vec<f64> = means
            .iter()
            .flatten()
            .copied()
            .filter(|v| *v > 0.0)
            .collect();
        if known.is_empty() {
            return vec![1.0 / means.len() as f64; means.len()];
        }
        let fill = known.iter().sum::<f64>() / known.len() as f64;
        let inv: Vec<f64> = means
            .iter()
            .map(|m| 1.0 / m.filter(|v| *v > 0.0).unwrap_or(fill))
            .collect();
        normalized(&inv)
    }

    fn open_batch(&mut self) {
        let weights = match &self.policy {
            ChunkPolicy::WeightedFactoring(w) => w.clone(),
            ChunkPolicy::AdaptiveWeightedFactoring => Self::inverse_mean_weights(&self.prior_means),
            ChunkPolicy::AdaptiveFactoring => Self::inverse_mean_weights(&self.means()),
            _ => Vec::new(),
        };
        self.batch = Some(Batch {
            remaining_at_start: self.remaining,
            served: 0,
            weights,
        });
    }

    fn chunk_size(&mut self, slave: usize) -> usize {
        match &self.policy {
            ChunkPolicy::Static => unreachable!("static blocks are precomputed"),
            ChunkPolicy::FixedSize(c) => *c,
            _ => {
                if self.batch.as_ref().is_none_or(|b| b.served >= self.m) {
                    self.open_batch();
                }
                let batch = self.batch.as_mut().expect("batch just opened");
                batch.served += 1;
                let r = batch.remaining_at_start;
                let c = if batch.weights.is_empty() {
                    r.div_ceil(2 * self.m)
                } else {
                    ceil_count(r as f64 / 2.0 * batch.weights[slave])
                };
                c.max(1)
            }
        }
    }

    /// Next chunk for `slave`; empty when nothing is left for it.
    pub fn next_chunk(&mut self, slave: usize, now: SimTime) -> Result<Range<usize>> {
        self.check_slave(slave)?;
        let range = if let ChunkPolicy::Static = self.policy {
            if self.static_served[slave] {
                0..0
            } else {
                self.static_served[slave] = true;
                let block = self.n.div_ceil(self.m);
                let start = (slave * block).min(self.n);
                start..((slave + 1) * block).min(self.n)
            }
        } else {
            if self.remaining == 0 {
                return Ok(0..0);
            }
            let size = self.chunk_size(slave).min(self.remaining);
            let r = self.next..self.next + size;
            self.next += size;
            r
        };
        self.remaining -= range.len();
        if !range.is_empty() {
            self.outstanding[slave] = Some(Outstanding {
                assigned: range.clone(),
                believed_end: range.end,
                since: now,
            });
        }
        Ok(range)
    }

    /// Folds a finished chunk's per-iterate time into the slave's estimate.
    pub fn report_completion(
        &mut self,
        slave: usize,
        chunk: Range<usize>,
        elapsed: SimTime,
    ) -> Result<()> {
        self.check_slave(slave)?;
        let out = self.outstanding[slave].take().ok_or_else(|| {
            Error::Integrity(format!(
                "slave {slave} reported chunk {chunk:?} it was never given"
            ))
        })?;
        if chunk.start < out.assigned.start || chunk.end > out.assigned.end {
            return Err(Error::Integrity(format!(
                "slave {slave} reported {chunk:?} outside its chunk {:?}",
                out.assigned
            )));
        }
        if !chunk.is_empty() {
            self.stats[slave].push(elapsed.as_secs() / chunk.len() as f64);
        }
        Ok(())
    }

    /// Picks the processor predicted to finish last and moves the later half
    /// of its unstarted iterates to `idle`.
    pub fn endgame_giveup(&mut self, idle: usize, now: SimTime) -> Result<TransferDirective> {
        self.check_slave(idle)?;
        if self.remaining > 0 {
            return Ok(TransferDirective::empty());
        }
        let means = self.means();
        let known: Vec<f64> = means.iter().flatten().copied().collect();
        let fallback = if known.is_empty() {
            1.0
        } else {
            known.iter().sum::<f64>() / known.len() as f64
        };

        let mut best: Option<(usize, usize, f64)> = None;
        for (s, out) in self.outstanding.iter().enumerate() {
            let Some(out) = out else { continue };
            if s == idle {
                continue;
            }
            let believed = out.believed_end.saturating_sub(out.assigned.start);
            let started = match means[s] {
                Some(mu) if mu > 0.0 => {
                    let elapsed = (now - out.since).as_secs();
                    ((elapsed / mu).ceil() as usize).min(believed)
                }
                _ => usize::from(now > out.since).min(believed),
            };
            let unstarted = believed - started;
            if unstarted < 2 {
                continue;
            }
            let finish = unstarted as f64 * means[s].unwrap_or(fallback);
            if best.is_none_or(|(_, _, f)| finish > f) {
                best = Some((s, unstarted, finish));
            }
        }
        let Some((donor, unstarted, _)) = best else {
            return Ok(TransferDirective::empty());
        };
        let k = unstarted / 2;
        let out = self.outstanding[donor]
            .as_mut()
            .expect("donor has outstanding work");
        let jobs = out.believed_end - k..out.believed_end;
        out.believed_end -= k;
        self.outstanding[idle] = Some(Outstanding {
            assigned: jobs.clone(),
            believed_end: jobs.end,
            since: now,
        });
        self.giveups += 1;
        Ok(TransferDirective {
            donor: Some(donor),
            jobs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterSlaveConfig {
    pub policy: ChunkPolicy,
    /// End-game give-up. Never used with static chunking.
    pub giveup: bool,
}

impl MasterSlaveConfig {
    pub fn new(policy: ChunkPolicy) -> Self {
        MasterSlaveConfig {
            policy,
            giveup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MsMessage {
    Request,
    Assign(Range<usize>),
    /// Completed chunk and its elapsed compute time; doubles as the next
    /// request.
    Report {
        chunk: Range<usize>,
        elapsed: SimTime,
    },
    NoWork,
    /// Master to donor: hand `jobs` (those still unstarted) to `to`.
    GiveUp {
        to: usize,
        jobs: Range<usize>,
    },
    /// Donor to idle processor, carrying the job payloads.
    Transfer(Range<usize>),
}

impl Payload for MsMessage {
    fn describe(&self) -> String {
        match self {
            MsMessage::Request => "request".into(),
            MsMessage::Assign(r) => format!("assign {}..{}", r.start, r.end),
            MsMessage::Report { chunk, .. } => format!("report {}..{}", chunk.start, chunk.end),
            MsMessage::NoWork => "no-work".into(),
            MsMessage::GiveUp { to, jobs } => {
                format!("give-up {}..{} to {to}", jobs.start, jobs.end)
            }
            MsMessage::Transfer(r) => format!("transfer {}..{}", r.start, r.end),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Worker {
    chunk: Option<Range<usize>>,
    elapsed: SimTime,
    /// Master only: waiting for a give-up transfer.
    awaiting_transfer: bool,
    done: bool,
}

/// Maximum give-up directives per loop, as a multiple of m.
const GIVEUP_CAP_PER_PROCESSOR: usize = 4;

pub struct MasterSlaveProtocol {
    cfg: MasterSlaveConfig,
    m: usize,
    state: MasterState,
    workers: Vec<Worker>,
    /// Per loop id: per-processor means from the previous step.
    prior: Vec<Vec<Option<f64>>>,
    transferred: u64,
}

impl MasterSlaveProtocol {
    pub fn new(mut cfg: MasterSlaveConfig, platform: &PlatformGraph) -> Result<Self> {
        let m = platform.m();
        if let ChunkPolicy::WeightedFactoring(w) = &mut cfg.policy {
            if w.is_empty() {
                *w = normalized(&platform.speeds());
            }
        }
        cfg.policy.validate(m)?;
        if cfg.policy == ChunkPolicy::Static {
            cfg.giveup = false;
        }
        Ok(MasterSlaveProtocol {
            state: MasterState::new(0, m, cfg.policy.clone()),
            cfg,
            m,
            workers: vec![Worker::default(); m],
            prior: Vec::new(),
            transferred: 0,
        })
    }

    fn data_bytes(sim: &Sim<'_, MsMessage>, jobs: usize) -> u64 {
        ASSIGN_BASE_BYTES + jobs as u64 * sim.data_size()
    }

    fn start_chunk(
        &mut self,
        sim: &mut Sim<'_, MsMessage>,
        p: usize,
        range: Range<usize>,
    ) -> Result<()> {
        for j in range.clone() {
            sim.push_work(p, WorkItem::job(j))?;
        }
        let w = &mut self.workers[p];
        w.chunk = Some(range);
        w.elapsed = SimTime::ZERO;
        Ok(())
    }

    /// Master's answer to a request from `s` (which may be itself).
    fn serve(&mut self, sim: &mut Sim<'_, MsMessage>, s: usize) -> Result<()> {
        let now = sim.now();
        let range = self.state.next_chunk(s, now)?;
        if !range.is_empty() {
            if s == MASTER {
                return self.start_chunk(sim, MASTER, range);
            }
            let bytes = ASSIGN_BASE_BYTES + ASSIGN_PER_JOB_BYTES * range.len() as u64;
            return sim.send(MASTER, s, bytes, MsMessage::Assign(range));
        }
        let directive =
            if self.cfg.giveup && self.state.giveups() < GIVEUP_CAP_PER_PROCESSOR * self.m {
                self.state.endgame_giveup(s, now)?
            } else {
                TransferDirective::empty()
            };
        match directive.donor {
            None => {
                if s == MASTER {
                    self.workers[MASTER].done = true;
                    Ok(())
                } else {
                    sim.send(MASTER, s, REQUEST_BYTES, MsMessage::NoWork)
                }
            }
            Some(donor) => {
                if s == MASTER {
                    self.workers[MASTER].awaiting_transfer = true;
                }
                if donor == MASTER {
                    self.donate(sim, MASTER, s, directive.jobs)
                } else {
                    let bytes =
                        ASSIGN_BASE_BYTES + ASSIGN_PER_JOB_BYTES * directive.jobs.len() as u64;
                    sim.send(
                        MASTER,
                        donor,
                        bytes,
                        MsMessage::GiveUp {
                            to: s,
                            jobs: directive.jobs,
                        },
                    )
                }
            }
        }
    }

    /// Moves the still-queued part of `jobs` from `donor` to `to`.
    fn donate(
        &mut self,
        sim: &mut Sim<'_, MsMessage>,
        donor: usize,
        to: usize,
        jobs: Range<usize>,
    ) -> Result<()> {
        let taken = sim.take_work(donor, |it| {
            it.kind == WorkKind::Job && jobs.contains(&it.job)
        });
        let moved = match (taken.first(), taken.last()) {
            (Some(a), Some(b)) => a.job..b.job + 1,
            _ => 0..0,
        };
        if moved.len() != taken.len() {
            return Err(Error::Integrity(format!(
                "give-up from {donor} is not contiguous"
            )));
        }
        if !moved.is_empty() {
            if let Some(chunk) = self.workers[donor].chunk.as_mut() {
                chunk.end = chunk.end.min(moved.start);
            }
        }
        self.transferred += moved.len() as u64;
        let bytes = Self::data_bytes(sim, moved.len());
        sim.send(donor, to, bytes, MsMessage::Transfer(moved))
    }

    fn master_next(&mut self, sim: &mut Sim<'_, MsMessage>) -> Result<()> {
        let w = &self.workers[MASTER];
        if w.done || w.awaiting_transfer || w.chunk.is_some() {
            return Ok(());
        }
        self.serve(sim, MASTER)
    }
}

impl Protocol for MasterSlaveProtocol {
    type Msg = MsMessage;

    fn start_loop(&mut self, sim: &mut Sim<'_, MsMessage>) -> Result<()> {
        let loop_id = sim.loop_id();
        if self.prior.len() < sim.num_loops() {
            self.prior = vec![vec![None; self.m]; sim.num_loops()];
        }
        self.state = MasterState::new(sim.loop_len(), self.m, self.cfg.policy.clone())
            .with_prior_means(self.prior[loop_id].clone());
        self.workers = vec![Worker::default(); self.m];
        for s in 1..self.m {
            sim.send(s, MASTER, REQUEST_BYTES, MsMessage::Request)?;
        }
        Ok(())
    }

    fn on_message(
        &mut self,
        sim: &mut Sim<'_, MsMessage>,
        at: usize,
        msg: Message<MsMessage>,
    ) -> Result<()> {
        match msg.body {
            MsMessage::Request if at == MASTER => self.serve(sim, msg.src),
            MsMessage::Report { chunk, elapsed } if at == MASTER => {
                self.state.report_completion(msg.src, chunk, elapsed)?;
                self.serve(sim, msg.src)
            }
            MsMessage::Assign(range) => self.start_chunk(sim, at, range),
            MsMessage::NoWork => {
                self.workers[at].done = true;
                Ok(())
            }
            MsMessage::GiveUp { to, jobs } => self.donate(sim, at, to, jobs),
            MsMessage::Transfer(range) => {
                self.workers[at].awaiting_transfer = false;
                if range.is_empty() {
                    // donor had already started everything; ask again
                    if at == MASTER {
                        self.master_next(sim)
                    } else {
                        sim.send(at, MASTER, REQUEST_BYTES, MsMessage::Request)
                    }
                } else {
                    self.start_chunk(sim, at, range)
                }
            }
            other => Err(Error::Integrity(format!(
                "processor {at} cannot handle {}",
                other.describe()
            ))),
        }
    }

    fn on_work_done(
        &mut self,
        _sim: &mut Sim<'_, MsMessage>,
        at: usize,
        _item: WorkItem,
        elapsed: SimTime,
    ) -> Result<()> {
        self.workers[at].elapsed += elapsed;
        Ok(())
    }

    fn on_idle(&mut self, sim: &mut Sim<'_, MsMessage>, at: usize) -> Result<()> {
        if let Some(chunk) = self.workers[at].chunk.take() {
            let elapsed = self.workers[at].elapsed;
            if at == MASTER {
                self.state.report_completion(MASTER, chunk, elapsed)?;
            } else {
                return sim.send(
                    at,
                    MASTER,
                    REPORT_BYTES,
                    MsMessage::Report { chunk, elapsed },
                );
            }
        }
        if at == MASTER {
            self.master_next(sim)?;
        }
        Ok(())
    }

    fn end_loop(&mut self, sim: &mut Sim<'_, MsMessage>) -> Result<()> {
        if self.state.remaining() != 0 {
            return Err(Error::Integrity(format!(
                "{} iterates never assigned",
                self.state.remaining()
            )));
        }
        let loop_id = sim.loop_id();
        self.prior[loop_id] = self.state.means();
        Ok(())
    }

    fn finish(&mut self, metrics: &mut RunMetrics) {
        metrics.jobs_transferred = self.transferred;
    }
}
