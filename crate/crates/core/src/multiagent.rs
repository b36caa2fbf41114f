//! Multiagent scheduling: every processor is an agent that owns a share of
//! the loop, measures a sample of it, shares what it learned with everyone
//! and then runs the same deterministic reallocation as every other agent.
//!
//! One round runs per (time step, loop). Rounds at `step % resample_period
//! == 0` sample, fit cost profiles and re-measure relative speeds on a
//! common reference job. The rounds in between reuse the previous view,
//! scaled per agent by last step's actual/predicted time ratio.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binpack::{lpt_pack, Assignment, PackingInstance};
use crate::error::{Error, Result};
use crate::platform::{CongestionPolicy, PlatformGraph};
use crate::simcore::{Message, Payload, Protocol, RunMetrics, Sim, WorkItem, WorkKind};
use crate::time::SimTime;

/// Floor applied to every predicted cost, seconds.
pub const PREDICTION_FLOOR: f64 = 1e-9;
pub const CONTROL_BYTES: u64 = 64;
pub const PREDICTION_BYTES: u64 = 8;

/// Contiguous blocks of ⌈n/m⌉ iterates; trailing agents may get fewer or none.
pub fn initial_partition(n: usize, m: usize) -> Vec<Range<usize>> {
    let block = n.div_ceil(m.max(1));
    (0..m)
        .map(|k| (k * block).min(n)..((k + 1) * block).min(n))
        .collect()
}

/// Positions `0, d, 2d, ...` (s of them) with stride `d = ⌊len/s⌋`.
/// `s` is clamped to `[1, len]`; an empty block has no samples.
pub fn sample_positions(len: usize, s: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let s = s.clamp(1, len);
    let stride = (len / s).max(1);
    (0..s).map(|k| k * stride).collect()
}

pub fn select_sample_indices(block: Range<usize>, s: usize) -> Vec<usize> {
    sample_positions(block.len(), s)
        .into_iter()
        .map(|off| block.start + off)
        .collect()
}

/// Sample count used when none is configured: `max(3, ⌈len/20⌉)`.
pub fn default_sample_size(len: usize) -> usize {
    len.div_ceil(20).max(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Piecewise-linear interpolation, flat beyond the outermost samples.
    Linear,
    /// Least-squares polynomial of the given degree.
    PolyLs(usize),
}

impl FitMethod {
    pub fn name(&self) -> String {
        match self {
            FitMethod::Linear => "linear".into(),
            FitMethod::PolyLs(k) => format!("poly:{k}"),
        }
    }

    pub fn parse(s: &str) -> Option<FitMethod> {
        if s == "linear" {
            return Some(FitMethod::Linear);
        }
        s.strip_prefix("poly:")
            .and_then(|k| k.parse().ok())
            .map(FitMethod::PolyLs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostProfile {
    Linear {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    Poly {
        coeffs: Vec<f64>,
        center: f64,
        half_width: f64,
    },
}

impl CostProfile {
    pub fn predict(&self, index: usize) -> f64 {
        let x = index as f64;
        let y = match self {
            CostProfile::Linear { xs, ys } => {
                let last = xs.len() - 1;
                if x <= xs[0] {
                    ys[0]
                } else if x >= xs[last] {
                    ys[last]
                } else {
                    match xs.binary_search_by(|v| v.total_cmp(&x)) {
                        Ok(k) => ys[k],
                        Err(k) => {
                            let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
                            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
                        }
                    }
                }
            }
            CostProfile::Poly {
                coeffs,
                center,
                half_width,
            } => {
                let u = (x - center) / half_width;
                coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
            }
        };
        y.max(PREDICTION_FLOOR)
    }
}

/// Fits a predictor of per-iterate time over iterate indices.
pub fn fit_cost_profile(samples: &[(usize, f64)], method: FitMethod) -> Result<CostProfile> {
    if samples.is_empty() {
        return Err(Error::Profile(
            "cannot fit a profile without samples".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by_key(|s| s.0);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Profile("duplicate sample index".into()));
    }
    if sorted.iter().any(|s| !s.1.is_finite()) {
        return Err(Error::Profile("non-finite sample time".into()));
    }
    match method {
        FitMethod::Linear => Ok(CostProfile::Linear {
            xs: sorted.iter().map(|s| s.0 as f64).collect(),
            ys: sorted.iter().map(|s| s.1).collect(),
        }),
        FitMethod::PolyLs(degree) => {
            if degree >= sorted.len() {
                return Err(Error::Profile(format!(
                    "degree {degree} needs more than {} samples",
                    sorted.len()
                )));
            }
            let lo = sorted[0].0 as f64;
            let hi = sorted[sorted.len() - 1].0 as f64;
            let center = (lo + hi) / 2.0;
            let half_width = if hi > lo { (hi - lo) / 2.0 } else { 1.0 };
            let a = DMatrix::from_fn(sorted.len(), degree + 1, |r, c| {
                ((sorted[r].0 as f64 - center) / half_width).powi(c as i32)
            });
            let b = DVector::from_iterator(sorted.len(), sorted.iter().map(|s| s.1));
            let coeffs = a
                .svd(true, true)
                .solve(&b, 1e-14)
                .map_err(|e| Error::Profile(format!("least squares failed: {e}")))?;
            Ok(CostProfile::Poly {
                coeffs: coeffs.iter().copied().collect(),
                center,
                half_width,
            })
        }
    }
}

/// `speed_k = t_ref[anchor] / t_ref[k]`.
pub fn normalize_speeds(t_ref: &[Option<f64>], anchor: usize) -> Result<Vec<f64>> {
    let base =
        t_ref.get(anchor).copied().flatten().ok_or_else(|| {
            Error::Protocol(format!("anchor agent {anchor} has no reference time"))
        })?;
    t_ref
        .iter()
        .enumerate()
        .map(|(k, t)| match t {
            Some(t) if *t > 0.0 => Ok(base / t),
            Some(_) => Err(Error::Protocol(format!(
                "agent {k} reported a non-positive reference time"
            ))),
            None => Err(Error::Protocol(format!(
                "agent {k} never reported its reference time"
            ))),
        })
        .collect()
}

/// Result of one all-to-all exchange outside the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedView<T> {
    /// Every agent's merged view, in agent id order.
    pub views: Vec<Vec<T>>,
    pub messages: usize,
    /// Contention-free lower bound on each agent's exchange time: its own
    /// m-1 sends and m-1 receives plus the slowest incoming delay.
    pub elapsed: Vec<f64>,
}

pub fn all_to_all_share<T: Clone>(
    payloads: &[T],
    bytes: &[u64],
    platform: &PlatformGraph,
    congestion: &CongestionPolicy,
) -> Result<SharedView<T>> {
    let m = payloads.len();
    if bytes.len() != m || platform.m() < m {
        return Err(Error::Protocol(
            "payload, size and platform counts disagree".into(),
        ));
    }
    let mut elapsed = vec![0.0; m];
    for (dst, e) in elapsed.iter_mut().enumerate() {
        let mut slowest: f64 = 0.0;
        for (src, &size) in bytes.iter().enumerate() {
            if src != dst {
                slowest = slowest.max(platform.message_delay(src, dst, size)?);
            }
        }
        if m > 1 {
            *e = 2.0 * (m - 1) as f64 * congestion.overhead + slowest;
        }
    }
    Ok(SharedView {
        views: vec![payloads.to_vec(); m],
        messages: m * (m - 1),
        elapsed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub job: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reallocation {
    /// Unexecuted jobs, in id order; item k of the packing is `items[k]`.
    pub items: Vec<usize>,
    pub assignment: Assignment,
    pub new_owner: Vec<usize>,
    pub moves: Vec<Move>,
}

impl Reallocation {
    pub fn identical(&self, other: &Reallocation) -> bool {
        self.items == other.items
            && self.assignment.identical(&other.assignment)
            && self.new_owner == other.new_owner
            && self.moves == other.moves
    }
}

/// Renames bins of bit-identical speed so that each new bin lands on the
/// agent already owning most of its weight. Bin loads, and so the makespan,
/// are unchanged.
fn relabel_equal_speed_bins(
    bins: &mut [usize],
    current: &[usize],
    weights: &[f64],
    speeds: &[f64],
) {
    let m = speeds.len();
    let mut seen = vec![false; m];
    for b in 0..m {
        if seen[b] {
            continue;
        }
        let class: Vec<usize> = (b..m)
            .filter(|&c| speeds[c].to_bits() == speeds[b].to_bits())
            .collect();
        for &c in &class {
            seen[c] = true;
        }
        if class.len() < 2 {
            continue;
        }
        let slot = |bin: usize| class.iter().position(|&c| c == bin);
        let k = class.len();
        let mut overlap = vec![0.0; k * k];
        for (i, &nb) in bins.iter().enumerate() {
            if let (Some(a), Some(o)) = (slot(nb), slot(current[i])) {
                overlap[a * k + o] += weights[i];
            }
        }
        let mut pairs: Vec<(usize, usize)> =
            (0..k).flat_map(|a| (0..k).map(move |o| (a, o))).collect();
        pairs.sort_by(|x, y| {
            overlap[y.0 * k + y.1]
                .total_cmp(&overlap[x.0 * k + x.1])
                .then(x.cmp(y))
        });
        let mut target = vec![usize::MAX; k];
        let mut taken = vec![false; k];
        for (a, o) in pairs {
            if target[a] == usize::MAX && !taken[o] {
                target[a] = o;
                taken[o] = true;
            }
        }
        for nb in bins.iter_mut() {
            if let Some(a) = slot(*nb) {
                *nb = class[target[a]];
            }
        }
    }
}

/// Reallocates the unexecuted jobs, weights in anchor-relative seconds.
///
/// The packing is LPT. The current owner map is kept when LPT does not
/// predict a strictly shorter makespan, and otherwise equal-speed bins are
/// relabelled to keep as much work in place as possible.
pub fn global_reallocate(
    view: &[f64],
    owners: &[usize],
    speeds: &[f64],
    executed: &[bool],
) -> Result<Reallocation> {
    if view.len() != owners.len() || executed.len() != owners.len() {
        return Err(Error::Protocol(
            "view, owner map and executed set differ in length".into(),
        ));
    }
    if let Some(&o) = owners.iter().find(|&&o| o >= speeds.len()) {
        return Err(Error::Protocol(format!("job owned by unknown agent {o}")));
    }
    let items: Vec<usize> = (0..view.len()).filter(|&j| !executed[j]).collect();
    let weights: Vec<f64> = items.iter().map(|&j| view[j]).collect();
    let current: Vec<usize> = items.iter().map(|&j| owners[j]).collect();
    let instance = PackingInstance::new(weights.clone(), speeds.to_vec());
    let assignment = if items.is_empty() {
        Assignment {
            bins: Vec::new(),
            predicted_makespan: 0.0,
        }
    } else {
        let lpt = lpt_pack(&instance)?;
        let kept = instance.makespan_of(&current);
        if kept <= lpt.predicted_makespan {
            Assignment {
                bins: current.clone(),
                predicted_makespan: kept,
            }
        } else {
            let mut bins = lpt.bins;
            relabel_equal_speed_bins(&mut bins, &current, &weights, speeds);
            let predicted_makespan = instance.makespan_of(&bins);
            Assignment {
                bins,
                predicted_makespan,
            }
        }
    };
    let mut new_owner = owners.to_vec();
    let mut moves = Vec::new();
    for (k, &job) in items.iter().enumerate() {
        let to = assignment.bins[k];
        if to != owners[job] {
            moves.push(Move {
                job,
                from: owners[job],
                to,
            });
        }
        new_owner[job] = to;
    }
    Ok(Reallocation {
        items,
        assignment,
        new_owner,
        moves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Samples per agent; `None` uses [`default_sample_size`].
    pub sample_size: Option<usize>,
    pub fit_method: FitMethod,
    pub resample_period: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            sample_size: None,
            fit_method: FitMethod::Linear,
            resample_period: 10,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resample_period == 0 {
            return Err(Error::InvalidWorkload(
                "resample_period must be >= 1".into(),
            ));
        }
        if self.sample_size == Some(0) {
            return Err(Error::InvalidWorkload("sample_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    InitialPartition,
    Sampling,
    ResultShare,
    Normalize,
    Reallocate,
    Execute,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Share {
    Fresh {
        /// Own-processor seconds for owned jobs that were not sampled.
        predictions: Vec<(usize, f64)>,
        /// Measured seconds of the sampled jobs.
        measured: Vec<(usize, f64)>,
        t_ref: f64,
    },
    /// Last step's actual / predicted time on this agent.
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentMessage {
    /// Initial block payload, plus the reference job's payload.
    Scatter,
    /// Reference job payload for a later sampling round.
    Reference,
    Share(Share),
    Transfer(Vec<usize>),
}

impl Payload for AgentMessage {
    fn describe(&self) -> String {
        match self {
            AgentMessage::Scatter => "scatter".into(),
            AgentMessage::Reference => "reference".into(),
            AgentMessage::Share(Share::Fresh { predictions, .. }) => {
                format!("share {} predictions", predictions.len())
            }
            AgentMessage::Share(Share::Ratio(r)) => format!("share ratio {r}"),
            AgentMessage::Transfer(jobs) => format!("transfer {} jobs", jobs.len()),
        }
    }
}

/// What an agent carries from one step of a loop to the next.
#[derive(Debug, Clone, Default)]
struct LoopMemory {
    owners: Vec<usize>,
    /// Agreed per-job weights, anchor-relative seconds.
    view: Vec<f64>,
    speeds: Vec<f64>,
    actual: Vec<f64>,
    predicted: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct AgentRound {
    phase: Option<RoundPhase>,
    owned: Vec<usize>,
    samples: Vec<usize>,
    pending: usize,
    needs_reference: bool,
    measured: Vec<(usize, f64)>,
    t_ref: Option<f64>,
    own_share: Option<Share>,
    inbox: Vec<Option<Share>>,
}

#[derive(Debug, Clone)]
struct Agreed {
    view: Vec<f64>,
    speeds: Vec<f64>,
    realloc: Reallocation,
}

pub struct MultiagentProtocol {
    cfg: AgentConfig,
    m: usize,
    memory: Vec<Option<LoopMemory>>,
    agents: Vec<AgentRound>,
    resample: bool,
    anchor: usize,
    reference_job: usize,
    executed: Vec<bool>,
    agreed: Option<Agreed>,
    agreed_count: usize,
    /// Latest fitted predictions per loop: (agent, job, own seconds).
    predictions: Vec<Vec<(usize, usize, f64)>>,
    transferred: u64,
    agreement_rounds: u64,
}

impl MultiagentProtocol {
    pub fn new(cfg: AgentConfig, m: usize, num_loops: usize) -> Result<Self> {
        cfg.validate()?;
        if m == 0 {
            return Err(Error::Platform("no processors".into()));
        }
        Ok(MultiagentProtocol {
            cfg,
            m,
            memory: vec![None; num_loops],
            agents: Vec::new(),
            resample: false,
            anchor: 0,
            reference_job: 0,
            executed: Vec::new(),
            agreed: None,
            agreed_count: 0,
            predictions: vec![Vec::new(); num_loops],
            transferred: 0,
            agreement_rounds: 0,
        })
    }

    /// Predictions from the most recent sampling round of `loop_id`, as
    /// (agent, job, seconds on that agent's processor).
    pub fn predictions(&self, loop_id: usize) -> &[(usize, usize, f64)] {
        &self.predictions[loop_id]
    }

    pub fn agreement_rounds(&self) -> u64 {
        self.agreement_rounds
    }

    fn broadcast(&mut self, sim: &mut Sim<'_, AgentMessage>, a: usize, share: Share) -> Result<()> {
        let bytes = CONTROL_BYTES
            + match &share {
                Share::Fresh {
                    predictions,
                    measured,
                    ..
                } => PREDICTION_BYTES * (predictions.len() + measured.len() + 1) as u64,
                Share::Ratio(_) => PREDICTION_BYTES,
            };
        for dst in (0..self.m).filter(|&d| d != a) {
            sim.send(a, dst, bytes, AgentMessage::Share(share.clone()))?;
        }
        let agent = &mut self.agents[a];
        agent.own_share = Some(share);
        agent.phase = Some(RoundPhase::ResultShare);
        self.try_reallocate(sim, a)
    }

    fn begin_sampling(
        &mut self,
        sim: &mut Sim<'_, AgentMessage>,
        a: usize,
        with_reference: bool,
    ) -> Result<()> {
        let agent = &mut self.agents[a];
        agent.phase = Some(RoundPhase::Sampling);
        for &j in &agent.samples {
            sim.push_work(a, WorkItem::job(j))?;
        }
        if with_reference && agent.needs_reference {
            sim.push_work(a, WorkItem::replica(self.reference_job))?;
        }
        if agent.pending == 0 {
            self.finish_sampling(sim, a)?;
        }
        Ok(())
    }

    fn finish_sampling(&mut self, sim: &mut Sim<'_, AgentMessage>, a: usize) -> Result<()> {
        let agent = &self.agents[a];
        let t_ref = agent.t_ref.ok_or_else(|| {
            Error::Protocol(format!(
                "agent {a} finished sampling without a reference time"
            ))
        })?;
        let mut predictions = Vec::new();
        if !agent.measured.is_empty() {
            let fit = match self.cfg.fit_method {
                FitMethod::PolyLs(k) => FitMethod::PolyLs(k.min(agent.measured.len() - 1)),
                linear => linear,
            };
            let profile = fit_cost_profile(&agent.measured, fit)?;
            for &j in &agent.owned {
                if !self.executed[j] {
                    predictions.push((j, profile.predict(j)));
                }
            }
        }
        let loop_id = sim.loop_id();
        self.predictions[loop_id].extend(predictions.iter().map(|&(j, p)| (a, j, p)));
        let share = Share::Fresh {
            predictions,
            measured: agent.measured.clone(),
            t_ref,
        };
        self.broadcast(sim, a, share)
    }

    /// Merges agent `a`'s inbox into a full view, in agent id order.
    fn build_view(&self, a: usize, memory: &LoopMemory) -> Result<(Vec<f64>, Vec<f64>)> {
        let agent = &self.agents[a];
        let share_of = |k: usize| -> &Share {
            if k == a {
                agent.own_share.as_ref().expect("checked by caller")
            } else {
                agent.inbox[k].as_ref().expect("checked by caller")
            }
        };
        if self.resample {
            let t_ref: Vec<Option<f64>> = (0..self.m)
                .map(|k| match share_of(k) {
                    Share::Fresh { t_ref, .. } => Some(*t_ref),
                    Share::Ratio(_) => None,
                })
                .collect();
            let speeds = normalize_speeds(&t_ref, self.anchor)?;
            let mut view = vec![f64::NAN; memory.owners.len()];
            for (k, speed) in speeds.iter().enumerate() {
                if let Share::Fresh {
                    predictions,
                    measured,
                    ..
                } = share_of(k)
                {
                    for &(j, secs) in predictions.iter().chain(measured) {
                        view[j] = secs * speed;
                    }
                }
            }
            if let Some(j) = view.iter().position(|v| v.is_nan()) {
                return Err(Error::Protocol(format!(
                    "agent {a} has no prediction for job {j}"
                )));
            }
            Ok((view, speeds))
        } else {
            let ratios: Vec<f64> = (0..self.m)
                .map(|k| match share_of(k) {
                    Share::Ratio(r) => Ok(*r),
                    Share::Fresh { .. } => {
                        Err(Error::Protocol(format!("agent {k} resampled out of turn")))
                    }
                })
                .collect::<Result<_>>()?;
            let view = memory
                .view
                .iter()
                .zip(&memory.owners)
                .map(|(v, &o)| v * ratios[o])
                .collect();
            Ok((view, memory.speeds.clone()))
        }
    }

    fn try_reallocate(&mut self, sim: &mut Sim<'_, AgentMessage>, a: usize) -> Result<()> {
        let agent = &self.agents[a];
        if agent.phase != Some(RoundPhase::ResultShare)
            || agent.own_share.is_none()
            || (0..self.m).any(|k| k != a && agent.inbox[k].is_none())
        {
            return Ok(());
        }
        let loop_id = sim.loop_id();
        let memory = self.memory[loop_id]
            .as_ref()
            .expect("memory set at loop start");
        let (view, speeds) = self.build_view(a, memory)?;

        // Agents with bit-identical inputs get bit-identical output from the
        // deterministic packer, so recompute only when the inputs differ.
        let same_inputs = self
            .agreed
            .as_ref()
            .is_some_and(|g| bits_equal(&g.view, &view) && bits_equal(&g.speeds, &speeds));
        let realloc = if same_inputs {
            self.agreed
                .as_ref()
                .map(|g| g.realloc.clone())
                .expect("checked")
        } else {
            global_reallocate(&view, &memory.owners, &speeds, &self.executed)?
        };
        match &self.agreed {
            None => {
                self.agreed = Some(Agreed {
                    view,
                    speeds,
                    realloc: realloc.clone(),
                });
            }
            Some(g) if !g.realloc.identical(&realloc) => {
                return Err(Error::Protocol(format!(
                    "agent {a} disagrees on the reallocation in step {} loop {loop_id}",
                    sim.step()
                )));
            }
            Some(_) => {}
        }
        self.agreed_count += 1;
        if self.agreed_count == self.m {
            self.agreement_rounds += 1;
        }

        self.agents[a].phase = Some(RoundPhase::Execute);
        for &j in &realloc.items {
            if memory.owners[j] == a && realloc.new_owner[j] == a {
                sim.push_work(a, WorkItem::job(j))?;
            }
        }
        let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); self.m];
        for mv in realloc.moves.iter().filter(|mv| mv.from == a) {
            outgoing[mv.to].push(mv.job);
        }
        let data_size = sim.data_size();
        for (to, jobs) in outgoing.into_iter().enumerate() {
            if !jobs.is_empty() {
                self.transferred += jobs.len() as u64;
                let bytes = CONTROL_BYTES + jobs.len() as u64 * data_size;
                sim.send(a, to, bytes, AgentMessage::Transfer(jobs))?;
            }
        }
        Ok(())
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl Protocol for MultiagentProtocol {
    type Msg = AgentMessage;

    fn start_loop(&mut self, sim: &mut Sim<'_, AgentMessage>) -> Result<()> {
        let m = self.m;
        let n = sim.loop_len();
        let loop_id = sim.loop_id();
        let first = self.memory[loop_id].is_none();
        if first {
            let mut owners = vec![0; n];
            for (k, block) in initial_partition(n, m).into_iter().enumerate() {
                owners[block].fill(k);
            }
            self.memory[loop_id] = Some(LoopMemory {
                owners,
                view: vec![0.0; n],
                speeds: vec![1.0; m],
                actual: vec![0.0; m],
                predicted: vec![0.0; m],
            });
        }
        let memory = self.memory[loop_id].as_ref().expect("just set");
        self.resample = first || sim.step().is_multiple_of(self.cfg.resample_period);
        self.executed = vec![false; n];
        self.agreed = None;
        self.agreed_count = 0;

        let mut owned = vec![Vec::new(); m];
        for (j, &o) in memory.owners.iter().enumerate() {
            owned[o].push(j);
        }
        self.agents = owned
            .into_iter()
            .map(|owned| AgentRound {
                owned,
                inbox: vec![None; m],
                ..AgentRound::default()
            })
            .collect();

        let ratios: Vec<f64> = (0..m)
            .map(|k| {
                if memory.predicted[k] > 0.0 {
                    memory.actual[k] / memory.predicted[k]
                } else {
                    1.0
                }
            })
            .collect();
        let memory = self.memory[loop_id].as_mut().expect("just set");
        memory.actual.fill(0.0);
        memory.predicted.fill(0.0);

        if !self.resample {
            for (a, r) in ratios.into_iter().enumerate() {
                self.agents[a].phase = Some(RoundPhase::Normalize);
                self.broadcast(sim, a, Share::Ratio(r))?;
            }
            return Ok(());
        }

        self.predictions[loop_id].clear();
        for agent in &mut self.agents {
            let s = self
                .cfg
                .sample_size
                .unwrap_or_else(|| default_sample_size(agent.owned.len()));
            agent.samples = sample_positions(agent.owned.len(), s)
                .into_iter()
                .map(|p| agent.owned[p])
                .collect();
        }
        for agent in &self.agents {
            for &j in &agent.samples {
                self.executed[j] = true;
            }
        }
        self.anchor = self
            .agents
            .iter()
            .position(|a| !a.samples.is_empty())
            .ok_or_else(|| Error::Protocol("no agent owns any job".into()))?;
        self.reference_job = self.agents[self.anchor].samples[0];
        for (a, agent) in self.agents.iter_mut().enumerate() {
            agent.needs_reference = a != self.anchor;
            agent.pending = agent.samples.len() + usize::from(agent.needs_reference);
        }

        let data_size = sim.data_size();
        if first {
            // processor 0 holds all the data and scatters the blocks
            for a in 1..m {
                let bytes = CONTROL_BYTES + (self.agents[a].owned.len() as u64 + 1) * data_size;
                sim.send(0, a, bytes, AgentMessage::Scatter)?;
            }
            self.begin_sampling(sim, 0, true)?;
        } else {
            for a in (0..m).filter(|&a| a != self.anchor) {
                sim.send(
                    self.anchor,
                    a,
                    CONTROL_BYTES + data_size,
                    AgentMessage::Reference,
                )?;
            }
            for a in 0..m {
                self.begin_sampling(sim, a, false)?;
            }
        }
        Ok(())
    }

    fn on_message(
        &mut self,
        sim: &mut Sim<'_, AgentMessage>,
        at: usize,
        msg: Message<AgentMessage>,
    ) -> Result<()> {
        match msg.body {
            AgentMessage::Scatter => self.begin_sampling(sim, at, true),
            AgentMessage::Reference => {
                if self.agents[at].needs_reference {
                    sim.push_work(at, WorkItem::replica(self.reference_job))?;
                }
                Ok(())
            }
            AgentMessage::Share(share) => {
                self.agents[at].inbox[msg.src] = Some(share);
                self.try_reallocate(sim, at)
            }
            AgentMessage::Transfer(jobs) => {
                for j in jobs {
                    sim.push_work(at, WorkItem::job(j))?;
                }
                Ok(())
            }
        }
    }

    fn on_work_done(
        &mut self,
        sim: &mut Sim<'_, AgentMessage>,
        at: usize,
        item: WorkItem,
        elapsed: SimTime,
    ) -> Result<()> {
        let secs = elapsed.as_secs();
        let agent = &mut self.agents[at];
        if agent.phase == Some(RoundPhase::Sampling) {
            match item.kind {
                WorkKind::Job => {
                    agent.measured.push((item.job, secs));
                    if at == self.anchor && item.job == self.reference_job {
                        agent.t_ref = Some(secs);
                    }
                }
                WorkKind::Replica => agent.t_ref = Some(secs),
            }
            agent.pending -= 1;
            if agent.pending == 0 {
                self.finish_sampling(sim, at)?;
            }
            return Ok(());
        }
        let agreed = self.agreed.as_ref().ok_or_else(|| {
            Error::Protocol(format!("agent {at} executed a job before reallocation"))
        })?;
        let memory = self.memory[sim.loop_id()]
            .as_mut()
            .expect("memory set at loop start");
        memory.actual[at] += secs;
        memory.predicted[at] += agreed.view[item.job] / agreed.speeds[at];
        Ok(())
    }

    fn on_idle(&mut self, _sim: &mut Sim<'_, AgentMessage>, _at: usize) -> Result<()> {
        Ok(())
    }

    fn end_loop(&mut self, sim: &mut Sim<'_, AgentMessage>) -> Result<()> {
        if self.agreed_count != self.m {
            return Err(Error::Protocol(format!(
                "only {} of {} agents reallocated in step {} loop {}",
                self.agreed_count,
                self.m,
                sim.step(),
                sim.loop_id()
            )));
        }
        let agreed = self.agreed.take().expect("every agent reallocated");
        let memory = self.memory[sim.loop_id()]
            .as_mut()
            .expect("memory set at loop start");
        memory.owners = agreed.realloc.new_owner;
        memory.view = agreed.view;
        memory.speeds = agreed.speeds;
        Ok(())
    }

    fn finish(&mut self, metrics: &mut RunMetrics) {
        metrics.jobs_transferred = self.transferred;
        metrics.agreement_rounds = self.agreement_rounds;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions() {
        assert_eq!(initial_partition(6, 3), vec![0..2, 2..4, 4..6]);
        let sizes: Vec<usize> = initial_partition(10, 3).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let blocks = initial_partition(501, 32);
        assert!(blocks[..31].iter().all(|b| b.len() == 16));
        assert_eq!(blocks[31].len(), 5);
        assert_eq!(initial_partition(2, 4)[3], 2..2);
    }

    #[test]
    fn sample_strides() {
        assert_eq!(select_sample_indices(0..100, 5), vec![0, 20, 40, 60, 80]);
        assert_eq!(select_sample_indices(10..15, 5), vec![10, 11, 12, 13, 14]);
        assert_eq!(select_sample_indices(0..5, 2), vec![0, 2]);
        assert_eq!(select_sample_indices(0..3, 10), vec![0, 1, 2]);
        assert_eq!(default_sample_size(16), 3);
        assert_eq!(default_sample_size(251), 13);
    }

    #[test]
    fn linear_profile() {
        let p = fit_cost_profile(&[(20, 3.0), (0, 1.0)], FitMethod::Linear).unwrap();
        assert_eq!(p.predict(10), 2.0);
        assert_eq!(p.predict(0), 1.0);
        assert_eq!(p.predict(50), 3.0);
    }

    #[test]
    fn constant_profile_both_methods() {
        let s = [(0, 2.5), (7, 2.5), (13, 2.5)];
        for method in [FitMethod::Linear, FitMethod::PolyLs(1)] {
            let p = fit_cost_profile(&s, method).unwrap();
            for i in [0, 3, 13, 40] {
                assert!((p.predict(i) - 2.5).abs() < 1e-12, "{method:?} at {i}");
            }
        }
    }

    #[test]
    fn poly_recovers_quadratic() {
        let f = |i: usize| 1.0 + (i * i) as f64;
        let s: Vec<(usize, f64)> = [0, 3, 7, 12].iter().map(|&i| (i, f(i))).collect();
        let p = fit_cost_profile(&s, FitMethod::PolyLs(2)).unwrap();
        for i in 0..=12 {
            assert!((p.predict(i) - f(i)).abs() <= 1e-9 * f(i), "{i}");
        }
    }

    #[test]
    fn profile_errors() {
        assert!(matches!(
            fit_cost_profile(&[], FitMethod::Linear),
            Err(Error::Profile(_))
        ));
        assert!(fit_cost_profile(&[(0, 1.0), (1, 2.0)], FitMethod::PolyLs(2)).is_err());
    }

    #[test]
    fn prediction_floor() {
        let p = fit_cost_profile(&[(0, -1.0), (5, -1.0)], FitMethod::Linear).unwrap();
        assert_eq!(p.predict(2), PREDICTION_FLOOR);
    }

    #[test]
    fn speed_ratios() {
        assert_eq!(
            normalize_speeds(&[Some(2.0), Some(1.0)], 0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(normalize_speeds(&[Some(3.0); 3], 0).unwrap(), vec![1.0; 3]);
        assert_eq!(
            normalize_speeds(&[Some(1.0), Some(2.0), Some(4.0)], 0).unwrap()[2],
            0.25
        );
        assert!(matches!(
            normalize_speeds(&[Some(1.0), None], 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn share_counts() {
        let p1 = PlatformGraph::fully_connected(&[1.0], 0.0, 0.0).unwrap();
        let one = all_to_all_share(&[7u8], &[64], &p1, &CongestionPolicy::serial(0.01)).unwrap();
        assert_eq!((one.messages, one.elapsed.clone()), (0, vec![0.0]));

        let p4 = PlatformGraph::fully_connected(&[1.0; 4], 0.0, 0.0).unwrap();
        let four = all_to_all_share(
            &[0u8, 1, 2, 3],
            &[64; 4],
            &p4,
            &CongestionPolicy::serial(0.01),
        )
        .unwrap();
        assert_eq!(four.messages, 12);
        assert!(four.views.iter().all(|v| v == &vec![0, 1, 2, 3]));
        for e in four.elapsed {
            assert!((e - 6.0 * 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn reallocation_examples() {
        let r = global_reallocate(&[1.0; 4], &[0, 0, 1, 1], &[1.0, 1.0], &[false; 4]).unwrap();
        assert!(r.moves.is_empty());

        let r = global_reallocate(
            &[4.0, 1.0, 1.0, 1.0],
            &[0, 1, 1, 0],
            &[1.0, 1.0],
            &[false; 4],
        )
        .unwrap();
        assert_eq!(
            r.moves,
            vec![Move {
                job: 3,
                from: 0,
                to: 1
            }]
        );
        let inst = PackingInstance::new(vec![4.0, 1.0, 1.0, 1.0], vec![1.0, 1.0]);
        assert_eq!(r.assignment.predicted_makespan, 4.0);
        assert_eq!(inst.makespan_of(&r.assignment.bins), 4.0);

        let r = global_reallocate(&[1.0; 9], &[0; 9], &[2.0, 1.0], &[false; 9]).unwrap();
        assert_eq!(r.new_owner.iter().filter(|&&o| o == 0).count(), 6);
    }

    #[test]
    fn executed_jobs_stay_put() {
        let r = global_reallocate(
            &[5.0, 1.0, 1.0],
            &[0, 0, 0],
            &[1.0, 1.0],
            &[true, false, false],
        )
        .unwrap();
        assert_eq!(r.items, vec![1, 2]);
        assert_eq!(r.new_owner[0], 0);
    }

    #[test]
    fn fit_method_names() {
        assert_eq!(FitMethod::parse("linear"), Some(FitMethod::Linear));
        assert_eq!(FitMethod::parse("poly:3"), Some(FitMethod::PolyLs(3)));
        assert_eq!(FitMethod::parse("poly:x"), None);
        assert_eq!(FitMethod::PolyLs(2).name(), "poly:2");
    }
}
