//! Processors, interconnect and runtime perturbations.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::time::SimTime;
use crate::workload::Job;

/// Per-hop latency of the switched-star preset, seconds.
pub const STAR_ALPHA: f64 = 0.5e-3;
/// Per-byte transfer time of the switched-star preset (10 Mbps class).
pub const STAR_BETA: f64 = 1e-7;
/// Relative speeds used by the heterogeneous preset.
pub const HETEROGENEOUS_SPEEDS: [f64; 4] = [0.8, 1.0, 1.4, 2.4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Processor {
    pub id: usize,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    /// Latency, seconds.
    pub alpha: f64,
    /// Inverse bandwidth, seconds per byte.
    pub beta: f64,
}

impl Link {
    pub fn new(a: usize, b: usize, alpha: f64, beta: f64) -> Self {
        Link { a, b, alpha, beta }
    }

    fn cost(&self, size: u64) -> f64 {
        self.alpha + size as f64 * self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    FullyConnected,
    /// Every processor hangs off one switch vertex with id `m`.
    SwitchedStar,
    Explicit,
}

/// Undirected interconnect. Vertex ids `0..m` are processors; a switched
/// star adds one extra non-computing vertex.
#[derive(Debug, Clone)]
pub struct PlatformGraph {
    processors: Vec<Processor>,
    topology: Topology,
    links: Vec<Link>,
    /// Neighbour lists sorted by vertex id: (neighbour, link index).
    adjacency: Vec<Vec<(usize, usize)>>,
    /// Link indices of the canonical route for every processor pair
    /// `a < b`, stored at `a * m + b`.
    routes: Vec<Vec<usize>>,
}

impl PlatformGraph {
    pub fn fully_connected(speeds: &[f64], alpha: f64, beta: f64) -> Result<Self> {
        let m = speeds.len();
        let mut links = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                links.push(Link::new(a, b, alpha, beta));
            }
        }
        Self::build(speeds, Topology::FullyConnected, m, links)
    }

    pub fn switched_star(speeds: &[f64], alpha: f64, beta: f64) -> Result<Self> {
        let m = speeds.len();
        let links = (0..m).map(|p| Link::new(p, m, alpha, beta)).collect();
        Self::build(speeds, Topology::SwitchedStar, m + 1, links)
    }

    /// Switched star with the default 10 Mbps-class link constants.
    pub fn default_star(speeds: &[f64]) -> Result<Self> {
        Self::switched_star(speeds, STAR_ALPHA, STAR_BETA)
    }

    /// Processors only, no extra vertices. Link endpoints must be `< m`.
    pub fn explicit(speeds: &[f64], links: Vec<Link>) -> Result<Self> {
        Self::build(speeds, Topology::Explicit, speeds.len(), links)
    }

    fn build(
        speeds: &[f64],
        topology: Topology,
        vertices: usize,
        links: Vec<Link>,
    ) -> Result<Self> {
        let m = speeds.len();
        if m == 0 {
            return Err(Error::Platform(
                "a platform needs at least one processor".into(),
            ));
        }
        if let Some(s) = speeds.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Platform(format!(
                "processor speed must be positive, got {s}"
            )));
        }
        let mut adjacency = vec![Vec::new(); vertices];
        for (idx, l) in links.iter().enumerate() {
            if l.a >= vertices || l.b >= vertices || l.a == l.b {
                return Err(Error::Platform(format!("bad link {}-{}", l.a, l.b)));
            }
            if !(l.alpha >= 0.0 && l.beta >= 0.0 && l.alpha.is_finite() && l.beta.is_finite()) {
                return Err(Error::Platform(format!(
                    "link {}-{} needs alpha, beta >= 0",
                    l.a, l.b
                )));
            }
            adjacency[l.a].push((l.b, idx));
            adjacency[l.b].push((l.a, idx));
        }
        for nbrs in &mut adjacency {
            nbrs.sort();
        }
        let processors = speeds
            .iter()
            .enumerate()
            .map(|(id, &speed)| Processor { id, speed })
            .collect();
        let mut g = PlatformGraph {
            processors,
            topology,
            links,
            adjacency,
            routes: Vec::new(),
        };
        let mut routes = vec![Vec::new(); m * m];
        for a in 0..m {
            let tree = g.bfs(a);
            for b in a + 1..m {
                routes[a * m + b] = g.trace_back(&tree, a, b).ok_or_else(|| {
                    Error::Platform(format!("processors {a} and {b} are not connected"))
                })?;
            }
        }
        g.routes = routes;
        Ok(g)
    }

    /// Parent pointers of a breadth-first tree. Neighbours are visited in
    /// increasing id order, which fixes the tie-break among equal-hop paths.
    fn bfs(&self, src: usize) -> Vec<Option<(usize, usize)>> {
        let mut parent = vec![None; self.adjacency.len()];
        let mut seen = vec![false; self.adjacency.len()];
        seen[src] = true;
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            for &(w, link) in &self.adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((v, link));
                    queue.push_back(w);
                }
            }
        }
        parent
    }

    fn trace_back(
        &self,
        parent: &[Option<(usize, usize)>],
        src: usize,
        dst: usize,
    ) -> Option<Vec<usize>> {
        let mut path = Vec::new();
        let mut v = dst;
        while v != src {
            let (p, link) = parent[v]?;
            path.push(link);
            v = p;
        }
        path.reverse();
        Some(path)
    }

    pub fn m(&self) -> usize {
        self.processors.len()
    }

    pub fn processors(&self) -> &[Processor] {
        &self.processors
    }

    pub fn processor(&self, id: usize) -> &Processor {
        &self.processors[id]
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.processors.iter().map(|p| p.speed).collect()
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Minimal-hop route from `src` to `dst` as links oriented along the
    /// path. Ties go to the lowest next-vertex id.
    pub fn shortest_hop_path(&self, src: usize, dst: usize) -> Result<Vec<Link>> {
        let nv = self.adjacency.len();
        if src >= nv || dst >= nv {
            return Err(Error::Platform(format!(
                "unknown vertex in route {src}->{dst}"
            )));
        }
        if src == dst {
            return Ok(Vec::new());
        }
        let tree = self.bfs(src);
        let links = self
            .trace_back(&tree, src, dst)
            .ok_or_else(|| Error::Platform(format!("no route from {src} to {dst}")))?;
        let mut at = src;
        Ok(links
            .into_iter()
            .map(|idx| {
                let l = self.links[idx];
                let oriented = if l.a == at {
                    l
                } else {
                    Link::new(l.b, l.a, l.alpha, l.beta)
                };
                at = oriented.b;
                oriented
            })
            .collect())
    }

    /// Seconds for a message of `size` bytes between two processors: the sum
    /// over route links of `alpha + size * beta`, zero for self-messages.
    ///
    /// The route is always taken from the lower to the higher processor id,
    /// which keeps the delay symmetric on graphs with uneven link constants.
    pub fn message_delay(&self, src: usize, dst: usize, size: u64) -> Result<f64> {
        let m = self.m();
        if src >= m || dst >= m {
            return Err(Error::Platform(format!(
                "unknown processor in message {src}->{dst}"
            )));
        }
        if src == dst {
            return Ok(0.0);
        }
        let (a, b) = if src < dst { (src, dst) } else { (dst, src) };
        Ok(self.routes[a * m + b]
            .iter()
            .map(|&idx| self.links[idx].cost(size))
            .sum())
    }

    pub fn hop_count(&self, src: usize, dst: usize) -> usize {
        let m = self.m();
        if src == dst {
            return 0;
        }
        let (a, b) = if src < dst { (src, dst) } else { (dst, src) };
        self.routes[a * m + b].len()
    }
}

/// How processor speeds are chosen for a platform of size m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedPreset {
    Homogeneous(f64),
    /// Each processor draws uniformly from [`HETEROGENEOUS_SPEEDS`].
    Heterogeneous,
    /// Taken in order; the list must cover m.
    Explicit(Vec<f64>),
}

impl SpeedPreset {
    pub fn speeds(&self, m: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            SpeedPreset::Homogeneous(s) => Ok(vec![*s; m]),
            SpeedPreset::Heterogeneous => {
                let mut rng = rng::substream(seed, Purpose::Speeds, 0);
                Ok((0..m)
                    .map(|_| HETEROGENEOUS_SPEEDS[rng.random_range(0..HETEROGENEOUS_SPEEDS.len())])
                    .collect())
            }
            SpeedPreset::Explicit(list) => {
                if list.len() < m {
                    return Err(Error::Platform(format!(
                        "explicit speed list has {} entries, m = {m}",
                        list.len()
                    )));
                }
                Ok(list[..m].to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusyDuration {
    Fixed(f64),
    Exponential { mean: f64 },
}

/// Background interruptions (daemons, interrupts) that stall computation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationModel {
    #[default]
    None,
    /// Busy intervals arrive as a Poisson process with `rate` events per
    /// second on each processor.
    RandomBusy { rate: f64, duration: BusyDuration },
}

impl PerturbationModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            PerturbationModel::None => Ok(()),
            PerturbationModel::RandomBusy { rate, duration } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return Err(Error::Platform("perturbation rate must be >= 0".into()));
                }
                let ok = match duration {
                    BusyDuration::Fixed(d) => *d > 0.0 && d.is_finite(),
                    BusyDuration::Exponential { mean } => *mean > 0.0 && mean.is_finite(),
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::Platform("busy durations must be positive".into()))
                }
            }
        }
    }
}

/// Endpoint congestion: each message costs `overhead` seconds at the sender
/// and at the receiver. With `serial` set, that handling occupies the
/// processor and queues behind its current job; otherwise it only adds
/// latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionPolicy {
    pub serial: bool,
    pub overhead: f64,
}

impl CongestionPolicy {
    pub const NONE: CongestionPolicy = CongestionPolicy {
        serial: false,
        overhead: 0.0,
    };

    pub fn serial(overhead: f64) -> Self {
        CongestionPolicy {
            serial: true,
            overhead,
        }
    }
}

/// Per-message handling cost at each endpoint under the default congestion
/// model.
pub const DEFAULT_CONGESTION_OVERHEAD: f64 = 4e-4;

impl Default for CongestionPolicy {
    fn default() -> Self {
        CongestionPolicy::serial(DEFAULT_CONGESTION_OVERHEAD)
    }
}

/// Background load used by default scenarios: on average one interruption
/// per second per processor, lasting 0.1 s on average.
pub const DEFAULT_PERTURBATION: PerturbationModel = PerturbationModel::RandomBusy {
    rate: 1.0,
    duration: BusyDuration::Exponential { mean: 0.1 },
};

/// A stall inserted into a job's execution by a busy interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stall {
    pub start: SimTime,
    pub end: SimTime,
}

/// Busy intervals of one processor, generated lazily in time order.
#[derive(Debug, Clone)]
pub struct PerturbationStream {
    model: PerturbationModel,
    rng: Option<ChaCha8Rng>,
    next: Option<(SimTime, SimTime)>,
    cursor: SimTime,
}

impl PerturbationStream {
    pub fn new(model: PerturbationModel, seed: u64, proc: usize) -> Self {
        let rng = match model {
            PerturbationModel::RandomBusy { rate, .. } if rate > 0.0 => {
                Some(rng::substream(seed, Purpose::Perturbation, proc as u64))
            }
            _ => None,
        };
        let mut s = PerturbationStream {
            model,
            rng,
            next: None,
            cursor: SimTime::ZERO,
        };
        s.advance();
        s
    }

    pub fn none() -> Self {
        Self::new(PerturbationModel::None, 0, 0)
    }

    fn advance(&mut self) {
        let (Some(rng), PerturbationModel::RandomBusy { rate, duration }) =
            (self.rng.as_mut(), self.model)
        else {
            self.next = None;
            return;
        };
        let gap = Exp::new(rate).expect("validated rate").sample(rng);
        let len = match duration {
            BusyDuration::Fixed(d) => d,
            BusyDuration::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("validated mean").sample(rng)
            }
        };
        let start = self.cursor + SimTime::from_secs(gap);
        let end = start + SimTime::from_secs(len).max(SimTime(1));
        self.cursor = end;
        self.next = Some((start, end));
    }

    /// Wall time to complete `work` of undisturbed compute starting at
    /// `start`, plus the stalls that landed inside it. Intervals that ended
    /// before `start` fell into idle time and are dropped.
    pub fn realize(&mut self, start: SimTime, work: SimTime) -> (SimTime, Vec<Stall>) {
        let mut stalls = Vec::new();
        let mut t = start;
        let mut remaining = work;
        while let Some((bs, be)) = self.next {
            if be <= t {
                self.advance();
                continue;
            }
            if bs >= t + remaining {
                break;
            }
            // stall inside (or already covering) the job
            let run = bs.saturating_sub(t);
            remaining = remaining - run;
            let stall_start = t + run;
            stalls.push(Stall {
                start: stall_start,
                end: be,
            });
            t = be;
            self.advance();
        }
        (t + remaining - start, stalls)
    }
}

/// Wall seconds for `job` on `proc` starting at `start`: `base_cost / speed`
/// stretched by whatever busy intervals the stream places inside it.
pub fn realize_execution_time(
    job: &Job,
    proc: &Processor,
    start: SimTime,
    stream: &mut PerturbationStream,
) -> SimTime {
    stream
        .realize(start, SimTime::from_secs(job.base_cost / proc.speed))
        .0
}
