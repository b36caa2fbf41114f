//! Jobs, parallel-loop DAGs and time-stepped workloads.
//!
//! Costs are never stored for a whole run. A workload is a description from
//! which the cost vector of any (step, loop) pair can be regenerated
//! bit-identically, so a 10 000-step workload costs a few hundred bytes.

use std::f64::consts::TAU;

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Default payload moved when a job changes processor.
pub const DEFAULT_DATA_SIZE: u64 = 1024;

/// Number of parallel loops per time step in the QTM-shaped workload.
pub const QTM_LOOPS: usize = 5;
/// Loops `0..QTM_HEAVY_LOOPS` carry the nonuniform cost field.
pub const QTM_HEAVY_LOOPS: usize = 3;

// Cost field shape: three sinusoids over (index, step) plus hashed noise,
// clamped to [-1, 1].
const FIELD_AMPLITUDES: [f64; 3] = [0.45, 0.30, 0.15];
/// Default amplitude of the per-(iterate, step) hashed noise term.
pub const DEFAULT_FIELD_NOISE: f64 = 0.10;
/// Cycles across the iterate range.
const FIELD_SPATIAL_CYCLES: [f64; 3] = [1.0, 2.5, 6.0];
/// Phase advance per time step, radians.
const FIELD_TEMPORAL_RATE: [f64; 3] = [0.05, 0.11, 0.23];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: usize,
    pub loop_id: usize,
    /// Seconds on a unit-speed processor. Schedulers never read this; they
    /// only see realized durations.
    pub base_cost: f64,
    pub data_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DagVertex {
    /// Sequential code before the loop.
    Source,
    Job(usize),
    /// Sequential code after the loop.
    Sink,
}

/// DAG of one parallel loop: every iterate hangs between the two sequential
/// sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct JobDag {
    pub job_vertices: Vec<usize>,
    pub edges: Vec<(DagVertex, DagVertex)>,
}

impl JobDag {
    pub fn vertex_count(&self) -> usize {
        self.job_vertices.len() + 2
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    fn index(&self, v: DagVertex) -> usize {
        match v {
            DagVertex::Source => 0,
            DagVertex::Job(i) => 1 + i,
            DagVertex::Sink => 1 + self.job_vertices.len(),
        }
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertex_count()];
        for &(a, b) in &self.edges {
            adj[self.index(a)].push(self.index(b));
        }
        adj
    }

    /// Kahn's algorithm.
    pub fn is_acyclic(&self) -> bool {
        let adj = self.adjacency();
        let mut indeg = vec![0usize; adj.len()];
        for outs in &adj {
            for &b in outs {
                indeg[b] += 1;
            }
        }
        let mut ready: Vec<usize> = (0..adj.len()).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = ready.pop() {
            seen += 1;
            for &b in &adj[v] {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    ready.push(b);
                }
            }
        }
        seen == adj.len()
    }

    /// Size of the largest antichain, i.e. the maximum degree of parallelism.
    ///
    /// Computed through Dilworth's theorem: the width equals the vertex count
    /// minus a maximum matching in the bipartite graph of the transitive
    /// closure. Only meaningful on acyclic graphs.
    pub fn width(&self) -> usize {
        let adj = self.adjacency();
        let nv = adj.len();
        let mut reach = vec![vec![false; nv]; nv];
        for (s, row) in reach.iter_mut().enumerate() {
            let mut stack = adj[s].clone();
            while let Some(v) = stack.pop() {
                if !row[v] {
                    row[v] = true;
                    stack.extend(adj[v].iter().copied());
                }
            }
        }
        let mut match_right: Vec<Option<usize>> = vec![None; nv];
        let mut matching = 0;
        for u in 0..nv {
            let mut visited = vec![false; nv];
            if augment(u, &reach, &mut visited, &mut match_right) {
                matching += 1;
            }
        }
        nv - matching
    }
}

fn augment(
    u: usize,
    reach: &[Vec<bool>],
    visited: &mut [bool],
    match_right: &mut [Option<usize>],
) -> bool {
    for v in 0..reach.len() {
        if reach[u][v] && !visited[v] {
            visited[v] = true;
            let free = match match_right[v] {
                None => true,
                Some(w) => augment(w, reach, visited, match_right),
            };
            if free {
                match_right[v] = Some(u);
                return true;
            }
        }
    }
    false
}

pub fn build_parallel_loop_dag(n: usize) -> Result<JobDag> {
    if n == 0 {
        return Err(Error::InvalidWorkload(
            "a parallel loop needs at least one iterate".into(),
        ));
    }
    let mut edges = Vec::with_capacity(2 * n);
    for i in 0..n {
        edges.push((DagVertex::Source, DagVertex::Job(i)));
    }
    for i in 0..n {
        edges.push((DagVertex::Job(i), DagVertex::Sink));
    }
    Ok(JobDag {
        job_vertices: (0..n).collect(),
        edges,
    })
}

/// Per-iterate cost model of one loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CostModel {
    Uniform {
        t: f64,
    },
    /// Independent lognormal draws.
    IndependentRandom {
        median: f64,
        sigma: f64,
    },
    /// `base * (1 + amplitude * g(i, step))` with g the correlated field in
    /// [-1, 1]; `noise` is the amplitude of g's uncorrelated part.
    NonuniformField {
        base: f64,
        amplitude: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Fixed per-iterate costs, identical every step.
    Explicit {
        costs: Vec<f64>,
    },
}

impl CostModel {
    fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidWorkload(m.to_string()));
        match self {
            CostModel::Uniform { t } if !(*t > 0.0 && t.is_finite()) => {
                bad("uniform cost must be positive")
            }
            CostModel::IndependentRandom { median, sigma }
                if !(*median > 0.0 && median.is_finite() && *sigma >= 0.0 && sigma.is_finite()) =>
            {
                bad("lognormal needs median > 0 and sigma >= 0")
            }
            CostModel::NonuniformField {
                base,
                amplitude,
                noise,
            } if !(*base > 0.0
                && base.is_finite()
                && (0.0..1.0).contains(amplitude)
                && (0.0..=1.0).contains(noise)) =>
            {
                bad("field cost needs base > 0, 0 <= amplitude < 1 and 0 <= noise <= 1")
            }
            CostModel::Explicit { costs } if costs.len() != n => {
                bad("explicit cost count differs from loop size")
            }
            CostModel::Explicit { costs } if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) => {
                bad("explicit costs must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSpec {
    pub n: usize,
    pub cost: CostModel,
    pub data_size: u64,
}

impl LoopSpec {
    pub fn new(n: usize, cost: CostModel) -> Self {
        LoopSpec {
            n,
            cost,
            data_size: DEFAULT_DATA_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSteppedWorkload {
    pub num_steps: usize,
    pub loops: Vec<LoopSpec>,
    /// Seconds of sequential code per step, outside the loops.
    pub sequential_overhead: f64,
    pub seed: u64,
}

impl TimeSteppedWorkload {
    /// A single loop repeated for `num_steps` steps.
    pub fn single_loop(spec: LoopSpec, num_steps: usize, seed: u64) -> Result<Self> {
        let w = TimeSteppedWorkload {
            num_steps,
            loops: vec![spec],
            sequential_overhead: 0.0,
            seed,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidWorkload(
                "num_steps must be at least 1".into(),
            ));
        }
        if self.loops.is_empty() {
            return Err(Error::InvalidWorkload(
                "a step needs at least one loop".into(),
            ));
        }
        if !(self.sequential_overhead >= 0.0 && self.sequential_overhead.is_finite()) {
            return Err(Error::InvalidWorkload(
                "sequential_overhead must be >= 0".into(),
            ));
        }
        for l in &self.loops {
            if l.n == 0 {
                return Err(Error::InvalidWorkload("every loop needs n >= 1".into()));
            }
            l.cost.validate(l.n)?;
        }
        Ok(())
    }

    pub fn total_jobs(&self) -> u64 {
        self.num_steps as u64 * self.loops.iter().map(|l| l.n as u64).sum::<u64>()
    }

    /// Unit-speed cost of every iterate of one loop in one step.
    pub fn loop_costs(&self, step: usize, loop_id: usize) -> Vec<f64> {
        let spec = &self.loops[loop_id];
        match &spec.cost {
            CostModel::Uniform { t } => vec![*t; spec.n],
            CostModel::Explicit { costs } => costs.clone(),
            CostModel::IndependentRandom { median, sigma } => {
                let dist = LogNormal::new(median.ln(), *sigma).expect("validated lognormal");
                let mut rng = rng::substream(
                    self.seed,
                    Purpose::WorkloadNoise,
                    rng::hash_words(&[step as u64, loop_id as u64]),
                );
                (0..spec.n).map(|_| dist.sample(&mut rng)).collect()
            }
            CostModel::NonuniformField {
                base,
                amplitude,
                noise,
            } => {
                let field = CostField::new(self.seed, loop_id, spec.n).with_noise(*noise);
                (0..spec.n)
                    .map(|i| base * (1.0 + amplitude * field.value(i, step)))
                    .collect()
            }
        }
    }

    pub fn loop_jobs(&self, step: usize, loop_id: usize) -> Vec<Job> {
        let data_size = self.loops[loop_id].data_size;
        self.loop_costs(step, loop_id)
            .into_iter()
            .enumerate()
            .map(|(id, base_cost)| Job {
                id,
                loop_id,
                base_cost,
                data_size,
            })
            .collect()
    }
}

/// Smooth pseudo-random field g(i, t) in [-1, 1], correlated along both the
/// iterate index and the time step.
#[derive(Debug, Clone)]
pub struct CostField {
    seed: u64,
    loop_id: usize,
    n: usize,
    phases: [f64; 3],
    noise: f64,
}

impl CostField {
    pub fn new(seed: u64, loop_id: usize, n: usize) -> Self {
        let mut phases = [0.0; 3];
        for (k, p) in phases.iter_mut().enumerate() {
            let h = rng::hash_words(&[
                seed,
                Purpose::WorkloadPhase as u64,
                loop_id as u64,
                k as u64,
            ]);
            *p = TAU * 0.5 * (rng::unit_symmetric(h) + 1.0);
        }
        CostField {
            seed,
            loop_id,
            n,
            phases,
            noise: DEFAULT_FIELD_NOISE,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn value(&self, i: usize, step: usize) -> f64 {
        let x = i as f64 / self.n as f64;
        let mut g = 0.0;
        for k in 0..3 {
            g += FIELD_AMPLITUDES[k]
                * (TAU * FIELD_SPATIAL_CYCLES[k] * x
                    + FIELD_TEMPORAL_RATE[k] * step as f64
                    + self.phases[k])
                    .sin();
        }
        let h = rng::hash_words(&[
            self.seed,
            Purpose::WorkloadNoise as u64,
            self.loop_id as u64,
            step as u64,
            i as u64,
        ]);
        g += self.noise * rng::unit_symmetric(h);
        g.clamp(-1.0, 1.0)
    }
}

fn default_noise() -> f64 {
    DEFAULT_FIELD_NOISE
}

/// Parameters of the QTM-shaped cost workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QtmParams {
    /// Mean unit-speed seconds per iterate of loops 1-3.
    pub heavy_loop_base: f64,
    /// Relative spread of heavy iterates, in [0, 1).
    pub nonuniformity: f64,
    /// Share of the spread that is uncorrelated between iterates and steps.
    pub noise: f64,
    /// Seconds per iterate of loops 4-5.
    pub light_loop_base: f64,
    pub sequential_overhead: f64,
    pub data_size: u64,
}

impl Default for QtmParams {
    fn default() -> Self {
        QtmParams {
            heavy_loop_base: 0.02,
            nonuniformity: 0.5,
            noise: DEFAULT_FIELD_NOISE,
            light_loop_base: 0.0002,
            sequential_overhead: 0.0,
            data_size: DEFAULT_DATA_SIZE,
        }
    }
}

/// Five loops per step over the pseudoparticles: three heavy loops with a
/// nonuniform cost field followed by two light uniform loops.
pub fn generate_qtm_workload(
    n_particles: usize,
    num_steps: usize,
    params: &QtmParams,
    seed: u64,
) -> Result<TimeSteppedWorkload> {
    if n_particles == 0 {
        return Err(Error::InvalidWorkload(
            "n_particles must be at least 1".into(),
        ));
    }
    if params.light_loop_base.is_nan() || params.light_loop_base <= 0.0 {
        return Err(Error::InvalidWorkload(
            "light_loop_base must be positive".into(),
        ));
    }
    let mut loops = Vec::with_capacity(QTM_LOOPS);
    for l in 0..QTM_LOOPS {
        let cost = if l < QTM_HEAVY_LOOPS {
            CostModel::NonuniformField {
                base: params.heavy_loop_base,
                amplitude: params.nonuniformity,
                noise: params.noise,
            }
        } else {
            CostModel::Uniform {
                t: params.light_loop_base,
            }
        };
        loops.push(LoopSpec {
            n: n_particles,
            cost,
            data_size: params.data_size,
        });
    }
    let w = TimeSteppedWorkload {
        num_steps,
        loops,
        sequential_overhead: params.sequential_overhead,
        seed,
    };
    w.validate()?;
    Ok(w)
}

pub fn loop_total_cost(jobs: &[Job]) -> f64 {
    jobs.iter().map(|j| j.base_cost).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dag_smallest_loop() {
        let dag = build_parallel_loop_dag(1).unwrap();
        assert_eq!(dag.vertex_count(), 3);
        assert_eq!(
            dag.edges,
            vec![
                (DagVertex::Source, DagVertex::Job(0)),
                (DagVertex::Job(0), DagVertex::Sink)
            ]
        );
    }

    #[test]
    fn dag_counts() {
        let dag = build_parallel_loop_dag(4).unwrap();
        assert_eq!(
            (dag.vertex_count(), dag.edge_count(), dag.width()),
            (6, 8, 4)
        );
        let dag = build_parallel_loop_dag(501).unwrap();
        assert_eq!((dag.vertex_count(), dag.edge_count()), (503, 1002));
    }

    #[test]
    fn dag_rejects_empty_loop() {
        assert!(matches!(
            build_parallel_loop_dag(0),
            Err(Error::InvalidWorkload(_))
        ));
    }

    #[test]
    fn dag_shape_holds_up_to_100() {
        for n in 1..=100 {
            let dag = build_parallel_loop_dag(n).unwrap();
            assert!(dag.is_acyclic());
            assert_eq!(dag.width(), n, "n={n}");
        }
    }

    #[test]
    fn cycle_detection() {
        let mut dag = build_parallel_loop_dag(2).unwrap();
        dag.edges.push((DagVertex::Sink, DagVertex::Source));
        assert!(!dag.is_acyclic());
    }

    #[test]
    fn qtm_structure() {
        let w = generate_qtm_workload(10, 1, &QtmParams::default(), 3).unwrap();
        assert_eq!(w.loops.len(), 5);
        let jobs: usize = (0..5).map(|l| w.loop_jobs(0, l).len()).sum();
        assert_eq!(jobs, 50);

        let big = generate_qtm_workload(501, 10_000, &QtmParams::default(), 3).unwrap();
        assert_eq!(big.total_jobs(), 501 * 5 * 10_000);
    }

    #[test]
    fn zero_nonuniformity_is_flat() {
        let params = QtmParams {
            nonuniformity: 0.0,
            ..QtmParams::default()
        };
        let w = generate_qtm_workload(64, 3, &params, 11).unwrap();
        for step in 0..3 {
            assert!(w
                .loop_costs(step, 0)
                .iter()
                .all(|&c| c == params.heavy_loop_base));
            assert!(w
                .loop_costs(step, 4)
                .iter()
                .all(|&c| c == params.light_loop_base));
        }
    }

    #[test]
    fn loop_totals() {
        let uniform = TimeSteppedWorkload::single_loop(
            LoopSpec::new(10, CostModel::Uniform { t: 1.0 }),
            1,
            0,
        )
        .unwrap();
        assert_eq!(loop_total_cost(&uniform.loop_jobs(0, 0)), 10.0);

        let explicit = TimeSteppedWorkload::single_loop(
            LoopSpec::new(
                3,
                CostModel::Explicit {
                    costs: vec![1.0, 2.0, 3.0],
                },
            ),
            1,
            0,
        )
        .unwrap();
        assert_eq!(loop_total_cost(&explicit.loop_jobs(0, 0)), 6.0);

        let params = QtmParams {
            heavy_loop_base: 0.002,
            nonuniformity: 0.0,
            ..QtmParams::default()
        };
        let qtm = generate_qtm_workload(501, 1, &params, 0).unwrap();
        // 501 * 0.002 by repeated addition
        let expected = (0..501).fold(0.0, |acc, _| acc + 0.002);
        assert_eq!(loop_total_cost(&qtm.loop_jobs(0, 0)), expected);
        assert!((expected - 1.002).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = QtmParams {
            nonuniformity: 1.0,
            ..QtmParams::default()
        };
        assert!(generate_qtm_workload(10, 1, &bad, 0).is_err());
        assert!(generate_qtm_workload(0, 1, &QtmParams::default(), 0).is_err());
        assert!(generate_qtm_workload(10, 0, &QtmParams::default(), 0).is_err());
        let neg = QtmParams {
            heavy_loop_base: -1.0,
            ..QtmParams::default()
        };
        assert!(generate_qtm_workload(10, 1, &neg, 0).is_err());
    }

    #[test]
    fn field_varies_in_index_and_time() {
        let f = CostField::new(5, 0, 100);
        assert_ne!(f.value(10, 0), f.value(40, 0));
        assert_ne!(f.value(10, 0), f.value(10, 30));
    }

    #[test]
    fn lognormal_loop_is_reproducible() {
        let w = TimeSteppedWorkload::single_loop(
            LoopSpec::new(
                50,
                CostModel::IndependentRandom {
                    median: 1.0,
                    sigma: 0.3,
                },
            ),
            2,
            9,
        )
        .unwrap();
        assert_eq!(w.loop_costs(1, 0), w.loop_costs(1, 0));
        assert_ne!(w.loop_costs(0, 0), w.loop_costs(1, 0));
        assert!(w.loop_costs(0, 0).iter().all(|&c| c > 0.0));
    }
}
