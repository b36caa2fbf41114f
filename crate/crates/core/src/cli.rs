//! Scenario files and the experiment driver behind the `loadsim` binary.
//!
//! A scenario is an INI-like document:
//!
//! ```text
//! # comment
//! workload = qtm:n=501,steps=100   # flat aliases are allowed before the first section
//! m = 2,4,8
//!
//! [platform]
//! speeds = heterogeneous
//! perturbation = busy:rate=1,mean=0.1
//!
//! [experiment]
//! policies = af,multiagent
//! replicates = 5
//! ```
//!
//! Omitted keys take the defaults of [`Scenario::default`]. Unknown or
//! repeated keys are errors carrying the offending line number. Command-line
//! overrides ([`Overrides`]) are applied last and always win.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::binpack::{self, OracleComparison};
use crate::error::{Error, Result};
use crate::metrics_report::{aggregate, Replicate, Report};
use crate::multiagent::{AgentConfig, FitMethod};
use crate::platform::{
    BusyDuration, CongestionPolicy, Link, PerturbationModel, PlatformGraph, SpeedPreset,
    DEFAULT_PERTURBATION, STAR_ALPHA, STAR_BETA,
};
use crate::schedulers_ms::{ChunkPolicy, MasterSlaveConfig};
use crate::simcore::{run_with, Policy, RunMetrics, RunOptions, Trace};
use crate::workload::{generate_qtm_workload, CostModel, LoopSpec, QtmParams, TimeSteppedWorkload};

/// Environment variable holding the worker count for `run`.
pub const WORKERS_ENV: &str = "LOADSIM_WORKERS";

/// Policy names accepted in scenarios and on the command line.
pub const POLICY_NAMES: &str = "static, fixed:c=N, fac, wf, awf, af, multiagent";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadType {
    Qtm,
    Uniform,
    Lognormal,
}

impl WorkloadType {
    fn name(self) -> &'static str {
        match self {
            WorkloadType::Qtm => "qtm",
            WorkloadType::Uniform => "uniform",
            WorkloadType::Lognormal => "lognormal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadType,
    /// Iterates per loop (pseudoparticles for `qtm`).
    pub particles: usize,
    pub steps: usize,
    pub qtm: QtmParams,
    /// Seconds per iterate for `uniform`.
    pub t: f64,
    pub median: f64,
    pub sigma: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadType::Qtm,
            particles: 501,
            steps: 100,
            qtm: QtmParams::default(),
            t: 0.01,
            median: 0.01,
            sigma: 0.5,
        }
    }
}

impl WorkloadSpec {
    pub fn build(&self, seed: u64) -> Result<TimeSteppedWorkload> {
        let single = |cost: CostModel| -> Result<TimeSteppedWorkload> {
            let spec = LoopSpec {
                n: self.particles,
                cost,
                data_size: self.qtm.data_size,
            };
            let mut w = TimeSteppedWorkload::single_loop(spec, self.steps, seed)?;
            w.sequential_overhead = self.qtm.sequential_overhead;
            Ok(w)
        };
        match self.kind {
            WorkloadType::Qtm => generate_qtm_workload(self.particles, self.steps, &self.qtm, seed),
            WorkloadType::Uniform => single(CostModel::Uniform { t: self.t }),
            WorkloadType::Lognormal => single(CostModel::IndependentRandom {
                median: self.median,
                sigma: self.sigma,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Star,
    Full,
    Explicit,
}

/// A link of an explicit topology; missing constants fall back to the
/// platform's `alpha` and `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    pub a: usize,
    pub b: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformSpec {
    pub topology: TopologyKind,
    /// Size of an explicit topology; every m must fit.
    pub processors: usize,
    pub links: Vec<LinkSpec>,
    pub speeds: SpeedPreset,
    pub alpha: f64,
    pub beta: f64,
    pub congestion: CongestionPolicy,
    pub perturbation: PerturbationModel,
}

impl Default for PlatformSpec {
    fn default() -> Self {
        PlatformSpec {
            topology: TopologyKind::Star,
            processors: 0,
            links: Vec::new(),
            speeds: SpeedPreset::Heterogeneous,
            alpha: STAR_ALPHA,
            beta: STAR_BETA,
            congestion: CongestionPolicy::default(),
            perturbation: DEFAULT_PERTURBATION,
        }
    }
}

impl PlatformSpec {
    /// The first m processors of the platform. Explicit topologies keep the
    /// links among those processors, which must stay connected.
    pub fn build(&self, m: usize, seed: u64) -> Result<PlatformGraph> {
        let speeds = self.speeds.speeds(m, seed)?;
        match self.topology {
            TopologyKind::Star => PlatformGraph::switched_star(&speeds, self.alpha, self.beta),
            TopologyKind::Full => PlatformGraph::fully_connected(&speeds, self.alpha, self.beta),
            TopologyKind::Explicit => {
                if m > self.processors {
                    return Err(Error::Platform(format!(
                        "m = {m} exceeds the {} processors of the explicit topology",
                        self.processors
                    )));
                }
                let links = self
                    .links
                    .iter()
                    .filter(|l| l.a < m && l.b < m)
                    .map(|l| {
                        Link::new(
                            l.a,
                            l.b,
                            l.alpha.unwrap_or(self.alpha),
                            l.beta.unwrap_or(self.beta),
                        )
                    })
                    .collect();
                PlatformGraph::explicit(&speeds, links)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    MasterSlave(ChunkPolicy),
    Multiagent,
}

impl PolicyKind {
    pub fn name(&self) -> String {
        match self {
            PolicyKind::MasterSlave(p) => p.name(),
            PolicyKind::Multiagent => "multiagent".into(),
        }
    }

    pub fn parse(s: &str) -> Option<PolicyKind> {
        let ms = |p| Some(PolicyKind::MasterSlave(p));
        match s {
            "static" => ms(ChunkPolicy::Static),
            "fac" => ms(ChunkPolicy::Factoring),
            "wf" => ms(ChunkPolicy::WeightedFactoring(Vec::new())),
            "awf" => ms(ChunkPolicy::AdaptiveWeightedFactoring),
            "af" => ms(ChunkPolicy::AdaptiveFactoring),
            "multiagent" => Some(PolicyKind::Multiagent),
            _ => {
                let c = s
                    .strip_prefix("fixed:c=")?
                    .parse()
                    .ok()
                    .filter(|&c| c > 0)?;
                ms(ChunkPolicy::FixedSize(c))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub workload: WorkloadSpec,
    pub platform: PlatformSpec,
    pub policies: Vec<PolicyKind>,
    pub m: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// End-game give-up for the master-slave policies.
    pub giveup: bool,
    pub agent: AgentConfig,
    pub out: PathBuf,
    pub trace: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            workload: WorkloadSpec::default(),
            platform: PlatformSpec::default(),
            policies: vec![
                PolicyKind::MasterSlave(ChunkPolicy::AdaptiveFactoring),
                PolicyKind::Multiagent,
            ],
            m: vec![2, 4, 8, 16, 32, 64],
            replicates: 5,
            seed: 1,
            giveup: true,
            agent: AgentConfig::default(),
            out: PathBuf::from("results"),
            trace: false,
        }
    }
}

/// Command-line values that replace whatever the scenario file says.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trace: bool,
    pub policies: Vec<String>,
    pub m: Option<String>,
    pub replicates: Option<usize>,
}

const SECTIONS: [&str; 5] = ["workload", "platform", "experiment", "multiagent", "output"];

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{what}: cannot parse {v:?}"))
}

fn parse_f64(v: &str, what: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v, what)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{what} must be finite"))
    }
}

fn parse_bool(v: &str, what: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("{what}: expected true or false, got {v:?}")),
    }
}

fn parse_m_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    let list = v
        .split(',')
        .map(|s| parse_num::<usize>(s.trim(), "m"))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if list.is_empty() || list.contains(&0) {
        return Err("m must be a non-empty list of positive counts".into());
    }
    let mut sorted = list.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != list.len() {
        return Err("m list has repeated values".into());
    }
    Ok(list)
}

pub fn parse_policies(items: &[&str]) -> std::result::Result<Vec<PolicyKind>, String> {
    let mut out: Vec<PolicyKind> = Vec::new();
    for raw in items {
        let name = raw.trim();
        let p = PolicyKind::parse(name)
            .ok_or_else(|| format!("unknown policy {name:?}; valid policies: {POLICY_NAMES}"))?;
        if out.contains(&p) {
            return Err(format!("policy {name} listed twice"));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err("at least one policy is required".into());
    }
    Ok(out)
}

fn format_speeds(s: &SpeedPreset) -> String {
    match s {
        SpeedPreset::Heterogeneous => "heterogeneous".into(),
        SpeedPreset::Homogeneous(x) => format!("homogeneous:{x}"),
        SpeedPreset::Explicit(list) => join(list),
    }
}

fn parse_speeds(v: &str) -> std::result::Result<SpeedPreset, String> {
    match v {
        "heterogeneous" => Ok(SpeedPreset::Heterogeneous),
        "homogeneous" => Ok(SpeedPreset::Homogeneous(1.0)),
        _ => {
            let positive = |x: f64| {
                if x > 0.0 {
                    Ok(x)
                } else {
                    Err("speeds must be positive".to_string())
                }
            };
            if let Some(s) = v.strip_prefix("homogeneous:") {
                return Ok(SpeedPreset::Homogeneous(positive(parse_f64(s, "speed")?)?));
            }
            let list = v
                .split(',')
                .map(|s| parse_f64(s.trim(), "speed").and_then(positive))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| {
                    format!("{e}; expected heterogeneous, homogeneous[:s] or a speed list")
                })?;
            Ok(SpeedPreset::Explicit(list))
        }
    }
}

fn format_perturbation(p: &PerturbationModel) -> String {
    match p {
        PerturbationModel::None => "none".into(),
        PerturbationModel::RandomBusy { rate, duration } => match duration {
            BusyDuration::Exponential { mean } => format!("busy:rate={rate},mean={mean}"),
            BusyDuration::Fixed(d) => format!("busy:rate={rate},fixed={d}"),
        },
    }
}

fn parse_perturbation(v: &str) -> std::result::Result<PerturbationModel, String> {
    if v == "none" {
        return Ok(PerturbationModel::None);
    }
    let usage = "expected none or busy:rate=R,mean=D (or fixed=D)";
    let body = v.strip_prefix("busy:").ok_or(usage)?;
    let (mut rate, mut duration) = (None, None);
    for part in body.split(',') {
        let (k, x) = part.split_once('=').ok_or(usage)?;
        let x = parse_f64(x.trim(), k.trim())?;
        match k.trim() {
            "rate" => rate = Some(x),
            "mean" => duration = Some(BusyDuration::Exponential { mean: x }),
            "fixed" => duration = Some(BusyDuration::Fixed(x)),
            _ => return Err(usage.into()),
        }
    }
    let model = PerturbationModel::RandomBusy {
        rate: rate.ok_or(usage)?,
        duration: duration.ok_or(usage)?,
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok(model)
}

fn format_links(links: &[LinkSpec]) -> String {
    links
        .iter()
        .map(|l| match (l.alpha, l.beta) {
            (Some(a), Some(b)) => format!("{}-{}:{a}:{b}", l.a, l.b),
            _ => format!("{}-{}", l.a, l.b),
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_links(v: &str) -> std::result::Result<Vec<LinkSpec>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    let usage = |s: &str| format!("bad link {s:?}; expected a-b or a-b:alpha:beta");
    v.split(',')
        .map(|s| {
            let s = s.trim();
            let mut parts = s.split(':');
            let (a, b) = parts
                .next()
                .and_then(|e| e.split_once('-'))
                .ok_or_else(|| usage(s))?;
            let a = parse_num(a, "link endpoint")?;
            let b = parse_num(b, "link endpoint")?;
            let rest: Vec<&str> = parts.collect();
            let (alpha, beta) = match rest.as_slice() {
                [] => (None, None),
                [x, y] => (
                    Some(parse_f64(x, "link alpha")?),
                    Some(parse_f64(y, "link beta")?),
                ),
                _ => return Err(usage(s)),
            };
            if a == b || alpha.is_some_and(|x| x < 0.0) || beta.is_some_and(|x| x < 0.0) {
                return Err(usage(s));
            }
            Ok(LinkSpec { a, b, alpha, beta })
        })
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Scenario {
    /// Sets one key. Returns the canonical `section.key` name, which aliases
    /// share, so duplicates are caught across spellings.
    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<String, String> {
        let w = &mut self.workload;
        let p = &mut self.platform;
        let non_negative = |x: f64, what: &str| {
            if x >= 0.0 {
                Ok(x)
            } else {
                Err(format!("{what} must be >= 0"))
            }
        };
        let positive = |x: f64, what: &str| {
            if x > 0.0 {
                Ok(x)
            } else {
                Err(format!("{what} must be > 0"))
            }
        };
        let canonical = match (section, key) {
            ("workload", "type") => {
                w.kind = match v {
                    "qtm" => WorkloadType::Qtm,
                    "uniform" => WorkloadType::Uniform,
                    "lognormal" => WorkloadType::Lognormal,
                    _ => {
                        return Err(format!(
                            "unknown workload type {v:?}; expected qtm, uniform or lognormal"
                        ))
                    }
                };
                "type"
            }
            ("workload", "particles" | "n") => {
                w.particles = parse_num(v, key)?;
                if w.particles == 0 {
                    return Err("particles must be >= 1".into());
                }
                "particles"
            }
            ("workload", "steps") => {
                w.steps = parse_num(v, key)?;
                if w.steps == 0 {
                    return Err("steps must be >= 1".into());
                }
                "steps"
            }
            ("workload", "heavy_loop_base") => {
                w.qtm.heavy_loop_base = positive(parse_f64(v, key)?, key)?;
                "heavy_loop_base"
            }
            ("workload", "nonuniformity") => {
                let x = parse_f64(v, key)?;
                if !(0.0..1.0).contains(&x) {
                    return Err("nonuniformity must lie in [0, 1)".into());
                }
                w.qtm.nonuniformity = x;
                "nonuniformity"
            }
            ("workload", "noise") => {
                let x = parse_f64(v, key)?;
                if !(0.0..=1.0).contains(&x) {
                    return Err("noise must lie in [0, 1]".into());
                }
                w.qtm.noise = x;
                "noise"
            }
            ("workload", "light_loop_base") => {
                w.qtm.light_loop_base = positive(parse_f64(v, key)?, key)?;
                "light_loop_base"
            }
            ("workload", "sequential_overhead") => {
                w.qtm.sequential_overhead = non_negative(parse_f64(v, key)?, key)?;
                "sequential_overhead"
            }
            ("workload", "data_size") => {
                w.qtm.data_size = parse_num(v, key)?;
                "data_size"
            }
            ("workload", "t") => {
                w.t = positive(parse_f64(v, key)?, key)?;
                "t"
            }
            ("workload", "median") => {
                w.median = positive(parse_f64(v, key)?, key)?;
                "median"
            }
            ("workload", "sigma") => {
                w.sigma = non_negative(parse_f64(v, key)?, key)?;
                "sigma"
            }
            ("platform", "topology") => {
                p.topology = match v {
                    "star" => TopologyKind::Star,
                    "full" => TopologyKind::Full,
                    "explicit" => TopologyKind::Explicit,
                    _ => {
                        return Err(format!(
                            "unknown topology {v:?}; expected star, full or explicit"
                        ))
                    }
                };
                "topology"
            }
            ("platform", "processors") => {
                p.processors = parse_num(v, key)?;
                "processors"
            }
            ("platform", "links") => {
                p.links = parse_links(v)?;
                "links"
            }
            ("platform", "speeds") => {
                p.speeds = parse_speeds(v)?;
                "speeds"
            }
            ("platform", "alpha") => {
                p.alpha = non_negative(parse_f64(v, key)?, key)?;
                "alpha"
            }
            ("platform", "beta") => {
                p.beta = non_negative(parse_f64(v, key)?, key)?;
                "beta"
            }
            ("platform", "congestion") => {
                p.congestion.serial = match v {
                    "serial" => true,
                    "latency" => false,
                    _ => {
                        return Err(format!(
                            "unknown congestion mode {v:?}; expected serial or latency"
                        ))
                    }
                };
                "congestion"
            }
            ("platform", "overhead") => {
                p.congestion.overhead = non_negative(parse_f64(v, key)?, key)?;
                "overhead"
            }
            ("platform", "perturbation") => {
                p.perturbation = parse_perturbation(v)?;
                "perturbation"
            }
            ("experiment", "policies" | "policy") => {
                self.policies = parse_policies(&v.split(',').collect::<Vec<_>>())?;
                "policies"
            }
            ("experiment", "m") => {
                self.m = parse_m_list(v)?;
                "m"
            }
            ("experiment", "replicates") => {
                self.replicates = parse_num(v, key)?;
                if self.replicates == 0 {
                    return Err("replicates must be >= 1".into());
                }
                "replicates"
            }
            ("experiment", "seed") => {
                self.seed = parse_num(v, key)?;
                "seed"
            }
            ("experiment", "giveup") => {
                self.giveup = parse_bool(v, key)?;
                "giveup"
            }
            ("multiagent", "sample_size") => {
                self.agent.sample_size = match v {
                    "auto" => None,
                    _ => Some(parse_num(v, key)?)
                        .filter(|&s| s > 0)
                        .map(Some)
                        .ok_or("sample_size must be >= 1")?,
                };
                "sample_size"
            }
            ("multiagent", "fit_method") => {
                self.agent.fit_method = FitMethod::parse(v).ok_or_else(|| {
                    format!("unknown fit method {v:?}; expected linear or poly:k")
                })?;
                "fit_method"
            }
            ("multiagent", "resample_period") => {
                self.agent.resample_period = parse_num(v, key)?;
                if self.agent.resample_period == 0 {
                    return Err("resample_period must be >= 1".into());
                }
                "resample_period"
            }
            ("output", "dir") => {
                if v.is_empty() {
                    return Err("output dir must not be empty".into());
                }
                self.out = PathBuf::from(v);
                "dir"
            }
            ("output", "trace") => {
                self.trace = parse_bool(v, key)?;
                "trace"
            }
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        };
        Ok(format!("{section}.{canonical}"))
    }

    /// Every key with its resolved value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let w = &self.workload;
        let p = &self.platform;
        let mut e = vec![
            ("workload", "type", w.kind.name().to_string()),
            ("workload", "particles", w.particles.to_string()),
            ("workload", "steps", w.steps.to_string()),
            (
                "workload",
                "heavy_loop_base",
                w.qtm.heavy_loop_base.to_string(),
            ),
            ("workload", "nonuniformity", w.qtm.nonuniformity.to_string()),
            ("workload", "noise", w.qtm.noise.to_string()),
            (
                "workload",
                "light_loop_base",
                w.qtm.light_loop_base.to_string(),
            ),
            (
                "workload",
                "sequential_overhead",
                w.qtm.sequential_overhead.to_string(),
            ),
            ("workload", "data_size", w.qtm.data_size.to_string()),
            ("workload", "t", w.t.to_string()),
            ("workload", "median", w.median.to_string()),
            ("workload", "sigma", w.sigma.to_string()),
        ];
        let topology = match p.topology {
            TopologyKind::Star => "star",
            TopologyKind::Full => "full",
            TopologyKind::Explicit => "explicit",
        };
        e.extend([
            ("platform", "topology", topology.to_string()),
            ("platform", "processors", p.processors.to_string()),
            ("platform", "links", format_links(&p.links)),
            ("platform", "speeds", format_speeds(&p.speeds)),
            ("platform", "alpha", p.alpha.to_string()),
            ("platform", "beta", p.beta.to_string()),
            (
                "platform",
                "congestion",
                if p.congestion.serial {
                    "serial"
                } else {
                    "latency"
                }
                .to_string(),
            ),
            ("platform", "overhead", p.congestion.overhead.to_string()),
            (
                "platform",
                "perturbation",
                format_perturbation(&p.perturbation),
            ),
            (
                "experiment",
                "policies",
                self.policies
                    .iter()
                    .map(PolicyKind::name)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("experiment", "m", join(&self.m)),
            ("experiment", "replicates", self.replicates.to_string()),
            ("experiment", "seed", self.seed.to_string()),
            ("experiment", "giveup", self.giveup.to_string()),
            (
                "multiagent",
                "sample_size",
                self.agent
                    .sample_size
                    .map_or("auto".to_string(), |s| s.to_string()),
            ),
            ("multiagent", "fit_method", self.agent.fit_method.name()),
            (
                "multiagent",
                "resample_period",
                self.agent.resample_period.to_string(),
            ),
            ("output", "dir", self.out.display().to_string()),
            ("output", "trace", self.trace.to_string()),
        ]);
        e
    }

    /// Cross-key checks. Returns the canonical key to blame on failure.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let max_m = self.m.iter().copied().max().unwrap_or(0);
        if let SpeedPreset::Explicit(list) = &self.platform.speeds {
            if list.len() < max_m {
                return Err((
                    "platform.speeds",
                    format!("{} speeds listed but m reaches {max_m}", list.len()),
                ));
            }
        }
        if self.platform.topology == TopologyKind::Explicit {
            if self.platform.processors < max_m {
                return Err((
                    "platform.processors",
                    format!(
                        "explicit topology has {} processors but m reaches {max_m}",
                        self.platform.processors
                    ),
                ));
            }
            if let Some(l) = self
                .platform
                .links
                .iter()
                .find(|l| l.a.max(l.b) >= self.platform.processors)
            {
                return Err((
                    "platform.links",
                    format!("link {}-{} names a missing processor", l.a, l.b),
                ));
            }
        }
        if let FitMethod::PolyLs(k) = self.agent.fit_method {
            if let Some(s) = self.agent.sample_size.filter(|&s| s <= k) {
                return Err((
                    "multiagent.fit_method",
                    format!("degree {k} needs more than {s} samples per agent"),
                ));
            }
        }
        Ok(())
    }

    /// The resolved scenario in the same grammar [`parse_scenario`] reads.
    pub fn explain(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{}", format!("{key} = {value}").trim_end());
        }
        out
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        let flag = |e: String| Error::parse(0, format!("command line: {e}"));
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.trace {
            self.trace = true;
        }
        if !o.policies.is_empty() {
            let names: Vec<&str> = o.policies.iter().flat_map(|p| p.split(',')).collect();
            self.policies = parse_policies(&names).map_err(flag)?;
        }
        if let Some(m) = &o.m {
            self.m = parse_m_list(m).map_err(flag)?;
        }
        if let Some(r) = o.replicates {
            if r == 0 {
                return Err(flag("replicates must be >= 1".into()));
            }
            self.replicates = r;
        }
        self.check().map_err(|(_, e)| flag(e))
    }

    pub fn policy(&self, kind: &PolicyKind) -> Policy {
        match kind {
            PolicyKind::MasterSlave(p) => Policy::MasterSlave(MasterSlaveConfig {
                policy: p.clone(),
                giveup: self.giveup,
            }),
            PolicyKind::Multiagent => Policy::Multiagent(self.agent.clone()),
        }
    }

    /// Every (policy, m, replicate) run in a fixed order.
    pub fn plan(&self) -> Vec<RunSpec> {
        let mut plan = Vec::new();
        for policy in &self.policies {
            for &m in &self.m {
                for r in 0..self.replicates {
                    plan.push(RunSpec {
                        policy: policy.clone(),
                        m,
                        replicate: r,
                        seed: self.seed.wrapping_add(r as u64),
                    });
                }
            }
        }
        plan
    }

    /// One run. The replicate seed drives the speed draw, the workload and
    /// the perturbation stream alike, so all policies of a replicate see
    /// the same platform and costs.
    pub fn run_one(&self, spec: &RunSpec, record_trace: bool) -> Result<(RunMetrics, Trace)> {
        let workload = self.workload.build(spec.seed)?;
        let platform = self.platform.build(spec.m, spec.seed)?;
        run_with(
            &workload,
            &platform,
            &self.policy(&spec.policy),
            &self.platform.congestion,
            &self.platform.perturbation,
            spec.seed,
            RunOptions { record_trace },
        )
    }

    /// Runs the whole plan on up to `workers` threads and aggregates it.
    /// `visit` sees every run (with its trace when `self.trace` is set) on
    /// the worker thread that produced it. The report does not depend on
    /// the worker count or on completion order.
    pub fn run_plan<F>(&self, workers: usize, visit: F) -> Result<Report>
    where
        F: Fn(&RunSpec, &RunMetrics, &Trace) -> Result<()> + Sync,
    {
        let plan = self.plan();
        let slots: Mutex<Vec<Option<Result<Replicate>>>> = Mutex::new(vec![None; plan.len()]);
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let work = || loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            if i >= plan.len() || failed.load(Ordering::Relaxed) {
                break;
            }
            let spec = &plan[i];
            let outcome = self.run_one(spec, self.trace).and_then(|(metrics, trace)| {
                visit(spec, &metrics, &trace)?;
                Ok(Replicate::from_metrics(
                    &spec.policy.name(),
                    spec.seed,
                    &metrics,
                ))
            });
            if outcome.is_err() {
                failed.store(true, Ordering::Relaxed);
            }
            slots.lock().expect("result slots poisoned")[i] = Some(outcome);
        };
        let workers = workers.clamp(1, plan.len().max(1));
        if workers == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(work);
                }
            });
        }
        let slots = slots.into_inner().expect("result slots poisoned");
        // Report the failure of the earliest run in plan order, not the
        // first one to finish.
        let mut replicates = Vec::with_capacity(plan.len());
        for r in slots.into_iter().flatten() {
            replicates.push(r?);
        }
        let mut results = Vec::new();
        for group in replicates.chunks(self.replicates) {
            results.push(aggregate(group)?);
        }
        Report::new(results, "multiagent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub policy: PolicyKind,
    pub m: usize,
    pub replicate: usize,
    pub seed: u64,
}

impl RunSpec {
    /// File-name-safe identifier, e.g. `af-m32-r4`.
    pub fn id(&self) -> String {
        let policy: String = self
            .policy
            .name()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        format!("{policy}-m{}-r{}", self.m, self.replicate)
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut sc = Scenario::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut section: Option<&str> = None;
    let mut workload_given = false;

    let record =
        |canonical: String, line: usize, seen: &mut HashMap<String, usize>| -> Result<()> {
            if let Some(first) = seen.insert(canonical.clone(), line) {
                return Err(Error::parse(
                    line,
                    format!("{canonical} already set on line {first}"),
                ));
            }
            Ok(())
        };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find(['#', ';']) {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(line, "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::parse(
                    line,
                    format!(
                        "unknown section [{name}]; expected one of {}",
                        SECTIONS.join(", ")
                    ),
                ));
            }
            section = SECTIONS.iter().copied().find(|s| *s == name);
            workload_given |= name == "workload";
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::parse(line, format!("expected key = value, got {content:?}")))?;
        let set = |sc: &mut Scenario, sec: &str, key: &str, value: &str| {
            sc.set(sec, key, value).map_err(|e| Error::parse(line, e))
        };

        match section {
            Some(sec) => {
                let canonical = set(&mut sc, sec, key, value)?;
                record(canonical, line, &mut seen)?;
            }
            None if key == "workload" => {
                workload_given = true;
                let (kind, params) = value.split_once(':').unwrap_or((value, ""));
                let canonical = set(&mut sc, "workload", "type", kind.trim())?;
                record(canonical, line, &mut seen)?;
                for pair in params.split(',').filter(|p| !p.trim().is_empty()) {
                    let (k, v) = pair.split_once('=').ok_or_else(|| {
                        Error::parse(
                            line,
                            format!("expected key=value in workload, got {pair:?}"),
                        )
                    })?;
                    let canonical = set(&mut sc, "workload", k.trim(), v.trim())?;
                    record(canonical, line, &mut seen)?;
                }
            }
            None => {
                let (sec, k) = match key.split_once('.') {
                    Some((s, k)) if SECTIONS.contains(&s) => (s, k),
                    Some(_) => return Err(Error::parse(line, format!("unknown key {key:?}"))),
                    None => match key {
                        "m" | "policy" | "policies" | "replicates" | "seed" => ("experiment", key),
                        _ => return Err(Error::parse(line, format!("unknown key {key:?}"))),
                    },
                };
                workload_given |= sec == "workload";
                let canonical = set(&mut sc, sec, k, value)?;
                record(canonical, line, &mut seen)?;
            }
        }
    }

    if !workload_given {
        return Err(Error::parse(
            text.lines().count().max(1),
            "missing [workload] section (or a workload = ... line)",
        ));
    }
    sc.check()
        .map_err(|(key, e)| Error::parse(seen.get(key).copied().unwrap_or(0), e))?;
    Ok(sc)
}

/// Worker count from [`WORKERS_ENV`], falling back to the number of CPUs.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::parse(
                    0,
                    format!("{WORKERS_ENV} must be a positive integer, got {v:?}"),
                )
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Executes the scenario and writes `results.csv`, `results.json` and,
/// with tracing on, `trace/<run-id>.jsonl` under the output directory.
pub fn cmd_run(scenario: &Scenario, workers: usize) -> Result<Report> {
    let out = &scenario.out;
    let trace_dir = out.join("trace");
    fs::create_dir_all(if scenario.trace { &trace_dir } else { out })?;
    let report = scenario.run_plan(workers, |spec, _, trace| {
        if scenario.trace {
            let file = fs::File::create(trace_dir.join(format!("{}.jsonl", spec.id())))?;
            trace.write_jsonl(BufWriter::new(file))?;
        }
        Ok(())
    })?;
    write_reports(&report, out)?;
    Ok(report)
}

pub fn write_reports(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    crate::metrics_report::write_csv(
        &report.results,
        BufWriter::new(fs::File::create(dir.join("results.csv"))?),
    )?;
    report.write_json(BufWriter::new(fs::File::create(dir.join("results.json"))?))
}

/// Console table of a report.
pub fn summary(report: &Report) -> String {
    let mut s = format!(
        "{:<12} {:>4} {:>4} {:>12} {:>10} {:>12} {:>10} {:>8}\n",
        "policy", "m", "reps", "mean_Cp", "std_Cp", "mean_Tp", "inbound", "idle"
    );
    for r in &report.results {
        let _ = writeln!(
            s,
            "{:<12} {:>4} {:>4} {:>12.3} {:>10.3} {:>12.4} {:>10.1} {:>8.3}",
            r.policy,
            r.m,
            r.replicates.len(),
            r.mean_c_p,
            r.std_c_p,
            r.mean_t_p,
            r.max_inbound_mean,
            r.idle_frac_mean
        );
    }
    for c in &report.crossovers {
        match c.m {
            Some(m) => {
                let _ = writeln!(s, "crossover {} vs {}: m* = {m}", c.challenger, c.baseline);
            }
            None => {
                let _ = writeln!(s, "crossover {} vs {}: none", c.challenger, c.baseline);
            }
        }
    }
    s
}

/// Summary of a batch of LPT-versus-exhaustive comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub comparisons: Vec<OracleComparison>,
    pub violations: usize,
    pub worst_unit_ratio: f64,
    pub worst_mixed_ratio: f64,
}

pub fn cmd_oracle(
    seed: u64,
    count: usize,
    max_items: usize,
    max_bins: usize,
) -> Result<OracleSummary> {
    if max_items > binpack::ORACLE_MAX_ITEMS || max_bins > binpack::ORACLE_MAX_BINS {
        return Err(Error::OracleTooLarge {
            items: max_items,
            bins: max_bins,
        });
    }
    let comparisons = (0..count as u64)
        .map(|i| {
            binpack::compare_with_oracle(&binpack::random_instance(seed, i, max_items, max_bins))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = |unit: bool| {
        comparisons
            .iter()
            .filter(|c| c.unit_speed == unit)
            .map(OracleComparison::ratio)
            .fold(1.0, f64::max)
    };
    Ok(OracleSummary {
        violations: comparisons.iter().filter(|c| !c.holds()).count(),
        worst_unit_ratio: worst(true),
        worst_mixed_ratio: worst(false),
        comparisons,
    })
}
