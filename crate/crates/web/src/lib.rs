//! Browser bindings for the simulator. Each export takes plain strings or
//! numbers and returns a JSON document for the page to draw.

use loadsim::binpack::{
    brute_force_pack, lpt_pack, PackingInstance, ORACLE_MAX_BINS, ORACLE_MAX_ITEMS,
};
use loadsim::cli::parse_scenario;
use loadsim::workload::{CostModel, LoopSpec, TimeSteppedWorkload};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bound on simulated iterates per sweep so a click cannot lock the
/// tab for minutes.
pub const MAX_SWEEP_ITERATES: u64 = 20_000_000;

/// Runs a scenario on the calling thread and returns the report as JSON.
pub fn sweep_report(scenario: &str) -> Result<String, String> {
    let sc = parse_scenario(scenario).map_err(|e| e.to_string())?;
    let workload = sc.workload.build(sc.seed).map_err(|e| e.to_string())?;
    let runs = (sc.policies.len() * sc.m.len() * sc.replicates) as u64;
    let iterates = workload.total_jobs().saturating_mul(runs);
    if iterates > MAX_SWEEP_ITERATES {
        return Err(format!(
            "scenario asks for {iterates} simulated iterates; the page allows {MAX_SWEEP_ITERATES}. \
             Lower steps, particles, replicates or the m list."
        ));
    }
    let report = sc
        .run_plan(1, |_, _, _| Ok(()))
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CostGrid {
    particles: usize,
    steps: usize,
    min: f64,
    max: f64,
    /// `costs[step][iterate]`, unit-speed seconds.
    costs: Vec<Vec<f64>>,
}

/// Unit-speed costs of a nonuniform loop over time, for a heatmap.
pub fn cost_grid(
    particles: usize,
    steps: usize,
    nonuniformity: f64,
    noise: f64,
    seed: u64,
) -> Result<String, String> {
    if particles == 0 || steps == 0 || particles.checked_mul(steps).is_none_or(|n| n > 1_000_000) {
        return Err("need 1 <= particles x steps <= 1000000".into());
    }
    let spec = LoopSpec::new(
        particles,
        CostModel::NonuniformField {
            base: 1.0,
            amplitude: nonuniformity,
            noise,
        },
    );
    let w = TimeSteppedWorkload::single_loop(spec, steps, seed).map_err(|e| e.to_string())?;
    let costs: Vec<Vec<f64>> = (0..steps).map(|s| w.loop_costs(s, 0)).collect();
    let flat = costs.iter().flatten().copied();
    let min = flat.clone().fold(f64::INFINITY, f64::min);
    let max = flat.fold(f64::NEG_INFINITY, f64::max);
    serde_json::to_string(&CostGrid {
        particles,
        steps,
        min,
        max,
        costs,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Packing {
    bins: Vec<usize>,
    loads: Vec<f64>,
    makespan: f64,
}

#[derive(Serialize)]
struct PackComparison {
    weights: Vec<f64>,
    speeds: Vec<f64>,
    lpt: Packing,
    optimal: Packing,
    ratio: f64,
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, String> {
    text.split([',', ' ', '\n', '\t'])
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| format!("{what}: cannot read {s:?}"))
        })
        .collect()
}

/// LPT against the exhaustive optimum on a small instance.
pub fn pack_comparison(weights: &str, speeds: &str) -> Result<String, String> {
    let weights = parse_list(weights, "weights")?;
    let speeds = parse_list(speeds, "speeds")?;
    if weights.len() > ORACLE_MAX_ITEMS || speeds.len() > ORACLE_MAX_BINS {
        return Err(format!(
            "at most {ORACLE_MAX_ITEMS} weights and {ORACLE_MAX_BINS} speeds"
        ));
    }
    let inst = PackingInstance::new(weights.clone(), speeds.clone());
    let packing = |bins: Vec<usize>, makespan: f64| {
        let mut loads = vec![0.0; speeds.len()];
        for (w, &b) in weights.iter().zip(&bins) {
            loads[b] += w / speeds[b];
        }
        Packing {
            bins,
            loads,
            makespan,
        }
    };
    let lpt = lpt_pack(&inst).map_err(|e| e.to_string())?;
    let opt = brute_force_pack(&inst).map_err(|e| e.to_string())?;
    let ratio = lpt.predicted_makespan / opt.predicted_makespan;
    serde_json::to_string(&PackComparison {
        lpt: packing(lpt.bins, lpt.predicted_makespan),
        optimal: packing(opt.bins, opt.predicted_makespan),
        ratio,
        weights: weights.clone(),
        speeds: speeds.clone(),
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn sweep(scenario: &str) -> Result<String, JsError> {
    sweep_report(scenario).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cost_field(
    particles: usize,
    steps: usize,
    nonuniformity: f64,
    noise: f64,
    seed: u32,
) -> Result<String, JsError> {
    cost_grid(particles, steps, nonuniformity, noise, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare_packing(weights: &str, speeds: &str) -> Result<String, JsError> {
    pack_comparison(weights, speeds).map_err(|e| JsError::new(&e))
}
