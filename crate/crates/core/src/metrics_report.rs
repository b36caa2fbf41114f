//! Replicate aggregation, crossover detection and CSV/JSON reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simcore::RunMetrics;

/// The observations kept from one replicate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub policy: String,
    pub m: usize,
    pub seed: u64,
    pub t_p: f64,
    pub c_p: f64,
    pub max_inbound: u64,
    pub idle_fraction: f64,
}

impl Replicate {
    pub fn from_metrics(policy: &str, seed: u64, metrics: &RunMetrics) -> Self {
        Replicate {
            policy: policy.to_string(),
            m: metrics.m,
            seed,
            t_p: metrics.t_p,
            c_p: metrics.c_p,
            max_inbound: metrics.max_inbound,
            idle_fraction: metrics.idle_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub policy: String,
    pub m: usize,
    /// Ordered by seed.
    pub replicates: Vec<Replicate>,
    pub mean_t_p: f64,
    pub std_t_p: f64,
    pub mean_c_p: f64,
    pub std_c_p: f64,
    pub max_inbound_mean: f64,
    pub idle_frac_mean: f64,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single
/// value). Values are summed in sorted order so the result does not depend
/// on the input order, and the mean is kept inside `[min, max]`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = (v.iter().sum::<f64>() / n).clamp(v[0], v[v.len() - 1]);
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn aggregate(replicates: &[Replicate]) -> Result<ExperimentResult> {
    let first = replicates
        .first()
        .ok_or_else(|| Error::Aggregation("no replicates to aggregate".into()))?;
    if let Some(r) = replicates
        .iter()
        .find(|r| r.policy != first.policy || r.m != first.m)
    {
        return Err(Error::Aggregation(format!(
            "mixed configurations: {}/m={} and {}/m={}",
            first.policy, first.m, r.policy, r.m
        )));
    }
    let mut reps = replicates.to_vec();
    reps.sort_by(|a, b| {
        a.seed
            .cmp(&b.seed)
            .then(a.c_p.total_cmp(&b.c_p))
            .then(a.t_p.total_cmp(&b.t_p))
    });
    let column = |f: fn(&Replicate) -> f64| -> Vec<f64> { reps.iter().map(f).collect() };
    let (mean_t_p, std_t_p) = mean_std(&column(|r| r.t_p));
    let (mean_c_p, std_c_p) = mean_std(&column(|r| r.c_p));
    let (max_inbound_mean, _) = mean_std(&column(|r| r.max_inbound as f64));
    let (idle_frac_mean, _) = mean_std(&column(|r| r.idle_fraction));
    Ok(ExperimentResult {
        policy: first.policy.clone(),
        m: first.m,
        replicates: reps,
        mean_t_p,
        std_t_p,
        mean_c_p,
        std_c_p,
        max_inbound_mean,
        idle_frac_mean,
    })
}

/// Smallest grid point where the challenger's mean C_P is strictly lower
/// than the baseline's while it was not at the previous grid point.
pub fn find_crossover(
    baseline: &[ExperimentResult],
    challenger: &[ExperimentResult],
) -> Result<Option<usize>> {
    let grid = |rs: &[ExperimentResult]| {
        let mut v: Vec<(usize, f64)> = rs.iter().map(|r| (r.m, r.mean_c_p)).collect();
        v.sort_by_key(|p| p.0);
        v
    };
    let (base, chal) = (grid(baseline), grid(challenger));
    if base.len() != chal.len() || base.iter().zip(&chal).any(|(a, b)| a.0 != b.0) {
        return Err(Error::Comparison(
            "policies were evaluated on different m grids".into(),
        ));
    }
    let mut previously_lower = false;
    for ((m, b), (_, c)) in base.iter().zip(&chal) {
        let lower = c < b;
        if lower && !previously_lower {
            return Ok(Some(*m));
        }
        previously_lower = lower;
    }
    Ok(None)
}

/// Sorts by (policy name, m).
pub fn sort_results(results: &mut [ExperimentResult]) {
    results.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.m.cmp(&b.m)));
}

/// One CSV line per (policy, m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub policy: String,
    pub m: usize,
    pub replicates: usize,
    #[serde(rename = "mean_Tp")]
    pub mean_tp: f64,
    #[serde(rename = "std_Tp")]
    pub std_tp: f64,
    #[serde(rename = "mean_Cp")]
    pub mean_cp: f64,
    #[serde(rename = "std_Cp")]
    pub std_cp: f64,
    pub max_inbound_mean: f64,
    pub idle_frac_mean: f64,
}

impl From<&ExperimentResult> for CsvRow {
    fn from(r: &ExperimentResult) -> Self {
        CsvRow {
            policy: r.policy.clone(),
            m: r.m,
            replicates: r.replicates.len(),
            mean_tp: r.mean_t_p,
            std_tp: r.std_t_p,
            mean_cp: r.mean_c_p,
            std_cp: r.std_c_p,
            max_inbound_mean: r.max_inbound_mean,
            idle_frac_mean: r.idle_frac_mean,
        }
    }
}

pub fn write_csv<W: Write>(results: &[ExperimentResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub baseline: String,
    pub challenger: String,
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<ExperimentResult>,
    pub crossovers: Vec<Crossover>,
}

impl Report {
    /// Crossover of `challenger` against every other policy in the results.
    pub fn new(mut results: Vec<ExperimentResult>, challenger: &str) -> Result<Self> {
        sort_results(&mut results);
        let mut names: Vec<&str> = results.iter().map(|r| r.policy.as_str()).collect();
        names.dedup();
        let of = |p: &str| -> Vec<ExperimentResult> {
            results.iter().filter(|r| r.policy == p).cloned().collect()
        };
        let mut crossovers = Vec::new();
        if names.contains(&challenger) {
            let chal = of(challenger);
            for base in names.iter().filter(|&&n| n != challenger) {
                crossovers.push(Crossover {
                    baseline: base.to_string(),
                    challenger: challenger.to_string(),
                    m: find_crossover(&of(base), &chal)?,
                });
            }
        }
        Ok(Report {
            results,
            crossovers,
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}
