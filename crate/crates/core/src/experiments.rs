//! Replicate harness: independent runs of several methods over a sweep of
//! one parameter, summarized by the standard deviation of the estimates
//! and its ratio to the baseline method's.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::pricing::{in_pool, price, PricingRequest};
use crate::rng::{derive_seed, label_tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Values of the swept parameter, one output row per value and method.
    pub sweep: Vec<f64>,
    /// Method labels; the first one is the baseline for `rel_sd`.
    pub methods: Vec<String>,
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Leave `runtime_s` empty so outputs are reproducible byte for byte.
    #[serde(default)]
    pub record_runtime: bool,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(config_err("sweep is empty"));
        }
        if self.methods.is_empty() {
            return Err(config_err("no methods to compare"));
        }
        if self.replicates < 2 {
            return Err(config_err("need at least two replicates"));
        }
        Ok(())
    }

    /// Seed of one replicate: `(master, method, sweep index, replicate)`.
    pub fn seed(&self, method: &str, sweep_index: usize, replicate: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[label_tag(method), sweep_index as u64, replicate as u64],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub sweep: f64,
    pub method: String,
    pub mean: f64,
    pub sd: f64,
    /// Baseline sd over this method's sd; `None` when this sd is zero.
    pub rel_sd: Option<f64>,
    pub runtime_s: Option<f64>,
    /// Replicates that died out (counted as zero estimates).
    pub extinct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub sweep: f64,
    pub method: String,
    pub replicate: usize,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub rows: Vec<ComparisonRow>,
    pub estimates: Vec<ReplicateEstimate>,
}

/// Sample mean and standard deviation (`n - 1` denominator).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (sweep value, method, replicate). `request` builds the
/// pricing request for a sweep index and method label; its seed and worker
/// settings are overridden.
pub fn run_plan(
    plan: &ExperimentPlan,
    request: &(dyn Fn(usize, &str) -> Result<PricingRequest> + Sync),
) -> Result<PlanOutput> {
    plan.validate()?;
    let mut jobs = Vec::new();
    for si in 0..plan.sweep.len() {
        for method in &plan.methods {
            let base = request(si, method)?;
            jobs.push((si, method.as_str(), base));
        }
    }
    let results: Vec<Vec<(f64, bool, f64)>> = in_pool(plan.workers, || {
        jobs.par_iter()
            .map(|(si, method, base)| {
                (0..plan.replicates)
                    .into_par_iter()
                    .map(|r| {
                        let mut req = base.clone().with_seed(plan.seed(method, *si, r));
                        req.smc.workers = None;
                        let res = price(&req)?;
                        Ok((res.estimate, res.extinct, res.wall_time))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::with_capacity(jobs.len());
    let mut estimates = Vec::new();
    let per_sweep = plan.methods.len();
    for (chunk_jobs, chunk_res) in jobs.chunks(per_sweep).zip(results.chunks(per_sweep)) {
        let sds: Vec<(f64, f64)> = chunk_res
            .iter()
            .map(|reps| mean_sd(&reps.iter().map(|r| r.0).collect::<Vec<_>>()))
            .collect();
        let baseline_sd = sds[0].1;
        for ((si, method, _), (reps, &(mean, sd))) in
            chunk_jobs.iter().zip(chunk_res.iter().zip(&sds))
        {
            let sweep = plan.sweep[*si];
            rows.push(ComparisonRow {
                sweep,
                method: method.to_string(),
                mean,
                sd,
                rel_sd: (sd > 0.0).then(|| baseline_sd / sd),
                runtime_s: plan.record_runtime.then(|| reps.iter().map(|r| r.2).sum()),
                extinct: reps.iter().filter(|r| r.1).count(),
            });
            estimates.extend(reps.iter().enumerate().map(|(r, rep)| ReplicateEstimate {
                sweep,
                method: method.to_string(),
                replicate: r,
                estimate: rep.0,
            }));
        }
    }
    Ok(PlanOutput { rows, estimates })
}

/// Writes the comparison table as CSV:
/// `sweep,method,mean,sd,rel_sd,runtime_s,extinct`. Missing values are
/// empty fields.
pub fn emit_plot_data(table: &[ComparisonRow], path: &Path) -> Result<()> {
    if table.is_empty() {
        return Err(config_err("nothing to write: empty table"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep",
        "method",
        "mean",
        "sd",
        "rel_sd",
        "runtime_s",
        "extinct",
    ])?;
    for row in table {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            row.sweep.to_string(),
            row.method.clone(),
            row.mean.to_string(),
            row.sd.to_string(),
            opt(row.rel_sd),
            opt(row.runtime_s),
            row.extinct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a table written by [`emit_plot_data`].
pub fn read_plot_data(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| config_err(format!("bad number {s:?}: {e}")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse(s).map(Some)
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ComparisonRow {
                sweep: parse(&rec[0])?,
                method: rec[1].to_string(),
                mean: parse(&rec[2])?,
                sd: parse(&rec[3])?,
                rel_sd: opt(&rec[4])?,
                runtime_s: opt(&rec[5])?,
                extinct: rec[6]
                    .parse()
                    .map_err(|_| config_err("bad extinct count"))?,
            })
        })
        .collect()
}

/// Per-replicate estimates: `sweep,method,replicate,estimate`.
pub fn emit_replicates(estimates: &[ReplicateEstimate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in estimates {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
