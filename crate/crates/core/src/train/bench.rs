use std::io::Write;

use super::eval::evaluate;
use super::trainer::train;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::models::{Example, ModelSpec};
use crate::stochastic::EstimatorKind;

/// Endpoint of one training run in a penalty sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub accuracy: f64,
    pub flops: f64,
    pub mean_n: f64,
}

/// Trains one model per `tau` and evaluates each in the training mode.
pub fn sweep_tau(spec: ModelSpec, cfg: &TrainConfig, taus: &[f64], test: &[Example]) -> Result<Vec<SweepRow>> {
    taus.iter()
        .map(|&tau| {
            let run_cfg = TrainConfig { tau, ..cfg.clone() };
            let out = train(spec, &run_cfg, &mut |_| Ok(()))?;
            let row = evaluate(&out.checkpoint, &run_cfg.run_config(), test, cfg.seed)?;
            Ok(SweepRow {
                tau,
                accuracy: row.accuracy,
                flops: row.flops,
                mean_n: row.mean_n,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "accuracy", "flops", "mean_n"])?;
    for r in rows {
        w.write_record([r.tau, r.accuracy, r.flops, r.mean_n].map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One logged probe of a variance-benchmark run, with that run's endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub grouping: usize,
    /// Number of halting latents per example.
    pub latents: usize,
    pub estimator: EstimatorKind,
    pub step: usize,
    pub grad_logvar: Option<f64>,
    pub final_accuracy: f64,
    pub flops: f64,
    /// Median probe over the run once the probe window has filled, or over
    /// every probe if the run ends first.
    pub median_logvar: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the grid model with both estimators for every patch size in `groupings`.
///
/// Each estimator uses its default optimizer: Adam for REINFORCE and SGD with
/// momentum for Concrete.
pub fn variance_bench(
    spec: ModelSpec,
    cfg: &TrainConfig,
    groupings: &[usize],
    test: &[Example],
) -> Result<Vec<VarianceRow>> {
    let ModelSpec::Grid(grid) = spec else {
        return Err(Error::InvalidConfig("variance benchmark needs the grid model".into()));
    };
    let latents = groupings
        .iter()
        .map(|&n| grid.latent_count(n))
        .collect::<Result<Vec<_>>>()?;
    let mut distinct = latents.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != latents.len() {
        return Err(Error::InvalidConfig(format!(
            "groupings {groupings:?} give repeated latent counts {latents:?}"
        )));
    }
    let mut rows = Vec::new();
    for (&grouping, &m) in groupings.iter().zip(&latents) {
        for estimator in [EstimatorKind::Reinforce, EstimatorKind::Concrete] {
            let run_cfg = TrainConfig {
                grouping,
                ..cfg.for_estimator(estimator)
            };
            let out = train(spec, &run_cfg, &mut |_| Ok(()))?;
            let eval = evaluate(&out.checkpoint, &run_cfg.run_config(), test, cfg.seed)?;
            let warmup = run_cfg.variance_window.saturating_sub(2).min(out.probes.len().saturating_sub(1));
            let settled = out.probes[warmup..].to_vec();
            let median_logvar = median(settled);
            rows.extend(out.rows.iter().map(|r| VarianceRow {
                grouping,
                latents: m,
                estimator,
                step: r.step,
                grad_logvar: r.grad_logvar,
                final_accuracy: eval.accuracy,
                flops: eval.flops,
                median_logvar,
            }));
        }
    }
    Ok(rows)
}

pub fn write_variance_csv<W: Write>(out: W, rows: &[VarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "m",
        "grouping",
        "estimator",
        "step",
        "grad_logvar",
        "median_logvar",
        "final_accuracy",
        "flops",
    ])?;
    for r in rows {
        w.write_record([
            r.latents.to_string(),
            r.grouping.to_string(),
            r.estimator.as_str().to_string(),
            r.step.to_string(),
            r.grad_logvar.map(|v| v.to_string()).unwrap_or_default(),
            r.median_logvar.to_string(),
            r.final_accuracy.to_string(),
            r.flops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
