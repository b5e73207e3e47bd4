use std::time::Instant;

use rayon::prelude::*;

use super::metrics::MetricsRow;
use super::objective::{loss_act, loss_reinforce, loss_relaxed};
use super::optim::{LrSchedule, Optimizer};
use super::{streams, TrainConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Example, Model, ModelSpec, RunConfig};
use crate::mode::BlockMode;
use crate::stochastic::{EstimatorKind, EstimatorState, RngStream, VarianceProbe};

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<MetricsRow>,
    /// Gradient-variance probe of every step at which it was defined.
    pub probes: Vec<f64>,
}

struct ExampleStats {
    grads: Vec<Vec<f64>>,
    loglik: f64,
    penalty: f64,
    iterations: Vec<f64>,
    flops: u64,
    correct: usize,
    predictions: usize,
}

fn example_step(
    model: &Model,
    example: &Example,
    run: &RunConfig,
    state: &EstimatorState,
    noise: &mut RngStream,
) -> Result<ExampleStats> {
    let tape = Tape::new();
    let vars = model.bind(&tape)?;
    let out = model.forward(&vars, example, run, noise)?;
    let terms = match run.mode {
        BlockMode::Relaxed => loss_relaxed(&out, &example.targets, run.penalty)?,
        BlockMode::Discrete => loss_reinforce(&out, &example.targets, run.penalty, state)?,
        BlockMode::Act => loss_act(&out, &example.targets, run.penalty)?,
        BlockMode::Thresholded => {
            return Err(Error::ModeMismatch("thresholded blocks cannot be trained".into()));
        }
    };
    let (correct, predictions) = out.correct(&example.targets);
    let iterations = out.iterations_per_column(model.spec().block_columns());
    let flops = out.flops();
    let (loglik, penalty) = (terms.log_likelihood, terms.penalty);
    let grads = tape.backward(terms.loss)?;
    Ok(ExampleStats {
        grads: model.params().gradients(&grads, &vars),
        loglik,
        penalty,
        iterations,
        flops,
        correct,
        predictions,
    })
}

/// Trains a fresh model of `spec`, handing each logged row to `sink`.
///
/// A non-finite loss or gradient stops the run: the offending step is passed to
/// `sink` as a diagnostic row and [`Error::Divergence`] is returned.
pub fn train(
    spec: ModelSpec,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut model = Model::new(spec, cfg.seed)?;
    let task = spec.task();
    let run = cfg.run_config();
    let schedule = LrSchedule {
        base: cfg.lr(),
        total: cfg.steps,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer_kind(), model.params(), cfg.weight_decay);
    let mut state = EstimatorState::new(cfg.estimator().unwrap_or(EstimatorKind::Concrete), cfg.temperature);
    let mut probe = VarianceProbe::new(cfg.variance_window)?;
    let mut data = RngStream::new(cfg.seed, streams::DATA);
    let noise_root = RngStream::new(cfg.seed, streams::NOISE);
    let columns = spec.block_columns();
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut probes = Vec::new();

    for step in 0..cfg.steps {
        let batch = task.batch(cfg.batch_size, &mut data);
        let stats: Vec<Result<ExampleStats>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut noise = noise_root.derive((step * cfg.batch_size + i) as u64);
                example_step(&model, ex, &run, &state, &mut noise)
            })
            .collect();
        let stats = match stats.into_iter().collect::<Result<Vec<_>>>() {
            Ok(s) => s,
            Err(Error::InvalidProbability(p)) if !p.is_finite() => {
                let row = MetricsRow {
                    step: step + 1,
                    loss: f64::NAN,
                    loglik: f64::NAN,
                    penalty: f64::NAN,
                    mean_n: vec![f64::NAN; columns],
                    flops: f64::NAN,
                    accuracy: f64::NAN,
                    grad_logvar: None,
                    wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
                };
                sink(&row)?;
                return Err(Error::Divergence {
                    step: step + 1,
                    loss: f64::NAN,
                });
            }
            Err(e) => return Err(e),
        };

        let b = stats.len() as f64;
        let mut grads = model.params().zeros_like();
        let mut iterations = vec![0.0; columns];
        let (mut loglik, mut penalty, mut flops) = (0.0, 0.0, 0.0);
        let (mut correct, mut predictions) = (0, 0);
        for s in &stats {
            for (acc, g) in grads.iter_mut().zip(&s.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x / b;
                }
            }
            for (acc, n) in iterations.iter_mut().zip(&s.iterations) {
                *acc += n / b;
            }
            loglik += s.loglik / b;
            penalty += s.penalty / b;
            flops += s.flops as f64 / b;
            correct += s.correct;
            predictions += s.predictions;
        }
        let loss = penalty - loglik;
        let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
        let grad_logvar = if finite {
            probe.push(grads.iter().flatten().copied().collect())?
        } else {
            None
        };
        if let Some(v) = grad_logvar {
            probes.push(v);
        }
        let row = MetricsRow {
            step: step + 1,
            loss,
            loglik,
            penalty,
            mean_n: iterations,
            flops,
            accuracy: correct as f64 / predictions as f64,
            grad_logvar,
            wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        if !finite {
            sink(&row)?;
            return Err(Error::Divergence { step: step + 1, loss });
        }
        optimizer.step(model.params_mut(), &grads, schedule.at(step))?;
        if cfg.mode == BlockMode::Discrete {
            state.update_baseline(loglik);
        }
        if step == 0 || (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            trained_mode: cfg.mode,
        },
        rows,
        probes,
    })
}
