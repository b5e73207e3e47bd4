use std::io::Write;

use rayon::prelude::*;

use super::streams;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Example, ModelSpec, RunConfig};
use crate::mode::BlockMode;
use crate::stochastic::RngStream;

/// Held-out metrics of one checkpoint under one block mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub mode: BlockMode,
    pub trained_mode: BlockMode,
    /// ACT evaluation of a probabilistic checkpoint, or the reverse.
    pub cross_family: bool,
    pub accuracy: f64,
    /// Mean `log p(y | x, z)` per example.
    pub loglik: f64,
    /// Mean iterations over all blocks.
    pub mean_n: f64,
    pub mean_n_blocks: Vec<f64>,
    /// Mean MACs per example.
    pub flops: f64,
    pub examples: usize,
}

/// `n` held-out examples; independent of every training stream.
pub fn test_set(spec: &ModelSpec, n: usize, seed: u64) -> Vec<Example> {
    spec.task().batch(n, &mut RngStream::new(seed, streams::TEST))
}

/// Evaluates `checkpoint` in `run.mode` on `examples`.
///
/// Iterations are realized counts in discrete, thresholded and ACT modes and
/// the analytic expectation in relaxed mode.
pub fn evaluate(checkpoint: &Checkpoint, run: &RunConfig, examples: &[Example], seed: u64) -> Result<EvalRow> {
    if examples.is_empty() {
        return Err(Error::InsufficientSamples(0));
    }
    let model = &checkpoint.model;
    let columns = model.spec().block_columns();
    let noise_root = RngStream::new(seed, streams::EVAL_NOISE);
    let per_example: Vec<Result<(usize, usize, f64, Vec<f64>, u64)>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let tape = Tape::new();
            let vars = model.bind(&tape)?;
            let mut noise = noise_root.derive(i as u64);
            let out = model.forward(&vars, ex, run, &mut noise)?;
            let (hits, total) = out.correct(&ex.targets);
            let ll = out.log_likelihood(&ex.targets)?.value()[0];
            Ok((hits, total, ll, out.iterations_per_column(columns), out.flops()))
        })
        .collect();
    let n = examples.len() as f64;
    let (mut hits, mut total, mut loglik, mut flops) = (0, 0, 0.0, 0.0);
    let mut blocks = vec![0.0; columns];
    for r in per_example {
        let (h, t, ll, iters, f) = r?;
        hits += h;
        total += t;
        loglik += ll;
        flops += f as f64;
        for (b, x) in blocks.iter_mut().zip(iters) {
            *b += x;
        }
    }
    let (loglik, flops) = (loglik / n, flops / n);
    blocks.iter_mut().for_each(|b| *b /= n);
    Ok(EvalRow {
        mode: run.mode,
        trained_mode: checkpoint.trained_mode,
        cross_family: (run.mode == BlockMode::Act) != (checkpoint.trained_mode == BlockMode::Act),
        accuracy: hits as f64 / total as f64,
        loglik,
        mean_n: blocks.iter().sum::<f64>() / columns as f64,
        mean_n_blocks: blocks,
        flops,
        examples: examples.len(),
    })
}

/// Writes evaluation rows with `blocks` per-block iteration columns.
pub fn write_eval_csv<W: Write>(out: W, rows: &[EvalRow], blocks: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["mode", "trained_mode", "cross_family", "accuracy", "loglik", "mean_n"]
        .map(String::from)
        .to_vec();
    header.extend((1..=blocks).map(|k| format!("mean_n_block{k}")));
    header.extend(["flops".to_string(), "examples".to_string()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.mode.to_string(),
            r.trained_mode.to_string(),
            r.cross_family.to_string(),
            r.accuracy.to_string(),
            r.loglik.to_string(),
            r.mean_n.to_string(),
        ];
        rec.extend(r.mean_n_blocks.iter().map(|x| x.to_string()));
        rec.extend([r.flops.to_string(), r.examples.to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ResidualStackSpec};

    fn checkpoint() -> Checkpoint {
        Checkpoint {
            model: Model::new(ModelSpec::Residual(ResidualStackSpec::default()), 2).unwrap(),
            trained_mode: BlockMode::Relaxed,
        }
    }

    #[test]
    fn untrained_models_are_at_chance() {
        // readout rows are exchangeable across classes, so over random
        // initializations the predicted class is uniform
        let spec = ModelSpec::Residual(ResidualStackSpec::default());
        let data = test_set(&spec, 200, 5);
        let accs: Vec<f64> = (0..40)
            .map(|seed| {
                let ck = Checkpoint {
                    model: Model::new(spec, seed).unwrap(),
                    trained_mode: BlockMode::Relaxed,
                };
                evaluate(&ck, &RunConfig::new(BlockMode::Thresholded), &data, 0).unwrap().accuracy
            })
            .collect();
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 0.25).abs() < 3.0 * sd / n.sqrt(), "{mean} ± {sd}");
    }

    #[test]
    fn act_on_probabilistic_checkpoint_is_flagged() {
        let ck = checkpoint();
        let data = test_set(ck.model.spec(), 10, 5);
        let act = evaluate(&ck, &RunConfig::new(BlockMode::Act), &data, 0).unwrap();
        let thr = evaluate(&ck, &RunConfig::new(BlockMode::Thresholded), &data, 0).unwrap();
        assert!(act.cross_family);
        assert!(!thr.cross_family);
    }

    #[test]
    fn thresholded_never_exceeds_relaxed_flops() {
        let ck = checkpoint();
        let data = test_set(ck.model.spec(), 50, 5);
        let rel = evaluate(&ck, &RunConfig::new(BlockMode::Relaxed), &data, 0).unwrap();
        let thr = evaluate(&ck, &RunConfig::new(BlockMode::Thresholded), &data, 0).unwrap();
        assert!(thr.flops <= rel.flops);
    }

    #[test]
    fn csv_has_one_row_per_mode() {
        let ck = checkpoint();
        let data = test_set(ck.model.spec(), 5, 5);
        let rows: Vec<EvalRow> = BlockMode::ALL
            .iter()
            .map(|&m| evaluate(&ck, &RunConfig::new(m), &data, 0).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &rows, 3).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
