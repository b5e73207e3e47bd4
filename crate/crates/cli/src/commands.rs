use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pact_core::blocks::{ponder_demo as ponder_rows, write_ponder_csv, DEFAULT_PONDER_TAIL};
use pact_core::models::{read_checkpoint, write_checkpoint, Checkpoint};
use pact_core::stochastic::EstimatorKind;
use pact_core::train::{self, EvalRow, MetricsWriter};
use pact_core::{BlockMode, Error};

use crate::config::ExperimentConfig;
use crate::{Common, Failure};

pub const OUT_DIR_ENV: &str = "PACT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "pact-out";

pub const CHECKPOINT_FILE: &str = "checkpoint.pact";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_FILE: &str = "resolved.toml";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep_tau.csv";
pub const VARIANCE_FILE: &str = "variance.csv";
pub const PONDER_FILE: &str = "ponder_demo.csv";

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } | Error::Io(_) | Error::Csv(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn out_dir(flag: Option<&PathBuf>, config: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| config.cloned())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

struct Context {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self, Failure> {
        let mut config = match &common.config {
            Some(path) => ExperimentConfig::load(path).map_err(Failure::Usage)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        let out = out_dir(common.out.as_ref(), config.output.dir.as_ref());
        fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.path(name);
        File::create(&path).map(BufWriter::new).map_err(|e| io_failure(&path, e))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_failure(&path, e))
    }

    fn write_resolved(&self, extra: Option<toml::Table>) -> Result<(), Failure> {
        let mut text = self.config.resolved(&self.out).to_toml();
        if let Some(table) = extra {
            text.push('\n');
            text.push_str(&toml::to_string(&table).expect("table serializes"));
        }
        self.write_text(RESOLVED_FILE, &text)
    }

    fn test_set(&self, examples: usize) -> Vec<pact_core::models::Example> {
        train::test_set(&self.config.model, examples, self.config.train.seed)
    }
}

fn evaluate_modes(ctx: &Context, checkpoint: &Checkpoint, modes: &[BlockMode], examples: usize) -> Result<Vec<EvalRow>, Failure> {
    let test = ctx.test_set(examples);
    let base = ctx.config.train.run_config();
    let rows = modes
        .iter()
        .map(|&mode| train::evaluate(checkpoint, &base.with_mode(mode), &test, ctx.config.train.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let blocks = checkpoint.model.spec().block_columns();
    train::write_eval_csv(ctx.create(EVAL_FILE)?, &rows, blocks)?;
    let mut stdout = std::io::stdout().lock();
    train::write_eval_csv(&mut stdout, &rows, blocks)?;
    for r in rows.iter().filter(|r| r.cross_family) {
        eprintln!(
            "note: {} evaluation of a {}-trained checkpoint crosses halting families",
            r.mode, r.trained_mode
        );
    }
    Ok(rows)
}

pub fn train(common: &Common, mode: Option<BlockMode>, tau: Option<f64>) -> Result<(), Failure> {
    let mut ctx = Context::new(common)?;
    if let Some(mode) = mode {
        ctx.config.train.mode = mode;
    }
    if let Some(tau) = tau {
        ctx.config.train.tau = tau;
    }
    ctx.config.train.validate()?;
    ctx.write_resolved(None)?;
    let spec = ctx.config.model;
    let mut metrics = MetricsWriter::new(ctx.create(METRICS_FILE)?, spec.block_columns())?;
    let outcome = train::train(spec, &ctx.config.train, &mut |row| metrics.write(row))?;
    let mut ckpt = ctx.create(CHECKPOINT_FILE)?;
    write_checkpoint(&mut ckpt, &outcome.checkpoint)?;
    ckpt.flush().map_err(|e| io_failure(&ctx.path(CHECKPOINT_FILE), e))?;
    evaluate_modes(&ctx, &outcome.checkpoint, &ctx.config.eval.modes, ctx.config.eval.examples)?;
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path, mode: Option<BlockMode>, examples: Option<usize>) -> Result<(), Failure> {
    let mut ctx = Context::new(common)?;
    let file = File::open(checkpoint).map_err(|e| Failure::Usage(format!("{}: {e}", checkpoint.display())))?;
    let ckpt = read_checkpoint(BufReader::new(file))
        .map_err(|e| Failure::Usage(format!("{}: {e}", checkpoint.display())))?;
    ctx.config.model = *ckpt.model.spec();
    let modes = mode.map(|m| vec![m]).unwrap_or_else(|| ctx.config.eval.modes.clone());
    let examples = examples.unwrap_or(ctx.config.eval.examples);
    if examples == 0 {
        return Err(Failure::Usage("--examples must be positive".into()));
    }
    evaluate_modes(&ctx, &ckpt, &modes, examples)?;
    Ok(())
}

pub fn sweep_tau(common: &Common, taus: &[f64]) -> Result<(), Failure> {
    let ctx = Context::new(common)?;
    if let Some(bad) = taus.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Failure::Usage(format!("tau must be finite and >= 0, got {bad}")));
    }
    ctx.write_resolved(None)?;
    let test = ctx.test_set(ctx.config.eval.examples);
    let rows = train::sweep_tau(ctx.config.model, &ctx.config.train, taus, &test)?;
    train::write_sweep_csv(ctx.create(SWEEP_FILE)?, &rows)?;
    train::write_sweep_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

pub fn variance(common: &Common, groupings: &[usize]) -> Result<(), Failure> {
    let ctx = Context::new(common)?;
    let mut per_estimator = toml::Table::new();
    for kind in [EstimatorKind::Reinforce, EstimatorKind::Concrete] {
        let resolved = ctx.config.train.for_estimator(kind);
        let value = toml::Value::try_from(&resolved).expect("train config serializes");
        per_estimator.insert(kind.as_str().to_string(), value);
    }
    let mut extra = toml::Table::new();
    extra.insert("variance".into(), toml::Value::Table(per_estimator));
    ctx.write_resolved(Some(extra))?;
    let test = ctx.test_set(ctx.config.eval.examples);
    let rows = train::variance_bench(ctx.config.model, &ctx.config.train, groupings, &test)?;
    train::write_variance_csv(ctx.create(VARIANCE_FILE)?, &rows)?;
    Ok(())
}

pub fn ponder_demo(out: Option<PathBuf>, tail: Option<Vec<f64>>, points: usize, epsilon: f64) -> Result<(), Failure> {
    let dir = out_dir(out.as_ref(), None);
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let tail = tail.unwrap_or_else(|| DEFAULT_PONDER_TAIL.to_vec());
    let rows = ponder_rows(&tail, points, epsilon)?;
    let path = dir.join(PONDER_FILE);
    let file = File::create(&path).map_err(|e| io_failure(&path, e))?;
    write_ponder_csv(BufWriter::new(file), &rows)?;
    Ok(())
}
