//! Toy architectures wired from adaptive blocks, their synthetic tasks,
//! parameter storage and checkpoints.

mod checkpoint;
pub mod data;
mod grid;
mod params;
mod residual;
mod rnn;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{BlockConfig, BlockOutput, DEFAULT_ACT_EPSILON, DEFAULT_CLIP, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::mode::BlockMode;
use crate::stochastic::{RngStream, UniformSource};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use data::{Example, Task};
pub use grid::GridModelSpec;
pub use params::{Param, ParamStore, ParamTag};
pub use residual::ResidualStackSpec;
pub use rnn::AdaptiveRnnSpec;

/// Stream id reserved for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Residual(ResidualStackSpec),
    Grid(GridModelSpec),
    Rnn(AdaptiveRnnSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Residual(s) => s.validate(),
            ModelSpec::Grid(s) => s.validate(),
            ModelSpec::Rnn(s) => s.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Residual(_) => "residual",
            ModelSpec::Grid(_) => "grid",
            ModelSpec::Rnn(_) => "rnn",
        }
    }

    /// The synthetic task this architecture is trained on.
    pub fn task(&self) -> Task {
        match *self {
            ModelSpec::Residual(s) => Task::Mixture {
                dim: s.input_dim,
                classes: s.classes,
            },
            ModelSpec::Grid(s) => Task::Pattern { size: s.size },
            ModelSpec::Rnn(s) => Task::Parity {
                min_len: s.min_len,
                max_len: s.max_len,
            },
        }
    }

    /// Analytic parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Residual(s) => s.param_count(),
            ModelSpec::Grid(s) => s.param_count(),
            ModelSpec::Rnn(s) => s.param_count(),
        }
    }

    pub fn max_iterations(&self) -> usize {
        match self {
            ModelSpec::Residual(s) => s.iterations,
            ModelSpec::Grid(s) => s.iterations,
            ModelSpec::Rnn(s) => s.iterations,
        }
    }

    /// Number of per-block iteration columns reported in metrics.
    pub fn block_columns(&self) -> usize {
        match self {
            ModelSpec::Residual(s) => s.blocks,
            ModelSpec::Grid(s) => s.blocks,
            ModelSpec::Rnn(_) => 1,
        }
    }

    /// The same architecture with `L = 1` in every block.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        match &mut self {
            ModelSpec::Residual(s) => s.iterations = iterations,
            ModelSpec::Grid(s) => s.iterations = iterations,
            ModelSpec::Rnn(s) => s.iterations = iterations,
        }
        self
    }
}

/// Block settings shared by every block of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: BlockMode,
    pub temperature: f64,
    pub clip: f64,
    pub act_epsilon: f64,
    /// Computation time penalty `τ` per block.
    pub penalty: f64,
    /// Patch size `n` for grouping spatial latents.
    pub grouping: usize,
}

impl RunConfig {
    pub fn new(mode: BlockMode) -> Self {
        Self {
            mode,
            temperature: DEFAULT_TEMPERATURE,
            clip: DEFAULT_CLIP,
            act_epsilon: DEFAULT_ACT_EPSILON,
            penalty: 0.0,
            grouping: 1,
        }
    }

    pub fn with_mode(mut self, mode: BlockMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn block(&self, max_iterations: usize) -> BlockConfig {
        BlockConfig {
            max_iterations,
            mode: self.mode,
            temperature: self.temperature,
            clip: self.clip,
            act_epsilon: self.act_epsilon,
            penalty: self.penalty,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grouping == 0 {
            return Err(Error::InvalidConfig("grouping must be at least 1".into()));
        }
        self.block(1).validate()
    }
}

/// Predictions and block records of one example.
#[derive(Debug, Clone)]
pub struct ForwardOutput<'t> {
    /// Log-probabilities over classes, one vector per prediction.
    pub log_probs: Vec<Var<'t>>,
    pub blocks: Vec<BlockOutput<'t>>,
    /// Metrics column of each entry of `blocks`.
    pub columns: Vec<usize>,
    /// MACs of the layers outside adaptive blocks.
    pub fixed_flops: u64,
}

impl<'t> ForwardOutput<'t> {
    /// `log p(y | x, z)` summed over predictions.
    pub fn log_likelihood(&self, targets: &[usize]) -> Result<Var<'t>> {
        if targets.len() != self.log_probs.len() {
            return Err(Error::ShapeMismatch {
                op: "log_likelihood",
                left: vec![self.log_probs.len()],
                right: vec![targets.len()],
            });
        }
        let picks = self
            .log_probs
            .iter()
            .zip(targets)
            .map(|(lp, &y)| lp.pick(y))
            .collect::<Result<Vec<_>>>()?;
        self.log_probs[0].tape().add_all(&picks)
    }

    /// `Σ_k τ · N_k` (with `ρ_k` in place of `N_k` for ACT blocks).
    pub fn penalty(&self, tau: f64) -> Result<Var<'t>> {
        let terms: Vec<Var<'t>> = self.blocks.iter().map(|b| b.penalized_iterations()).collect();
        Ok(self.log_probs[0].tape().add_all(&terms)?.affine(tau, 0.0))
    }

    /// `log q(z)` over all blocks, if every block was discrete.
    pub fn log_q(&self) -> Option<Result<Var<'t>>> {
        let parts: Option<Vec<Var<'t>>> = self.blocks.iter().map(|b| b.log_q).collect();
        parts.map(|p| self.log_probs[0].tape().add_all(&p))
    }

    pub fn flops(&self) -> u64 {
        self.fixed_flops + self.blocks.iter().map(|b| b.trace.flops).sum::<u64>()
    }

    /// Predictions that match `targets`, and the number of predictions.
    pub fn correct(&self, targets: &[usize]) -> (usize, usize) {
        let hits = self
            .log_probs
            .iter()
            .zip(targets)
            .filter(|(lp, &y)| argmax(&lp.value()) == y)
            .count();
        (hits, targets.len())
    }

    /// Reported iterations averaged within each of `columns` metric columns.
    pub fn iterations_per_column(&self, columns: usize) -> Vec<f64> {
        let mut sums = vec![0.0; columns];
        let mut counts = vec![0usize; columns];
        for (b, &c) in self.blocks.iter().zip(&self.columns) {
            sums[c] += b.trace.reported_iterations();
            counts[c] += 1;
        }
        sums.iter().zip(&counts).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone)]
enum Layout {
    Residual(residual::Layout),
    Grid(grid::Layout),
    Rnn(rnn::Layout),
}

/// An architecture together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Freshly initialized model; the same seed gives the same parameters.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let layout = match &spec {
            ModelSpec::Residual(s) => Layout::Residual(residual::build(s, &mut params, &mut rng)),
            ModelSpec::Grid(s) => Layout::Grid(grid::build(s, &mut params, &mut rng)),
            ModelSpec::Rnn(s) => Layout::Rnn(rnn::build(s, &mut params, &mut rng)),
        };
        Ok(Self { spec, params, layout })
    }

    /// Model with `spec` and parameter values taken from `params`.
    pub fn with_params(spec: ModelSpec, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the parameters as leaves of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.params.bind(tape)
    }

    fn input<'t>(&self, tape: &'t Tape, example: &Example) -> Result<Var<'t>> {
        tape.constant(example.input.clone(), &example.shape)
    }

    /// Adaptive forward pass; `vars` must come from [`Model::bind`] on the same tape.
    pub fn forward<'t>(
        &self,
        vars: &[Var<'t>],
        example: &Example,
        run: &RunConfig,
        noise: &mut dyn UniformSource,
    ) -> Result<ForwardOutput<'t>> {
        run.validate()?;
        let tape = vars[0].tape();
        let x = self.input(tape, example)?;
        match (&self.spec, &self.layout) {
            (ModelSpec::Residual(s), Layout::Residual(l)) => residual::forward(s, l, vars, x, run, noise),
            (ModelSpec::Grid(s), Layout::Grid(l)) => grid::forward(s, l, vars, x, run, noise),
            (ModelSpec::Rnn(s), Layout::Rnn(l)) => rnn::forward(s, l, vars, x, run, noise),
            _ => unreachable!("layout always matches spec"),
        }
    }

    /// The architecture with one unit per block and no halting.
    pub fn forward_plain<'t>(&self, vars: &[Var<'t>], example: &Example) -> Result<Vec<Var<'t>>> {
        let tape = vars[0].tape();
        let x = self.input(tape, example)?;
        match (&self.spec, &self.layout) {
            (ModelSpec::Residual(_), Layout::Residual(l)) => residual::forward_plain(l, vars, x),
            (ModelSpec::Grid(s), Layout::Grid(l)) => grid::forward_plain(s, l, vars, x),
            (ModelSpec::Rnn(s), Layout::Rnn(l)) => rnn::forward_plain(s, l, vars, x),
            _ => unreachable!("layout always matches spec"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::Residual(ResidualStackSpec {
                blocks: 2,
                iterations: 3,
                width: 4,
                input_dim: 3,
                classes: 3,
            }),
            ModelSpec::Grid(GridModelSpec {
                blocks: 2,
                iterations: 2,
                channels: 2,
                size: 4,
                classes: 4,
            }),
            ModelSpec::Rnn(AdaptiveRnnSpec {
                hidden: 4,
                iterations: 3,
                min_len: 2,
                max_len: 3,
                ..AdaptiveRnnSpec::default()
            }),
        ]
    }

    #[test]
    fn parameter_counts_match_formulas() {
        let mut specs = tiny_specs();
        specs.push(ModelSpec::Residual(ResidualStackSpec::default()));
        specs.push(ModelSpec::Grid(GridModelSpec::default()));
        specs.push(ModelSpec::Rnn(AdaptiveRnnSpec::default()));
        for spec in specs {
            let m = Model::new(spec, 1).unwrap();
            assert_eq!(m.params().scalar_count(), spec.param_count(), "{spec:?}");
        }
    }

    #[test]
    fn residual_count_by_hand() {
        // input 8*16+16, units 3*4*(2*256+32), heads 3*3*17, output 4*16+4
        let spec = ResidualStackSpec::default();
        assert_eq!(spec.param_count(), 144 + 6528 + 153 + 68);
    }

    #[test]
    fn grid_latent_counts() {
        let spec = GridModelSpec::default();
        assert_eq!(spec.latent_count(1).unwrap(), 336);
        assert_eq!(spec.latent_count(2).unwrap(), 84);
        assert_eq!(spec.latent_count(4).unwrap(), 21);
        assert_eq!(spec.latent_count(16).unwrap(), 3);
    }

    #[test]
    fn same_seed_same_init() {
        let spec = ModelSpec::Residual(ResidualStackSpec::default());
        let a = Model::new(spec, 5).unwrap();
        let b = Model::new(spec, 5).unwrap();
        let c = Model::new(spec, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn heads_start_reluctant() {
        let m = Model::new(ModelSpec::Residual(ResidualStackSpec::default()), 0).unwrap();
        for p in m.params().iter().filter(|p| p.tag == ParamTag::Head) {
            let expect = if p.name.ends_with("bias") { -3.0 } else { 0.0 };
            assert!(p.values.iter().all(|&v| v == expect), "{}", p.name);
        }
    }

    #[test]
    fn untrained_expected_iterations_match_constant_halting() {
        let spec = ModelSpec::Residual(ResidualStackSpec::default());
        let m = Model::new(spec, 3).unwrap();
        let h = 1.0 / (1.0 + 3f64.exp());
        let closed = crate::stochastic::expected_iterations_value(&[h, h, h, 1.0]).unwrap();
        let task = spec.task();
        let mut rng = RngStream::new(3, 1);
        let run = RunConfig::new(BlockMode::Relaxed);
        let mut total = 0.0;
        let n = 50;
        for ex in task.batch(n, &mut rng) {
            let tape = Tape::new();
            let vars = m.bind(&tape).unwrap();
            let out = m.forward(&vars, &ex, &run, &mut rng).unwrap();
            total += out.blocks.iter().map(|b| b.trace.expected_iterations()).sum::<f64>() / 3.0;
        }
        let mean = total / n as f64;
        assert!((mean - closed).abs() / closed < 0.1, "{mean} vs {closed}");
    }

    #[test]
    fn single_iteration_equals_plain_network() {
        for spec in tiny_specs() {
            let spec = spec.with_iterations(1);
            let m = Model::new(spec, 11).unwrap();
            let mut rng = RngStream::new(4, 4);
            for ex in spec.task().batch(3, &mut rng.clone()) {
                let plain = {
                    let tape = Tape::new();
                    let vars = m.bind(&tape).unwrap();
                    m.forward_plain(&vars, &ex)
                        .unwrap()
                        .iter()
                        .map(|v| v.value().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                        .collect::<Vec<_>>()
                };
                for mode in BlockMode::ALL {
                    let tape = Tape::new();
                    let vars = m.bind(&tape).unwrap();
                    let out = m.forward(&vars, &ex, &RunConfig::new(mode), &mut rng).unwrap();
                    let bits: Vec<Vec<u64>> = out
                        .log_probs
                        .iter()
                        .map(|v| v.value().iter().map(|x| x.to_bits()).collect())
                        .collect();
                    assert_eq!(bits, plain, "{spec:?} {mode}");
                }
            }
        }
    }

    #[test]
    fn forced_halting_runs_one_unit_per_block() {
        let spec = ResidualStackSpec::default();
        let mut m = Model::new(ModelSpec::Residual(spec), 2).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.tag == ParamTag::Head && p.name.ends_with("bias")) {
            p.values[0] = 40.0;
        }
        let ex = ModelSpec::Residual(spec).task().sample(&mut RngStream::new(0, 0));
        for mode in [BlockMode::Discrete, BlockMode::Thresholded, BlockMode::Relaxed, BlockMode::Act] {
            let tape = Tape::new();
            let vars = m.bind(&tape).unwrap();
            let out = m.forward(&vars, &ex, &RunConfig::new(mode), &mut RngStream::new(1, 1)).unwrap();
            let d = spec.width as u64;
            let closed = d * (spec.input_dim + spec.classes) as u64 + spec.blocks as u64 * (2 * d * d + d);
            assert_eq!(out.flops(), closed, "{mode}");
            assert!(out.blocks.iter().all(|b| b.trace.executed == 1));
        }
    }

    #[test]
    fn forced_halting_rnn_one_transition_per_step() {
        let spec = AdaptiveRnnSpec::default();
        let mut m = Model::new(ModelSpec::Rnn(spec), 2).unwrap();
        let bias = m.params().find("head.bias").unwrap();
        m.params_mut().iter_mut().nth(bias).unwrap().values[0] = 40.0;
        let ex = ModelSpec::Rnn(spec).task().sample(&mut RngStream::new(0, 0));
        let tape = Tape::new();
        let vars = m.bind(&tape).unwrap();
        let out = m.forward(&vars, &ex, &RunConfig::new(BlockMode::Discrete), &mut RngStream::new(1, 1)).unwrap();
        let transitions: usize = out.blocks.iter().map(|b| b.trace.executed).sum();
        assert_eq!(transitions, ex.targets.len());
    }

    #[test]
    fn saturated_relaxed_matches_discrete() {
        for spec in tiny_specs() {
            let mut m = Model::new(spec, 8).unwrap();
            let mut flip = RngStream::new(8, 8);
            for p in m.params_mut().iter_mut().filter(|p| p.tag == ParamTag::Head && p.name.ends_with("bias")) {
                p.values[0] = if flip.uniform() < 0.5 { 30.0 } else { -30.0 };
            }
            let ex = spec.task().sample(&mut RngStream::new(2, 0));
            let outputs: Vec<Vec<f64>> = [BlockMode::Discrete, BlockMode::Relaxed, BlockMode::Thresholded]
                .iter()
                .map(|&mode| {
                    let tape = Tape::new();
                    let vars = m.bind(&tape).unwrap();
                    let out = m.forward(&vars, &ex, &RunConfig::new(mode), &mut RngStream::new(3, 3)).unwrap();
                    out.log_probs.iter().flat_map(|v| v.value()).collect()
                })
                .collect();
            for o in &outputs[1..] {
                assert!(o.iter().zip(&outputs[0]).all(|(a, b)| (a - b).abs() < 1e-3), "{spec:?}");
            }
        }
    }
}
