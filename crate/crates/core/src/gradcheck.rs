//! Central finite-difference oracle for tape adjoints.
//!
//! The oracle only evaluates the forward pass, so it is independent of every
//! backward rule it checks.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-5;
pub const DEFAULT_ATOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|a - n| / max(|a|, |n|, atol / rtol)`; passes when `<= rtol`.
    pub max_error: f64,
    pub rtol: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.rtol
    }
}

/// Compares adjoints of scalar `f` against central differences with the default tolerances.
pub fn check<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_with(inputs, DEFAULT_STEP, DEFAULT_RTOL, DEFAULT_ATOL, f)
}

pub fn check_with<F>(
    inputs: &[(Vec<f64>, Vec<usize>)],
    step: f64,
    rtol: f64,
    atol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&tape, &vars)?.item())
    };

    let analytic = {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|(v, shape)| tape.leaf(v.clone(), shape))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&tape, &vars)?;
        let grads = tape.backward(root)?;
        vars.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
    };

    let floor = atol / rtol;
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut report = GradCheckReport {
        max_error: 0.0,
        rtol,
        checked: 0,
        worst: None,
    };
    for i in 0..values.len() {
        for j in 0..values[i].len() {
            let orig = values[i][j];
            values[i][j] = orig + step;
            let plus = eval(&values)?;
            values[i][j] = orig - step;
            let minus = eval(&values)?;
            values[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_error || err.is_nan() {
                report.max_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(Mismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Differentiable expression over tape leaves, reduced to a scalar.
pub type Case = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync>;

/// A named expression with the leaf values it is checked at.
pub struct SuiteCase {
    pub name: String,
    pub inputs: Vec<(Vec<f64>, Vec<usize>)>,
    pub f: Case,
}

impl SuiteCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        check(&self.inputs, |t, v| (self.f)(t, v))
    }
}

fn spread(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| 0.9 * ((i as f64 + 1.0) * 1.7 + phase).sin()).collect()
}

fn input(shape: &[usize], phase: f64) -> (Vec<f64>, Vec<usize>) {
    (spread(shape.iter().product(), phase), shape.to_vec())
}

fn positive(shape: &[usize], phase: f64) -> (Vec<f64>, Vec<usize>) {
    let (v, s) = input(shape, phase);
    (v.iter().map(|x| 0.2 + x.abs()).collect(), s)
}

fn probability(shape: &[usize], phase: f64) -> (Vec<f64>, Vec<usize>) {
    let (v, s) = input(shape, phase);
    (v.iter().map(|x| 0.5 + 0.45 * x).collect(), s)
}

/// `Σ_i w_i y_i` with fixed, distinct weights, so every adjoint entry matters.
pub fn project<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let w = y.tape().constant(spread(y.numel(), 0.37), &y.shape())?;
    Ok(y.mul(w)?.sum())
}

fn case<F>(name: &str, inputs: Vec<(Vec<f64>, Vec<usize>)>, f: F) -> SuiteCase
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static,
{
    SuiteCase {
        name: name.to_string(),
        inputs,
        f: Box::new(f),
    }
}

/// One case per differentiable tape operation.
pub fn operation_suite() -> Vec<SuiteCase> {
    let v6 = || input(&[6], 0.0);
    let w6 = || input(&[6], 1.1);
    vec![
        case("add", vec![v6(), w6()], |_, x| project(x[0].add(x[1])?)),
        case("sub", vec![v6(), w6()], |_, x| project(x[0].sub(x[1])?)),
        case("mul", vec![v6(), w6()], |_, x| project(x[0].mul(x[1])?)),
        case("scale_by", vec![v6(), input(&[1], 0.4)], |_, x| project(x[0].scale_by(x[1])?)),
        case("add_scalar", vec![v6(), input(&[1], 0.4)], |_, x| project(x[0].add_scalar(x[1])?)),
        case("affine", vec![v6()], |_, x| project(x[0].affine(-1.5, 0.25))),
        case("neg", vec![v6()], |_, x| project(x[0].neg())),
        case("one_minus", vec![v6()], |_, x| project(x[0].one_minus())),
        case("matmul", vec![input(&[3, 4], 0.2), input(&[4], 0.9)], |_, x| project(x[0].matmul(x[1])?)),
        case("linear", vec![input(&[4], 0.0), input(&[3, 4], 0.5), input(&[3], 1.3)], |_, x| {
            project(x[0].linear(x[1], x[2])?)
        }),
        case("conv3x3", vec![input(&[2, 5, 5], 0.0), input(&[3, 2, 3, 3], 0.8)], |_, x| {
            project(x[0].conv3x3(x[1], 1)?)
        }),
        case("conv3x3_stride2", vec![input(&[2, 6, 6], 0.0), input(&[3, 2, 3, 3], 0.8)], |_, x| {
            project(x[0].conv3x3(x[1], 2)?)
        }),
        case("global_avg_pool", vec![input(&[3, 4, 4], 0.1)], |_, x| project(x[0].global_avg_pool()?)),
        case("sigmoid", vec![v6()], |_, x| project(x[0].sigmoid())),
        case("log_sigmoid", vec![v6()], |_, x| project(x[0].log_sigmoid())),
        case("tanh", vec![v6()], |_, x| project(x[0].tanh())),
        case("logit", vec![probability(&[6], 0.0)], |_, x| project(x[0].logit())),
        case("ln", vec![positive(&[6], 0.0)], |_, x| project(x[0].ln())),
        case("exp", vec![v6()], |_, x| project(x[0].exp())),
        case("sum", vec![v6()], |_, x| Ok(x[0].sum().affine(1.3, 0.0))),
        case("mean", vec![v6()], |_, x| Ok(x[0].mean().affine(1.3, 0.0))),
        case("log_softmax", vec![v6()], |_, x| project(x[0].log_softmax())),
        case("softmax_cross_entropy", vec![v6()], |_, x| x[0].softmax_cross_entropy(2)),
        case("max_const", vec![v6()], |_, x| project(x[0].max_const(0.05))),
        case("relu", vec![v6()], |_, x| project(x[0].relu())),
        case("reshape", vec![v6()], |_, x| project(x[0].reshape(&[2, 3])?)),
        case("pick", vec![v6()], |_, x| Ok(x[0].pick(4)?.affine(2.0, 0.0))),
        case("tile_channels", vec![input(&[3, 3], 0.0)], |_, x| project(x[0].tile_channels(2)?)),
        case("add_channel_bias", vec![input(&[2, 3, 3], 0.0), input(&[2], 0.6)], |_, x| {
            project(x[0].add_channel_bias(x[1])?)
        }),
        case("patch_mean", vec![input(&[4, 6], 0.0)], |_, x| project(x[0].patch_mean(2)?)),
        case("patch_expand", vec![input(&[2, 3], 0.0)], |_, x| project(x[0].patch_expand(2)?)),
        case("concat", vec![input(&[2], 0.0), input(&[3], 0.5)], |_, x| project(Var::concat(&[x[0], x[1], x[0]])?)),
        case("add_all", vec![v6(), w6()], |t, x| project(t.add_all(&[x[0], x[1], x[0]])?)),
    ]
}

fn tiny_specs() -> Vec<crate::models::ModelSpec> {
    use crate::models::{AdaptiveRnnSpec, GridModelSpec, ModelSpec, ResidualStackSpec};
    vec![
        ModelSpec::Residual(ResidualStackSpec {
            blocks: 2,
            iterations: 3,
            width: 3,
            input_dim: 2,
            classes: 3,
        }),
        ModelSpec::Grid(GridModelSpec {
            blocks: 2,
            iterations: 2,
            channels: 2,
            size: 4,
            ..GridModelSpec::default()
        }),
        ModelSpec::Rnn(AdaptiveRnnSpec {
            hidden: 3,
            iterations: 3,
            min_len: 2,
            max_len: 2,
            ..AdaptiveRnnSpec::default()
        }),
    ]
}

/// Training losses of tiny models in every block mode, with the sampling
/// noise held fixed so each loss is a deterministic function of the parameters.
pub fn model_suite() -> Vec<SuiteCase> {
    use crate::models::{Model, ParamTag, RunConfig};
    use crate::mode::BlockMode;
    use crate::stochastic::{FixedUniforms, RngStream};

    let mut cases = Vec::new();
    for spec in tiny_specs() {
        let mut model = Model::new(spec, 7).expect("tiny spec is valid");
        // move the halting heads off their constant initialization
        let mut rng = RngStream::new(7, 99);
        for p in model.params_mut().iter_mut().filter(|p| p.tag == ParamTag::Head) {
            for v in &mut p.values {
                *v = 0.6 * rng.normal();
            }
        }
        let example = spec.task().sample(&mut RngStream::new(7, 100));
        let inputs: Vec<(Vec<f64>, Vec<usize>)> = model.params().iter().map(|p| (p.values.clone(), p.shape.clone())).collect();
        for mode in [BlockMode::Relaxed, BlockMode::Discrete, BlockMode::Thresholded, BlockMode::Act] {
            let (model, example) = (model.clone(), example.clone());
            let name = format!("{}_{}", spec.name(), mode);
            cases.push(case(&name, inputs.clone(), move |_, vars| {
                let mut noise = FixedUniforms::new(vec![0.83, 0.27, 0.61, 0.12, 0.45, 0.94, 0.33, 0.71, 0.05]);
                let run = RunConfig {
                    penalty: 0.05,
                    ..RunConfig::new(mode)
                };
                let out = model.forward(vars, &example, &run, &mut noise)?;
                let tau = run.penalty;
                let loss = match mode {
                    BlockMode::Relaxed => crate::train::loss_relaxed(&out, &example.targets, tau)?,
                    BlockMode::Act => crate::train::loss_act(&out, &example.targets, tau)?,
                    BlockMode::Discrete => {
                        // score-function surrogates hold a stopped gradient, so the
                        // differentiable pieces are checked directly
                        let ll = out.log_likelihood(&example.targets)?;
                        let log_q = out.log_q().expect("discrete blocks record log q")?;
                        return out.penalty(tau)?.sub(ll)?.add(log_q.affine(0.7, 0.0));
                    }
                    BlockMode::Thresholded => {
                        let ll = out.log_likelihood(&example.targets)?;
                        return out.penalty(tau)?.sub(ll);
                    }
                };
                Ok(loss.loss)
            }));
        }
    }
    cases
}
