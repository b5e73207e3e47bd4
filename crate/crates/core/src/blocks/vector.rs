use super::{BlockConfig, BlockOutput, HaltingHead, HaltingTrace};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mode::BlockMode;
use crate::stochastic::{
    expected_iterations, log_halting_pmf_at, relaxed_bernoulli_from_logit, HaltingDistribution,
    UniformSource,
};

/// Iteration function of a block, supplied by the model.
pub trait IterationBody<'t> {
    /// Computes `u^l` from `u^{l-1}`; `l` is 1-based.
    fn iterate(&mut self, l: usize, prev: Var<'t>) -> Result<Var<'t>>;

    /// Multiply-accumulates of one invocation of iteration `l`.
    fn macs(&self, l: usize) -> u64;
}

fn check_setup(cfg: &BlockConfig, heads: &[HaltingHead<'_>]) -> Result<()> {
    cfg.validate()?;
    if heads.len() + 1 < cfg.max_iterations {
        return Err(Error::InvalidConfig(format!(
            "{} iterations need {} halting heads, got {}",
            cfg.max_iterations,
            cfg.max_iterations - 1,
            heads.len()
        )));
    }
    Ok(())
}

/// `N` over the executed horizon: `h^1 .. h^{E-1}` followed by a forced 1.
fn truncated_expectation<'t>(tape: &'t Tape, h: &[Var<'t>], executed: usize) -> Result<Var<'t>> {
    let mut gates: Vec<Var<'t>> = h[..executed - 1].to_vec();
    gates.push(tape.scalar(1.0));
    expected_iterations(&gates)
}

fn halting_values(h: &[Var<'_>], executed: usize, max: usize) -> Vec<f64> {
    let mut values: Vec<f64> = h[..executed - 1].iter().map(|v| v.item()).collect();
    values.push(if executed < max { h[executed - 1].item() } else { 1.0 });
    values
}

fn one_hot(z: usize) -> Vec<f64> {
    let mut w = vec![0.0; z];
    w[z - 1] = 1.0;
    w
}

fn accumulate<'t>(acc: Option<Var<'t>>, u: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let term = u.scale_by(w)?;
    match acc {
        None => Ok(term),
        Some(a) => a.add(term),
    }
}

/// Runs iterations until a gate fires; shared by the discrete and thresholded modes.
fn run_one_hot<'t>(
    u0: Var<'t>,
    body: &mut dyn IterationBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
    mut fire: impl FnMut(f64) -> bool,
) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<Var<'t>>, usize, u64)> {
    let max = cfg.max_iterations;
    let (mut u, mut flops) = (u0, 0u64);
    let (mut logits, mut h) = (Vec::new(), Vec::new());
    for l in 1..=max {
        u = body.iterate(l, u)?;
        flops += body.macs(l);
        if l == max {
            break;
        }
        let logit = heads[l - 1].logit(u)?;
        flops += heads[l - 1].macs_per_position();
        let hl = logit.sigmoid();
        logits.push(logit);
        h.push(hl);
        if fire(hl.item()) {
            return Ok((u, logits, h, l, flops));
        }
    }
    Ok((u, logits, h, max, flops))
}

fn one_hot_output<'t>(
    mode: BlockMode,
    u0: Var<'t>,
    parts: (Var<'t>, Vec<Var<'t>>, Vec<Var<'t>>, usize, u64),
    cfg: &BlockConfig,
) -> Result<BlockOutput<'t>> {
    let tape = u0.tape();
    let (output, logits, h, z, flops) = parts;
    let max = cfg.max_iterations;
    let log_q = match mode {
        BlockMode::Discrete => Some(log_halting_pmf_at(tape, &logits, z, max)?),
        _ => None,
    };
    let dist = HaltingDistribution::new(mode, halting_values(&h, z, max), one_hot(z))?;
    Ok(BlockOutput {
        output,
        expected_iterations: truncated_expectation(tape, &h, z)?,
        log_q,
        ponder: None,
        trace: HaltingTrace {
            mode,
            latents: vec![dist],
            executed: z,
            realized_iterations: z as f64,
            flops,
            ponder: None,
        },
    })
}

/// Samples `ξ^l ~ Bernoulli(h^l)` and returns `u^z` for the first firing gate.
///
/// Iterations after `z` are never evaluated.
pub fn run_discrete<'t>(
    u0: Var<'t>,
    body: &mut dyn IterationBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
    noise: &mut dyn UniformSource,
) -> Result<BlockOutput<'t>> {
    check_setup(cfg, heads)?;
    let parts = run_one_hot(u0, body, heads, cfg, |h| noise.next_open_uniform() < h)?;
    one_hot_output(BlockMode::Discrete, u0, parts, cfg)
}

/// Halts at the first `h^l > 0.5`. Deterministic, and keeps only the current iterate.
pub fn run_thresholded<'t>(
    u0: Var<'t>,
    body: &mut dyn IterationBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
) -> Result<BlockOutput<'t>> {
    check_setup(cfg, heads)?;
    let parts = run_one_hot(u0, body, heads, cfg, |h| h > 0.5)?;
    one_hot_output(BlockMode::Thresholded, u0, parts, cfg)
}

/// Mixes iterations with stick-breaking weights of Concrete-relaxed gates.
///
/// Execution stops once the remaining stick is at most `δ`; that remainder is
/// assigned to the last executed iteration so the weights still sum to one.
pub fn run_relaxed<'t>(
    u0: Var<'t>,
    body: &mut dyn IterationBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
    noise: &mut dyn UniformSource,
) -> Result<BlockOutput<'t>> {
    check_setup(cfg, heads)?;
    let tape = u0.tape();
    let max = cfg.max_iterations;
    let (mut u, mut flops) = (u0, 0u64);
    let mut h = Vec::new();
    let mut weights = Vec::new();
    let mut stick: Option<Var<'t>> = None;
    let mut acc: Option<Var<'t>> = None;
    let mut executed = max;
    for l in 1..=max {
        u = body.iterate(l, u)?;
        flops += body.macs(l);
        let gate = if l < max {
            let logit = heads[l - 1].logit(u)?;
            flops += heads[l - 1].macs_per_position();
            h.push(logit.sigmoid());
            let eps = noise.next_open_uniform();
            Some(relaxed_bernoulli_from_logit(logit, cfg.temperature, &[eps])?)
        } else {
            None
        };
        let rest = match (gate, stick) {
            (None, _) => None,
            (Some(g), None) => Some(g.one_minus()),
            (Some(g), Some(s)) => Some(s.mul(g.one_minus())?),
        };
        let stop = rest.is_none_or(|r| r.item() <= cfg.clip);
        let w = match (stop, gate, stick) {
            (true, _, Some(s)) => s,
            (true, _, None) => tape.scalar(1.0),
            (false, Some(g), None) => g,
            (false, Some(g), Some(s)) => s.mul(g)?,
            (false, None, _) => unreachable!("the final iteration always stops"),
        };
        acc = Some(accumulate(acc, u, w)?);
        weights.push(w.item());
        if stop {
            executed = l;
            break;
        }
        stick = rest;
    }
    let dist = HaltingDistribution::new(BlockMode::Relaxed, halting_values(&h, executed, max), weights)?;
    Ok(BlockOutput {
        output: acc.expect("at least one iteration runs"),
        expected_iterations: truncated_expectation(tape, &h, executed)?,
        log_q: None,
        ponder: None,
        trace: HaltingTrace {
            mode: BlockMode::Relaxed,
            latents: vec![dist],
            executed,
            realized_iterations: executed as f64,
            flops,
            ponder: None,
        },
    })
}

/// Adaptive Computation Time: halts once cumulative `h` reaches `1 - ε`.
///
/// The halting step receives the remainder `R`; the ponder cost is `ρ = N + R`.
pub fn run_act<'t>(
    u0: Var<'t>,
    body: &mut dyn IterationBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
) -> Result<BlockOutput<'t>> {
    check_setup(cfg, heads)?;
    let tape = u0.tape();
    let max = cfg.max_iterations;
    let (mut u, mut flops) = (u0, 0u64);
    let mut h = Vec::new();
    let mut weights = Vec::new();
    let mut cumulative = 0.0;
    let mut remainder: Option<Var<'t>> = None;
    let mut acc: Option<Var<'t>> = None;
    for l in 1..=max {
        u = body.iterate(l, u)?;
        flops += body.macs(l);
        let hl = if l < max {
            let logit = heads[l - 1].logit(u)?;
            flops += heads[l - 1].macs_per_position();
            let hl = logit.sigmoid();
            h.push(hl);
            hl.item()
        } else {
            1.0
        };
        cumulative += hl;
        if l < max && cumulative < 1.0 - cfg.act_epsilon {
            let w = h[l - 1];
            acc = Some(accumulate(acc, u, w)?);
            weights.push(w.item());
            remainder = Some(match remainder {
                None => w.one_minus(),
                Some(r) => r.sub(w)?,
            });
            continue;
        }
        let r = remainder.unwrap_or_else(|| tape.scalar(1.0));
        let output = accumulate(acc, u, r)?;
        weights.push(r.item());
        let ponder = r.affine(1.0, l as f64);
        let rho = ponder.item();
        let dist = HaltingDistribution::new(BlockMode::Act, halting_values(&h, l, max), weights)?;
        return Ok(BlockOutput {
            output,
            expected_iterations: truncated_expectation(tape, &h, l)?,
            log_q: None,
            ponder: Some(ponder),
            trace: HaltingTrace {
                mode: BlockMode::Act,
                latents: vec![dist],
                executed: l,
                realized_iterations: l as f64,
                flops,
                ponder: Some(rho),
            },
        });
    }
    unreachable!("the final iteration always halts")
}

/// Dispatches on `cfg.mode`; `noise` is consumed only by stochastic modes.
pub fn run_block<'t>(
    u0: Var<'t>,
    body: &mut dyn IterationBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
    noise: &mut dyn UniformSource,
) -> Result<BlockOutput<'t>> {
    match cfg.mode {
        BlockMode::Discrete => run_discrete(u0, body, heads, cfg, noise),
        BlockMode::Thresholded => run_thresholded(u0, body, heads, cfg),
        BlockMode::Relaxed => run_relaxed(u0, body, heads, cfg, noise),
        BlockMode::Act => run_act(u0, body, heads, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{halting_pmf, FixedUniforms, RngStream};

    /// `u^l = u^{l-1} + shift_l`, counting invocations.
    struct ShiftBody {
        shifts: Vec<Vec<f64>>,
        calls: usize,
    }

    impl ShiftBody {
        fn new(len: usize) -> Self {
            let shifts = (0..len)
                .map(|l| vec![1.0 + l as f64, -0.5 * l as f64, (l * l) as f64 * 0.25])
                .collect();
            Self { shifts, calls: 0 }
        }
    }

    impl<'t> IterationBody<'t> for ShiftBody {
        fn iterate(&mut self, l: usize, prev: Var<'t>) -> Result<Var<'t>> {
            self.calls += 1;
            let shift = prev.tape().constant(self.shifts[l - 1].clone(), &[3])?;
            prev.add(shift)
        }

        fn macs(&self, _l: usize) -> u64 {
            3
        }
    }

    fn logit_of(h: f64) -> f64 {
        if h >= 1.0 {
            40.0
        } else if h <= 0.0 {
            -40.0
        } else {
            (h / (1.0 - h)).ln()
        }
    }

    /// Heads that ignore `u` and emit the logit of the given probability.
    fn fixed_heads<'t>(tape: &'t Tape, h: &[f64]) -> Vec<HaltingHead<'t>> {
        h.iter()
            .map(|&p| HaltingHead::Vector {
                weight: tape.leaf(vec![0.0; 3], &[1, 3]).unwrap(),
                bias: tape.leaf(vec![logit_of(p)], &[1]).unwrap(),
            })
            .collect()
    }

    /// Iterates of `ShiftBody` from a zero input.
    fn iterates(len: usize) -> Vec<Vec<f64>> {
        let body = ShiftBody::new(len);
        let mut u = vec![0.0; 3];
        body.shifts
            .iter()
            .map(|s| {
                u.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                u.clone()
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn discrete_all_zero_gates_reach_final() {
        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.0, 0.0, 0.0]);
        let u0 = tape.zeros(&[3]);
        let mut body = ShiftBody::new(4);
        let cfg = BlockConfig::new(4, BlockMode::Discrete);
        let out = run_discrete(u0, &mut body, &heads, &cfg, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(out.trace.executed, 4);
        assert_eq!(body.calls, 4);
        assert_eq!(out.output.value(), iterates(4)[3]);
        assert_eq!(out.trace.weights(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn discrete_certain_halt_at_one() {
        for seed in 0..20 {
            let tape = Tape::new();
            let heads = fixed_heads(&tape, &[1.0, 0.5]);
            let mut body = ShiftBody::new(3);
            let cfg = BlockConfig::new(3, BlockMode::Discrete);
            let out = run_discrete(tape.zeros(&[3]), &mut body, &heads, &cfg, &mut RngStream::new(seed, 0)).unwrap();
            assert_eq!(out.trace.executed, 1);
            assert_eq!(body.calls, 1);
            assert_eq!(out.output.value(), iterates(1)[0]);
        }
    }

    #[test]
    fn discrete_halting_frequencies_match_pmf() {
        let h = [0.3, 0.5];
        let pmf = halting_pmf(&[0.3, 0.5, 1.0]).unwrap();
        let mut counts = [0usize; 3];
        let mut rng = RngStream::new(7, 3);
        let runs = 100_000;
        let cfg = BlockConfig::new(3, BlockMode::Discrete);
        for _ in 0..runs {
            let tape = Tape::new();
            let heads = fixed_heads(&tape, &h);
            let mut body = ShiftBody::new(3);
            let out = run_discrete(tape.zeros(&[3]), &mut body, &heads, &cfg, &mut rng).unwrap();
            assert_eq!(body.calls, out.trace.executed);
            counts[out.trace.executed - 1] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&pmf)
            .map(|(&c, p)| (c as f64 / runs as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn discrete_log_q_matches_pmf() {
        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.0, 1.0]);
        let cfg = BlockConfig::new(3, BlockMode::Discrete);
        let out = run_discrete(tape.zeros(&[3]), &mut ShiftBody::new(3), &heads, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out.trace.executed, 2);
        assert!(out.log_q.unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn thresholded_first_strict_exceedance() {
        let run = |h: &[f64]| {
            let tape = Tape::new();
            let heads = fixed_heads(&tape, h);
            let mut body = ShiftBody::new(h.len() + 1);
            let cfg = BlockConfig::new(h.len() + 1, BlockMode::Thresholded);
            let out = run_thresholded(tape.zeros(&[3]), &mut body, &heads, &cfg).unwrap();
            assert_eq!(body.calls, out.trace.executed);
            assert_eq!(out.output.value(), iterates(h.len() + 1)[out.trace.executed - 1]);
            out.trace.executed
        };
        assert_eq!(run(&[0.3, 0.6, 0.2]), 2);
        assert_eq!(run(&[0.5, 0.2, 0.1]), 4);
        assert_eq!(run(&[0.5, 0.5, 0.5]), 4);
        assert_eq!(run(&[0.51, 0.1]), 1);
    }

    #[test]
    fn relaxed_forced_gates_by_hand() {
        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.5, 0.5]);
        let cfg = BlockConfig {
            clip: 0.0,
            ..BlockConfig::new(3, BlockMode::Relaxed)
        };
        let mut noise = FixedUniforms::new(vec![0.5]);
        let out = run_relaxed(tape.zeros(&[3]), &mut ShiftBody::new(3), &heads, &cfg, &mut noise).unwrap();
        let u = iterates(3);
        let expect: Vec<f64> = (0..3).map(|i| 0.5 * u[0][i] + 0.25 * u[1][i] + 0.25 * u[2][i]).collect();
        assert!(close(&out.output.value(), &expect, 1e-12));
        assert_eq!(out.trace.weights(), &[0.5, 0.25, 0.25]);
        assert!((out.expected_iterations.item() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn relaxed_saturated_returns_first_iterate() {
        let h = 1.0 - 1e-6;
        let cfg = BlockConfig::new(3, BlockMode::Relaxed);
        for i in 0..=200 {
            let eps = 1e-3 + (1.0 - 2e-3) * i as f64 / 200.0;
            let tape = Tape::new();
            let heads = fixed_heads(&tape, &[h, h]);
            let mut noise = FixedUniforms::new(vec![eps]);
            let out = run_relaxed(tape.zeros(&[3]), &mut ShiftBody::new(3), &heads, &cfg, &mut noise).unwrap();
            assert!(close(&out.output.value(), &iterates(1)[0], 1e-3), "eps {eps}");
        }
    }

    #[test]
    fn relaxed_clip_changes_output_by_bounded_amount() {
        let u = iterates(5);
        let max_norm = u
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        for seed in 0..200 {
            let run = |clip: f64| {
                let tape = Tape::new();
                let heads = fixed_heads(&tape, &[0.4, 0.6, 0.7, 0.5]);
                let cfg = BlockConfig {
                    clip,
                    ..BlockConfig::new(5, BlockMode::Relaxed)
                };
                let mut body = ShiftBody::new(5);
                let out = run_relaxed(tape.zeros(&[3]), &mut body, &heads, &cfg, &mut RngStream::new(seed, 9)).unwrap();
                assert_eq!(body.calls, out.trace.executed);
                (out.output.value(), out.trace.executed)
            };
            let (a, ea) = run(0.01);
            let (b, eb) = run(0.0);
            assert!(ea <= eb);
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(diff < 0.02 * max_norm, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn relaxed_weights_sum_to_one() {
        let mut rng = RngStream::new(5, 5);
        for _ in 0..300 {
            let h: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let tape = Tape::new();
            let heads = fixed_heads(&tape, &h);
            let cfg = BlockConfig::new(5, BlockMode::Relaxed);
            let out = run_relaxed(tape.zeros(&[3]), &mut ShiftBody::new(5), &heads, &cfg, &mut rng).unwrap();
            let s: f64 = out.trace.weights().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(out.trace.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn act_hand_traces() {
        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.6]);
        let cfg = BlockConfig::new(2, BlockMode::Act);
        let out = run_act(tape.zeros(&[3]), &mut ShiftBody::new(2), &heads, &cfg).unwrap();
        let w = out.trace.weights();
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        assert!((out.ponder.unwrap().item() - 2.4).abs() < 1e-12);

        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.99, 0.3, 0.3]);
        let cfg = BlockConfig::new(4, BlockMode::Act);
        let mut body = ShiftBody::new(4);
        let out = run_act(tape.zeros(&[3]), &mut body, &heads, &cfg).unwrap();
        assert_eq!(out.trace.weights(), &[1.0]);
        assert_eq!(out.trace.ponder, Some(2.0));
        assert_eq!(body.calls, 1);
    }

    #[test]
    fn act_weights_normalized_and_ponder_bounds_steps() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..1000 {
            let h: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let tape = Tape::new();
            let heads = fixed_heads(&tape, &h);
            let cfg = BlockConfig::new(5, BlockMode::Act);
            let out = run_act(tape.zeros(&[3]), &mut ShiftBody::new(5), &heads, &cfg).unwrap();
            let s: f64 = out.trace.weights().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(out.trace.ponder.unwrap() >= out.trace.realized_iterations);
        }
    }

    #[test]
    fn act_gradient_flows_through_weights() {
        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.3, 0.3]);
        let HaltingHead::Vector { bias, .. } = heads[0] else { unreachable!() };
        let cfg = BlockConfig::new(3, BlockMode::Act);
        let out = run_act(tape.zeros(&[3]), &mut ShiftBody::new(3), &heads, &cfg).unwrap();
        let g = tape.backward(out.output.sum()).unwrap();
        assert!(g.wrt(bias)[0].abs() > 0.0);
    }

    #[test]
    fn saturated_modes_agree() {
        let mut rng = RngStream::new(2, 2);
        for trial in 0..200 {
            let h: Vec<f64> = (0..3)
                .map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 })
                .collect();
            let logits: Vec<f64> = h.iter().map(|&p| if p > 0.5 { 25.0 } else { -25.0 }).collect();
            let mut outputs = Vec::new();
            for mode in [BlockMode::Discrete, BlockMode::Thresholded, BlockMode::Relaxed] {
                let tape = Tape::new();
                let heads: Vec<_> = logits
                    .iter()
                    .map(|&b| HaltingHead::Vector {
                        weight: tape.leaf(vec![0.0; 3], &[1, 3]).unwrap(),
                        bias: tape.leaf(vec![b], &[1]).unwrap(),
                    })
                    .collect();
                let cfg = BlockConfig::new(4, mode);
                let mut noise = rng.derive(trial);
                let out = run_block(tape.zeros(&[3]), &mut ShiftBody::new(4), &heads, &cfg, &mut noise).unwrap();
                outputs.push(out.output.value());
            }
            assert!(close(&outputs[0], &outputs[1], 1e-3), "{h:?}");
            assert!(close(&outputs[0], &outputs[2], 1e-3), "{h:?}");
        }
    }

    #[test]
    fn missing_heads_rejected() {
        let tape = Tape::new();
        let heads = fixed_heads(&tape, &[0.5]);
        let cfg = BlockConfig::new(4, BlockMode::Thresholded);
        assert!(run_thresholded(tape.zeros(&[3]), &mut ShiftBody::new(4), &heads, &cfg).is_err());
    }
}
