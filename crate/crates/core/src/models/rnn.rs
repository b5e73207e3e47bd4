use serde::{Deserialize, Serialize};

use super::{ForwardOutput, ParamStore, ParamTag, RunConfig};
use crate::autodiff::Var;
use crate::blocks::{run_block, HaltingHead, IterationBody, HALTING_BIAS_INIT};
use crate::error::{Error, Result};
use crate::stochastic::{RngStream, UniformSource};

/// Recurrent network that ponders each timestep with an adaptive block.
///
/// One iteration is `u^l = tanh(W_x x + w_f [l = 1] + W_h u^{l-1} + b)`, the
/// halting probability is `σ(w · u^l + b_h)` with one head shared by every
/// iteration, and the block output both feeds the next timestep and the
/// per-timestep classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveRnnSpec {
    pub hidden: usize,
    pub input_dim: usize,
    pub iterations: usize,
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for AdaptiveRnnSpec {
    fn default() -> Self {
        Self {
            hidden: 16,
            input_dim: 2,
            iterations: 4,
            classes: 2,
            min_len: 8,
            max_len: 16,
        }
    }
}

impl AdaptiveRnnSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.input_dim == 2
            && self.classes == 2
            && self.iterations > 0
            && self.min_len >= 1
            && self.min_len <= self.max_len;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid rnn {self:?}: parity needs input_dim = 2, classes = 2 and 1 <= min_len <= max_len"
            )))
        }
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        h * self.input_dim + h + h * h + h + h + 1 + self.classes * h + self.classes
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    w_x: usize,
    w_first: usize,
    w_h: usize,
    bias: usize,
    head: (usize, usize),
    output: (usize, usize),
}

pub(crate) fn build(spec: &AdaptiveRnnSpec, params: &mut ParamStore, rng: &mut RngStream) -> Layout {
    let h = spec.hidden;
    Layout {
        w_x: params.push_scaled("transition.w_x", &[h, spec.input_dim], 1.0, rng),
        w_first: params.push_scaled("transition.w_first", &[h, 1], 1.0, rng),
        w_h: params.push_scaled("transition.w_h", &[h, h], 1.0, rng),
        bias: params.push_constant("transition.bias", ParamTag::Body, &[h], 0.0),
        head: (
            params.push_constant("head.weight", ParamTag::Head, &[1, h], 0.0),
            params.push_constant("head.bias", ParamTag::Head, &[1], HALTING_BIAS_INIT),
        ),
        output: (
            params.push_scaled("output.weight", &[spec.classes, h], 1.0, rng),
            params.push_constant("output.bias", ParamTag::Body, &[spec.classes], 0.0),
        ),
    }
}

struct Transition<'a, 't> {
    vars: &'a [Var<'t>],
    layout: &'a Layout,
    /// `W_x x + b` for the current timestep.
    drive: Var<'t>,
    macs: u64,
}

impl<'t> Transition<'_, 't> {
    fn step(&self, first: bool, prev: Var<'t>) -> Result<Var<'t>> {
        let mut pre = self.drive.add(self.vars[self.layout.w_h].matmul(prev)?)?;
        if first {
            pre = pre.add(self.vars[self.layout.w_first].reshape(&[prev.numel()])?)?;
        }
        Ok(pre.tanh())
    }
}

impl<'t> IterationBody<'t> for Transition<'_, 't> {
    fn iterate(&mut self, l: usize, prev: Var<'t>) -> Result<Var<'t>> {
        self.step(l == 1, prev)
    }

    fn macs(&self, _l: usize) -> u64 {
        self.macs
    }
}

fn timesteps<'t>(spec: &AdaptiveRnnSpec, x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != spec.input_dim || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "rnn input",
            left: shape,
            right: vec![0, spec.input_dim],
        });
    }
    let values = x.value();
    let tape = x.tape();
    values
        .chunks(spec.input_dim)
        .map(|c| tape.constant(c.to_vec(), &[spec.input_dim]))
        .collect()
}

fn emit<'t>(vars: &[Var<'t>], layout: &Layout, s: Var<'t>) -> Result<Var<'t>> {
    Ok(s.linear(vars[layout.output.0], vars[layout.output.1])?.log_softmax())
}

pub(crate) fn forward<'t>(
    spec: &AdaptiveRnnSpec,
    layout: &Layout,
    vars: &[Var<'t>],
    x: Var<'t>,
    run: &RunConfig,
    noise: &mut dyn UniformSource,
) -> Result<ForwardOutput<'t>> {
    let cfg = run.block(spec.iterations);
    let steps = timesteps(spec, x)?;
    let head = HaltingHead::Vector {
        weight: vars[layout.head.0],
        bias: vars[layout.head.1],
    };
    let heads = vec![head; spec.iterations.saturating_sub(1)];
    let mut s = x.tape().zeros(&[spec.hidden]);
    let mut log_probs = Vec::with_capacity(steps.len());
    let mut blocks = Vec::with_capacity(steps.len());
    for xt in &steps {
        let mut body = Transition {
            vars,
            layout,
            drive: xt.linear(vars[layout.w_x], vars[layout.bias])?,
            macs: (spec.hidden * spec.hidden) as u64,
        };
        let out = run_block(s, &mut body, &heads, &cfg, noise)?;
        s = out.output;
        log_probs.push(emit(vars, layout, s)?);
        blocks.push(out);
    }
    let per_step = (spec.hidden * (spec.input_dim + spec.classes)) as u64;
    Ok(ForwardOutput {
        log_probs,
        columns: vec![0; steps.len()],
        blocks,
        fixed_flops: per_step * steps.len() as u64,
    })
}

/// Vanilla recurrent network: one transition per timestep.
pub(crate) fn forward_plain<'t>(
    spec: &AdaptiveRnnSpec,
    layout: &Layout,
    vars: &[Var<'t>],
    x: Var<'t>,
) -> Result<Vec<Var<'t>>> {
    let mut s = x.tape().zeros(&[spec.hidden]);
    let mut out = Vec::new();
    for xt in timesteps(spec, x)? {
        let t = Transition {
            vars,
            layout,
            drive: xt.linear(vars[layout.w_x], vars[layout.bias])?,
            macs: 0,
        };
        s = t.step(true, s)?;
        out.push(emit(vars, layout, s)?);
    }
    Ok(out)
}
