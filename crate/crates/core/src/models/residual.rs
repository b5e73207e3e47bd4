use serde::{Deserialize, Serialize};

use super::{ForwardOutput, ParamStore, ParamTag, RunConfig};
use crate::autodiff::Var;
use crate::blocks::{run_block, HaltingHead, IterationBody, HALTING_BIAS_INIT};
use crate::error::{Error, Result};
use crate::stochastic::{RngStream, UniformSource};

/// Stack of `K` adaptive blocks of `L` residual units `u + W2 tanh(W1 u + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualStackSpec {
    pub blocks: usize,
    pub iterations: usize,
    pub width: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl Default for ResidualStackSpec {
    fn default() -> Self {
        Self {
            blocks: 3,
            iterations: 4,
            width: 16,
            input_dim: 8,
            classes: 4,
        }
    }
}

impl ResidualStackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.iterations == 0 || self.width == 0 || self.input_dim == 0 || self.classes < 2 {
            return Err(Error::InvalidConfig(format!("invalid residual stack {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, k, l) = (self.width, self.blocks, self.iterations);
        self.input_dim * d + d + k * l * (2 * d * d + 2 * d) + k * (l - 1) * (d + 1) + self.classes * d + self.classes
    }

    fn unit_macs(&self) -> u64 {
        (2 * self.width * self.width) as u64
    }

    fn fixed_macs(&self) -> u64 {
        (self.width * (self.input_dim + self.classes)) as u64
    }
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    input: (usize, usize),
    units: Vec<Vec<Unit>>,
    heads: Vec<Vec<Head>>,
    output: (usize, usize),
}

pub(crate) fn build(spec: &ResidualStackSpec, params: &mut ParamStore, rng: &mut RngStream) -> Layout {
    let d = spec.width;
    let input = (
        params.push_scaled("input.weight", &[d, spec.input_dim], 1.0, rng),
        params.push_constant("input.bias", ParamTag::Body, &[d], 0.0),
    );
    let mut units = Vec::new();
    let mut heads = Vec::new();
    for k in 1..=spec.blocks {
        let block_units = (1..=spec.iterations)
            .map(|l| Unit {
                w1: params.push_scaled(format!("block{k}.unit{l}.w1"), &[d, d], 1.0, rng),
                b1: params.push_constant(format!("block{k}.unit{l}.b1"), ParamTag::Body, &[d], 0.0),
                w2: params.push_scaled(format!("block{k}.unit{l}.w2"), &[d, d], 0.25, rng),
                b2: params.push_constant(format!("block{k}.unit{l}.b2"), ParamTag::Body, &[d], 0.0),
            })
            .collect();
        let block_heads = (1..spec.iterations)
            .map(|l| Head {
                weight: params.push_constant(format!("block{k}.head{l}.weight"), ParamTag::Head, &[1, d], 0.0),
                bias: params.push_constant(format!("block{k}.head{l}.bias"), ParamTag::Head, &[1], HALTING_BIAS_INIT),
            })
            .collect();
        units.push(block_units);
        heads.push(block_heads);
    }
    let output = (
        params.push_scaled("output.weight", &[spec.classes, d], 1.0, rng),
        params.push_constant("output.bias", ParamTag::Body, &[spec.classes], 0.0),
    );
    Layout {
        input,
        units,
        heads,
        output,
    }
}

fn apply_unit<'t>(vars: &[Var<'t>], unit: &Unit, u: Var<'t>) -> Result<Var<'t>> {
    let inner = u.linear(vars[unit.w1], vars[unit.b1])?.tanh();
    u.add(inner.linear(vars[unit.w2], vars[unit.b2])?)
}

struct Units<'a, 't> {
    vars: &'a [Var<'t>],
    units: &'a [Unit],
    macs: u64,
}

impl<'t> IterationBody<'t> for Units<'_, 't> {
    fn iterate(&mut self, l: usize, prev: Var<'t>) -> Result<Var<'t>> {
        apply_unit(self.vars, &self.units[l - 1], prev)
    }

    fn macs(&self, _l: usize) -> u64 {
        self.macs
    }
}

fn embed<'t>(vars: &[Var<'t>], layout: &Layout, x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.linear(vars[layout.input.0], vars[layout.input.1])?.tanh())
}

fn classify<'t>(vars: &[Var<'t>], layout: &Layout, h: Var<'t>) -> Result<Var<'t>> {
    Ok(h.linear(vars[layout.output.0], vars[layout.output.1])?.log_softmax())
}

pub(crate) fn forward<'t>(
    spec: &ResidualStackSpec,
    layout: &Layout,
    vars: &[Var<'t>],
    x: Var<'t>,
    run: &RunConfig,
    noise: &mut dyn UniformSource,
) -> Result<ForwardOutput<'t>> {
    let cfg = run.block(spec.iterations);
    let mut h = embed(vars, layout, x)?;
    let mut blocks = Vec::with_capacity(spec.blocks);
    for (units, heads) in layout.units.iter().zip(&layout.heads) {
        let heads: Vec<HaltingHead<'t>> = heads
            .iter()
            .map(|hd| HaltingHead::Vector {
                weight: vars[hd.weight],
                bias: vars[hd.bias],
            })
            .collect();
        let mut body = Units {
            vars,
            units,
            macs: spec.unit_macs(),
        };
        let out = run_block(h, &mut body, &heads, &cfg, noise)?;
        h = out.output;
        blocks.push(out);
    }
    Ok(ForwardOutput {
        log_probs: vec![classify(vars, layout, h)?],
        columns: (0..spec.blocks).collect(),
        blocks,
        fixed_flops: spec.fixed_macs(),
    })
}

/// The same network with one unit per block and no halting machinery.
pub(crate) fn forward_plain<'t>(layout: &Layout, vars: &[Var<'t>], x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let mut h = embed(vars, layout, x)?;
    for units in &layout.units {
        h = apply_unit(vars, &units[0], h)?;
    }
    Ok(vec![classify(vars, layout, h)?])
}
