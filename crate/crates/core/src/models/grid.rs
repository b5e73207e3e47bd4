use serde::{Deserialize, Serialize};

use super::{ForwardOutput, ParamStore, ParamTag, RunConfig};
use crate::autodiff::Var;
use crate::blocks::spatial::{latent_count, run_spatial, ResidualBody};
use crate::blocks::{HaltingHead, HALTING_BIAS_INIT};
use crate::error::{Error, Result};
use crate::models::data::PATTERN_CLASSES;
use crate::stochastic::{RngStream, UniformSource};

/// Convolutional model with per-position adaptive blocks.
///
/// Block `k` (0-based) works on `channels * 2^k` maps of side `size / 2^k`.
/// Blocks after the first are entered through a stride-2 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridModelSpec {
    pub blocks: usize,
    pub iterations: usize,
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
}

impl Default for GridModelSpec {
    fn default() -> Self {
        Self {
            blocks: 3,
            iterations: 3,
            channels: 4,
            size: 16,
            classes: PATTERN_CLASSES,
        }
    }
}

impl GridModelSpec {
    pub fn validate(&self) -> Result<()> {
        let divisible = self.blocks >= 1 && self.size.is_multiple_of(1 << (self.blocks - 1));
        if !divisible || self.iterations == 0 || self.channels == 0 || self.size < 3 {
            return Err(Error::InvalidConfig(format!("invalid grid model {self:?}")));
        }
        if self.classes != PATTERN_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "grid model predicts {PATTERN_CLASSES} pattern classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn block_channels(&self, k: usize) -> usize {
        self.channels << k
    }

    pub fn block_size(&self, k: usize) -> usize {
        self.size >> k
    }

    pub fn param_count(&self) -> usize {
        let l = self.iterations;
        let mut n = 9 * self.channels + self.channels;
        for k in 0..self.blocks {
            let c = self.block_channels(k);
            if k > 0 {
                n += 9 * self.block_channels(k - 1) * c + c;
            }
            n += l * 2 * (9 * c * c + c);
            n += (l - 1) * (9 * c + c + 1);
        }
        let last = self.block_channels(self.blocks - 1);
        n + self.classes * last + self.classes
    }

    /// Latent variables of the whole model under patch size `n`.
    pub fn latent_count(&self, n: usize) -> Result<usize> {
        (0..self.blocks)
            .map(|k| latent_count(n, self.block_size(k), self.block_size(k)))
            .sum()
    }

    /// MACs outside the adaptive blocks: stem, transitions and classifier.
    fn fixed_macs(&self) -> u64 {
        let mut m = 9 * self.channels * self.size * self.size;
        for k in 1..self.blocks {
            let s = self.block_size(k);
            m += 9 * self.block_channels(k - 1) * self.block_channels(k) * s * s;
        }
        (m + self.classes * self.block_channels(self.blocks - 1)) as u64
    }
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    conv1: usize,
    bias1: usize,
    conv2: usize,
    bias2: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    kernel: usize,
    pool_weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    stem: (usize, usize),
    transitions: Vec<(usize, usize)>,
    units: Vec<Vec<Unit>>,
    heads: Vec<Vec<Head>>,
    output: (usize, usize),
}

pub(crate) fn build(spec: &GridModelSpec, params: &mut ParamStore, rng: &mut RngStream) -> Layout {
    let c0 = spec.channels;
    let stem = (
        params.push_scaled("stem.kernel", &[c0, 1, 3, 3], 2.0, rng),
        params.push_constant("stem.bias", ParamTag::Body, &[c0], 0.0),
    );
    let mut transitions = Vec::new();
    let mut units = Vec::new();
    let mut heads = Vec::new();
    for k in 0..spec.blocks {
        let c = spec.block_channels(k);
        let b = k + 1;
        if k > 0 {
            let prev = spec.block_channels(k - 1);
            transitions.push((
                params.push_scaled(format!("block{b}.transition.kernel"), &[c, prev, 3, 3], 2.0, rng),
                params.push_constant(format!("block{b}.transition.bias"), ParamTag::Body, &[c], 0.0),
            ));
        }
        units.push(
            (1..=spec.iterations)
                .map(|l| Unit {
                    conv1: params.push_scaled(format!("block{b}.unit{l}.conv1"), &[c, c, 3, 3], 2.0, rng),
                    bias1: params.push_constant(format!("block{b}.unit{l}.bias1"), ParamTag::Body, &[c], 0.0),
                    conv2: params.push_scaled(format!("block{b}.unit{l}.conv2"), &[c, c, 3, 3], 0.25, rng),
                    bias2: params.push_constant(format!("block{b}.unit{l}.bias2"), ParamTag::Body, &[c], 0.0),
                })
                .collect(),
        );
        heads.push(
            (1..spec.iterations)
                .map(|l| Head {
                    kernel: params.push_constant(format!("block{b}.head{l}.kernel"), ParamTag::Head, &[1, c, 3, 3], 0.0),
                    pool_weight: params.push_constant(format!("block{b}.head{l}.pool_weight"), ParamTag::Head, &[1, c], 0.0),
                    bias: params.push_constant(format!("block{b}.head{l}.bias"), ParamTag::Head, &[1], HALTING_BIAS_INIT),
                })
                .collect(),
        );
    }
    let last = spec.block_channels(spec.blocks - 1);
    let output = (
        params.push_constant("output.weight", ParamTag::Body, &[spec.classes, last], 0.0),
        params.push_constant("output.bias", ParamTag::Body, &[spec.classes], 0.0),
    );
    Layout {
        stem,
        transitions,
        units,
        heads,
        output,
    }
}

fn conv_bias<'t>(vars: &[Var<'t>], (kernel, bias): (usize, usize), u: Var<'t>, stride: usize) -> Result<Var<'t>> {
    u.conv3x3(vars[kernel], stride)?.add_channel_bias(vars[bias])
}

fn unit_residual<'t>(vars: &[Var<'t>], unit: &Unit, u: Var<'t>) -> Result<Var<'t>> {
    let inner = conv_bias(vars, (unit.conv1, unit.bias1), u, 1)?.relu();
    conv_bias(vars, (unit.conv2, unit.bias2), inner, 1)
}

struct Units<'a, 't> {
    vars: &'a [Var<'t>],
    units: &'a [Unit],
    macs: u64,
}

impl<'t> ResidualBody<'t> for Units<'_, 't> {
    fn residual(&mut self, l: usize, u: Var<'t>) -> Result<Var<'t>> {
        unit_residual(self.vars, &self.units[l - 1], u)
    }

    fn macs_per_position(&self, _l: usize) -> u64 {
        self.macs
    }
}

fn block_input<'t>(vars: &[Var<'t>], layout: &Layout, k: usize, u: Var<'t>) -> Result<Var<'t>> {
    if k == 0 {
        Ok(u)
    } else {
        Ok(conv_bias(vars, layout.transitions[k - 1], u, 2)?.relu())
    }
}

fn stem<'t>(vars: &[Var<'t>], layout: &Layout, x: Var<'t>) -> Result<Var<'t>> {
    Ok(conv_bias(vars, layout.stem, x, 1)?.relu())
}

fn classify<'t>(vars: &[Var<'t>], layout: &Layout, u: Var<'t>) -> Result<Var<'t>> {
    Ok(u.global_avg_pool()?
        .linear(vars[layout.output.0], vars[layout.output.1])?
        .log_softmax())
}

pub(crate) fn forward<'t>(
    spec: &GridModelSpec,
    layout: &Layout,
    vars: &[Var<'t>],
    x: Var<'t>,
    run: &RunConfig,
    noise: &mut dyn UniformSource,
) -> Result<ForwardOutput<'t>> {
    let cfg = run.block(spec.iterations);
    let mut u = stem(vars, layout, x)?;
    let mut blocks = Vec::with_capacity(spec.blocks);
    for k in 0..spec.blocks {
        u = block_input(vars, layout, k, u)?;
        let c = spec.block_channels(k) as u64;
        let heads: Vec<HaltingHead<'t>> = layout.heads[k]
            .iter()
            .map(|h| HaltingHead::Grid {
                kernel: vars[h.kernel],
                pool_weight: vars[h.pool_weight],
                bias: vars[h.bias],
            })
            .collect();
        let mut body = Units {
            vars,
            units: &layout.units[k],
            macs: 18 * c * c,
        };
        let out = run_spatial(u, &mut body, &heads, &cfg, run.grouping, noise)?;
        u = out.output;
        blocks.push(out);
    }
    Ok(ForwardOutput {
        log_probs: vec![classify(vars, layout, u)?],
        columns: (0..spec.blocks).collect(),
        blocks,
        fixed_flops: spec.fixed_macs(),
    })
}

pub(crate) fn forward_plain<'t>(spec: &GridModelSpec, layout: &Layout, vars: &[Var<'t>], x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let mut u = stem(vars, layout, x)?;
    for k in 0..spec.blocks {
        u = block_input(vars, layout, k, u)?;
        u = u.add(unit_residual(vars, &layout.units[k][0], u)?)?;
    }
    Ok(vec![classify(vars, layout, u)?])
}
