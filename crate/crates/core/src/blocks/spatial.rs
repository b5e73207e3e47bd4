//! Per-position adaptive computation over `[C, H, W]` feature maps.
//!
//! Every spatial position (or every `n x n` patch of positions when latents
//! are grouped) has its own halting time. A residual unit is applied as
//! `u + f(u) · a`, where `a` is the active mask of the position, so halted
//! positions carry their features unchanged. FLOPs are charged only for
//! active positions.

use super::{BlockConfig, BlockOutput, HaltingHead, HaltingTrace};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mode::BlockMode;
use crate::stochastic::{relaxed_bernoulli_from_logit, stick_break, HaltingDistribution, UniformSource};

/// Residual branch of a spatial block.
pub trait ResidualBody<'t> {
    /// `f^l(u)`, with the same `[C, H, W]` shape as `u`.
    fn residual(&mut self, l: usize, u: Var<'t>) -> Result<Var<'t>>;

    /// Multiply-accumulates of `f^l` per spatial position.
    fn macs_per_position(&self, l: usize) -> u64;
}

/// Patch size actually used on an `h x w` map: `n` capped at the map size.
pub fn effective_group(n: usize, height: usize, width: usize) -> Result<usize> {
    let g = n.min(height).min(width);
    if g == 0 || !height.is_multiple_of(g) || !width.is_multiple_of(g) {
        return Err(Error::InvalidConfig(format!(
            "patch size {n} does not tile a {height}x{width} map"
        )));
    }
    Ok(g)
}

/// Number of halting latents of one block under grouping `n`.
pub fn latent_count(n: usize, height: usize, width: usize) -> Result<usize> {
    let g = effective_group(n, height, width)?;
    Ok((height / g) * (width / g))
}

struct Layout {
    channels: usize,
    n: usize,
    groups: [usize; 2],
}

impl Layout {
    fn count(&self) -> usize {
        self.groups[0] * self.groups[1]
    }

    fn constant<'t>(&self, tape: &'t Tape, values: Vec<f64>) -> Result<Var<'t>> {
        tape.constant(values, &self.groups)
    }

    /// `[gh, gw]` group map to a `[C, H, W]` multiplier.
    fn expand<'t>(&self, map: Var<'t>) -> Result<Var<'t>> {
        map.patch_expand(self.n)?.tile_channels(self.channels)
    }
}

fn indicator(flags: impl Iterator<Item = bool>) -> Vec<f64> {
    flags.map(|f| if f { 1.0 } else { 0.0 }).collect()
}

/// Runs a per-position block; `group` is the requested patch size `n`.
pub fn run_spatial<'t>(
    u0: Var<'t>,
    body: &mut dyn ResidualBody<'t>,
    heads: &[HaltingHead<'t>],
    cfg: &BlockConfig,
    group: usize,
    noise: &mut dyn UniformSource,
) -> Result<BlockOutput<'t>> {
    cfg.validate()?;
    let max = cfg.max_iterations;
    if heads.len() + 1 < max {
        return Err(Error::InvalidConfig(format!(
            "{max} iterations need {} halting heads, got {}",
            max - 1,
            heads.len()
        )));
    }
    let shape = u0.shape();
    let [channels, height, width] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "run_spatial",
            left: shape,
            right: vec![],
        });
    };
    let n = effective_group(group, height, width)?;
    let layout = Layout {
        channels,
        n,
        groups: [height / n, width / n],
    };
    let count = layout.count();
    let per_group = (n * n) as u64;
    let tape = u0.tape();
    let mode = cfg.mode;

    let mut u = u0;
    let mut flops = 0u64;
    // per group: iteration at which the latent stopped (0 while running)
    let mut stopped = vec![0usize; count];
    let mut halting: Vec<Vec<f64>> = vec![Vec::new(); count];
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); count];
    let mut logit_maps: Vec<Var<'t>> = Vec::new();
    let mut h_maps: Vec<Var<'t>> = Vec::new();
    let mut acc: Option<Var<'t>> = None;
    // relaxed remaining stick, ACT remainder
    let mut stick = layout.constant(tape, vec![1.0; count])?;
    let mut cumulative = vec![0.0; count];
    let mut executed = 0;

    for l in 1..=max {
        let alive: Vec<bool> = stopped.iter().map(|&s| s == 0).collect();
        let active = alive.iter().filter(|&&a| a).count() as u64;
        if active == 0 {
            break;
        }
        executed = l;
        let mask = match mode {
            BlockMode::Relaxed => stick,
            _ => layout.constant(tape, indicator(alive.iter().copied()))?,
        };
        let f = body.residual(l, u)?;
        u = u.add(f.mul(layout.expand(mask)?)?)?;
        flops += active * per_group * body.macs_per_position(l);

        let h_map = if l < max {
            let logits = heads[l - 1].logit(u)?.patch_mean(n)?;
            flops += active * per_group * heads[l - 1].macs_per_position();
            logit_maps.push(logits);
            logits.sigmoid()
        } else {
            layout.constant(tape, vec![1.0; count])?
        };
        h_maps.push(h_map);
        let h = h_map.value();
        for g in (0..count).filter(|&g| alive[g]) {
            halting[g].push(h[g]);
        }

        match mode {
            BlockMode::Discrete | BlockMode::Thresholded => {
                for g in (0..count).filter(|&g| alive[g]) {
                    let fire = l == max
                        || match mode {
                            BlockMode::Discrete => noise.next_open_uniform() < h[g],
                            _ => h[g] > 0.5,
                        };
                    weights[g].push(if fire { 1.0 } else { 0.0 });
                    if fire {
                        stopped[g] = l;
                    }
                }
            }
            BlockMode::Relaxed => {
                let gate = if l < max {
                    let eps: Vec<f64> = (0..count).map(|_| noise.next_open_uniform()).collect();
                    relaxed_bernoulli_from_logit(logit_maps[l - 1], cfg.temperature, &eps)?
                } else {
                    layout.constant(tape, vec![1.0; count])?
                };
                let rest = stick.mul(gate.one_minus())?.value();
                let stop: Vec<bool> = (0..count)
                    .map(|g| alive[g] && (l == max || rest[g] <= cfg.clip))
                    .collect();
                let cont: Vec<bool> = (0..count).map(|g| alive[g] && !stop[g]).collect();
                let cont_mask = layout.constant(tape, indicator(cont.iter().copied()))?;
                let stop_mask = layout.constant(tape, indicator(stop.iter().copied()))?;
                let w = stick.mul(gate)?.mul(cont_mask)?.add(stick.mul(stop_mask)?)?;
                acc = Some(accumulate(acc, &layout, u, w)?);
                let wv = w.value();
                for g in (0..count).filter(|&g| alive[g]) {
                    weights[g].push(wv[g]);
                    if stop[g] {
                        stopped[g] = l;
                    }
                }
                stick = stick.mul(gate.one_minus())?.mul(cont_mask)?;
            }
            BlockMode::Act => {
                let cont: Vec<bool> = (0..count)
                    .map(|g| {
                        if alive[g] {
                            cumulative[g] += h[g];
                        }
                        alive[g] && l < max && cumulative[g] < 1.0 - cfg.act_epsilon
                    })
                    .collect();
                let halt: Vec<bool> = (0..count).map(|g| alive[g] && !cont[g]).collect();
                let cont_mask = layout.constant(tape, indicator(cont.iter().copied()))?;
                let halt_mask = layout.constant(tape, indicator(halt.iter().copied()))?;
                let h_cont = h_map.mul(cont_mask)?;
                let w = h_cont.add(stick.mul(halt_mask)?)?;
                acc = Some(accumulate(acc, &layout, u, w)?);
                let wv = w.value();
                for g in (0..count).filter(|&g| alive[g]) {
                    weights[g].push(wv[g]);
                    if halt[g] {
                        stopped[g] = l;
                    }
                }
                stick = stick.sub(h_cont)?;
            }
        }
    }

    // the executed horizon of each latent ends with a forced gate of 1
    let last: Vec<usize> = stopped.clone();
    let gates: Vec<Var<'t>> = h_maps
        .iter()
        .enumerate()
        .map(|(i, &hm)| {
            let ends = layout.constant(tape, indicator(last.iter().map(|&s| i + 1 >= s)))?;
            hm.mul(ends.one_minus())?.add(ends)
        })
        .collect::<Result<_>>()?;
    let pmf = stick_break(&gates)?;
    let terms: Vec<Var<'t>> = pmf.iter().enumerate().map(|(i, p)| p.affine((i + 1) as f64, 0.0)).collect();
    let n_map = tape.add_all(&terms)?;
    let expected_iterations = n_map.mean();

    let log_q = if mode == BlockMode::Discrete {
        let mut parts = Vec::new();
        for (i, logits) in logit_maps.iter().enumerate() {
            let l = i + 1;
            let before = layout.constant(tape, indicator(last.iter().map(|&z| l < z)))?;
            let at = layout.constant(tape, indicator(last.iter().map(|&z| l == z && z < max)))?;
            let term = logits.neg().log_sigmoid().mul(before)?.add(logits.log_sigmoid().mul(at)?)?;
            parts.push(term.sum());
        }
        Some(if parts.is_empty() {
            tape.scalar(0.0)
        } else {
            tape.add_all(&parts)?
        })
    } else {
        None
    };

    let (output, ponder) = match mode {
        BlockMode::Discrete | BlockMode::Thresholded => (u, None),
        BlockMode::Relaxed => (acc.expect("at least one iteration runs"), None),
        BlockMode::Act => {
            let steps = layout.constant(tape, last.iter().map(|&s| s as f64).collect())?;
            (acc.expect("at least one iteration runs"), Some(stick.add(steps)?.mean()))
        }
    };

    let mut latents = Vec::with_capacity(count);
    for g in 0..count {
        let mut hg = std::mem::take(&mut halting[g]);
        if last[g] == max {
            *hg.last_mut().expect("every latent runs at least once") = 1.0;
        }
        latents.push(HaltingDistribution::new(mode, hg, std::mem::take(&mut weights[g]))?);
    }
    let realized = last.iter().sum::<usize>() as f64 / count as f64;
    Ok(BlockOutput {
        output,
        expected_iterations,
        log_q,
        ponder,
        trace: HaltingTrace {
            mode,
            latents,
            executed,
            realized_iterations: realized,
            flops,
            ponder: ponder.map(|p| p.item()),
        },
    })
}

fn accumulate<'t>(acc: Option<Var<'t>>, layout: &Layout, u: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let term = u.mul(layout.expand(w)?)?;
    match acc {
        None => Ok(term),
        Some(a) => a.add(term),
    }
}
