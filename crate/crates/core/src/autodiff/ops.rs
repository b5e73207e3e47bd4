//! Forward evaluation and vector-Jacobian products for every recorded op.

use super::conv::{self, ConvGeometry};
use super::{numel, Node, NodeId, Op, Tape, Var, PROB_EPS};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    fn unary(&self, op: Op, f: impl FnOnce(&[f64], &[usize]) -> (Vec<f64>, Vec<usize>)) -> Var<'t> {
        let (value, shape, tracked) = self.tape.with_node(self.id, |n| {
            let (v, s) = f(&n.value, &n.shape);
            (v, s, n.tracked)
        });
        self.tape.push(value, shape, op, tracked)
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |v, s| (v.iter().map(|&x| f(x)).collect(), s.to_vec()))
    }

    fn binary_same_shape(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = self.tape.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let v: Vec<f64> = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            Ok((v, a.shape.clone(), a.tracked || b.tracked))
        })?;
        Ok(self.tape.push(out.0, out.1, op, out.2))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    fn with_scalar(
        self,
        s: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let out = self.tape.with_nodes(|nodes| {
            let (x, sv) = (&nodes[self.id], &nodes[s.id]);
            if sv.value.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: x.shape.clone(),
                    right: sv.shape.clone(),
                });
            }
            let k = sv.value[0];
            let v: Vec<f64> = x.value.iter().map(|&a| f(a, k)).collect();
            Ok((v, x.shape.clone(), x.tracked || sv.tracked))
        })?;
        Ok(self.tape.push(out.0, out.1, op, out.2))
    }

    /// Multiplies every element by the scalar variable `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.with_scalar(s, "scale_by", Op::ScaleBy { x: self.id, s: s.id }, |a, k| a * k)
    }

    /// Adds the scalar variable `s` to every element.
    pub fn add_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.with_scalar(s, "add_scalar", Op::AddScalar { x: self.id, s: s.id }, |a, k| a + k)
    }

    /// `x * mul + add` with constant coefficients.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        self.map(Op::Affine { x: self.id, mul }, |a| a * mul + add)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Matrix product of `[m, k]` with `[k, n]`, or matrix-vector product with `[k]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = self.tape.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let mismatch = || Error::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            };
            if a.shape.len() != 2 {
                return Err(mismatch());
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (bk, n, out_shape) = match b.shape.as_slice() {
                [bk] => (*bk, 1, vec![m]),
                [bk, n] => (*bk, *n, vec![m, *n]),
                _ => return Err(mismatch()),
            };
            if bk != k {
                return Err(mismatch());
            }
            let mut v = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a.value[i * k..(i + 1) * k];
                let orow = &mut v[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b.value[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok((v, out_shape, a.tracked || b.tracked, m, k, n))
        })?;
        let (v, shape, tracked, m, k, n) = out;
        Ok(self.tape.push(
            v,
            shape,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    /// `W x + b` for `W: [out, in]`, `x: [in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        weight.matmul(self)?.add(bias)
    }

    /// 3x3 convolution with zero padding of `[C, H, W]` input by an `[O, C, 3, 3]` kernel.
    pub fn conv3x3(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let out = self.tape.with_nodes(|nodes| {
            let (x, k) = (&nodes[self.id], &nodes[kernel.id]);
            let mismatch = || Error::ShapeMismatch {
                op: "conv3x3",
                left: x.shape.clone(),
                right: k.shape.clone(),
            };
            let ([c, h, w], [o, kc, 3, 3]) = (x.shape.as_slice(), k.shape.as_slice()) else {
                return Err(mismatch());
            };
            if c != kc || stride == 0 || *h == 0 || *w == 0 {
                return Err(mismatch());
            }
            let geom = ConvGeometry {
                in_channels: *c,
                out_channels: *o,
                height: *h,
                width: *w,
                stride,
            };
            let v = conv::forward(&geom, &x.value, &k.value);
            Ok((v, geom, x.tracked || k.tracked))
        })?;
        let (v, geom, tracked) = out;
        Ok(self.tape.push(
            v,
            geom.output_shape().to_vec(),
            Op::Conv3x3 {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            tracked,
        ))
    }

    /// Mean over the spatial plane of a `[C, H, W]` map, giving `[C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let [c, h, w] = shape.as_slice() else {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                left: shape.clone(),
                right: vec![],
            });
        };
        let (c, plane) = (*c, h * w);
        Ok(self.unary(
            Op::GlobalAvgPool {
                input: self.id,
                channels: c,
                plane,
            },
            |v, _| {
                let out = (0..c)
                    .map(|i| v[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect();
                (out, vec![c])
            },
        ))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    /// `log(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.map(Op::LogSigmoid(self.id), |x| -softplus(-x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    /// `log(p / (1 - p))` with `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn logit(self) -> Var<'t> {
        self.map(Op::Logit(self.id), |p| {
            let p = clamp_prob(p);
            (p / (1.0 - p)).ln()
        })
    }

    pub fn ln(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |v, _| (vec![v.iter().sum()], vec![1]))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |v, _| {
            (vec![v.iter().sum::<f64>() / v.len() as f64], vec![1])
        })
    }

    pub fn log_softmax(self) -> Var<'t> {
        self.unary(Op::LogSoftmax(self.id), |v, s| (log_softmax(v), s.to_vec()))
    }

    /// `-log softmax(x)[target]` as a scalar.
    pub fn softmax_cross_entropy(self, target: usize) -> Result<Var<'t>> {
        let n = self.numel();
        if target >= n {
            return Err(Error::OutOfSupport {
                value: target,
                max: n.saturating_sub(1),
            });
        }
        Ok(self.unary(Op::SoftmaxCrossEntropy { logits: self.id, target }, |v, _| {
            (vec![-log_softmax(v)[target]], vec![1])
        }))
    }

    /// `max(x, c)` elementwise; `c = 0` is a ReLU.
    pub fn max_const(self, c: f64) -> Var<'t> {
        self.map(Op::MaxConst { x: self.id, c }, move |x| x.max(c))
    }

    pub fn relu(self) -> Var<'t> {
        self.max_const(0.0)
    }

    /// Passes the value through; no adjoint reaches the parent.
    pub fn stop_gradient(self) -> Var<'t> {
        let (v, s) = self.tape.with_node(self.id, |n| (n.value.clone(), n.shape.clone()));
        self.tape.push(v, s, Op::StopGradient, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let n = self.numel();
        if numel(shape) != n {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        Ok(self.unary(Op::Reshape(self.id), |v, _| (v.to_vec(), shape.to_vec())))
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(self, index: usize) -> Result<Var<'t>> {
        let n = self.numel();
        if index >= n {
            return Err(Error::OutOfSupport {
                value: index,
                max: n.saturating_sub(1),
            });
        }
        Ok(self.unary(Op::Pick { x: self.id, index }, |v, _| (vec![v[index]], vec![1])))
    }

    /// Repeats an `[H, W]` plane across `channels`, giving `[channels, H, W]`.
    pub fn tile_channels(self, channels: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "tile_channels",
                left: shape,
                right: vec![channels],
            });
        }
        Ok(self.unary(Op::TileChannels { x: self.id, channels }, |v, s| {
            (v.repeat(channels), vec![channels, s[0], s[1]])
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, H, W]` map.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let out = self.tape.with_nodes(|nodes| {
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let ok = x.shape.len() == 3 && b.value.len() == x.shape[0];
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "add_channel_bias",
                    left: x.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let plane = x.shape[1] * x.shape[2];
            let v: Vec<f64> = x.value.iter().enumerate().map(|(i, &a)| a + b.value[i / plane]).collect();
            Ok((v, x.shape.clone(), plane, x.tracked || b.tracked))
        })?;
        let (v, shape, plane, tracked) = out;
        Ok(self.tape.push(
            v,
            shape,
            Op::ChannelBias {
                x: self.id,
                bias: bias.id,
                plane,
            },
            tracked,
        ))
    }

    /// Averages non-overlapping `n x n` patches of an `[H, W]` plane.
    pub fn patch_mean(self, n: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let ok = shape.len() == 2 && n > 0 && shape[0].is_multiple_of(n) && shape[1].is_multiple_of(n);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "patch_mean",
                left: shape,
                right: vec![n, n],
            });
        }
        let (h, w) = (shape[0], shape[1]);
        let (gh, gw) = (h / n, w / n);
        Ok(self.unary(Op::PatchMean { x: self.id, h, w, n }, |v, _| {
            let mut out = vec![0.0; gh * gw];
            for y in 0..h {
                for x in 0..w {
                    out[(y / n) * gw + x / n] += v[y * w + x];
                }
            }
            let inv = 1.0 / (n * n) as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            (out, vec![gh, gw])
        }))
    }

    /// Inverse layout of [`Var::patch_mean`]: each cell fills an `n x n` patch.
    pub fn patch_expand(self, n: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "patch_expand",
                left: shape,
                right: vec![n, n],
            });
        }
        let (gh, gw) = (shape[0], shape[1]);
        let (h, w) = (gh * n, gw * n);
        Ok(self.unary(Op::PatchExpand { x: self.id, gw, n }, |v, _| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = v[(y / n) * gw + x / n];
                }
            }
            (out, vec![h, w])
        }))
    }

    /// Concatenates flat views into one `[total]` vector.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat",
            left: vec![],
            right: vec![],
        })?;
        for p in parts {
            first.same_tape(p)?;
        }
        let tape = first.tape;
        let (v, tracked) = tape.with_nodes(|nodes| {
            let mut v = Vec::new();
            let mut tracked = false;
            for p in parts {
                v.extend_from_slice(&nodes[p.id].value);
                tracked |= nodes[p.id].tracked;
            }
            (v, tracked)
        });
        let n = v.len();
        Ok(tape.push(v, vec![n], Op::Concat(parts.iter().map(|p| p.id).collect()), tracked))
    }
}

impl Tape {
    /// Sums equally shaped variables.
    pub fn add_all<'t>(&'t self, terms: &[Var<'t>]) -> Result<Var<'t>> {
        let mut iter = terms.iter();
        let mut acc = *iter.next().ok_or(Error::ShapeMismatch {
            op: "add_all",
            left: vec![],
            right: vec![],
        })?;
        for t in iter {
            acc = acc.add(*t)?;
        }
        Ok(acc)
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].tracked {
        return;
    }
    let g = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(g);
}

fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Pushes the adjoint `g` of node `id` into its parents.
pub(crate) fn backprop(id: NodeId, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant | Op::StopGradient => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_scaled(d, g, 1.0));
            accumulate(grads, nodes, *b, |d| add_scaled(d, g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_scaled(d, g, 1.0));
            accumulate(grads, nodes, *b, |d| add_scaled(d, g, -1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::ScaleBy { x, s } => {
            let (xv, k) = (&nodes[*x].value, nodes[*s].value[0]);
            accumulate(grads, nodes, *x, |d| add_scaled(d, g, k));
            accumulate(grads, nodes, *s, |d| {
                d[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            });
        }
        Op::AddScalar { x, s } => {
            accumulate(grads, nodes, *x, |d| add_scaled(d, g, 1.0));
            accumulate(grads, nodes, *s, |d| d[0] += g.iter().sum::<f64>());
        }
        Op::Affine { x, mul } => {
            accumulate(grads, nodes, *x, |d| add_scaled(d, g, *mul));
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            // dA = G B^T
            accumulate(grads, nodes, *a, |d| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        d[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            // dB = A^T G
            accumulate(grads, nodes, *b, |d| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        add_scaled(&mut d[p * n..(p + 1) * n], grow, a_ip);
                    }
                }
            });
        }
        Op::Conv3x3 { input, kernel, geom } => {
            let (gin, gk) = conv::backward(
                geom,
                &nodes[*input].value,
                &nodes[*kernel].value,
                g,
                nodes[*input].tracked,
                nodes[*kernel].tracked,
            );
            if let Some(gin) = gin {
                accumulate(grads, nodes, *input, |d| add_scaled(d, &gin, 1.0));
            }
            if let Some(gk) = gk {
                accumulate(grads, nodes, *kernel, |d| add_scaled(d, &gk, 1.0));
            }
        }
        Op::GlobalAvgPool { input, channels, plane } => {
            let inv = 1.0 / *plane as f64;
            accumulate(grads, nodes, *input, |d| {
                for c in 0..*channels {
                    let gc = g[c] * inv;
                    d[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += gc);
                }
            });
        }
        Op::Sigmoid(x) => accumulate(grads, nodes, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::LogSigmoid(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sigmoid(-xv[i]);
                }
            })
        }
        Op::Tanh(x) => accumulate(grads, nodes, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * (1.0 - out[i] * out[i]);
            }
        }),
        Op::Logit(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    let p = xv[i];
                    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        d[i] += g[i] / (p * (1.0 - p));
                    }
                }
            })
        }
        Op::Log(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / xv[i];
                }
            })
        }
        Op::Exp(x) => accumulate(grads, nodes, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * out[i];
            }
        }),
        Op::Sum(x) => accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let k = g[0] / nodes[*x].value.len() as f64;
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|v| *v += k))
        }
        Op::LogSoftmax(x) => {
            let total: f64 = g.iter().sum();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] - out[i].exp() * total;
                }
            })
        }
        Op::SoftmaxCrossEntropy { logits, target } => {
            let ls = log_softmax(&nodes[*logits].value);
            accumulate(grads, nodes, *logits, |d| {
                for i in 0..d.len() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    d[i] += g[0] * (ls[i].exp() - onehot);
                }
            })
        }
        Op::MaxConst { x, c } => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |d| {
                for i in 0..d.len() {
                    if xv[i] > *c {
                        d[i] += g[i];
                    }
                }
            })
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, |d| add_scaled(d, g, 1.0)),
        Op::Pick { x, index } => accumulate(grads, nodes, *x, |d| d[*index] += g[0]),
        Op::TileChannels { x, channels } => accumulate(grads, nodes, *x, |d| {
            let plane = d.len();
            for c in 0..*channels {
                add_scaled(d, &g[c * plane..(c + 1) * plane], 1.0);
            }
        }),
        Op::ChannelBias { x, bias, plane } => {
            accumulate(grads, nodes, *x, |d| add_scaled(d, g, 1.0));
            accumulate(grads, nodes, *bias, |d| {
                for (c, dc) in d.iter_mut().enumerate() {
                    *dc += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                }
            });
        }
        Op::PatchMean { x, h, w, n } => {
            let gw = w / n;
            let inv = 1.0 / (n * n) as f64;
            accumulate(grads, nodes, *x, |d| {
                for y in 0..*h {
                    for xx in 0..*w {
                        d[y * w + xx] += g[(y / n) * gw + xx / n] * inv;
                    }
                }
            })
        }
        Op::PatchExpand { x, gw, n } => {
            let w = gw * n;
            accumulate(grads, nodes, *x, |d| {
                for (i, gv) in g.iter().enumerate() {
                    let (y, xx) = (i / w, i % w);
                    d[(y / n) * gw + xx / n] += gv;
                }
            })
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[*p].value.len();
                accumulate(grads, nodes, *p, |d| add_scaled(d, &g[offset..offset + len], 1.0));
                offset += len;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.leaf(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![1, 1]);
        assert_eq!(c.value(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.leaf(vec![0.0; 4], &[2, 2]).unwrap();
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0], &[1]).unwrap();
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![0.25]);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        let tape = Tape::new();
        let x = tape.constant(vec![-3.0, 0.0, 2.0], &[3]).unwrap();
        let back = x.sigmoid().logit().value();
        for (a, b) in back.iter().zip([-3.0, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_clamps_extremes() {
        let tape = Tape::new();
        let p = tape.constant(vec![0.0, 1.0], &[2]).unwrap();
        let l = p.logit().value();
        assert!(l.iter().all(|v| v.is_finite()));
        assert!((l[0] + l[1]).abs() < 1e-9);
    }

    #[test]
    fn stop_gradient_freezes_one_branch() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2.0], &[1]).unwrap();
        let y = x.stop_gradient().mul(x).unwrap();
        assert_eq!(y.item(), 4.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![2.0]);
    }

    #[test]
    fn stop_gradient_alone_gives_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2.0], &[1]).unwrap();
        let y = x.stop_gradient().affine(3.0, 1.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![0.0]);
    }

    #[test]
    fn identity_kernel_is_identity_map() {
        let tape = Tape::new();
        let (c, h, w) = (3, 5, 4);
        let input: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(input.clone(), &[c, h, w]).unwrap();
        let mut k = vec![0.0; c * c * 9];
        for i in 0..c {
            k[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        let k = tape.constant(k, &[c, c, 3, 3]).unwrap();
        assert_eq!(x.conv3x3(k, 1).unwrap().value(), input);
    }

    #[test]
    fn patch_roundtrip_of_constant_groups() {
        let tape = Tape::new();
        let g = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let e = g.patch_expand(2).unwrap();
        assert_eq!(e.shape(), vec![4, 4]);
        assert_eq!(e.patch_mean(2).unwrap().value(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let tape = Tape::new();
        let x = tape.constant(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let ce = x.softmax_cross_entropy(1).unwrap().item();
        let ls = x.log_softmax().value();
        assert!((ce + ls[1]).abs() < 1e-14);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let tape = Tape::new();
        let x = tape.constant(vec![-800.0, 0.0, 800.0], &[3]).unwrap();
        let v = x.log_sigmoid().value();
        assert_eq!(v[0], -800.0);
        assert!((v[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn channel_bias_broadcasts_per_channel() {
        let tape = Tape::new();
        let x = tape.zeros(&[2, 1, 2]);
        let b = tape.leaf(vec![1.0, -1.0], &[2]).unwrap();
        let y = x.add_channel_bias(b).unwrap();
        assert_eq!(y.value(), vec![1.0, 1.0, -1.0, -1.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(b), vec![2.0, 2.0]);
    }
}
