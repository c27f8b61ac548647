//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node whose inputs precede it, so node order is
//! a topological order and backward is a single reverse sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::params::{ParamId, ParamStore};
use crate::precision;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnConfig {
    pub eps: f32,
    /// Weight of the old value in the running-stat moving average.
    pub momentum: f32,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        geom: PoolGeom,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f32>,
        probs: Vec<f32>,
    },
    QuantizeF16(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of every tape node with respect to the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects an NCHW tensor"),
        }),
    }
}

fn extent(
    op: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    match kernels::output_extent(input, kernel, stride, padding) {
        Some(e) if e > 0 => Ok(e),
        _ => Err(Error::EmptyOutput {
            op,
            input,
            kernel,
            stride,
            padding,
        }),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: impl IntoIterator<Item = f32>, len: usize) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => {
            let v: Vec<f32> = g.into_iter().collect();
            debug_assert_eq!(v.len(), len);
            *slot = Some(v);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node recorded so far, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records the working copy of a parameter as a gradient-tracked leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value.clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * s).with_dtype(DType::F32);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + s).with_dtype(DType::F32);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// 2-D convolution of an NCHW input with an OIHW weight, no bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let [n, c, h, wd] = shape4(x, "conv2d")?;
        let [o, i, kh, kw] = shape4(w, "conv2d weight")?;
        if c != i {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: i,
                actual: c,
            });
        }
        let geom = ConvGeom {
            batch: n,
            in_c: c,
            in_h: h,
            in_w: wd,
            out_c: o,
            k_h: kh,
            k_w: kw,
            stride,
            pad: padding,
            out_h: extent("conv2d", h, kh, stride.0, padding.0)?,
            out_w: extent("conv2d", wd, kw, stride.1, padding.1)?,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data());
        let t = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            &[input, weight],
        ))
    }

    pub fn pool2d(
        &mut self,
        kind: PoolKind,
        input: Var,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [n, c, h, w] = shape4(x, "pool2d")?;
        let op_name = match kind {
            PoolKind::Max => "max_pool2d",
            PoolKind::Avg => "avg_pool2d",
        };
        let geom = PoolGeom {
            planes: n * c,
            in_h: h,
            in_w: w,
            k,
            stride,
            pad: padding,
            out_h: extent(op_name, h, k, stride, padding)?,
            out_w: extent(op_name, w, k, stride, padding)?,
        };
        let shape = vec![n, c, geom.out_h, geom.out_w];
        let (t, op) = match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool_forward(&geom, x.data());
                (
                    Tensor::new(shape, out)?,
                    Op::MaxPool {
                        input,
                        geom,
                        argmax,
                    },
                )
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(&geom, x.data());
                (Tensor::new(shape, out)?, Op::AvgPool { input, geom })
            }
        };
        Ok(self.push(t, op, &[input]))
    }

    /// Batch normalization over the channel axis of an `(N, C, ...)` input.
    /// Training mode normalizes with batch statistics and folds them into
    /// `stats`; evaluation mode normalizes with `stats`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.rank() < 2 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "batch_norm expects (N, C, ...)".into(),
            });
        }
        let n = x.shape()[0];
        let c = x.shape()[1];
        let spatial: usize = x.shape()[2..].iter().product();
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        for (t, _) in [(g, "gamma"), (b, "beta")] {
            if t.numel() != c {
                return Err(Error::ChannelMismatch {
                    op: "batch_norm",
                    expected: c,
                    actual: t.numel(),
                });
            }
        }
        if stats.channels() != c {
            return Err(Error::ChannelMismatch {
                op: "batch_norm running stats",
                expected: c,
                actual: stats.channels(),
            });
        }
        let batch_stats = mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let (m, v) = kernels::channel_stats(x.data(), n, c, spatial);
            let mo = cfg.momentum;
            for ch in 0..c {
                stats.mean[ch] = mo * stats.mean[ch] + (1.0 - mo) * m[ch];
                stats.var[ch] = mo * stats.var[ch] + (1.0 - mo) * v[ch];
            }
            (m, v)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let (y, xhat, inv_std) = kernels::batch_norm_apply(
            x.data(),
            n,
            c,
            spatial,
            &mean,
            &var,
            g.data(),
            b.data(),
            cfg.eps,
        );
        let t = Tensor::new(x.shape().to_vec(), y)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// `input (N, in) x weight (out, in)^T + bias (out)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (n, d_in) = match *x.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "dense expects (N, features)".into(),
                })
            }
        };
        let d_out = match *w.shape() {
            [o, i] if i == d_in => o,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "dense",
                    left: x.shape().to_vec(),
                    right: w.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; n * d_out];
        kernels::gemm(
            n,
            d_in,
            d_out,
            x.data(),
            false,
            w.data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = bias {
            let bt = &self.nodes[b.0].value;
            if bt.numel() != d_out {
                return Err(Error::ShapeMismatch {
                    op: "dense bias",
                    left: vec![d_out],
                    right: bt.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(bt.data()) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(vec![n, d_out], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [n, c, h, w] = shape4(x, "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f32> = x
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[input.0].value.clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(input), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.nodes[input.0]
            .value
            .data()
            .iter()
            .map(|&v| v as f64)
            .sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.nodes[input.0].value.data();
        let s: f64 = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean(input), &[input])
    }

    /// Batch-mean cross entropy `-sum_i target_i * log softmax(z)_i` of
    /// `(N, K)` logits against a dense `(N, K)` target distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if z.rank() != 2 || z.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: z.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        if z.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let (n, k) = (z.shape()[0], z.shape()[1]);
        if k == 0 {
            return Err(Error::InvalidShape {
                shape: z.shape().to_vec(),
                reason: "softmax over an empty axis".into(),
            });
        }
        let logp = kernels::log_softmax_rows(z.data(), k);
        let total: f64 = logp
            .iter()
            .zip(target.data())
            .map(|(&lp, &t)| {
                if t == 0.0 {
                    0.0
                } else {
                    -(t as f64) * lp as f64
                }
            })
            .sum();
        let probs = logp.iter().map(|&lp| lp.exp()).collect();
        let t = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            t,
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Rounds values to binary16; the backward pass rounds the incoming
    /// gradient the same way, emulating half-precision gradients.
    pub fn quantize_f16(&mut self, input: Var) -> Var {
        let t = self.nodes[input.0].value.to_f16();
        self.push(t, Op::QuantizeF16(input), &[input])
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backward sweep seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, loss: Var, seed: f32) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Runs backward from `loss` (seeded with `seed`) and accumulates the
    /// gradients of parameter leaves into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore, seed: f32) -> Result<()> {
        let grads = self.backward_scaled(loss, seed)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let p = store.get_mut(id);
                match &grads.grads[i] {
                    Some(g) => p.accumulate_grad(g),
                    None => p.accumulate_grad(&vec![0.0; node.value.numel()]),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], g.iter().copied(), len(v));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().copied(), len(*a));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|x| -x), len(*b));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(
                        &mut grads[a.0],
                        g.iter().zip(val(*b)).map(|(x, y)| x * y),
                        len(*a),
                    );
                }
                if self.wants(*b) {
                    accumulate(
                        &mut grads[b.0],
                        g.iter().zip(val(*a)).map(|(x, y)| x * y),
                        len(*b),
                    );
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.iter().map(|x| x * s), len(*a));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.iter().copied(), len(*a));
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(
                    &mut grads[a.0],
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }),
                    len(*a),
                );
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (gi, gw) = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(gi) = gi {
                    accumulate(&mut grads[input.0], gi, len(*input));
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[weight.0], gw, len(*weight));
                }
            }
            Op::MaxPool {
                input,
                geom,
                argmax,
            } => {
                let gi = kernels::max_pool_backward(geom, argmax, g);
                accumulate(&mut grads[input.0], gi, len(*input));
            }
            Op::AvgPool { input, geom } => {
                let gi = kernels::avg_pool_backward(geom, g);
                accumulate(&mut grads[input.0], gi, len(*input));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.nodes[input.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial = shape[2..].iter().product();
                let (dx, dg, db) = kernels::batch_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    val(*gamma),
                    n,
                    c,
                    spatial,
                    *batch_stats,
                );
                if self.wants(*input) {
                    accumulate(&mut grads[input.0], dx, len(*input));
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], dg, c);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], db, c);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[input.0].value.shape();
                let (n, d_in) = (xs[0], xs[1]);
                let d_out = self.nodes[weight.0].value.shape()[0];
                if self.wants(*input) {
                    let mut gi = vec![0.0; n * d_in];
                    kernels::gemm(n, d_out, d_in, g, false, val(*weight), false, &mut gi, 0.0);
                    accumulate(&mut grads[input.0], gi, n * d_in);
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; d_out * d_in];
                    kernels::gemm(d_out, n, d_in, g, true, val(*input), false, &mut gw, 0.0);
                    accumulate(&mut grads[weight.0], gw, d_out * d_in);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut gb = vec![0.0f32; d_out];
                    for row in g.chunks(d_out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[b.0], gb, d_out);
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f32;
                accumulate(
                    &mut grads[a.0],
                    g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, hw)),
                    len(*a),
                );
            }
            Op::Sum(a) => {
                let n = len(*a);
                accumulate(&mut grads[a.0], std::iter::repeat_n(g[0], n), n);
            }
            Op::Mean(a) => {
                let n = len(*a);
                accumulate(&mut grads[a.0], std::iter::repeat_n(g[0] / n as f32, n), n);
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let n = self.nodes[logits.0].value.shape()[0] as f32;
                let scale = g[0] / n;
                accumulate(
                    &mut grads[logits.0],
                    probs.iter().zip(target).map(|(p, t)| (p - t) * scale),
                    len(*logits),
                );
            }
            Op::QuantizeF16(a) => {
                accumulate(
                    &mut grads[a.0],
                    g.iter().map(|&d| precision::round_f16(d)),
                    len(*a),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
        let b = tape.constant(Tensor::from_slice(&[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let r = tape.constant(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(r);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(Tensor::from_slice(&[0.3, -7.5, 1e-8]));
        let y = tape.scale(x, 1.0);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn strided_pointwise_conv_subsamples() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, (2, 2), (0, 0)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv_rejects_empty_output_and_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, (1, 1), (0, 0)),
            Err(Error::EmptyOutput { .. })
        ));
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(
            tape.conv2d(x, w2, (1, 1), (0, 0)),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.pool2d(PoolKind::Max, x, 2, 2, 0).unwrap();
        let a = tape.pool2d(PoolKind::Avg, x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        assert_eq!(tape.value(a).data(), &[2.5]);
        assert!(tape.pool2d(PoolKind::Max, x, 3, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_zero_gamma_outputs_beta() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..16).map(|v| (v as f32).sin() * 3.0).collect();
        let x = tape.constant(t(&[2, 2, 2, 2], &data));
        let g = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(t(&[2], &[0.5, -1.5]));
        let mut stats = RunningStats::new(2);
        let y = tape
            .batch_norm(x, g, b, &mut stats, Mode::Train, BnConfig::default())
            .unwrap();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(v, [0.5, -1.5][ch]);
        }
    }

    #[test]
    fn batch_norm_fixed_point_on_standardized_input() {
        // per channel: values {-1, 1} repeated, mean 0 and biased variance 1
        let data: Vec<f32> = (0..32)
            .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 })
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 2, 4], &data));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let y = tape
            .batch_norm(x, g, b, &mut stats, Mode::Train, BnConfig::default())
            .unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-5);
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_train_mode() {
        let data: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 2], &data));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        tape.batch_norm(x, g, b, &mut stats, Mode::Eval, BnConfig::default())
            .unwrap();
        assert_eq!(stats, RunningStats::new(2));
        tape.batch_norm(x, g, b, &mut stats, Mode::Train, BnConfig::default())
            .unwrap();
        // channel 0 holds 0,2,4,6: mean 3, biased var 5
        assert!((stats.mean[0] - 0.3).abs() < 1e-6);
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-6);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape
            .batch_norm(x, bad, b, &mut stats, Mode::Train, BnConfig::default())
            .is_err());
    }

    #[test]
    fn linear_loss_gradient_is_the_constant() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_slice(&[0.5, -1.0, 2.0]), true);
        let x = tape.constant(Tensor::from_slice(&[3.0, 4.0, 5.0]));
        let p = tape.leaf(Tensor::from_slice(&[7.0]), true);
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0, 5.0]);
        assert_eq!(grads.get_or_zero(p).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
        let y = tape.scale(w, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_params() {
        let mut store = ParamStore::new();
        let id = store
            .add(
                "w",
                crate::params::ParamKind::Weight,
                Tensor::from_slice(&[1.0, 1.0]),
            )
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let x = tape.constant(Tensor::from_slice(&[2.0, -3.0]));
        let y = tape.mul(w, x).unwrap();
        let loss = tape.sum(y);
        tape.backward_into(loss, &mut store, 1.0).unwrap();
        tape.backward_into(loss, &mut store, 1.0).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[4.0, -6.0]);
    }

    #[test]
    fn shared_input_gradients_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }
}
