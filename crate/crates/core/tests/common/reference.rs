//! Naive f64 forward pass of a model graph, used as a finite-difference
//! oracle free of f32 rounding. Shares only the layer description with the
//! library; every numeric kernel here is written out directly.

use std::collections::BTreeMap;

use tricks_core::model::{LayerKind, LayerSpec, Model, ModelGraph};

#[derive(Clone, Debug)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_of(model: &Model) -> Params {
    model
        .params
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

fn window(l: &LayerSpec, x: &Act) -> (usize, usize) {
    let oh = (x.h + 2 * l.padding.0 - l.kernel.0) / l.stride.0 + 1;
    let ow = (x.w + 2 * l.padding.1 - l.kernel.1) / l.stride.1 + 1;
    (oh, ow)
}

/// Input coordinate of kernel tap `k` for output `o`, if in bounds.
fn tap(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

fn conv(l: &LayerSpec, x: &Act, wt: &[f64]) -> Act {
    let (oh, ow) = window(l, x);
    let (kh, kw) = l.kernel;
    let mut y = Act::zeros(x.n, l.out_channels, oh, ow);
    for n in 0..x.n {
        for co in 0..l.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..x.c {
                        for ky in 0..kh {
                            let Some(iy) = tap(oy, ky, l.stride.0, l.padding.0, x.h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = tap(ox, kx, l.stride.1, l.padding.1, x.w) else {
                                    continue;
                                };
                                s +=
                                    x.at(n, ci, iy, ix) * wt[((co * x.c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    *y.at_mut(n, co, oy, ox) = s;
                }
            }
        }
    }
    y
}

fn batch_norm(x: &Act, gamma: &[f64], beta: &[f64], eps: f64) -> Act {
    let mut y = x.clone();
    let count = (x.n * x.h * x.w) as f64;
    for c in 0..x.c {
        let vals: Vec<f64> = (0..x.n)
            .flat_map(|n| (0..x.h).flat_map(move |i| (0..x.w).map(move |j| (n, i, j))))
            .map(|(n, i, j)| x.at(n, c, i, j))
            .collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let inv = 1.0 / (var + eps).sqrt();
        for n in 0..x.n {
            for i in 0..x.h {
                for j in 0..x.w {
                    let v = y.at_mut(n, c, i, j);
                    *v = gamma[c] * (*v - mean) * inv + beta[c];
                }
            }
        }
    }
    y
}

fn pool(l: &LayerSpec, x: &Act, max: bool) -> Act {
    let (oh, ow) = window(l, x);
    let mut y = Act::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals = Vec::new();
                    for ky in 0..l.kernel.0 {
                        let Some(iy) = tap(oy, ky, l.stride.0, l.padding.0, x.h) else {
                            continue;
                        };
                        for kx in 0..l.kernel.1 {
                            let Some(ix) = tap(ox, kx, l.stride.1, l.padding.1, x.w) else {
                                continue;
                            };
                            vals.push(x.at(n, c, iy, ix));
                        }
                    }
                    *y.at_mut(n, c, oy, ox) = if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                }
            }
        }
    }
    y
}

fn layer(l: &LayerSpec, x: Act, p: &Params, eps: f64) -> Act {
    let get = |suffix: &str| &p[&format!("{}.{suffix}", l.name)];
    match l.kind {
        LayerKind::Conv => conv(l, &x, get("weight")),
        LayerKind::Bn => batch_norm(&x, get("gamma"), get("beta"), eps),
        LayerKind::Relu => Act {
            data: x.data.iter().map(|v| v.max(0.0)).collect(),
            ..x
        },
        LayerKind::MaxPool => pool(l, &x, true),
        LayerKind::AvgPool => pool(l, &x, false),
        LayerKind::GlobalPool => {
            let mut y = Act::zeros(x.n, x.c, 1, 1);
            let hw = (x.h * x.w) as f64;
            for n in 0..x.n {
                for c in 0..x.c {
                    let s: f64 = (0..x.h)
                        .flat_map(|i| (0..x.w).map(move |j| (i, j)))
                        .map(|(i, j)| x.at(n, c, i, j))
                        .sum();
                    *y.at_mut(n, c, 0, 0) = s / hw;
                }
            }
            y
        }
        LayerKind::Dense => {
            let (w, b) = (get("weight"), get("bias"));
            let d_in = x.c * x.h * x.w;
            let mut y = Act::zeros(x.n, l.out_channels, 1, 1);
            for n in 0..x.n {
                for o in 0..l.out_channels {
                    let s: f64 = (0..d_in)
                        .map(|i| x.data[n * d_in + i] * w[o * d_in + i])
                        .sum();
                    *y.at_mut(n, o, 0, 0) = s + b[o];
                }
            }
            y
        }
        LayerKind::Add => unreachable!("merges are handled per block"),
    }
}

/// Training-mode logits `(N, K)` of `graph` under parameters `p`.
pub fn logits(graph: &ModelGraph, p: &Params, input: Act, eps: f64) -> Act {
    let run = |layers: &[LayerSpec], x: Act| layers.iter().fold(x, |x, l| layer(l, x, p, eps));
    let mut x = run(&graph.stem, input);
    for b in &graph.blocks {
        let a = run(&b.path_a, x.clone());
        let short = run(&b.path_b, x);
        x = Act {
            data: a
                .data
                .iter()
                .zip(&short.data)
                .map(|(u, v)| (u + v).max(0.0))
                .collect(),
            ..a
        };
    }
    run(&graph.head, x)
}

/// Batch-mean cross entropy against dense target rows.
pub fn cross_entropy(z: &Act, target: &[f32]) -> f64 {
    let k = z.c;
    let mut total = 0.0;
    for n in 0..z.n {
        let row = &z.data[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total -= (0..k)
            .map(|i| target[n * k + i] as f64 * (row[i] - lse))
            .sum::<f64>();
    }
    total / z.n as f64
}

pub fn input_of(t: &tricks_core::Tensor) -> Act {
    let s = t.shape();
    Act {
        n: s[0],
        c: s[1],
        h: s[2],
        w: s[3],
        data: t.data().iter().map(|&v| v as f64).collect(),
    }
}
