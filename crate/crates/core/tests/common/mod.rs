#![allow(dead_code)]

//! Finite-difference gradient oracles shared by the integration tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tricks_core::autograd::{BnConfig, Mode, PoolKind, RunningStats, Tape, Var};
use tricks_core::init::{init_model, InitPolicy};
use tricks_core::loss::{distill_loss, softmax, DistillContext, TargetDistribution};
use tricks_core::model::{build_resnet, Depth, Model, Variant};
use tricks_core::{Result, Tensor};

pub mod reference;

pub const FD_STEP: f32 = 1e-3;
/// Step for central differences of f64 reference implementations.
pub const REF_STEP: f64 = 1e-6;
/// Largest tolerated difference between the f64 reference loss and the
/// model's f32 loss, confirming both compute the same function.
pub const LOSS_AGREEMENT: f64 = 1e-4;
/// Per-op tolerance on the largest absolute analytic/numeric difference.
pub const OP_TOL: f64 = 1e-3;
/// Full-model relative tolerance.
pub const MODEL_REL_TOL: f64 = 1e-2;
/// Gradient magnitude below which the model check compares absolutely.
/// The analytic side accumulates in f32, so entries near zero carry
/// absolute error on the order of 1e-7 times the larger entries.
pub const MODEL_ABS_FLOOR: f64 = 1e-5;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, so relu stays smooth under a step of `FD_STEP`.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values with gaps far larger than `FD_STEP`, so max pooling
/// never switches winners under perturbation.
pub fn well_separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order
        .iter()
        .map(|&k| k as f32 * 0.05 - n as f32 * 0.025)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Largest absolute difference between reverse-mode gradients and central
/// differences of `sum(w * f(inputs))` for random fixed weights `w`.
/// At most `max_coords` coordinates per input are sampled.
pub fn op_gradient_error(
    inputs: &[Tensor],
    build: &Build,
    max_coords: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars).unwrap();
    let w = uniform(rng, tape.value(y).shape(), -1.0, 1.0);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let objective = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let y = build(&mut t, &vs).unwrap();
        t.value(y)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get_or_zero(*v);
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP as f64);
            worst = worst.max((numeric - g.data()[j] as f64).abs());
        }
    }
    worst
}

/// One randomly shaped instance per call for each differentiable op.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> f64,
}

fn dims(rng: &mut impl Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> f64 {
    let s = dims(rng);
    let ins = [uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)];
    op_gradient_error(&ins, &|t, v| f(t, v[0], v[1]), 64, rng)
}

fn case_conv(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (n, ci, co) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let side = rng.random_range(k.max(3)..=6);
    let x = uniform(rng, &[n, ci, side, side], -1.0, 1.0);
    let w = uniform(rng, &[co, ci, k, k], -1.0, 1.0);
    op_gradient_error(
        &[x, w],
        &|t, v| t.conv2d(v[0], v[1], (stride, stride), (pad, pad)),
        48,
        rng,
    )
}

fn case_pool(rng: &mut ChaCha8Rng, kind: PoolKind) -> f64 {
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let side = rng.random_range(k..=6);
    let x = match kind {
        PoolKind::Max => well_separated(rng, &[n, c, side, side]),
        PoolKind::Avg => uniform(rng, &[n, c, side, side], -1.0, 1.0),
    };
    op_gradient_error(&[x], &|t, v| t.pool2d(kind, v[0], k, stride, pad), 64, rng)
}

fn case_bn(rng: &mut ChaCha8Rng, mode: Mode) -> f64 {
    let (n, c) = (rng.random_range(2..=3), rng.random_range(1..=3));
    let side = rng.random_range(1..=4);
    let x = uniform(rng, &[n, c, side, side], -2.0, 2.0);
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -0.5, 0.5);
    let mut stats = RunningStats::new(c);
    stats.mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    stats.var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    op_gradient_error(
        &[x, gamma, beta],
        &|t, v| {
            let mut s = stats.clone();
            t.batch_norm(v[0], v[1], v[2], &mut s, mode, BnConfig::default())
        },
        48,
        rng,
    )
}

fn case_dense(rng: &mut ChaCha8Rng) -> f64 {
    let (n, i, o) = (
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
    );
    let ins = [
        uniform(rng, &[n, i], -1.0, 1.0),
        uniform(rng, &[o, i], -1.0, 1.0),
        uniform(rng, &[o], -1.0, 1.0),
    ];
    if rng.random_bool(0.5) {
        op_gradient_error(&ins, &|t, v| t.dense(v[0], v[1], Some(v[2])), 64, rng)
    } else {
        op_gradient_error(&ins[..2], &|t, v| t.dense(v[0], v[1], None), 64, rng)
    }
}

fn random_targets(rng: &mut impl Rng, n: usize, k: usize) -> Tensor {
    let eps = rng.random_range(0.0..0.5);
    let rows: Vec<TargetDistribution> = (0..n)
        .map(|_| TargetDistribution::smooth(rng.random_range(0..k), k, eps).unwrap())
        .collect();
    tricks_core::loss::targets_tensor(&rows).unwrap()
}

/// Largest absolute difference between the tape gradient of a scalar loss
/// and central differences of an independent f64 implementation of it.
fn loss_gradient_error(z: &Tensor, build: &Build, reference: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone(), true);
    let l = build(&mut tape, &[zv]).unwrap();
    let g = tape.backward(l).unwrap().get_or_zero(zv);
    let mut x: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + REF_STEP;
        let lp = reference(&x);
        x[j] = orig - REF_STEP;
        let lm = reference(&x);
        x[j] = orig;
        worst = worst.max(((lp - lm) / (2.0 * REF_STEP) - g.data()[j] as f64).abs());
    }
    worst
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=10));
    let z = uniform(rng, &[n, k], -3.0, 3.0);
    let target = random_targets(rng, n, k);
    let acts = |x: &[f64]| reference::Act {
        n,
        c: k,
        h: 1,
        w: 1,
        data: x.to_vec(),
    };
    loss_gradient_error(&z, &|t, v| t.soft_cross_entropy(v[0], &target), &|x| {
        reference::cross_entropy(&acts(x), target.data())
    })
}

fn case_distill(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (rng.random_range(1..=3), 10);
    let z = uniform(rng, &[n, k], -3.0, 3.0);
    let r = uniform(rng, &[n, k], -3.0, 3.0);
    let temperature: f64 = rng.random_range(1.0..20.0);
    let ctx = DistillContext::new(r.clone(), temperature).unwrap();
    let target = random_targets(rng, n, k);
    // teacher soft targets computed in f64, independent of the library
    let soft: Vec<f32> = r
        .data()
        .chunks(k)
        .flat_map(|row| {
            let m = row
                .iter()
                .map(|&v| v as f64 / temperature)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row
                .iter()
                .map(|&v| (v as f64 / temperature - m).exp())
                .collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| (v / s) as f32)
        })
        .collect();
    let acts = |x: &[f64]| reference::Act {
        n,
        c: k,
        h: 1,
        w: 1,
        data: x.to_vec(),
    };
    loss_gradient_error(&z, &|t, v| distill_loss(t, v[0], &target, &ctx), &|x| {
        let scaled: Vec<f64> = x.iter().map(|v| v / temperature).collect();
        reference::cross_entropy(&acts(x), target.data())
            + temperature * temperature * reference::cross_entropy(&acts(&scaled), &soft)
    })
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            run: |r| binary(r, |t, a, b| t.add(a, b)),
        },
        OpCase {
            name: "sub",
            run: |r| binary(r, |t, a, b| t.sub(a, b)),
        },
        OpCase {
            name: "mul",
            run: |r| binary(r, |t, a, b| t.mul(a, b)),
        },
        OpCase {
            name: "scale",
            run: |r| {
                let s = r.random_range(-2.0..2.0);
                let d = dims(r);
                let x = uniform(r, &d, -1.0, 1.0);
                op_gradient_error(&[x], &|t, v| Ok(t.scale(v[0], s)), 64, r)
            },
        },
        OpCase {
            name: "add_scalar",
            run: |r| {
                let s = r.random_range(-2.0..2.0);
                let d = dims(r);
                let x = uniform(r, &d, -1.0, 1.0);
                op_gradient_error(&[x], &|t, v| Ok(t.add_scalar(v[0], s)), 64, r)
            },
        },
        OpCase {
            name: "relu",
            run: |r| {
                let d = dims(r);
                let x = away_from_zero(r, &d);
                op_gradient_error(&[x], &|t, v| Ok(t.relu(v[0])), 64, r)
            },
        },
        OpCase {
            name: "conv2d",
            run: case_conv,
        },
        OpCase {
            name: "max_pool",
            run: |r| case_pool(r, PoolKind::Max),
        },
        OpCase {
            name: "avg_pool",
            run: |r| case_pool(r, PoolKind::Avg),
        },
        OpCase {
            name: "batch_norm_train",
            run: |r| case_bn(r, Mode::Train),
        },
        OpCase {
            name: "batch_norm_eval",
            run: |r| case_bn(r, Mode::Eval),
        },
        OpCase {
            name: "dense",
            run: case_dense,
        },
        OpCase {
            name: "global_avg_pool",
            run: |r| {
                let s = [
                    r.random_range(1..=2),
                    r.random_range(1..=3),
                    r.random_range(1..=4),
                    r.random_range(1..=4),
                ];
                let x = uniform(r, &s, -1.0, 1.0);
                op_gradient_error(&[x], &|t, v| t.global_avg_pool(v[0]), 64, r)
            },
        },
        OpCase {
            name: "reshape",
            run: |r| {
                let (a, b) = (r.random_range(1..=4), r.random_range(1..=4));
                let x = uniform(r, &[a, b], -1.0, 1.0);
                op_gradient_error(&[x], &|t, v| t.reshape(v[0], &[b, a]), 64, r)
            },
        },
        OpCase {
            name: "sum",
            run: |r| {
                let d = dims(r);
                let x = uniform(r, &d, -1.0, 1.0);
                op_gradient_error(&[x], &|t, v| Ok(t.sum(v[0])), 64, r)
            },
        },
        OpCase {
            name: "mean",
            run: |r| {
                let d = dims(r);
                let x = uniform(r, &d, -1.0, 1.0);
                op_gradient_error(&[x], &|t, v| Ok(t.mean(v[0])), 64, r)
            },
        },
        OpCase {
            name: "soft_cross_entropy",
            run: case_cross_entropy,
        },
        OpCase {
            name: "distill_loss",
            run: case_distill,
        },
    ]
}

/// Worst error of each op over `INSTANCES` random instances.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    op_cases()
        .into_iter()
        .map(|c| {
            (
                c.name,
                (0..INSTANCES).map(|_| (c.run)(&mut r)).fold(0.0, f64::max),
            )
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ModelCheck {
    pub coordinates: usize,
    pub failures: usize,
    pub worst_rel: f64,
    /// `|reference loss - model loss|` at the unperturbed parameters.
    pub loss_gap: f64,
}

/// Checks 5 random coordinates of every parameter tensor of a randomly
/// initialized desk model on a random batch with a cross-entropy loss.
/// The numeric side differentiates the f64 reference forward pass, after
/// confirming it reproduces the model's own loss.
pub fn model_gradient_check(seed: u64, variant: Variant) -> ModelCheck {
    let mut r = rng(seed);
    let (batch, side, classes) = (2, 8, 4);
    let graph = build_resnet(Depth::Desk11, variant, classes, side).unwrap();
    let mut model = Model::new(graph).unwrap();
    init_model(&mut model, &InitPolicy::new(seed)).unwrap();
    let x = uniform(&mut r, &[batch, 3, side, side], -1.0, 1.0);
    let target = random_targets(&mut r, batch, classes);
    let eps = model.bn.eps as f64;

    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let z = model.forward(&mut t, xv, Mode::Train).unwrap();
    let l = t.soft_cross_entropy(z, &target).unwrap();
    let model_loss = t.value(l).item().unwrap() as f64;
    model.params.zero_grad();
    t.backward_into(l, &mut model.params, 1.0).unwrap();

    let input = reference::input_of(&x);
    let mut params = reference::params_of(&model);
    let loss_of = |p: &reference::Params| {
        reference::cross_entropy(
            &reference::logits(&model.graph, p, input.clone(), eps),
            target.data(),
        )
    };
    let mut out = ModelCheck {
        loss_gap: (loss_of(&params) - model_loss).abs(),
        ..ModelCheck::default()
    };
    for p in model.params.iter() {
        let grad = p.grad.clone().unwrap();
        for _ in 0..5 {
            let j = r.random_range(0..grad.numel());
            let orig = params[&p.name][j];
            params.get_mut(&p.name).unwrap()[j] = orig + REF_STEP;
            let lp = loss_of(&params);
            params.get_mut(&p.name).unwrap()[j] = orig - REF_STEP;
            let lm = loss_of(&params);
            params.get_mut(&p.name).unwrap()[j] = orig;
            let numeric = (lp - lm) / (2.0 * REF_STEP);
            let analytic = grad.data()[j] as f64;
            let scale = numeric.abs().max(analytic.abs()).max(MODEL_ABS_FLOOR);
            let rel = (numeric - analytic).abs() / scale;
            out.coordinates += 1;
            out.worst_rel = out.worst_rel.max(rel);
            if rel > MODEL_REL_TOL {
                out.failures += 1;
            }
        }
    }
    out
}

/// `softmax(z)` of each row, as plain vectors.
pub fn softmax_rows(z: &Tensor) -> Vec<Vec<f32>> {
    let k = *z.shape().last().unwrap();
    softmax(z)
        .unwrap()
        .data()
        .chunks(k)
        .map(<[f32]>::to_vec)
        .collect()
}
