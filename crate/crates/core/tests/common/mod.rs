#![allow(dead_code)]

pub mod oracles;

use ezvsl::micl::{match_matrix, micl_losses, MatchStrategy};
use ezvsl::models::{collect_grads, AvModel, ModelConfig, Module};
use ezvsl::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `||a - n|| / max(||a||, ||n||, 1e-10)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

/// Contract a non-scalar output with fixed weights so any op yields a loss.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = random(&mut rng(seed ^ 0xabc), g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Largest relative error over `inputs` between backprop and central
/// differences of `f`.
pub fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .take(*v)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        let mut xs = inputs.to_vec();
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            xs[k].data_mut()[j] = x0 + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[j] = x0 - STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        img_size: 8,
        visual_channels: vec![3, 4],
        visual_strides: vec![2, 1],
        audio_channels: vec![2, 3],
        audio_strides: vec![2, 2],
        dim: 3,
        n_classes: 3,
        spec_shape: [5, 6],
    }
}

fn model_loss(
    model: &AvModel,
    images: &Tensor,
    specs: &Tensor,
    strategy: MatchStrategy,
    tau: f64,
    trainable: bool,
) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars = model.bind_all(&mut g, trainable);
    let x = g.constant(images.clone());
    let s = g.constant(specs.clone());
    let vis = model.forward_visual(&mut g, &vars, x)?;
    let aud = model.forward_audio(&mut g, &vars, s)?;
    let hw = vis.grid.0 * vis.grid.1;
    let m = match_matrix(&mut g, aud, vis.rows, vis.batch, hw, strategy)?;
    let loss = micl_losses(&mut g, m, tau)?.total;
    Ok((g, loss, vars.all))
}

fn nudge(model: &mut AvModel, k: usize, j: usize, delta: f64) {
    let mut i = 0;
    model.visit_mut("", &mut |_, t| {
        if i == k {
            t.data_mut()[j] += delta;
        }
        i += 1;
    });
}

/// Relative error of the symmetric contrastive loss gradient w.r.t. every
/// parameter of a small model through both encoders. `None` when some
/// central-difference stencil straddles a ReLU or max kink, detected by the
/// two one-sided differences disagreeing.
pub fn full_loss_error(seed: u64, strategy: MatchStrategy, batch: usize) -> Result<Option<f64>> {
    let cfg = tiny_model_config();
    let mut model = AvModel::init(&cfg, seed)?;
    let mut r = rng(seed);
    // nonzero biases avoid exactly parallel rows, where the max over cells ties
    model.visit_mut("", &mut |_, t| {
        if t.ndim() == 1 {
            for v in t.data_mut() {
                *v = r.random_range(0.05..0.5);
            }
        }
    });
    let images = random(&mut r, &[batch, 3, cfg.img_size, cfg.img_size], 0.0, 1.0);
    let specs = random(&mut r, &[batch, 1, cfg.spec_shape[0], cfg.spec_shape[1]], -1.0, 1.0);
    let tau = 0.3;
    let (mut g, loss, vars) = model_loss(&model, &images, &specs, strategy, tau, true)?;
    let base = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let analytic: Vec<f64> = collect_grads(&mut grads, &vars)
        .into_iter()
        .zip(model.named_params(""))
        .flat_map(|(gr, (_, t))| gr.map(|x| x.into_data()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let sizes: Vec<usize> = model.named_params("").iter().map(|(_, t)| t.len()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (k, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            nudge(&mut model, k, j, STEP);
            let (g1, l1, _) = model_loss(&model, &images, &specs, strategy, tau, false)?;
            let up = g1.value(l1).item();
            nudge(&mut model, k, j, -2.0 * STEP);
            let (g2, l2, _) = model_loss(&model, &images, &specs, strategy, tau, false)?;
            let down = g2.value(l2).item();
            nudge(&mut model, k, j, STEP);
            let (fwd, bwd) = ((up - base) / STEP, (base - down) / STEP);
            if (fwd - bwd).abs() > 1e-6 + 0.05 * fwd.abs().max(bwd.abs()) {
                return Ok(None);
            }
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(Some(rel_err(&analytic, &numeric)))
}

/// Errors of [`full_loss_error`] on the first `n` kink-free seeds, and the
/// number of seeds skipped on the way.
pub fn full_loss_errors(strategy: MatchStrategy, n: usize) -> Result<(Vec<f64>, usize)> {
    let (mut errs, mut skipped) = (Vec::new(), 0);
    let mut seed = 0;
    while errs.len() < n {
        match full_loss_error(seed, strategy, 3)? {
            Some(e) => errs.push(e),
            None => skipped += 1,
        }
        seed += 1;
    }
    Ok((errs, skipped))
}

/// Name and gradient check of every differentiable graph op for one seed.
pub fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let x = random(&mut r, &[2, 3, 5, 4], -1.0, 1.0);
    let w = random(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random(&mut r, &[4], -0.5, 0.5);
    for (name, stride, pad) in [("conv2d", 1, 1), ("conv2d_stride2", 2, 1), ("conv2d_valid", 1, 0)] {
        out.push((
            name,
            check(&[x.clone(), w.clone(), b.clone()], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(g, y, seed)
            })?,
        ));
    }
    let m = random(&mut r, &[4, 6], -1.0, 1.0);
    let m2 = random(&mut r, &[4, 6], -1.0, 1.0);
    let unary: [(&'static str, fn(&mut Graph, Var) -> Result<Var>); 14] = [
        ("relu", |g, v| Ok(g.relu(v))),
        ("max_last", |g, v| Ok(g.max_last(v))),
        ("mean_last", |g, v| Ok(g.mean_last(v))),
        ("sum_last", |g, v| Ok(g.sum_last(v))),
        ("sum", |g, v| Ok(g.sum(v))),
        ("mean", |g, v| Ok(g.mean(v))),
        ("scale", |g, v| Ok(g.scale(v, -1.7))),
        ("exp", |g, v| Ok(g.exp(v))),
        ("log", |g, v| {
            let e = g.exp(v);
            g.log(e)
        }),
        ("log_softmax_last", |g, v| Ok(g.log_softmax_last(v))),
        ("reshape", |g, v| g.reshape(v, &[2, 12])),
        ("transpose_last2", |g, v| g.transpose_last2(v)),
        ("channels_last", |g, v| {
            let r = g.reshape(v, &[1, 2, 3, 4])?;
            g.channels_last(r)
        }),
        ("spatial_max", |g, v| {
            let r = g.reshape(v, &[2, 2, 6])?;
            let r = g.reshape(r, &[2, 2, 2, 3])?;
            g.spatial_max(r)
        }),
    ];
    for (name, op) in unary {
        out.push((
            name,
            check(std::slice::from_ref(&m), |g, v| {
                let y = op(g, v[0])?;
                project(g, y, seed)
            })?,
        ));
    }
    out.push((
        "spatial_avg",
        check(std::slice::from_ref(&x), |g, v| {
            let y = g.spatial_avg(v[0])?;
            project(g, y, seed)
        })?,
    ));
    let binary: [(&'static str, fn(&mut Graph, Var, Var) -> Result<Var>); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, op) in binary {
        out.push((
            name,
            check(&[m.clone(), m2.clone()], |g, v| {
                let y = op(g, v[0], v[1])?;
                project(g, y, seed)
            })?,
        ));
    }
    let u = random(&mut r, &[5, 3], -1.0, 1.0);
    out.push((
        "cosine",
        check(&[u, m2.clone().reshape(&[8, 3])?], |g, v| {
            let y = g.cosine(v[0], v[1])?;
            project(g, y, seed)
        })?,
    ));
    let lw = random(&mut r, &[2, 6], -1.0, 1.0);
    let lb = random(&mut r, &[2], -1.0, 1.0);
    out.push((
        "linear",
        check(&[m.clone(), lw, lb], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, seed)
        })?,
    ));
    Ok(out)
}
