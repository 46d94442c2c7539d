//! Central finite-difference verification of every differentiable op.
//!
//! Each case draws random double-precision inputs, builds a graph whose
//! output is projected onto a fixed random direction, and compares the
//! reverse-mode gradient with `(L(x+h) - L(x-h)) / 2h` for every input
//! element.

use crate::autograd::{Graph, Var};
use crate::dcam::{self, AttentionMode};
use crate::error::Result;
use crate::losses::{self, Dimension, LossSpec, Metric};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so gradients that are exactly
/// or nearly zero are compared on an absolute scale.
pub const ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;
type Draw = Box<dyn FnMut(&mut Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>)>;

/// Largest relative error over all elements of all `inputs`.
pub fn check(inputs: &[Tensor<f64>], projection_seed: u64, build: &Build<'_>) -> Result<f64> {
    let projected = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let out = build(g, vars)?;
        if g.value(out).len() == 1 {
            return Ok(out);
        }
        let mut rng = Rng::new(projection_seed);
        let dir = Tensor::from_fn(g.value(out).shape(), |_| rng.uniform(-1.0, 1.0));
        let d = g.constant(dir);
        let p = g.mul_broadcast(out, d)?;
        Ok(g.sum(p))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = projected(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = projected(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Values spaced well apart (a shuffled grid plus small jitter) so that
/// a finite-difference step never flips the winner of a max.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let spacing = 2.0 / n as f64;
    Tensor::from_fn(shape, |i| {
        -1.0 + spacing * order[i] as f64 + rng.uniform(0.0, 0.25 * spacing)
    })
}

fn small_shape(rng: &mut Rng) -> [usize; 3] {
    [rng.range(1, 4), rng.range(2, 5), rng.range(2, 5)]
}

fn pyramid_pair(rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    let s = small_shape(rng);
    (uniform(rng, &s), uniform(rng, &s))
}

/// Runs one named case over `instances` random draws.
fn run_case(
    name: &'static str,
    instances: usize,
    seed: u64,
    mut draw: impl FnMut(&mut Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>),
) -> Result<CaseReport> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = Rng::derive(seed, i as u64);
        let (inputs, build) = draw(&mut rng);
        worst = worst.max(check(&inputs, rng.next_u64(), build.as_ref())?);
    }
    Ok(CaseReport {
        name,
        instances,
        max_rel_error: worst,
    })
}

fn loss_case(metric: Metric, dimension: Dimension) -> impl FnMut(&mut Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>) {
    move |rng| {
        // the teacher is a detached target, so only the student is perturbed
        let (t, s) = pyramid_pair(rng);
        let build: Box<Build<'static>> = Box::new(move |g, v| {
            let t = g.constant(t.clone());
            losses::level_loss_graph(g, metric, dimension, t, v[0])
        });
        (vec![s], build)
    }
}

/// Full suite: every op, every loss, and refine∘loss.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::new();
    let mut case = |name: &'static str, draw: Draw| -> Result<()> {
        reports.push(run_case(name, instances, seed ^ reports.len() as u64, draw)?);
        Ok(())
    };

    case(
        "conv2d",
        Box::new(|rng: &mut Rng| {
            let [c, h, w] = small_shape(rng);
            let cout = rng.range(1, 3);
            let k = rng.range(1, h.min(w).min(3));
            let stride = rng.range(1, 2);
            let padding = rng.range(0, 1);
            let x = uniform(rng, &[c, h, w]);
            let wt = uniform(rng, &[cout, c, k, k]);
            let b = uniform(rng, &[cout]);
            let build: Box<Build<'static>> =
                Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, padding));
            (vec![x, wt, b], build)
        }),
    )?;
    case(
        "relu",
        Box::new(|rng: &mut Rng| {
            // keep inputs away from the kink
            let s = small_shape(rng);
            let x = distinct(rng, &s).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.relu(v[0])));
            (vec![x], build)
        }),
    )?;
    case(
        "sigmoid",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let x = uniform(rng, &s).scale(4.0);
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.sigmoid(v[0])));
            (vec![x], build)
        }),
    )?;
    case(
        "maxpool2d",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let window = 2;
            let stride = rng.range(1, 2);
            let padding = rng.range(0, 1);
            let x = distinct(rng, &s);
            let build: Box<Build<'static>> = Box::new(move |g, v| g.maxpool2d(v[0], window, stride, padding));
            (vec![x], build)
        }),
    )?;
    case(
        "avgpool2d",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let stride = rng.range(1, 2);
            let x = uniform(rng, &s);
            let build: Box<Build<'static>> = Box::new(move |g, v| g.avgpool2d(v[0], 2, stride));
            (vec![x], build)
        }),
    )?;
    case(
        "global_maxpool",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let x = distinct(rng, &s);
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.global_maxpool(v[0])));
            (vec![x], build)
        }),
    )?;
    case(
        "global_avgpool",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let x = uniform(rng, &s);
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.global_avgpool(v[0])));
            (vec![x], build)
        }),
    )?;
    case(
        "channel_maxpool",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let x = distinct(rng, &s);
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.channel_maxpool(v[0])));
            (vec![x], build)
        }),
    )?;
    case(
        "channel_avgpool",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let x = uniform(rng, &s);
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.channel_avgpool(v[0])));
            (vec![x], build)
        }),
    )?;
    case(
        "softmax",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let axes: Vec<usize> = match rng.range(0, 3) {
                0 => vec![0],
                1 => vec![1, 2],
                2 => vec![2],
                _ => vec![0, 1, 2],
            };
            let x = uniform(rng, &s).scale(2.0);
            let build: Box<Build<'static>> = Box::new(move |g, v| g.softmax(v[0], &axes));
            (vec![x], build)
        }),
    )?;
    case(
        "bilinear_upsample",
        Box::new(|rng: &mut Rng| {
            let [c, h, w] = small_shape(rng);
            let (oh, ow) = (h + rng.range(0, 5), w + rng.range(0, 5));
            let x = uniform(rng, &[c, h, w]);
            let build: Box<Build<'static>> = Box::new(move |g, v| g.bilinear_upsample(v[0], oh, ow));
            (vec![x], build)
        }),
    )?;
    case(
        "mul_broadcast",
        Box::new(|rng: &mut Rng| {
            let [c, h, w] = small_shape(rng);
            let a = uniform(rng, &[c, h, w]);
            let b = uniform(rng, &[c, 1, 1]);
            let build: Box<Build<'static>> = Box::new(|g, v| g.mul_broadcast(v[0], v[1]));
            (vec![a, b], build)
        }),
    )?;
    case(
        "batch_norm",
        Box::new(|rng: &mut Rng| {
            let [c, h, w] = small_shape(rng);
            let n = rng.range(2, 3);
            let x = uniform(rng, &[n, c, h, w]);
            let gamma = uniform(rng, &[c]);
            let beta = uniform(rng, &[c]);
            let build: Box<Build<'static>> = Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None)?.0));
            (vec![x, gamma, beta], build)
        }),
    )?;
    case(
        "channel_attention",
        Box::new(|rng: &mut Rng| {
            let [_, h, w] = small_shape(rng);
            let c = 2 * rng.range(1, 2);
            let hidden = c / 2;
            let f = distinct(rng, &[c, h, w]);
            let w0 = uniform(rng, &[hidden, c]);
            let w1 = uniform(rng, &[c, hidden]);
            let build: Box<Build<'static>> = Box::new(|g, v| dcam::channel_attention_graph(g, v[0], v[1], v[2]));
            (vec![f, w0, w1], build)
        }),
    )?;
    case(
        "spatial_attention",
        Box::new(|rng: &mut Rng| {
            let s = small_shape(rng);
            let f = distinct(rng, &s);
            let w = uniform(rng, &[1, 2, 7, 7]).scale(0.3);
            let b = uniform(rng, &[1]);
            let build: Box<Build<'static>> = Box::new(|g, v| dcam::spatial_attention_graph(g, v[0], v[1], v[2]));
            (vec![f, w, b], build)
        }),
    )?;
    case("cd_channel", Box::new(loss_case(Metric::Cd, Dimension::Channel)))?;
    case("cd_spatial", Box::new(loss_case(Metric::Cd, Dimension::Spatial)))?;
    case("kld_channel", Box::new(loss_case(Metric::Kld, Dimension::Channel)))?;
    case("kld_spatial", Box::new(loss_case(Metric::Kld, Dimension::Spatial)))?;
    case("mse_stfpm", Box::new(loss_case(Metric::Mse, Dimension::Channel)))?;
    case(
        "refine_loss",
        Box::new(|rng: &mut Rng| {
            let [_, h, w] = small_shape(rng);
            let c = 4;
            let mode = match rng.range(0, 2) {
                0 => AttentionMode::Channel,
                1 => AttentionMode::Spatial,
                _ => AttentionMode::Combined,
            };
            let t = uniform(rng, &[c, h, w]);
            let s = distinct(rng, &[c, h, w]);
            let store = dcam::build_dcam::<f64>(&[(2, c)], 2, AttentionMode::Combined, rng.next_u64())
                .expect("valid attention config");
            let names: Vec<String> = store.names().cloned().collect();
            let mut inputs = vec![s];
            inputs.extend(store.iter().map(|(_, v)| v.clone()));
            let build: Box<Build<'static>> = Box::new(move |g, v| {
                let refined = refine_with_vars(g, v[0], mode, &names, &v[1..])?;
                let t = g.constant(t.clone());
                losses::total_loss_graph(g, &[t], &[refined], &LossSpec::headline())
            });
            (inputs, build)
        }),
    )?;
    Ok(reports)
}

/// `refine` wired to caller-supplied parameter nodes (the gradient check
/// needs gradients on the attention weights themselves).
fn refine_with_vars(
    g: &mut Graph<f64>,
    f: Var,
    mode: AttentionMode,
    names: &[String],
    vars: &[Var],
) -> Result<Var> {
    let find = |suffix: &str| {
        names
            .iter()
            .position(|n| n.ends_with(suffix))
            .map(|i| vars[i])
            .expect("attention parameter present")
    };
    let mut x = f;
    if mode.uses_channel() {
        let m = dcam::channel_attention_graph(g, x, find("channel.w0"), find("channel.w1"))?;
        x = g.mul_broadcast(x, m)?;
    }
    if mode.uses_spatial() {
        let m = dcam::spatial_attention_graph(g, x, find("spatial.weight"), find("spatial.bias"))?;
        x = g.mul_broadcast(x, m)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // an op with a deliberately wrong adjoint must fail the check
        let x = Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        let err = check(&[x], 1, &|g, v| {
            let y = g.value(v[0]).map(|a| a * a);
            let local = g.value(v[0]).scale(3.0);
            Ok(g.scalar_op(y.sum(), vec![(v[0], local)]))
        })
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn exact_gradient_passes() {
        let x = Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        let err = check(&[x], 1, &|g, v| {
            let y = g.value(v[0]).map(|a| a * a);
            let local = g.value(v[0]).scale(2.0);
            Ok(g.scalar_op(y.sum(), vec![(v[0], local)]))
        })
        .unwrap();
        assert!(err < TOLERANCE);
    }
}
