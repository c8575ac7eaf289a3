//! Finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`. Each registered case draws random shapes and
//! values, reduces the operator output to a scalar through a random
//! weighting, and compares every input and parameter derivative against a
//! central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{build_context_branch, ContextPyramidConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{class_balanced_bce, edge_aware_smoothness, regression_loss};
use crate::nn::{Conv, ConvSpec};
use crate::ops::conv::ConvParams;
use crate::params::{GradMode, ParamStore, Session};
use crate::pyramid::EstimationBlock;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const MIN_INSTANCES: usize = 5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn scalar_output(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Largest relative error between the analytic and central-difference
/// gradient of `f` with respect to every element of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    grad_check_with_params(|s, vars| f(s, vars), &store, inputs, eps)
}

/// As [`grad_check`], additionally covering every parameter `f` binds.
pub fn grad_check_with_params<F>(f: F, store: &ParamStore<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut s = Session::new(store, GradMode::None);
        let vars: Vec<Var> = inputs.iter().map(|t| s.constant(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        scalar_output(&s, out)
    };

    let mut s = Session::new(store, GradMode::All);
    let vars: Vec<Var> = inputs.iter().map(|t| s.variable(t.clone())).collect();
    let out = f(&mut s, &vars)?;
    scalar_output(&s, out)?;
    let mut grads = s.backward(out)?;
    let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.take(v)).collect();
    let bound: Vec<_> = store.ids().filter(|&id| s.bound(id).is_some()).collect();
    let param_grads = s.param_grads(&mut grads);
    drop(s);

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x + eps;
            let plus = eval(store, &perturbed)?;
            perturbed[i].data_mut()[j] = x - eps;
            let minus = eval(store, &perturbed)?;
            perturbed[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max(relative_error(a, numeric));
        }
    }

    let mut scratch = store.clone();
    for id in bound {
        let analytic = param_grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g);
        for j in 0..store.value(id).len() {
            let x = store.value(id).data()[j];
            scratch.value_mut(id).data_mut()[j] = x + eps;
            let plus = eval(&scratch, inputs)?;
            scratch.value_mut(id).data_mut()[j] = x - eps;
            let minus = eval(&scratch, inputs)?;
            scratch.value_mut(id).data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[j]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// A registered gradient check. `run` draws one random instance from the
/// RNG and returns its worst relative error.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng, f64) -> Result<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn suite() -> Vec<GradCase> {
    vec![
        GradCase { name: "conv2d", run: case_conv2d },
        GradCase { name: "relu", run: case_relu },
        GradCase { name: "sigmoid", run: case_sigmoid },
        GradCase { name: "exp", run: case_exp },
        GradCase { name: "elementwise_arith", run: case_arith },
        GradCase { name: "avg_pool", run: case_avg_pool },
        GradCase { name: "adaptive_avg_pool", run: case_adaptive_pool },
        GradCase { name: "bilinear_resize", run: case_resize },
        GradCase { name: "concat_channels", run: case_concat },
        GradCase { name: "reduce_mean", run: case_mean },
        GradCase { name: "correlation1d", run: case_correlation },
        GradCase { name: "warp_right_to_left", run: case_warp },
        GradCase { name: "error_map", run: case_error_map },
        GradCase { name: "compose_disparity", run: case_compose },
        GradCase { name: "spatial_gradients", run: case_spatial_gradients },
        GradCase { name: "regression_loss", run: case_regression },
        GradCase { name: "edge_aware_smoothness", run: case_smoothness },
        GradCase { name: "class_balanced_bce", run: case_bce },
        GradCase { name: "context_branch", run: case_context_branch },
        GradCase { name: "estimation_block", run: case_estimation_block },
    ]
}

/// Runs every case on `instances` random instances derived from `seed`.
pub fn run_suite(seed: u64, instances: usize, eps: f64, tolerance: f64) -> Result<Vec<GradCaseResult>> {
    check_eps(eps)?;
    suite()
        .into_iter()
        .enumerate()
        .map(|(k, case)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ i as u64);
                worst = worst.max((case.run)(&mut rng, eps)?);
            }
            Ok(GradCaseResult {
                name: case.name,
                instances,
                max_rel_error: worst,
                passed: worst < tolerance,
            })
        })
        .collect()
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values whose magnitude is at least `0.1`, keeping away from kinks at 0.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut impl Rng, b: (usize, usize), c: (usize, usize), h: (usize, usize), w: (usize, usize)) -> [usize; 4] {
    [
        rng.random_range(b.0..=b.1),
        rng.random_range(c.0..=c.1),
        rng.random_range(h.0..=h.1),
        rng.random_range(w.0..=w.1),
    ]
}

/// `sum(y * R)` for a random constant `R` with `|R| >= 0.1`.
fn project(g: &mut Graph<f64>, y: Var, rng: &mut impl Rng) -> Result<Var> {
    let r = away_from_zero(rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Builds a one-shot check whose projection weights are fixed up front so
/// every evaluation sees the same objective.
fn check_unary(
    rng: &mut ChaCha8Rng,
    eps: f64,
    inputs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let seed: u64 = rng.random();
    grad_check(
        |g, v| {
            let y = op(g, v)?;
            project(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &inputs,
        eps,
    )
}

fn case_conv2d(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let kernel = [1, 2, 3][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let dilation = rng.random_range(1..=2);
    let pad = rng.random_range(0..=kernel / 2 * dilation);
    let p = ConvParams::new(stride, pad, dilation);
    let span = dilation * (kernel - 1) + 1;
    let [b, c, h, w] = dims(rng, (1, 2), (1, 3), (span, span + 3), (span, span + 4));
    let o = rng.random_range(1..=3);
    let x = uniform(rng, &[b, c, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[o, c, kernel, kernel], -1.0, 1.0);
    let bias = uniform(rng, &[o], -1.0, 1.0);
    check_unary(rng, eps, vec![x, wt, bias], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), p))
}

fn case_relu(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (2, 4), (2, 5));
    let x = away_from_zero(rng, &shape);
    check_unary(rng, eps, vec![x], |g, v| g.relu(v[0]))
}

fn case_sigmoid(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (2, 4), (2, 5));
    let x = uniform(rng, &shape, -4.0, 4.0);
    check_unary(rng, eps, vec![x], |g, v| g.sigmoid(v[0]))
}

fn case_exp(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (2, 4), (2, 5));
    let x = uniform(rng, &shape, -2.0, 2.0);
    check_unary(rng, eps, vec![x], |g, v| {
        let e = g.exp(v[0])?;
        let a = g.abs(e)?;
        g.neg(a)
    })
}

fn case_arith(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (2, 4), (2, 5));
    let a = uniform(rng, &shape, -1.0, 0.8);
    let b = uniform(rng, &shape, -1.0, 1.0);
    let f: f64 = rng.random_range(0.1..0.9);
    check_unary(rng, eps, vec![a, b], move |g, v| {
        let m = g.mul(v[0], v[1])?;
        let s = g.sub(m, v[1])?;
        let t = g.scale(s, f)?;
        let o = g.offset(t, 0.5)?;
        g.add(o, v[0])
    })
}

fn case_avg_pool(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=k);
    let shape = dims(rng, (1, 2), (1, 2), (k, k + 4), (k, k + 5));
    let x = uniform(rng, &shape, -1.0, 1.0);
    check_unary(rng, eps, vec![x], move |g, v| g.avg_pool(v[0], k, stride))
}

fn case_adaptive_pool(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 2), (1, 7), (1, 9));
    let (oh, ow) = (rng.random_range(1..=shape[2]), rng.random_range(1..=shape[3]));
    let x = uniform(rng, &shape, -1.0, 1.0);
    check_unary(rng, eps, vec![x], move |g, v| g.adaptive_avg_pool(v[0], oh, ow))
}

fn case_resize(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 2), (1, 6), (1, 7));
    let x = uniform(rng, &shape, -1.0, 1.0);
    let (oh, ow) = (rng.random_range(1..=10), rng.random_range(1..=10));
    check_unary(rng, eps, vec![x], move |g, v| g.bilinear_resize(v[0], oh, ow))
}

fn case_concat(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let [b, _, h, w] = dims(rng, (1, 2), (1, 1), (1, 4), (1, 4));
    let xs: Vec<_> = (0..3)
        .map(|_| {
            let c = rng.random_range(1..=3);
            uniform(rng, &[b, c, h, w], -1.0, 1.0)
        })
        .collect();
    check_unary(rng, eps, xs, |g, v| g.concat_channels(v))
}

fn case_mean(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (1, 4), (1, 4));
    let x = uniform(rng, &shape, -1.0, 1.0);
    check_unary(rng, eps, vec![x], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.reduce_mean(sq)
    })
}

fn case_correlation(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 4), (1, 4), (3, 8));
    let max_disp = rng.random_range(0..shape[3]);
    let l = uniform(rng, &shape, -1.0, 1.0);
    let r = uniform(rng, &shape, -1.0, 1.0);
    check_unary(rng, eps, vec![l, r], move |g, v| g.correlation1d(v[0], v[1], max_disp))
}

/// Disparities with fractional parts in `[0.1, 0.9]` so that no sample
/// falls on a grid point.
fn fractional_disparity(rng: &mut impl Rng, shape: &[usize], max: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0..=max) as f64 + rng.random_range(0.1..0.9))
}

fn case_warp(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let [b, c, h, w] = dims(rng, (1, 2), (1, 3), (1, 4), (4, 8));
    let right = uniform(rng, &[b, c, h, w], -1.0, 1.0);
    let disp = fractional_disparity(rng, &[b, 1, h, w], w / 2);
    check_unary(rng, eps, vec![right, disp], |g, v| g.warp_right_to_left(v[0], v[1]))
}

fn case_error_map(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (1, 4), (1, 5));
    let synth = uniform(rng, &shape, -1.0, 1.0);
    let left = synth.zip_map(&away_from_zero(rng, &shape), |a, b| a + b)?;
    check_unary(rng, eps, vec![left, synth], |g, v| g.error_map(v[0], v[1]))
}

fn case_compose(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let [b, _, h, w] = dims(rng, (1, 2), (1, 1), (1, 4), (1, 5));
    let coarse = uniform(rng, &[b, 1, h, w], 0.0, 3.0);
    // residuals sit on either side of `-2u(coarse)`, never on the kink
    let mut g = Graph::new();
    let c = g.constant(coarse.clone());
    let up = g.upsample_disparity(c, 2 * h, 2 * w)?;
    let offset = away_from_zero(rng, &[b, 1, 2 * h, 2 * w]);
    let residual = offset.zip_map(g.value(up), |o, u| o - u)?;
    check_unary(rng, eps, vec![coarse, residual], |g, v| g.compose_disparity(v[0], v[1]))
}

fn case_spatial_gradients(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 3), (1, 5), (1, 5));
    let x = uniform(rng, &shape, -1.0, 1.0);
    let seed: u64 = rng.random();
    grad_check(
        |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (gx, gy) = g.spatial_gradients(v[0])?;
            let a = project(g, gx, &mut r)?;
            let b = project(g, gy, &mut r)?;
            g.add(a, b)
        },
        &[x],
        eps,
    )
}

fn case_regression(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = [rng.random_range(1..=2), 1, rng.random_range(1..=4), rng.random_range(2..=5)];
    let gt = uniform(rng, &shape, 0.0, 5.0);
    let d = gt.zip_map(&away_from_zero(rng, &shape), |a, b| a + b)?;
    let mut valid = Tensor::from_fn(&shape, |_| if rng.random_bool(0.7) { 1.0 } else { 0.0 });
    valid.data_mut()[0] = 1.0;
    grad_check(|g, v| regression_loss(g, v[0], &gt, &valid), &[d], eps)
}

fn case_smoothness(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 1), (2, 4), (2, 5));
    // a random walk keeps neighbouring differences away from zero
    let mut d = away_from_zero(rng, &shape);
    let [_, _, h, w] = shape;
    for i in 0..d.len() {
        let (y, x) = ((i / w) % h, i % w);
        let base = if x > 0 {
            d.data()[i - 1]
        } else if y > 0 {
            d.data()[i - w]
        } else {
            0.0
        };
        d.data_mut()[i] += base + if x > 0 && y > 0 { 0.05 } else { 0.0 };
    }
    let edge = uniform(rng, &shape, 0.0, 1.0);
    grad_check(|g, v| edge_aware_smoothness(g, v[0], &edge), &[d], eps)
}

fn case_bce(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let shape = dims(rng, (1, 2), (1, 1), (2, 4), (2, 5));
    let pred = uniform(rng, &shape, 0.05, 0.95);
    let mut label = Tensor::from_fn(&shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    label.data_mut()[0] = 1.0;
    label.data_mut()[1] = 0.0;
    let ignore = Tensor::from_fn(&shape, |i| if i > 1 && rng.random_bool(0.2) { 1.0 } else { 0.0 });
    grad_check(|g, v| class_balanced_bce(g, v[0], &label, Some(&ignore)), &[pred], eps)
}

fn case_context_branch(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let pick = rng.random_range(0..3);
    let index = rng.random_range(0..4);
    let config: ContextPyramidConfig = match pick {
        0 => "C-7_5_3_1",
        1 => "P-1_2_3_4",
        _ => "D-4_3_2_1",
    }
    .parse::<ContextPyramidConfig>()?
    .with_branch_channels(2);
    let mut store = ParamStore::<f64>::new();
    let group = store.add_group("g");
    let cin = rng.random_range(1..=3);
    let branch = build_context_branch(&config, index, cin, &mut store, group, rng)?;
    randomize_biases(&mut store, rng);
    let [b, _, h, w] = dims(rng, (1, 2), (1, 1), (4, 6), (4, 7));
    let x = uniform(rng, &[b, cin, h, w], -1.0, 1.0);
    let seed: u64 = rng.random();
    grad_check_with_params(
        |s, v| {
            let y = branch.forward(s, v[0])?;
            project(s, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &store,
        &[x],
        eps,
    )
}

fn case_estimation_block(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let group = store.add_group("g");
    let cin = rng.random_range(1..=4);
    let widths = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    let block = EstimationBlock::new(&mut store, group, "block", cin, widths, rng);
    randomize_biases(&mut store, rng);
    let [b, _, h, w] = dims(rng, (1, 2), (1, 1), (2, 4), (2, 5));
    let x = uniform(rng, &[b, cin, h, w], -1.0, 1.0);
    let seed: u64 = rng.random();
    grad_check_with_params(
        |s, v| {
            let y = block.forward(s, v[0])?;
            project(s, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &store,
        &[x],
        eps,
    )
}

/// Zero biases put many ReLU inputs near their kink on symmetric inputs.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.ends_with(".bias")).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, uniform(rng, &shape, -0.3, 0.3)).expect("same shape");
    }
}

/// Exposed for callers that want a single conv layer check with custom
/// settings.
pub fn check_conv_layer(spec: ConvSpec, input_shape: [usize; 4], seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let group = store.add_group("g");
    let conv = Conv::new(&mut store, group, "conv", spec, &mut rng);
    randomize_biases(&mut store, &mut rng);
    let x = uniform(&mut rng, &input_shape, -1.0, 1.0);
    let seed: u64 = rng.random();
    grad_check_with_params(
        |s, v| {
            let y = conv.forward(s, v[0])?;
            project(s, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &store,
        &[x],
        eps,
    )
}
