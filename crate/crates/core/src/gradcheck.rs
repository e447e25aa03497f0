//! Finite-difference checks of every gradient path: the physics adjoint,
//! each network layer in isolation, the whole network, and the full
//! network → filter → physics pipeline.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{fd_gradient_oracle, probe_options, raw_power_gradient};
use crate::cnn::layers::{
    channelnorm_backward, channelnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, leaky_relu_backward, leaky_relu_forward, sigmoid, upsample2x_backward,
    upsample2x_forward, Tensor3,
};
use crate::cnn::{self, CnnArch};
use crate::config::{ExperimentConfig, ShapeConfig};
use crate::error::Result;
use crate::filter::FilterOperator;
use crate::mesh::GridSpec;
use crate::optimize::{Generator, Problem, RunConfig, Runner};
use crate::params::ParamSet;

/// Passes when `|analytic − fd| ≤ abs + rel·|fd|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

pub const PHYSICS_TOL: Tolerance = Tolerance {
    abs: 1e-6,
    rel: 1e-4,
};
pub const LAYER_TOL: Tolerance = Tolerance {
    abs: 1e-6,
    rel: 1e-4,
};
pub const NETWORK_TOL: Tolerance = Tolerance {
    abs: 1e-5,
    rel: 1e-3,
};

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub samples: usize,
    /// Largest `|analytic − fd| / (abs + rel·|fd|)`; at most 1 on success.
    pub worst_ratio: f64,
    pub max_abs_error: f64,
    /// Largest `|analytic − fd| / |fd|` over samples with `fd ≠ 0`.
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn from_pairs(name: impl Into<String>, pairs: &[(f64, f64)], tol: Tolerance) -> Self {
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut finite = true;
        for &(a, f) in pairs {
            let err = (a - f).abs();
            finite &= err.is_finite();
            max_abs = max_abs.max(err);
            if f != 0.0 {
                max_rel = max_rel.max(err / f.abs());
            }
            worst = worst.max(err / (tol.abs + tol.rel * f.abs()));
        }
        Self {
            name: name.into(),
            samples: pairs.len(),
            worst_ratio: worst,
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            passed: finite && !pairs.is_empty() && worst <= 1.0,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<20} samples={:<4} max_abs_err={:.2e} max_rel_err={:.2e} worst/tol={:.3}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.samples,
            self.max_abs_error,
            self.max_rel_error,
            self.worst_ratio
        )
    }
}

fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn pick(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    let mut idx = sample(rng, len, count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// The configured cell resized to an `n × n` grid. Bitmap shapes cannot be
/// resized and fall back to the full square.
pub fn resized(cfg: &ExperimentConfig, n: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.grid = GridSpec::new(n, n, cfg.grid.lx, cfg.grid.ly);
    if matches!(c.shape, ShapeConfig::Bitmap { .. }) {
        c.shape = ShapeConfig::Square;
    }
    c.arch = None;
    c
}

/// Adjoint power gradient with respect to raw densities against central
/// differences at `samples` random elements of a random design.
pub fn adjoint_check(
    cfg: &ExperimentConfig,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let c = resized(cfg, n);
    let model = c.model()?;
    let filter = FilterOperator::build(model.mesh(), c.filter_radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ne = model.mesh().num_elements();
    let raw: Vec<f64> = (0..ne).map(|_| rng.random_range(0.0..1.0)).collect();
    let opts = probe_options(&c.run.solver);
    let (_, grad) = raw_power_gradient(&model, &filter, &raw, &opts)?;
    let elements = pick(&mut rng, ne, samples);
    let fd = fd_gradient_oracle(&model, &filter, &raw, &elements, FD_STEP, &opts)?;
    let pairs: Vec<(f64, f64)> = elements
        .iter()
        .zip(&fd)
        .map(|(&e, &f)| (grad[e], f))
        .collect();
    Ok(CheckOutcome::from_pairs(
        format!("adjoint {n}x{n}"),
        &pairs,
        PHYSICS_TOL,
    ))
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(c, h, w, uniform(rng, c * h * w, -1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `grad` of `Σ probe·layer(x)` against central differences over
/// every input coordinate.
fn probe_check(
    name: &str,
    x: &[f64],
    grad: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
) -> CheckOutcome {
    let pairs: Vec<(f64, f64)> = (0..x.len())
        .map(|k| {
            let fd = central(FD_STEP, |h| {
                let mut xp = x.to_vec();
                xp[k] += h;
                loss(&xp)
            });
            (grad[k], fd)
        })
        .collect();
    CheckOutcome::from_pairs(name, &pairs, LAYER_TOL)
}

/// Isolated finite-difference checks of each layer's backward pass.
pub fn layer_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Dense 6 -> 5.
    let (w, b, x) = (
        uniform(&mut rng, 30, -1.0, 1.0),
        uniform(&mut rng, 5, -1.0, 1.0),
        uniform(&mut rng, 6, -1.0, 1.0),
    );
    let probe = uniform(&mut rng, 5, -1.0, 1.0);
    let g = dense_backward(&w, &x, &probe);
    out.push(probe_check("dense input", &x, &g.input, |v| {
        dot(&dense_forward(&w, &b, v), &probe)
    }));
    out.push(probe_check("dense weight", &w, &g.weight, |v| {
        dot(&dense_forward(v, &b, &x), &probe)
    }));
    out.push(probe_check("dense bias", &b, &probe, |v| {
        dot(&dense_forward(&w, v, &x), &probe)
    }));

    // Conv 2 -> 3 channels on 6×5.
    let x = tensor(&mut rng, 2, 6, 5);
    let k = uniform(&mut rng, 3 * 2 * 25, -0.5, 0.5);
    let b = uniform(&mut rng, 3, -0.5, 0.5);
    let probe = tensor(&mut rng, 3, 6, 5);
    let g = conv2d_backward(&x, &k, 5, &probe);
    let at = |xd: &[f64]| Tensor3::from_vec(2, 6, 5, xd.to_vec());
    out.push(probe_check("conv input", &x.data, &g.input.data, |v| {
        dot(&conv2d_forward(&at(v), &k, &b, 5).data, &probe.data)
    }));
    out.push(probe_check("conv kernel", &k, &g.kernel, |v| {
        dot(&conv2d_forward(&x, v, &b, 5).data, &probe.data)
    }));
    out.push(probe_check("conv bias", &b, &g.bias, |v| {
        dot(&conv2d_forward(&x, &k, v, 5).data, &probe.data)
    }));

    // Channel norm over 3 channels of 4×4; the loss is quadratic so the
    // gradient does not vanish through the normalization.
    let x = tensor(&mut rng, 3, 4, 4);
    let gamma = uniform(&mut rng, 3, 0.5, 1.5);
    let beta = uniform(&mut rng, 3, -0.5, 0.5);
    let probe = tensor(&mut rng, 3, 4, 4);
    let eps = 1e-5;
    let quad =
        |y: &Tensor3| -> f64 { y.data.iter().zip(&probe.data).map(|(a, p)| p * a * a).sum() };
    let (y, cache) = channelnorm_forward(&x, &gamma, &beta, eps);
    let gy = Tensor3::from_vec(
        3,
        4,
        4,
        y.data
            .iter()
            .zip(&probe.data)
            .map(|(a, p)| 2.0 * p * a)
            .collect(),
    );
    let g = channelnorm_backward(&cache, &gamma, &gy);
    let at = |xd: &[f64]| Tensor3::from_vec(3, 4, 4, xd.to_vec());
    out.push(probe_check(
        "channel norm input",
        &x.data,
        &g.input.data,
        |v| quad(&channelnorm_forward(&at(v), &gamma, &beta, eps).0),
    ));
    out.push(probe_check("channel norm gamma", &gamma, &g.gamma, |v| {
        quad(&channelnorm_forward(&x, v, &beta, eps).0)
    }));
    out.push(probe_check("channel norm beta", &beta, &g.beta, |v| {
        quad(&channelnorm_forward(&x, &gamma, v, eps).0)
    }));

    // Leaky ReLU away from the kink.
    let x: Vec<f64> = uniform(&mut rng, 24, -1.0, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v })
        .collect();
    let xt = Tensor3::from_vec(1, 4, 6, x.clone());
    let probe = tensor(&mut rng, 1, 4, 6);
    let g = leaky_relu_backward(&xt, 0.2, &probe);
    out.push(probe_check("leaky relu", &x, &g.data, |v| {
        dot(
            &leaky_relu_forward(&Tensor3::from_vec(1, 4, 6, v.to_vec()), 0.2).data,
            &probe.data,
        )
    }));

    // Bilinear ×2 on 2×3×4.
    let x = tensor(&mut rng, 2, 3, 4);
    let probe = tensor(&mut rng, 2, 6, 8);
    let g = upsample2x_backward(&probe, 3, 4);
    out.push(probe_check("upsample", &x.data, &g.data, |v| {
        dot(
            &upsample2x_forward(&Tensor3::from_vec(2, 3, 4, v.to_vec())).data,
            &probe.data,
        )
    }));

    // Sigmoid, including saturated arguments.
    let mut x = uniform(&mut rng, 16, -6.0, 6.0);
    x.extend([-30.0, 30.0]);
    let probe = uniform(&mut rng, x.len(), -1.0, 1.0);
    let g: Vec<f64> = x
        .iter()
        .zip(&probe)
        .map(|(&v, p)| {
            let s = sigmoid(v);
            p * s * (1.0 - s)
        })
        .collect();
    out.push(probe_check("sigmoid", &x, &g, |v| {
        v.iter().zip(&probe).map(|(&a, p)| p * sigmoid(a)).sum()
    }));
    out
}

fn perturbed(params: &ParamSet, flat: usize, h: f64) -> ParamSet {
    let mut p = params.clone();
    *p.iter_mut().nth(flat).expect("index in range") += h;
    p
}

/// Network parameter gradients of `Σ probe·image` against central
/// differences at `samples` random parameters.
pub fn network_check(arch: &CnnArch, samples: usize, seed: u64) -> Result<CheckOutcome> {
    let params = arch.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe = uniform(&mut rng, arch.out_w * arch.out_h, -1.0, 1.0);
    let (_, tape) = cnn::forward(arch, &params)?;
    let grads: Vec<f64> = cnn::backward(arch, &params, &tape, &probe)
        .iter()
        .copied()
        .collect();
    let mut pairs = Vec::new();
    for k in pick(&mut rng, params.len(), samples) {
        let plus = cnn::forward(arch, &perturbed(&params, k, FD_STEP))?.0;
        let minus = cnn::forward(arch, &perturbed(&params, k, -FD_STEP))?.0;
        let fd = (dot(&plus, &probe) - dot(&minus, &probe)) / (2.0 * FD_STEP);
        pairs.push((grads[k], fd));
    }
    Ok(CheckOutcome::from_pairs(
        format!("network {}x{}", arch.out_w, arch.out_h),
        &pairs,
        NETWORK_TOL,
    ))
}

/// Gradient of the training loss with respect to network parameters,
/// through filter and physics, against central differences of the loss.
pub fn pipeline_check(
    cfg: &ExperimentConfig,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let c = resized(cfg, n);
    let model = c.model()?;
    let filter = FilterOperator::build(model.mesh(), c.filter_radius)?;
    let solver = probe_options(&c.run.solver);
    let problem = Problem::new(model, filter, solver)?;
    let generator = Generator::cnn(problem.model(), CnnArch::toy(n, n))?;
    let run = RunConfig {
        seed,
        solver,
        ..RunConfig::default()
    };
    let runner = Runner::new(problem, generator, run)?;
    let params = runner.generator().initial_params(seed)?;
    let grads: Vec<f64> = runner
        .evaluate(&params)?
        .param_grad
        .iter()
        .copied()
        .collect();
    let p_ref = runner.problem().reference_power();
    let loss = |p: &ParamSet| -> Result<f64> {
        let x = runner.filtered_design(p)?;
        Ok(-runner.problem().model().solve_converged(&x, &solver)?.power / p_ref)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    let mut pairs = Vec::new();
    for k in pick(&mut rng, params.len(), samples) {
        let fd = (loss(&perturbed(&params, k, FD_STEP))? - loss(&perturbed(&params, k, -FD_STEP))?)
            / (2.0 * FD_STEP);
        pairs.push((grads[k], fd));
    }
    Ok(CheckOutcome::from_pairs(
        format!("pipeline {n}x{n}"),
        &pairs,
        NETWORK_TOL,
    ))
}

/// The full suite. `grid` replaces the default 8×8 and 16×16 physics grids.
pub fn run_all(cfg: &ExperimentConfig, grid: Option<usize>) -> Result<Vec<CheckOutcome>> {
    let grids = grid.map_or(vec![8, 16], |n| vec![n]);
    let mut out = Vec::new();
    for (k, &n) in grids.iter().enumerate() {
        out.push(adjoint_check(cfg, n, 20, 11 + k as u64)?);
    }
    out.extend(layer_checks(5));
    out.push(network_check(&CnnArch::toy(8, 8), 50, 3)?);
    out.push(pipeline_check(cfg, 16, 20, 7)?);
    Ok(out)
}
