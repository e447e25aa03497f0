//! Direct per-pixel optimization and CNN reparameterization, both driven by
//! the same loss, filter and Adam optimizer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::adjoint::power_gradient;
use crate::cnn::layers::sigmoid;
use crate::cnn::{self, CnnArch, ForwardTape};
use crate::error::{Error, Result};
use crate::filter::{DensityField, FilterOperator};
use crate::params::{ParamBlock, ParamSet};
use crate::physics::{CellModel, SolveOptions, SolveResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Direct,
    #[serde(alias = "cnn")]
    Solarnet,
}

impl Pipeline {
    pub fn default_lr(self) -> f64 {
        match self {
            Pipeline::Direct => 0.05,
            Pipeline::Solarnet => 0.001,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Direct => "direct",
            Pipeline::Solarnet => "solarnet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub max_iters: usize,
    /// `None` picks the pipeline default.
    pub lr: Option<f64>,
    pub seed: u64,
    /// Write a density snapshot every this many iterations; 0 disables.
    pub snapshot_every: usize,
    /// Ramp the conductance penalty from 1 to its configured value over
    /// the first 40% of iterations.
    pub simp_continuation: bool,
    /// Pass the CNN output through the density filter before the physics.
    pub filter_cnn_output: bool,
    pub solver: SolveOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Direct,
            max_iters: 500,
            lr: None,
            seed: 0,
            snapshot_every: 0,
            simp_continuation: false,
            filter_cnn_output: true,
            solver: SolveOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.pipeline.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub power: f64,
    pub efficiency: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub newton_iters: usize,
    pub wall_s: f64,
}

impl IterationLog {
    pub fn failed(&self) -> bool {
        self.power.is_nan()
    }
}

/// Physics, filter and loss normalization shared by every iteration.
#[derive(Debug, Clone)]
pub struct Problem {
    model: CellModel,
    filter: FilterOperator,
    solver: SolveOptions,
    p_ref: f64,
    base_simp: f64,
}

pub struct LossEval {
    pub state: SolveResult,
    pub loss: f64,
    /// `∂loss/∂x̃`.
    pub grad: Vec<f64>,
}

impl Problem {
    /// Normalizes the loss by the power of the uniform `x = 0.5` design.
    pub fn new(model: CellModel, filter: FilterOperator, solver: SolveOptions) -> Result<Self> {
        let n = model.mesh().num_elements();
        let half = filter.apply(&vec![0.5; n]);
        let p_ref = model.solve_converged(&half, &solver)?.power;
        Self::with_reference(model, filter, solver, p_ref)
    }

    pub fn with_reference(
        model: CellModel,
        filter: FilterOperator,
        solver: SolveOptions,
        p_ref: f64,
    ) -> Result<Self> {
        if filter.len() != model.mesh().num_elements() {
            return Err(Error::Shape(format!(
                "filter has {} rows, mesh has {} active elements",
                filter.len(),
                model.mesh().num_elements()
            )));
        }
        if !(p_ref.is_finite() && p_ref > 0.0) {
            return Err(Error::config(format!(
                "reference power {p_ref} W is not positive; check cell parameters"
            )));
        }
        let base_simp = model.params().simp_power;
        Ok(Self {
            model,
            filter,
            solver,
            p_ref,
            base_simp,
        })
    }

    pub fn model(&self) -> &CellModel {
        &self.model
    }

    pub fn filter(&self) -> &FilterOperator {
        &self.filter
    }

    pub fn solver(&self) -> &SolveOptions {
        &self.solver
    }

    pub fn reference_power(&self) -> f64 {
        self.p_ref
    }

    /// `loss = −P(x̃) / P_ref` and its gradient with respect to `x̃`.
    pub fn loss_eval(&self, filtered: &[f64]) -> Result<LossEval> {
        let (state, grad) = power_gradient(&self.model, filtered, &self.solver)?;
        let scale = -1.0 / self.p_ref;
        Ok(LossEval {
            loss: scale * state.power,
            grad: grad.into_iter().map(|g| scale * g).collect(),
            state,
        })
    }

    fn set_simp_power(&mut self, p: f64) {
        self.model.set_simp_power(p);
    }
}

/// Maps the optimized parameters to raw densities and pulls gradients back.
#[derive(Debug, Clone)]
pub enum Generator {
    /// One logit per active element, squashed by a sigmoid.
    Direct { elements: usize },
    /// CNN image sampled at the active elements.
    Cnn { arch: CnnArch, pixels: Vec<usize> },
}

pub enum DesignCache {
    Direct,
    Cnn(Box<ForwardTape>),
}

impl Generator {
    pub fn direct(model: &CellModel) -> Self {
        Generator::Direct {
            elements: model.mesh().num_elements(),
        }
    }

    pub fn cnn(model: &CellModel, arch: CnnArch) -> Result<Self> {
        arch.validate()?;
        let grid = model.mesh().grid();
        if (arch.out_w, arch.out_h) != (grid.nx, grid.ny) {
            return Err(Error::config(format!(
                "network output {}x{} does not match grid {}x{}",
                arch.out_w, arch.out_h, grid.nx, grid.ny
            )));
        }
        let mesh = model.mesh();
        let pixels = (0..mesh.num_elements())
            .map(|e| {
                let [i, j] = mesh.element_ij(e);
                j * grid.nx + i
            })
            .collect();
        Ok(Generator::Cnn { arch, pixels })
    }

    pub fn initial_params(&self, seed: u64) -> Result<ParamSet> {
        match self {
            Generator::Direct { elements } => Ok(ParamSet::new(vec![ParamBlock::zeros(
                "logits",
                vec![*elements],
            )])),
            Generator::Cnn { arch, .. } => arch.init_params(seed),
        }
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        self.initial_params(0)?.check_layout(params)
    }

    /// Raw densities in `[0, 1]`, one per active element.
    pub fn design(&self, params: &ParamSet) -> Result<(Vec<f64>, DesignCache)> {
        match self {
            Generator::Direct { .. } => Ok((
                params.blocks[0].data.iter().map(|&z| sigmoid(z)).collect(),
                DesignCache::Direct,
            )),
            Generator::Cnn { arch, pixels } => {
                let (image, tape) = cnn::forward(arch, params)?;
                Ok((
                    pixels.iter().map(|&p| image[p]).collect(),
                    DesignCache::Cnn(Box::new(tape)),
                ))
            }
        }
    }

    pub fn pullback(
        &self,
        params: &ParamSet,
        raw: &[f64],
        cache: &DesignCache,
        grad_raw: &[f64],
    ) -> ParamSet {
        match (self, cache) {
            (Generator::Direct { .. }, _) => {
                let mut g = params.zeros_like();
                for ((d, x), gr) in g.blocks[0].data.iter_mut().zip(raw).zip(grad_raw) {
                    *d = gr * x * (1.0 - x);
                }
                g
            }
            (Generator::Cnn { arch, pixels }, DesignCache::Cnn(tape)) => {
                let mut grad_image = vec![0.0; arch.out_w * arch.out_h];
                for (&p, &g) in pixels.iter().zip(grad_raw) {
                    grad_image[p] = g;
                }
                cnn::backward(arch, params, tape, &grad_image)
            }
            (Generator::Cnn { .. }, DesignCache::Direct) => {
                unreachable!("CNN generator always records a tape")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestIterate {
    pub iteration: usize,
    pub efficiency: f64,
    pub params: ParamSet,
    pub density: Vec<f64>,
}

/// Everything needed to continue a run bitwise-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    /// Index of the next iteration to evaluate.
    pub iteration: usize,
    pub params: ParamSet,
    pub adam: AdamState,
    /// The last successful iteration, used to redo its update with half the
    /// learning rate after a failed solve.
    pub previous: Option<PreviousStep>,
    pub best: Option<BestIterate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreviousStep {
    pub params: ParamSet,
    pub grad: ParamSet,
    /// Optimizer state before the step was taken.
    pub adam: AdamState,
}

/// Per-iteration evaluation pipeline: generator → filter → physics → loss →
/// adjoint → filter adjoint → generator pullback.
pub struct Evaluation {
    pub raw: Vec<f64>,
    pub filtered: Vec<f64>,
    pub loss: LossEval,
    pub param_grad: ParamSet,
}

pub struct Runner {
    problem: Problem,
    generator: Generator,
    cfg: RunConfig,
}

impl Runner {
    pub fn new(problem: Problem, generator: Generator, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            problem,
            generator,
            cfg,
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn filters_output(&self) -> bool {
        matches!(self.generator, Generator::Direct { .. }) || self.cfg.filter_cnn_output
    }

    pub fn initial_state(&self) -> Result<RunState> {
        let params = self.generator.initial_params(self.cfg.seed)?;
        let adam = AdamState::new(&params, self.cfg.learning_rate());
        Ok(RunState {
            iteration: 0,
            params,
            adam,
            previous: None,
            best: None,
        })
    }

    /// Filtered design produced by `params`.
    pub fn filtered_design(&self, params: &ParamSet) -> Result<Vec<f64>> {
        let (raw, _) = self.generator.design(params)?;
        Ok(self.filter_raw(&raw))
    }

    fn filter_raw(&self, raw: &[f64]) -> Vec<f64> {
        if self.filters_output() {
            self.problem
                .filter
                .apply(raw)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect()
        } else {
            raw.to_vec()
        }
    }

    pub fn evaluate(&self, params: &ParamSet) -> Result<Evaluation> {
        let (raw, cache) = self.generator.design(params)?;
        let filtered = self.filter_raw(&raw);
        let loss = self.problem.loss_eval(&filtered)?;
        let grad_raw = if self.filters_output() {
            self.problem.filter.adjoint_apply(&loss.grad)
        } else {
            loss.grad.clone()
        };
        let param_grad = self.generator.pullback(params, &raw, &cache, &grad_raw);
        Ok(Evaluation {
            raw,
            filtered,
            loss,
            param_grad,
        })
    }

    fn simp_power_at(&self, iteration: usize) -> f64 {
        let target = self.problem.base_simp;
        if !self.cfg.simp_continuation {
            return target;
        }
        let ramp = 0.4 * self.cfg.max_iters as f64;
        let t = if ramp > 0.0 {
            (iteration as f64 / ramp).min(1.0)
        } else {
            1.0
        };
        1.0 + (target - 1.0) * t
    }

    /// Evaluates the current iterate, records it, and advances the
    /// parameters. A failed solve keeps the previous iterate and retries it
    /// with half the learning rate.
    pub fn step(&mut self, state: &mut RunState) -> Result<IterationLog> {
        let started = Instant::now();
        let k = state.iteration;
        let p = self.simp_power_at(k);
        self.problem.set_simp_power(p);
        let eval = self.evaluate(&state.params);
        let log = match eval {
            Ok(ev) => {
                let power = ev.loss.state.power;
                let efficiency = ev.loss.state.efficiency;
                let improved = state
                    .best
                    .as_ref()
                    .is_none_or(|b| efficiency > b.efficiency);
                if improved {
                    state.best = Some(BestIterate {
                        iteration: k,
                        efficiency,
                        params: state.params.clone(),
                        density: ev.filtered.clone(),
                    });
                }
                let grad_norm = ev.param_grad.norm();
                let before = state.params.clone();
                let adam_before = state.adam.clone();
                state.adam.step(&mut state.params, &ev.param_grad)?;
                state.previous = Some(PreviousStep {
                    params: before,
                    grad: ev.param_grad,
                    adam: adam_before,
                });
                IterationLog {
                    iteration: k,
                    power,
                    efficiency,
                    loss: ev.loss.loss,
                    grad_norm,
                    newton_iters: ev.loss.state.newton_iters,
                    wall_s: started.elapsed().as_secs_f64(),
                }
            }
            Err(Error::NotConverged { iterations, .. })
            | Err(Error::LinearSolve { iterations, .. })
                if state.previous.is_some() =>
            {
                let prev = state.previous.as_mut().expect("checked");
                prev.adam.lr *= 0.5;
                state.params = prev.params.clone();
                state.adam = prev.adam.clone();
                state.adam.step(&mut state.params, &prev.grad)?;
                IterationLog {
                    iteration: k,
                    power: f64::NAN,
                    efficiency: f64::NAN,
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    newton_iters: iterations,
                    wall_s: started.elapsed().as_secs_f64(),
                }
            }
            Err(e) => return Err(e),
        };
        state.iteration += 1;
        Ok(log)
    }

    /// Runs until `state.iteration == max_iters`, calling `observe` after
    /// every iteration.
    pub fn run_from(
        &mut self,
        state: &mut RunState,
        mut observe: impl FnMut(&Runner, &IterationLog, &RunState) -> Result<()>,
    ) -> Result<Vec<IterationLog>> {
        let mut logs = Vec::new();
        while state.iteration < self.cfg.max_iters {
            let log = self.step(state)?;
            observe(self, &log, state)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

pub struct RunOutcome {
    pub density: DensityField,
    pub params: ParamSet,
    pub best_efficiency: f64,
    pub best_iteration: usize,
    pub logs: Vec<IterationLog>,
}

fn finish(state: RunState, logs: Vec<IterationLog>) -> Result<RunOutcome> {
    let best = state
        .best
        .ok_or_else(|| Error::config("no iteration converged"))?;
    Ok(RunOutcome {
        density: DensityField::new(best.density)?,
        params: best.params,
        best_efficiency: best.efficiency,
        best_iteration: best.iteration,
        logs,
    })
}

/// Per-pixel logits from `x = 0.5`; returns the best-efficiency design.
pub fn run_direct(problem: Problem, cfg: &RunConfig) -> Result<RunOutcome> {
    let generator = Generator::direct(problem.model());
    let cfg = RunConfig {
        pipeline: Pipeline::Direct,
        ..cfg.clone()
    };
    let mut runner = Runner::new(problem, generator, cfg)?;
    let mut state = runner.initial_state()?;
    let logs = runner.run_from(&mut state, |_, _, _| Ok(()))?;
    finish(state, logs)
}

/// CNN weights trained through the physics; returns the best-efficiency
/// design and the weights that produced it.
pub fn run_solarnet(problem: Problem, arch: CnnArch, cfg: &RunConfig) -> Result<RunOutcome> {
    let generator = Generator::cnn(problem.model(), arch)?;
    let cfg = RunConfig {
        pipeline: Pipeline::Solarnet,
        ..cfg.clone()
    };
    let mut runner = Runner::new(problem, generator, cfg)?;
    let mut state = runner.initial_state()?;
    let logs = runner.run_from(&mut state, |_, _, _| Ok(()))?;
    finish(state, logs)
}
