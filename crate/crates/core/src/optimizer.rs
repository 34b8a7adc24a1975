//! Projected gradient descent with backtracking line search, least-squares
//! output scaling, and seeded multi-start orchestration.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingSet;
use crate::error::{Result, SimError};
use crate::gradients::{backprop_from_pass, grad_dsim_from_strips, TaskInstance};
use crate::linalg::{matmul, CMat, C64};
use crate::load::{in_guard_band, LoadNetwork, ParamVector, DEFAULT_ETA_GUARD};
use crate::transfer::{self, ForwardPass, ProjectedStrips};

/// Smallest step size before a line search is declared stalled.
pub const ALPHA_MIN: f64 = 1e-16;
/// Least-squares scaling denominator below which `beta` is undefined.
pub const BETA_DENOMINATOR_MIN: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub stop_eps: f64,
    /// Initial trial step of the first iteration.
    pub alpha0: f64,
    /// Backtracking shrink factor `rho`.
    pub shrink: f64,
    /// Sufficient-decrease constant `c`.
    pub armijo_c: f64,
    /// Each iteration starts its line search at `growth` times the previously
    /// accepted step, capped at `alpha_max`. `growth = 0` restarts from `alpha0`.
    pub alpha_growth: f64,
    pub alpha_max: f64,
    pub starts: usize,
    pub seed: u64,
    #[serde(rename = "guard_rad")]
    pub guard: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            stop_eps: 1e-4,
            alpha0: 1.0,
            shrink: 0.5,
            armijo_c: 1e-4,
            alpha_growth: 2.0,
            alpha_max: 1e6,
            starts: 1,
            seed: 0,
            guard: DEFAULT_ETA_GUARD,
        }
    }
}

impl OptimizerConfig {
    /// Checks the invariants and returns the offending field name on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.max_iters < 1 {
            return Err(("max_iters", "must be at least 1".into()));
        }
        if !(self.stop_eps >= 0.0) {
            return Err(("stop_eps", "must be non-negative".into()));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(("alpha0", "must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(("shrink", "must lie in (0, 1)".into()));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 0.5) {
            return Err(("armijo_c", "must lie in (0, 0.5)".into()));
        }
        if !(self.alpha_growth >= 0.0) {
            return Err(("alpha_growth", "must be non-negative".into()));
        }
        if !(self.alpha_max >= self.alpha0) {
            return Err(("alpha_max", "must be at least alpha0".into()));
        }
        if self.starts < 1 {
            return Err(("starts", "must be at least 1".into()));
        }
        if !(self.guard > 0.0 && self.guard < PI / 4.0) {
            return Err(("guard", "must lie in (0, pi/4)".into()));
        }
        Ok(())
    }
}

/// One optimization trajectory. Entry 0 of every per-iteration vector is the
/// starting point (step size 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub tag: String,
    pub start: usize,
    pub epsilon: Vec<f64>,
    pub beta: Vec<C64>,
    pub alpha: Vec<f64>,
    pub initial_eta: Vec<f64>,
    pub final_eta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
}

impl RunRecord {
    pub fn final_epsilon(&self) -> f64 {
        *self.epsilon.last().expect("at least the starting point")
    }

    pub fn final_beta(&self) -> C64 {
        *self.beta.last().expect("at least the starting point")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,epsilon,beta_re,beta_im,alpha\n");
        for i in 0..self.epsilon.len() {
            let _ = writeln!(
                s,
                "{i},{:e},{:e},{:e},{:e}",
                self.epsilon[i], self.beta[i].re, self.beta[i].im, self.alpha[i]
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SimError::io(format!("writing {}", path.display()), e))
    }
}

/// `beta = tr(Theta Y^H) / tr(Y Y^H)`, the least-squares fit of `beta Y` to `Theta`.
pub fn beta_ls(y: &CMat, theta: &CMat) -> Result<C64> {
    if y.shape() != theta.shape() {
        return Err(SimError::dims(
            "least-squares scaling",
            format!("{:?}", theta.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    let den: f64 = y.iter().map(|z| z.norm_sqr()).sum();
    if !(den > BETA_DENOMINATOR_MIN) {
        return Err(SimError::DegenerateScaling { denominator: den });
    }
    let num: C64 = theta.iter().zip(y.iter()).map(|(t, y)| t * y.conj()).sum();
    Ok(num / den)
}

/// Normalized error `sum_i ||beta y_i - x_i||^2 / M^2` and the residual `beta Y - X`.
pub fn objective(y: &CMat, targets: &CMat, beta: C64) -> (f64, CMat) {
    let residual = y * beta - targets;
    let m = targets.nrows() as f64;
    let eps = residual.iter().map(|z| z.norm_sqr()).sum::<f64>() / (m * m);
    (eps, residual)
}

fn normalized_error(y: &CMat, targets: &CMat, beta: C64) -> f64 {
    let m = targets.nrows() as f64;
    y.iter()
        .zip(targets.iter())
        .map(|(y, x)| (beta * y - x).norm_sqr())
        .sum::<f64>()
        / (m * m)
}

/// A differentiable model of `Y(eta)` for descent.
pub trait Objective: Sync {
    type State;
    fn tag(&self) -> &str;
    fn counts(&self) -> &[usize];
    fn evaluate(&self, values: &[f64]) -> Result<Self::State>;
    /// Least-squares `beta` and the normalized error at that `beta`.
    fn fit(&self, state: &Self::State) -> Result<(C64, f64)>;
    /// Normalized error at a given `beta`.
    fn error_at(&self, state: &Self::State, beta: C64) -> f64;
    /// Gradient of the normalized error with `beta` frozen.
    fn gradient(&self, state: &Self::State, beta: C64) -> Result<Vec<f64>>;
}

/// The full diagonal model, evaluated through projected strips.
pub struct FullModel {
    pub coupling: CouplingSet,
    pub task: TaskInstance,
    pub z0: f64,
    pub guard: f64,
    counts: Vec<usize>,
    tag: String,
}

pub struct FullState {
    pub load: LoadNetwork,
    pub strips: ProjectedStrips,
}

impl FullModel {
    pub fn new(coupling: CouplingSet, task: TaskInstance, z0: f64, guard: f64, tag: impl Into<String>) -> Self {
        let counts = vec![coupling.k(); coupling.pairs()];
        Self {
            coupling,
            task,
            z0,
            guard,
            counts,
            tag: tag.into(),
        }
    }

    pub fn output(&self, values: &[f64]) -> Result<CMat> {
        let load = LoadNetwork::assemble(ParamVector::new(self.counts.clone(), values.to_vec(), self.guard)?, self.z0, self.guard)?;
        transfer::projected_output(&self.coupling, &load, &self.task.a, &self.task.inputs)
    }
}

impl Objective for FullModel {
    type State = FullState;

    fn tag(&self) -> &str {
        &self.tag
    }

    fn counts(&self) -> &[usize] {
        &self.counts
    }

    fn evaluate(&self, values: &[f64]) -> Result<FullState> {
        let params = ParamVector::new(self.counts.clone(), values.to_vec(), self.guard)?;
        let load = LoadNetwork::assemble(params, self.z0, self.guard)?;
        let strips = transfer::projected_strips(&self.coupling, &load, &self.task.a, &self.task.inputs)?;
        Ok(FullState { load, strips })
    }

    fn fit(&self, state: &FullState) -> Result<(C64, f64)> {
        let beta = beta_ls(&state.strips.y, &self.task.targets)?;
        Ok((beta, normalized_error(&state.strips.y, &self.task.targets, beta)))
    }

    fn error_at(&self, state: &FullState, beta: C64) -> f64 {
        normalized_error(&state.strips.y, &self.task.targets, beta)
    }

    fn gradient(&self, state: &FullState, beta: C64) -> Result<Vec<f64>> {
        let scaled = ProjectedStrips {
            a_t: state.strips.a_t.iter().map(|m| m * beta).collect(),
            u_b: state.strips.u_b.clone(),
            y: &state.strips.y * beta,
        };
        let task = self.task.clone().with_beta(beta);
        let g = grad_dsim_from_strips(&scaled, &task, &state.load)?;
        let m2 = (self.task.outputs() * self.task.outputs()) as f64;
        Ok(g.grad.into_iter().map(|x| x / m2).collect())
    }
}

/// The ideal unilateral cascade, differentiated by backpropagation.
pub struct IdealModel {
    pub w21: Vec<CMat>,
    pub task: TaskInstance,
    pub z0: f64,
    pub guard: f64,
    counts: Vec<usize>,
    tag: String,
}

pub struct IdealState {
    pub params: ParamVector,
    pub pass: ForwardPass,
    pub y: CMat,
}

impl IdealModel {
    pub fn new(w21: Vec<CMat>, task: TaskInstance, z0: f64, guard: f64, tag: impl Into<String>) -> Self {
        let k = task.a.ncols();
        let counts = vec![k; w21.len() + 1];
        Self {
            w21,
            task,
            z0,
            guard,
            counts,
            tag: tag.into(),
        }
    }
}

impl Objective for IdealModel {
    type State = IdealState;

    fn tag(&self) -> &str {
        &self.tag
    }

    fn counts(&self) -> &[usize] {
        &self.counts
    }

    fn evaluate(&self, values: &[f64]) -> Result<IdealState> {
        let params = ParamVector::new(self.counts.clone(), values.to_vec(), self.guard)?;
        let pass = transfer::forward_prop(&self.w21, &params, &self.task.inputs, self.z0)?;
        let y = matmul(&self.task.a, pass.output());
        Ok(IdealState { params, pass, y })
    }

    fn fit(&self, state: &IdealState) -> Result<(C64, f64)> {
        let beta = beta_ls(&state.y, &self.task.targets)?;
        Ok((beta, normalized_error(&state.y, &self.task.targets, beta)))
    }

    fn error_at(&self, state: &IdealState, beta: C64) -> f64 {
        normalized_error(&state.y, &self.task.targets, beta)
    }

    fn gradient(&self, state: &IdealState, beta: C64) -> Result<Vec<f64>> {
        let task = self.task.clone().with_beta(beta);
        let g = backprop_from_pass(&task, &self.w21, &state.params, self.z0, &state.pass)?;
        let m2 = (self.task.outputs() * self.task.outputs()) as f64;
        Ok(g.grad.into_iter().map(|x| x / m2).collect())
    }
}

/// Wraps into `[0, 2 pi)` and moves phases inside the guard band to its nearest edge.
pub fn project_phase(eta: f64, guard: f64) -> f64 {
    let w = eta.rem_euclid(TAU);
    if !in_guard_band(w, guard) {
        return w;
    }
    let edge = guard * (1.0 + 1e-9);
    if w < 0.5 * PI {
        edge
    } else if w < PI {
        PI - edge
    } else if w < 1.5 * PI {
        PI + edge
    } else {
        TAU - edge
    }
}

/// Uniform sample over `(g, pi - g) U (pi + g, 2 pi - g)`.
pub fn sample_initial(rng: &mut ChaCha8Rng, total: usize, guard: f64) -> Vec<f64> {
    let span = PI - 2.0 * guard;
    (0..total)
        .map(|_| loop {
            let u: f64 = rng.gen_range(0.0..2.0 * span);
            let eta = if u < span { guard + u } else { PI + guard + (u - span) };
            if !in_guard_band(eta, guard) {
                break eta;
            }
        })
        .collect()
}

/// Projected gradient descent from `init` with Armijo backtracking on the
/// `beta`-frozen error; `beta` is refit after every accepted step.
pub fn descend<O: Objective>(obj: &O, config: &OptimizerConfig, init: Vec<f64>, start: usize) -> Result<RunRecord> {
    let mut eta = init.clone();
    let mut state = obj.evaluate(&eta)?;
    let (mut beta, mut eps) = obj.fit(&state)?;
    let mut record = RunRecord {
        tag: obj.tag().to_string(),
        start,
        epsilon: vec![eps],
        beta: vec![beta],
        alpha: vec![0.0],
        initial_eta: init,
        final_eta: Vec::new(),
        iterations: 0,
        converged: eps <= config.stop_eps,
        stalled: false,
    };
    let mut alpha_prev: Option<f64> = None;
    while !record.converged && record.iterations < config.max_iters {
        let g = obj.gradient(&state, beta)?;
        if g.iter().all(|x| *x == 0.0) {
            break;
        }
        let mut alpha = match alpha_prev {
            Some(a) if config.alpha_growth > 0.0 => (a * config.alpha_growth).min(config.alpha_max),
            _ => config.alpha0,
        };
        let accepted = loop {
            if alpha < ALPHA_MIN {
                break None;
            }
            let mut trial = Vec::with_capacity(eta.len());
            let mut slope = 0.0;
            for (e, gp) in eta.iter().zip(&g) {
                let raw = e - alpha * gp;
                let projected = project_phase(raw, config.guard);
                // Step measured in unwrapped coordinates.
                let step = raw - raw.rem_euclid(TAU) + projected - e;
                slope += gp * step;
                trial.push(projected);
            }
            let trial_state = obj.evaluate(&trial)?;
            let trial_eps = obj.error_at(&trial_state, beta);
            if trial_eps <= eps + config.armijo_c * slope.min(0.0) {
                break Some((trial, trial_state));
            }
            alpha *= config.shrink;
        };
        let Some((trial, trial_state)) = accepted else {
            record.stalled = true;
            break;
        };
        eta = trial;
        state = trial_state;
        (beta, eps) = obj.fit(&state)?;
        alpha_prev = Some(alpha);
        record.iterations += 1;
        record.epsilon.push(eps);
        record.beta.push(beta);
        record.alpha.push(alpha);
        record.converged = eps <= config.stop_eps;
    }
    record.final_eta = eta;
    Ok(record)
}

/// Per-iteration statistics over runs, each padded with its final value.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    pub final_mean: f64,
    pub final_median: f64,
    pub final_p10: f64,
    pub final_p90: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn stats(values: &mut [f64]) -> (f64, f64, f64, f64) {
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (mean, percentile(values, 0.5), percentile(values, 0.1), percentile(values, 0.9))
}

pub fn summarize(runs: &[RunRecord]) -> Summary {
    assert!(!runs.is_empty(), "summary of an empty batch");
    let len = runs.iter().map(|r| r.epsilon.len()).max().unwrap_or(0);
    let mut s = Summary {
        mean: Vec::with_capacity(len),
        median: Vec::with_capacity(len),
        p10: Vec::with_capacity(len),
        p90: Vec::with_capacity(len),
        final_mean: 0.0,
        final_median: 0.0,
        final_p10: 0.0,
        final_p90: 0.0,
    };
    let mut column = vec![0.0; runs.len()];
    for it in 0..len {
        for (slot, r) in column.iter_mut().zip(runs) {
            *slot = *r.epsilon.get(it).unwrap_or(&r.final_epsilon());
        }
        let (mean, median, p10, p90) = stats(&mut column);
        s.mean.push(mean);
        s.median.push(median);
        s.p10.push(p10);
        s.p90.push(p90);
    }
    let mut finals: Vec<f64> = runs.iter().map(|r| r.final_epsilon()).collect();
    (s.final_mean, s.final_median, s.final_p10, s.final_p90) = stats(&mut finals);
    s
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,mean,p10,p90\n");
        for i in 0..self.mean.len() {
            let _ = writeln!(s, "{i},{:e},{:e},{:e}", self.mean[i], self.p10[i], self.p90[i]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SimError::io(format!("writing {}", path.display()), e))
    }
}

/// Initial phases of start `index`: stream `index` of the seeded generator.
pub fn start_point(seed: u64, index: usize, total: usize, guard: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_initial(&mut rng, total, guard)
}

/// Independent runs from seeded starting points, executed in parallel.
pub fn multi_start<O: Objective>(obj: &O, config: &OptimizerConfig) -> Result<(Vec<RunRecord>, Summary)> {
    let total: usize = obj.counts().iter().sum();
    let inits: Vec<Vec<f64>> = (0..config.starts)
        .map(|i| start_point(config.seed, i, total, config.guard))
        .collect();
    let runs = run_from(obj, config, inits)?;
    let summary = summarize(&runs);
    Ok((runs, summary))
}

/// Runs descent from each given starting point in parallel, preserving order.
pub fn run_from<O: Objective>(obj: &O, config: &OptimizerConfig, inits: Vec<Vec<f64>>) -> Result<Vec<RunRecord>> {
    inits
        .into_par_iter()
        .enumerate()
        .map(|(i, init)| {
            let r = descend(obj, config, init, i)?;
            log::info!(
                "{} start {i}: eps = {:.4e} after {} iterations{}",
                r.tag,
                r.final_epsilon(),
                r.iterations,
                if r.stalled { " (line search stalled)" } else { "" }
            );
            Ok(r)
        })
        .collect()
}
