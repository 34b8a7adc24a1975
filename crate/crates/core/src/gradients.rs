//! Gradients of `sum_i ||beta A T b_i - x_i||^2` with respect to the phases:
//! the general dense pipeline, the layered strip pipeline, the rank-two
//! diagonal pipeline, ideal-cascade backpropagation, and a central
//! finite-difference oracle.
//!
//! Every pipeline reports `d_p = -sum_i x_i^H A' T G_p T b_i` and
//! `f_p = -2 Re sum_i h_i^H A' T G_p T b_i` with `A' = beta A` and
//! `h_i = A' T b_i`, and the gradient `f_p - 2 Re d_p`.

use std::io::Write as _;
use std::path::Path;

use crate::coupling::CouplingSet;
use crate::error::{Result, SimError};
use crate::linalg::{matmul, CMat, C64, J};
use crate::load::{LoadNetwork, ParamVector};
use crate::transfer::{self, ForwardPass};

/// Output map, inputs, targets and output scaling of a linear-transform task.
///
/// `a` is `M x K` and acts on the last layer, `inputs` is `K x I` and feeds
/// the first layer, `targets` is `M x I`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub a: CMat,
    pub inputs: CMat,
    pub targets: CMat,
    pub beta: C64,
}

impl TaskInstance {
    pub fn new(a: CMat, inputs: CMat, targets: CMat) -> Result<Self> {
        if inputs.ncols() == 0 {
            return Err(SimError::InvalidValue("a task needs at least one input".into()));
        }
        if targets.nrows() != a.nrows() || targets.ncols() != inputs.ncols() {
            return Err(SimError::dims(
                "task targets",
                format!("{}x{}", a.nrows(), inputs.ncols()),
                format!("{}x{}", targets.nrows(), targets.ncols()),
            ));
        }
        if a.ncols() != inputs.nrows() {
            return Err(SimError::dims("task A columns vs input length", inputs.nrows(), a.ncols()));
        }
        Ok(Self {
            a,
            inputs,
            targets,
            beta: C64::new(1.0, 0.0),
        })
    }

    pub fn with_beta(mut self, beta: C64) -> Self {
        self.beta = beta;
        self
    }

    /// Number of outputs `M`.
    pub fn outputs(&self) -> usize {
        self.a.nrows()
    }

    /// Number of inputs `I`.
    pub fn count(&self) -> usize {
        self.inputs.ncols()
    }

    /// `beta A`.
    pub fn a_eff(&self) -> CMat {
        &self.a * self.beta
    }
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    /// `f_p - 2 Re d_p`, length `P`, layer-major.
    pub grad: Vec<f64>,
    pub d: Vec<C64>,
    pub f: Vec<f64>,
    /// `h_i` as columns, `M x I`.
    pub outputs: CMat,
}

impl GradientResult {
    fn from_terms(d: Vec<C64>, f: Vec<f64>, outputs: CMat) -> Self {
        let grad = d.iter().zip(&f).map(|(d, f)| f - 2.0 * d.re).collect();
        Self { grad, d, f, outputs }
    }

    /// `sum_i ||h_i - x_i||^2`.
    pub fn objective(&self, targets: &CMat) -> f64 {
        sum_squared_error(&self.outputs, targets)
    }

    /// Writes one row per parameter: `q,p,eta,d_re,d_im,f,grad`.
    pub fn write_csv(&self, path: &Path, params: &ParamVector) -> Result<()> {
        let mut out = String::from("q,p,eta,d_re,d_im,f,grad\n");
        for (flat, g) in self.grad.iter().enumerate() {
            let (q, p) = params.split_index(flat);
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e}\n",
                q + 1,
                p + 1,
                params.values()[flat],
                self.d[flat].re,
                self.d[flat].im,
                self.f[flat],
                g
            ));
        }
        let mut file =
            std::fs::File::create(path).map_err(|e| SimError::io(format!("creating {}", path.display()), e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| SimError::io(format!("writing {}", path.display()), e))
    }
}

/// `||h - x||_F^2`.
pub fn sum_squared_error(outputs: &CMat, targets: &CMat) -> f64 {
    outputs.iter().zip(targets.iter()).map(|(h, x)| (h - x).norm_sqr()).sum()
}

/// `(-sum conj(x) . v, -2 Re sum conj(h) . v)` for the matrix `v = A' T G T B`.
fn terms(v: &CMat, targets: &CMat, outputs: &CMat) -> (C64, f64) {
    let mut dx = C64::new(0.0, 0.0);
    let mut dh = C64::new(0.0, 0.0);
    for ((v, x), h) in v.iter().zip(targets.iter()).zip(outputs.iter()) {
        dx += x.conj() * v;
        dh += h.conj() * v;
    }
    (-dx, -2.0 * dh.re)
}

/// General ECO gradient: dense `T = (z_ee + z_e)^-1`, an `M x N` output map,
/// `N x I` inputs, and one `N x N` load tangent per parameter.
pub fn grad_eco_general(
    a_full: &CMat,
    b_full: &CMat,
    targets: &CMat,
    system: &CMat,
    tangents: &[CMat],
) -> Result<GradientResult> {
    let n = system.nrows();
    let t = system
        .clone()
        .lu()
        .solve(&CMat::identity(n, n))
        .ok_or(SimError::SingularSystem { residual: f64::INFINITY })?;
    let at = matmul(a_full, &t);
    let tb = matmul(&t, b_full);
    let outputs = matmul(a_full, &tb);
    let mut d = Vec::with_capacity(tangents.len());
    let mut f = Vec::with_capacity(tangents.len());
    for g in tangents {
        let v = matmul(&matmul(&at, g), &tb);
        let (dp, fp) = terms(&v, targets, &outputs);
        d.push(dp);
        f.push(fp);
    }
    Ok(GradientResult::from_terms(d, f, outputs))
}

/// Dense gradient of a SIM task (the task embedded in the full port space).
pub fn grad_eco(task: &TaskInstance, coupling: &CouplingSet, load: &LoadNetwork) -> Result<GradientResult> {
    let system = transfer::system_matrix(coupling, load)?;
    let k = coupling.k();
    let n = system.nrows();
    check_task(task, k)?;
    let mut a_full = CMat::zeros(task.outputs(), n);
    a_full.view_mut((0, n - k), (task.outputs(), k)).copy_from(&task.a_eff());
    let mut b_full = CMat::zeros(n, task.count());
    b_full.view_mut((0, 0), (k, task.count())).copy_from(&task.inputs);
    let tangents = (0..load.params().total())
        .map(|p| load.tangent_full(p))
        .collect::<Result<Vec<_>>>()?;
    grad_eco_general(&a_full, &b_full, &task.targets, &system, &tangents)
}

fn check_task(task: &TaskInstance, k: usize) -> Result<()> {
    if task.a.ncols() != k {
        return Err(SimError::dims("task output map columns (K)", k, task.a.ncols()));
    }
    Ok(())
}

/// Layered gradient from the iterative strips `R_q`, `S_q` and the
/// `2K x 2K` tangent blocks.
pub fn grad_sim(task: &TaskInstance, coupling: &CouplingSet, load: &LoadNetwork) -> Result<GradientResult> {
    check_task(task, coupling.k())?;
    let state = transfer::iterative_strips(coupling, load)?;
    let a = task.a_eff();
    let outputs = matmul(&a, &matmul(state.transfer(), &task.inputs));
    let params = load.params();
    let mut d = Vec::with_capacity(params.total());
    let mut f = Vec::with_capacity(params.total());
    for q in 0..load.pairs() {
        let ar = matmul(&a, &state.r_q(q));
        let sb = matmul(&state.s_q(q), &task.inputs);
        for p in 0..params.counts()[q] {
            let g = load.tangent_block(q, p)?;
            let v = matmul(&matmul(&ar, &g), &sb);
            let (dp, fp) = terms(&v, &task.targets, &outputs);
            d.push(dp);
            f.push(fp);
        }
    }
    Ok(GradientResult::from_terms(d, f, outputs))
}

/// `F_{q,p} = R_q G_{q,p} S_q` built as the sum of two outer products
/// (diagonal load only).
pub fn f_matrix(state: &transfer::TransferState, load: &LoadNetwork, q: usize, p: usize) -> Result<CMat> {
    let dp = load.tangent_cell(q, p)?.ok_or(SimError::NotDiagonalMode)?;
    let k = load.k();
    let mut f = CMat::zeros(k, k);
    for n in 0..2 {
        let col = state.t[2 * q + n].column(p);
        for m in 0..2 {
            let row = state.u[2 * q + m].row(p);
            f.ger(dp.get(n, m), &col, &row.transpose(), C64::new(1.0, 0.0));
        }
    }
    Ok(f)
}

/// Rank-two diagonal gradient from projected strips `A' t_r` and `u_r B`.
pub fn grad_dsim(task: &TaskInstance, coupling: &CouplingSet, load: &LoadNetwork) -> Result<GradientResult> {
    if !load.is_diagonal() {
        return Err(SimError::NotDiagonalMode);
    }
    check_task(task, coupling.k())?;
    let strips = transfer::projected_strips(coupling, load, &task.a_eff(), &task.inputs)?;
    grad_dsim_from_strips(&strips, task, load)
}

/// Diagonal gradient given precomputed projected strips for `A' = beta A`.
pub fn grad_dsim_from_strips(
    strips: &transfer::ProjectedStrips,
    task: &TaskInstance,
    load: &LoadNetwork,
) -> Result<GradientResult> {
    let params = load.params();
    let outputs = strips.y.clone();
    let xh = task.targets.adjoint();
    let hh = outputs.adjoint();
    let mut d = Vec::with_capacity(params.total());
    let mut f = Vec::with_capacity(params.total());
    for q in 0..load.pairs() {
        // (I x K) projections of the strip columns onto targets and outputs.
        let xa = [matmul(&xh, &strips.a_t[2 * q]), matmul(&xh, &strips.a_t[2 * q + 1])];
        let ha = [matmul(&hh, &strips.a_t[2 * q]), matmul(&hh, &strips.a_t[2 * q + 1])];
        let ub = [&strips.u_b[2 * q], &strips.u_b[2 * q + 1]];
        let cells = load.cells(q).ok_or(SimError::NotDiagonalMode)?;
        for p in 0..cells.len() {
            let dp = crate::load::two_port_z_tangent_raw(params.layer(q)[p], load.z0());
            let mut sx = C64::new(0.0, 0.0);
            let mut sh = C64::new(0.0, 0.0);
            for n in 0..2 {
                for m in 0..2 {
                    let coef = dp.get(n, m);
                    let mut px = C64::new(0.0, 0.0);
                    let mut ph = C64::new(0.0, 0.0);
                    for i in 0..task.count() {
                        let c = ub[m][(p, i)];
                        px += xa[n][(i, p)] * c;
                        ph += ha[n][(i, p)] * c;
                    }
                    sx += coef * px;
                    sh += coef * ph;
                }
            }
            d.push(-sx);
            f.push(-2.0 * sh.re);
        }
    }
    Ok(GradientResult::from_terms(d, f, outputs))
}

/// Backpropagation through the ideal cascade.
///
/// With `c = -1/(2 z0)`, layer outputs `o_q = c Y_q v_q` and adjoints
/// `lambda_Q = A'^H (A' o_Q - x)`, `lambda_{q-1} = (c Y_q (-W21))^H lambda_q`,
/// the partial derivative is `2 Re(conj(lambda_{q,p}) c j Y_{q,p} v_{q,p})`.
/// The adjoints of the target and output parts are carried separately to
/// report `d` and `f`.
pub fn grad_backprop(task: &TaskInstance, w21: &[CMat], params: &ParamVector, z0: f64) -> Result<GradientResult> {
    let fp = transfer::forward_prop(w21, params, &task.inputs, z0)?;
    check_task(task, fp.output().nrows())?;
    backprop_from_pass(task, w21, params, z0, &fp)
}

pub fn backprop_from_pass(
    task: &TaskInstance,
    w21: &[CMat],
    params: &ParamVector,
    z0: f64,
    fp: &ForwardPass,
) -> Result<GradientResult> {
    let a = task.a_eff();
    let outputs = matmul(&a, fp.output());
    let ah = a.adjoint();
    let count = task.count();
    let k = a.ncols();
    let mut lambda = CMat::zeros(k, 2 * count);
    lambda.view_mut((0, 0), (k, count)).copy_from(&matmul(&ah, &task.targets));
    lambda.view_mut((0, count), (k, count)).copy_from(&matmul(&ah, &outputs));
    let c = C64::new(-0.5 / z0, 0.0);
    let pairs = params.layers();
    let total = params.total();
    let mut d = vec![C64::new(0.0, 0.0); total];
    let mut f = vec![0.0; total];
    for q in (0..pairs).rev() {
        let etas = params.layer(q);
        let y: Vec<C64> = etas.iter().map(|&e| C64::from_polar(1.0, e)).collect();
        let base = params.flat_index(q, 0)?;
        for p in 0..etas.len() {
            let scale = c * J * y[p];
            let mut sx = C64::new(0.0, 0.0);
            let mut sh = C64::new(0.0, 0.0);
            for i in 0..count {
                let dv = scale * fp.v[q][(p, i)];
                sx += lambda[(p, i)].conj() * dv;
                sh += lambda[(p, count + i)].conj() * dv;
            }
            // dH = -A' T G T B, so d = x^H dH and f = 2 Re h^H dH.
            d[base + p] = sx;
            f[base + p] = 2.0 * sh.re;
        }
        if q > 0 {
            // lambda <- -conj(c) W21^H conj(Y_q) lambda
            for (p, yp) in y.iter().enumerate() {
                let s = -(c * yp).conj();
                for j in 0..2 * count {
                    lambda[(p, j)] *= s;
                }
            }
            lambda = matmul(&w21[q - 1].adjoint(), &lambda);
        }
    }
    Ok(GradientResult::from_terms(d, f, outputs))
}

/// Central differences `(f(x + h e_p) - f(x - h e_p)) / 2h`.
pub fn fd_oracle<F: Fn(&[f64]) -> f64>(objective: F, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = x.to_vec();
    (0..x.len())
        .map(|p| {
            work[p] = x[p] + step;
            let up = objective(&work);
            work[p] = x[p] - step;
            let down = objective(&work);
            work[p] = x[p];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order central differences
/// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h`.
pub fn fd_oracle4<F: Fn(&[f64]) -> f64>(objective: F, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = x.to_vec();
    let at = |p: usize, offset: f64, work: &mut Vec<f64>| {
        work[p] = x[p] + offset;
        let v = objective(work);
        work[p] = x[p];
        v
    };
    (0..x.len())
        .map(|p| {
            let f2 = at(p, 2.0 * step, &mut work);
            let f1 = at(p, step, &mut work);
            let b1 = at(p, -step, &mut work);
            let b2 = at(p, -2.0 * step, &mut work);
            (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * step)
        })
        .collect()
}

/// `sum_i ||beta A T b_i - x_i||^2` on the full model at phases `values`.
pub fn sim_objective(task: &TaskInstance, coupling: &CouplingSet, load: &LoadNetwork, values: &[f64]) -> Result<f64> {
    let params = ParamVector::unchecked(load.params().counts().to_vec(), values.to_vec())?;
    let load = if load.is_diagonal() {
        LoadNetwork::assemble(params, load.z0(), 0.0)?
    } else {
        load.with_params(params)?
    };
    let y = transfer::projected_output(coupling, &load, &task.a_eff(), &task.inputs)?;
    Ok(sum_squared_error(&y, &task.targets))
}

/// The same objective on the ideal cascade.
pub fn ideal_objective(task: &TaskInstance, w21: &[CMat], counts: &[usize], values: &[f64], z0: f64) -> Result<f64> {
    let params = ParamVector::unchecked(counts.to_vec(), values.to_vec())?;
    let t = transfer::ideal_cascade(w21, &params, z0)?;
    let y = matmul(&task.a_eff(), &matmul(&t, &task.inputs));
    Ok(sum_squared_error(&y, &task.targets))
}
